#include "metaictal/synthgen.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

namespace metaictal::synth {

namespace {
constexpr double kThetaFloor = 0.05;
}

void SynthConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(Errc::invalid_config, msg); };
  if (n_channels < 1) fail("n_channels must be >= 1");
  if (!(sample_rate_hz > 0)) fail("sample_rate_hz must be positive");
  if (!(ramp_s > 0 && ramp_s < onset_s && onset_s < duration_s)) {
    fail("need 0 < ramp_s < onset_s < duration_s");
  }
  if (!(rest_theta > 0)) fail("rest_theta must be positive");
  if (!(noise_sigma > 0)) fail("noise_sigma must be positive");
  if (!(ictal_amp >= 0)) fail("ictal_amp must be non-negative");
  if (!(ictal_freq_hz >= 0)) fail("ictal_freq_hz must be non-negative");
}

double theta_at(const SynthConfig& cfg, double t_s) {
  const double ramp_start = cfg.onset_s - cfg.ramp_s;
  if (t_s < ramp_start) return cfg.rest_theta;
  const double theta_min = kThetaFloor * cfg.rest_theta;
  const double frac = std::min(1.0, (t_s - ramp_start) / cfg.ramp_s);
  return cfg.rest_theta + frac * (theta_min - cfg.rest_theta);
}

Episode generate_episode(const SynthConfig& cfg, const std::string& id) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> gain(0.5, 1.5);

  const auto n_ch = static_cast<Eigen::Index>(cfg.n_channels);
  const auto n = static_cast<Eigen::Index>(std::llround(cfg.duration_s * cfg.sample_rate_hz));
  const double dt = 1.0 / cfg.sample_rate_hz;
  const double rest_std = cfg.noise_sigma / std::sqrt(2.0 * cfg.rest_theta);
  const double channel_std = 0.25 * rest_std;

  Vector mix(n_ch);
  for (Eigen::Index c = 0; c < n_ch; ++c) mix(c) = gain(rng);

  Episode ep;
  ep.id = id;
  ep.sample_rate_hz = cfg.sample_rate_hz;
  ep.duration_s = cfg.duration_s;
  ep.onset_times_s = {cfg.onset_s};
  ep.channels.resize(n_ch, n);

  double z = 0.0;
  for (Eigen::Index s = 0; s < n; ++s) {
    const double t = static_cast<double>(s) * dt;
    double latent = 0.0;
    if (t < cfg.onset_s) {
      latent = z;
      // Euler-Maruyama step towards zero.
      z += -theta_at(cfg, t) * z * dt + cfg.noise_sigma * std::sqrt(dt) * normal(rng);
    } else {
      latent = cfg.ictal_amp * std::sin(2.0 * std::numbers::pi * cfg.ictal_freq_hz * t) +
               rest_std * normal(rng);
    }
    for (Eigen::Index c = 0; c < n_ch; ++c) {
      ep.channels(c, s) = mix(c) * latent + channel_std * normal(rng);
    }
  }
  return ep;
}

std::vector<Episode> generate_cohort(const SynthConfig& cfg, int n_episodes,
                                     std::uint64_t seed_base) {
  if (n_episodes < 2) throw Error(Errc::invalid_config, "a cohort needs at least 2 episodes");
  std::vector<Episode> out;
  out.reserve(static_cast<std::size_t>(n_episodes));
  for (int i = 0; i < n_episodes; ++i) {
    SynthConfig c = cfg;
    c.seed = seed_base + static_cast<std::uint64_t>(i);
    char id[32];
    std::snprintf(id, sizeof(id), "synth-%03d", i);
    out.push_back(generate_episode(c, id));
  }
  return out;
}

}  // namespace metaictal::synth
