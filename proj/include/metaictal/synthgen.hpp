#pragma once

#include <cstdint>
#include <vector>

#include "metaictal/core.hpp"

namespace metaictal::synth {

/// Parameters of the rest -> slowing -> ictal generator.
///
/// The latent process is Ornstein-Uhlenbeck with mean-reversion rate
/// `rest_theta` until `onset_s - ramp_s`, after which the rate decays
/// linearly to 5% of `rest_theta` at the onset. From the onset on, the latent
/// is a sinusoid of amplitude `ictal_amp` plus white noise. Every channel is a
/// fixed random gain in [0.5, 1.5] times the latent plus independent noise at
/// a quarter of the rest-state latent standard deviation.
struct SynthConfig {
  int n_channels = 4;
  double sample_rate_hz = 32.0;
  double duration_s = 240.0;
  double onset_s = 150.0;
  double ramp_s = 60.0;
  double rest_theta = 16.0;
  double noise_sigma = 1.0;
  double ictal_amp = 1.0;
  double ictal_freq_hz = 3.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Mean-reversion rate of the latent at time t.
double theta_at(const SynthConfig& cfg, double t_s);

Episode generate_episode(const SynthConfig& cfg, const std::string& id = "synth");

/// Episodes "synth-000", "synth-001", ... with seeds seed_base + i.
std::vector<Episode> generate_cohort(const SynthConfig& cfg, int n_episodes,
                                     std::uint64_t seed_base);

}  // namespace metaictal::synth
