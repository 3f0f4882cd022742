#include <doctest.h>

#include "metaictal/synthgen.hpp"

using namespace metaictal;
using synth::SynthConfig;

namespace {

double segment_variance(const Episode& ep, double from_s, double to_s) {
  const auto a = static_cast<Eigen::Index>(from_s * ep.sample_rate_hz);
  const auto b = static_cast<Eigen::Index>(to_s * ep.sample_rate_hz);
  const Matrix seg = ep.channels.middleCols(a, b - a);
  double acc = 0.0;
  for (Eigen::Index c = 0; c < seg.rows(); ++c) {
    const double mean = seg.row(c).mean();
    acc += (seg.row(c).array() - mean).square().sum() / static_cast<double>(seg.cols() - 1);
  }
  return acc / static_cast<double>(seg.rows());
}

double mean_rolling_variance(const Episode& ep, double from_s, double to_s, double window_s) {
  double acc = 0.0;
  int n = 0;
  for (double t = from_s + window_s; t <= to_s + 1e-9; t += window_s) {
    acc += segment_variance(ep, t - window_s, t);
    ++n;
  }
  return acc / n;
}

}  // namespace

TEST_SUITE("synthgen") {

TEST_CASE("same seed gives bitwise-identical episodes") {
  SynthConfig cfg;
  cfg.seed = 7;
  const auto a = synth::generate_episode(cfg);
  const auto b = synth::generate_episode(cfg);
  CHECK(a.channels == b.channels);
  CHECK_NOTHROW(a.validate());
  CHECK(a.onset_times_s == std::vector<double>{cfg.onset_s});
  CHECK(a.channels.allFinite());
}

TEST_CASE("vanishing noise and zero ictal amplitude give all-zero channels") {
  SynthConfig cfg;
  cfg.noise_sigma = 1e-300;
  cfg.ictal_amp = 0.0;
  const auto ep = synth::generate_episode(cfg);
  CHECK(ep.channels.cwiseAbs().maxCoeff() < 1e-250);
}

TEST_CASE("pre-onset variance exceeds rest variance in at least 19 of 20 seeds") {
  SynthConfig cfg;
  int holds = 0;
  double rolling_rest = 0.0;
  double rolling_ramp = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    cfg.seed = seed;
    const auto ep = synth::generate_episode(cfg);
    const double ramp_start = cfg.onset_s - cfg.ramp_s;
    const double rest = segment_variance(ep, ramp_start - cfg.ramp_s, ramp_start);
    const double pre = segment_variance(ep, ramp_start, cfg.onset_s);
    if (rest < pre) ++holds;
    rolling_rest += mean_rolling_variance(ep, ramp_start - cfg.ramp_s, ramp_start, 0.5);
    rolling_ramp += mean_rolling_variance(ep, ramp_start, cfg.onset_s, 0.5);
  }
  CHECK(holds >= 19);
  CHECK(rolling_ramp > rolling_rest);
}

TEST_CASE("theta decays linearly to five percent of the rest rate") {
  SynthConfig cfg;
  CHECK(synth::theta_at(cfg, 0) == cfg.rest_theta);
  CHECK(synth::theta_at(cfg, cfg.onset_s - cfg.ramp_s) == cfg.rest_theta);
  CHECK(synth::theta_at(cfg, cfg.onset_s) == doctest::Approx(0.05 * cfg.rest_theta));
  CHECK(synth::theta_at(cfg, cfg.onset_s - cfg.ramp_s / 2) ==
        doctest::Approx(0.525 * cfg.rest_theta));
}

TEST_CASE("invalid configs are rejected") {
  SynthConfig cfg;
  cfg.ramp_s = cfg.onset_s;
  CHECK_THROWS_AS(synth::generate_episode(cfg), Error);
  cfg = SynthConfig{};
  cfg.noise_sigma = 0;
  CHECK_THROWS_AS(synth::generate_episode(cfg), Error);
  cfg = SynthConfig{};
  cfg.onset_s = cfg.duration_s;
  CHECK_THROWS_AS(synth::generate_episode(cfg), Error);
}

TEST_CASE("cohorts are distinct, deterministic and need two episodes") {
  SynthConfig cfg;
  cfg.duration_s = 60;
  cfg.onset_s = 40;
  cfg.ramp_s = 20;
  const auto a = synth::generate_cohort(cfg, 5, 100);
  const auto b = synth::generate_cohort(cfg, 5, 100);
  REQUIRE(a.size() == 5);
  CHECK(a.front().id == "synth-000");
  CHECK(a.back().id == "synth-004");
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].channels == b[i].channels);
    for (std::size_t j = i + 1; j < a.size(); ++j) CHECK(a[i].channels != a[j].channels);
  }
  try {
    synth::generate_cohort(cfg, 1, 0);
    FAIL("expected InvalidConfig");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::invalid_config);
  }
}

TEST_CASE("outputs are finite across a grid of valid configs") {
  for (double theta : {0.5, 4.0, 16.0, 64.0}) {
    for (double amp : {0.0, 1.0, 5.0}) {
      SynthConfig cfg;
      cfg.duration_s = 40;
      cfg.onset_s = 30;
      cfg.ramp_s = 10;
      cfg.rest_theta = theta;
      cfg.ictal_amp = amp;
      CHECK(synth::generate_episode(cfg).channels.allFinite());
    }
  }
}

}  // TEST_SUITE
