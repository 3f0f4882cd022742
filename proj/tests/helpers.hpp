#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "metaictal/core.hpp"
#include "metaictal/nets.hpp"

namespace testutil {

using metaictal::Episode;
using metaictal::Matrix;
using metaictal::ParamVector;

inline Episode make_episode(std::string id, int channels, double fs, double duration,
                            std::vector<double> onsets, double value = 0.0) {
  Episode ep;
  ep.id = std::move(id);
  ep.sample_rate_hz = fs;
  ep.duration_s = duration;
  ep.onset_times_s = std::move(onsets);
  ep.channels = Matrix::Constant(channels, std::lround(duration * fs), value);
  return ep;
}

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline void randomize(ParamVector& p, std::mt19937_64& rng, double scale = 0.5) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& v : p.values()) v = u(rng);
}

/// Central differences of a scalar function of the parameters.
inline ParamVector finite_difference(const std::function<double(const ParamVector&)>& f,
                                     const ParamVector& at, double step = 1e-5) {
  ParamVector g(at.layout());
  ParamVector probe = at;
  for (std::size_t i = 0; i < at.size(); ++i) {
    probe[i] = at[i] + step;
    const double up = f(probe);
    probe[i] = at[i] - step;
    const double down = f(probe);
    probe[i] = at[i];
    g[i] = (up - down) / (2 * step);
  }
  return g;
}

/// Largest violation of |a - b| <= atol + rtol |b|, as a ratio (<= 1 passes).
inline double tolerance_ratio(const ParamVector& a, const ParamVector& b, double rtol, double atol) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]) / (atol + rtol * std::abs(b[i])));
  }
  return worst;
}

/// Fresh directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("metaictal_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// logit = w . mean over columns of x + b, with one weight per row.
class AffineMean final : public metaictal::nets::Model {
 public:
  AffineMean(int rows, int cols, bool bias) : rows_(rows), cols_(cols), bias_(bias) {}

  std::vector<metaictal::TensorSpec> layout() const override {
    std::vector<metaictal::TensorSpec> l{{"w", {static_cast<std::size_t>(rows_)}}};
    if (bias_) l.push_back({"b", {1}});
    return l;
  }
  ParamVector init(std::uint64_t) const override { return ParamVector(layout()); }
  double forward(const ParamVector& p, const Matrix& x,
                 std::unique_ptr<metaictal::nets::Tape>* tape) const override {
    check_input(x);
    auto t = std::make_unique<MeanTape>();
    t->mean = x.rowwise().mean();
    double z = 0.0;
    for (int r = 0; r < rows_; ++r) z += p[r] * t->mean(r);
    if (bias_) z += p[rows_];
    if (tape) *tape = std::move(t);
    return z;
  }
  void backward(const ParamVector&, const metaictal::nets::Tape& tape, double d,
                ParamVector& g) const override {
    const auto& t = dynamic_cast<const MeanTape&>(tape);
    for (int r = 0; r < rows_; ++r) g[r] += d * t.mean(r);
    if (bias_) g[rows_] += d;
  }
  Eigen::Index input_rows() const override { return rows_; }
  Eigen::Index input_cols() const override { return cols_; }
  nlohmann::json describe() const override { return {{"type", "affine_mean"}}; }

 private:
  struct MeanTape final : metaictal::nets::Tape {
    metaictal::Vector mean;
  };
  int rows_;
  int cols_;
  bool bias_;
};

}  // namespace testutil
