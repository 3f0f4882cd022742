#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace metaictal {

/// Channel-major signal block: one row per channel, one column per sample.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Errc {
  non_positive_window,
  out_of_range,
  invalid_config,
  unknown_episode,
  insufficient_data,
  io_error,
  format_error,
  shape_mismatch,
  non_finite,
  mode_unsupported,
  empty_set,
  grid_mismatch,
  empty_trace,
  missing_checkpoint,
};

const char* to_string(Errc code);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

/// Converts a time in seconds to a sample index. Throws out_of_range when
/// the time does not fall on a sample boundary.
std::size_t to_samples(double t_s, double fs);

struct Episode {
  std::string id;
  Matrix channels;  // [n_channels x n_samples]
  double sample_rate_hz = 0.0;
  std::vector<double> onset_times_s;
  double duration_s = 0.0;

  std::size_t n_channels() const { return static_cast<std::size_t>(channels.rows()); }
  std::size_t n_samples() const { return static_cast<std::size_t>(channels.cols()); }

  /// Throws invalid_config if any structural invariant is violated.
  void validate() const;
};

struct WindowPair {
  Matrix x;  // history [t_start, t_start + h)
  Matrix y;  // horizon [t_start + h, t_start + h + m)
  double t_start_s = 0.0;
  double h_s = 0.0;
  double m_s = 0.0;
  std::string episode_id;

  double horizon_end_s() const { return t_start_s + h_s + m_s; }
};

enum class Purity { clean, noisy };

struct LabeledWindow {
  WindowPair pair;
  int label = 0;  // meaningful only for clean windows
  Purity purity = Purity::clean;
};

struct ChannelStats {
  double mean = 0.0;
  double std = 1.0;
};

/// Window geometry shared by every window of a dataset.
struct WindowGrid {
  double h_s = 20.0;
  double m_s = 5.0;
  double stride_s = 0.5;
  double noisy_halfwidth_s = 10.0;
  int clean_per_side = 40;
};

struct SplitDataset {
  std::vector<LabeledWindow> clean;
  std::vector<LabeledWindow> noisy;
  std::vector<ChannelStats> normalization_stats;
  WindowGrid grid;
  double sample_rate_hz = 0.0;
  std::size_t n_channels = 0;
  std::vector<std::string> episode_ids;
  /// Expert onset times per episode, kept for evaluation of noisy windows.
  std::map<std::string, std::vector<double>> onsets;
};

/// Name and shape of one tensor inside a ParamVector.
struct TensorSpec {
  std::string name;
  std::vector<std::size_t> shape;

  std::size_t size() const;
  bool operator==(const TensorSpec&) const = default;
};

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> values;
};

/// Flat, ordered parameter storage with a named layout.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::vector<TensorSpec> layout);
  ParamVector(std::vector<TensorSpec> layout, std::vector<double> values);

  static ParamVector from_tensors(const std::vector<NamedTensor>& tensors);
  std::vector<NamedTensor> to_tensors() const;

  std::size_t size() const { return values_.size(); }
  const std::vector<TensorSpec>& layout() const { return layout_; }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  /// Offset of a named tensor in the flat storage.
  std::size_t offset(const std::string& name) const;
  std::span<double> tensor(const std::string& name);
  std::span<const double> tensor(const std::string& name) const;

  bool same_layout(const ParamVector& other) const { return layout_ == other.layout_; }

  ParamVector& operator+=(const ParamVector& rhs);
  ParamVector& operator-=(const ParamVector& rhs);
  ParamVector& operator*=(double s);
  /// this += a * x. A zero coefficient leaves the storage untouched.
  void axpy(double a, const ParamVector& x);
  double dot(const ParamVector& rhs) const;
  double norm() const;
  bool all_finite() const;
  void set_zero();

  bool operator==(const ParamVector&) const = default;

 private:
  void check_layout(const ParamVector& rhs) const;

  std::vector<TensorSpec> layout_;
  std::vector<double> values_;
};

ParamVector operator+(ParamVector a, const ParamVector& b);
ParamVector operator-(ParamVector a, const ParamVector& b);
ParamVector operator*(double s, ParamVector a);

/// Number of stride-spaced windows of total length h + m in an episode.
std::size_t window_sample_count(double duration_s, double h_s, double m_s, double stride_s);

WindowPair slice_window(const Episode& ep, double t_start_s, double h_s, double m_s);

}  // namespace metaictal
