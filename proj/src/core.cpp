#include "metaictal/core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace metaictal {

namespace {
constexpr double kTimeTol = 1e-6;
}

const char* to_string(Errc code) {
  switch (code) {
    case Errc::non_positive_window: return "NonPositiveWindow";
    case Errc::out_of_range: return "OutOfRange";
    case Errc::invalid_config: return "InvalidConfig";
    case Errc::unknown_episode: return "UnknownEpisode";
    case Errc::insufficient_data: return "InsufficientData";
    case Errc::io_error: return "IoError";
    case Errc::format_error: return "FormatError";
    case Errc::shape_mismatch: return "ShapeMismatch";
    case Errc::non_finite: return "NonFinite";
    case Errc::mode_unsupported: return "ModeUnsupported";
    case Errc::empty_set: return "EmptySet";
    case Errc::grid_mismatch: return "GridMismatch";
    case Errc::empty_trace: return "EmptyTrace";
    case Errc::missing_checkpoint: return "MissingCheckpoint";
  }
  return "Unknown";
}

std::size_t to_samples(double t_s, double fs) {
  const double exact = t_s * fs;
  const double rounded = std::round(exact);
  if (std::abs(exact - rounded) > kTimeTol || rounded < 0) {
    throw Error(Errc::out_of_range,
                "time " + std::to_string(t_s) + " s is not on the sample grid");
  }
  return static_cast<std::size_t>(rounded);
}

void Episode::validate() const {
  if (sample_rate_hz <= 0) throw Error(Errc::invalid_config, "sample rate must be positive");
  if (duration_s <= 0) throw Error(Errc::invalid_config, "duration must be positive");
  if (channels.rows() < 1) throw Error(Errc::invalid_config, "episode needs at least one channel");
  const auto expected = static_cast<Eigen::Index>(std::llround(duration_s * sample_rate_hz));
  if (channels.cols() != expected) {
    throw Error(Errc::invalid_config, "episode " + id + ": sample count " +
                                          std::to_string(channels.cols()) + " != " +
                                          std::to_string(expected));
  }
  for (std::size_t i = 0; i < onset_times_s.size(); ++i) {
    const double t = onset_times_s[i];
    if (!(t > 0 && t < duration_s)) {
      throw Error(Errc::invalid_config, "episode " + id + ": onset outside (0, duration)");
    }
    if (i > 0 && !(t > onset_times_s[i - 1])) {
      throw Error(Errc::invalid_config, "episode " + id + ": onsets not strictly increasing");
    }
  }
}

std::size_t TensorSpec::size() const {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

ParamVector::ParamVector(std::vector<TensorSpec> layout) : layout_(std::move(layout)) {
  std::size_t n = 0;
  for (const auto& t : layout_) n += t.size();
  values_.assign(n, 0.0);
}

ParamVector::ParamVector(std::vector<TensorSpec> layout, std::vector<double> values)
    : layout_(std::move(layout)), values_(std::move(values)) {
  std::size_t n = 0;
  for (const auto& t : layout_) n += t.size();
  if (n != values_.size()) {
    throw Error(Errc::shape_mismatch, "layout holds " + std::to_string(n) +
                                          " elements, got " + std::to_string(values_.size()));
  }
}

ParamVector ParamVector::from_tensors(const std::vector<NamedTensor>& tensors) {
  std::vector<TensorSpec> layout;
  std::vector<double> values;
  for (const auto& t : tensors) {
    TensorSpec spec{t.name, t.shape};
    if (spec.size() != t.values.size()) {
      throw Error(Errc::shape_mismatch, "tensor " + t.name + " has inconsistent shape");
    }
    layout.push_back(std::move(spec));
    values.insert(values.end(), t.values.begin(), t.values.end());
  }
  return ParamVector(std::move(layout), std::move(values));
}

std::vector<NamedTensor> ParamVector::to_tensors() const {
  std::vector<NamedTensor> out;
  std::size_t off = 0;
  for (const auto& t : layout_) {
    const auto n = t.size();
    out.push_back({t.name, t.shape,
                   std::vector<double>(values_.begin() + static_cast<std::ptrdiff_t>(off),
                                       values_.begin() + static_cast<std::ptrdiff_t>(off + n))});
    off += n;
  }
  return out;
}

std::size_t ParamVector::offset(const std::string& name) const {
  std::size_t off = 0;
  for (const auto& t : layout_) {
    if (t.name == name) return off;
    off += t.size();
  }
  throw Error(Errc::shape_mismatch, "no tensor named " + name);
}

std::span<double> ParamVector::tensor(const std::string& name) {
  const auto off = offset(name);
  const auto it = std::find_if(layout_.begin(), layout_.end(),
                               [&](const TensorSpec& t) { return t.name == name; });
  return std::span<double>(values_).subspan(off, it->size());
}

std::span<const double> ParamVector::tensor(const std::string& name) const {
  const auto off = offset(name);
  const auto it = std::find_if(layout_.begin(), layout_.end(),
                               [&](const TensorSpec& t) { return t.name == name; });
  return std::span<const double>(values_).subspan(off, it->size());
}

void ParamVector::check_layout(const ParamVector& rhs) const {
  if (!same_layout(rhs)) throw Error(Errc::shape_mismatch, "parameter layouts differ");
}

ParamVector& ParamVector::operator+=(const ParamVector& rhs) {
  check_layout(rhs);
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += rhs.values_[i];
  return *this;
}

ParamVector& ParamVector::operator-=(const ParamVector& rhs) {
  check_layout(rhs);
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= rhs.values_[i];
  return *this;
}

ParamVector& ParamVector::operator*=(double s) {
  for (auto& v : values_) v *= s;
  return *this;
}

void ParamVector::axpy(double a, const ParamVector& x) {
  check_layout(x);
  if (a == 0.0) return;
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += a * x.values_[i];
}

double ParamVector::dot(const ParamVector& rhs) const {
  check_layout(rhs);
  double s = 0.0;
  for (std::size_t i = 0; i < values_.size(); ++i) s += values_[i] * rhs.values_[i];
  return s;
}

double ParamVector::norm() const { return std::sqrt(dot(*this)); }

bool ParamVector::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

void ParamVector::set_zero() { std::fill(values_.begin(), values_.end(), 0.0); }

ParamVector operator+(ParamVector a, const ParamVector& b) { return a += b; }
ParamVector operator-(ParamVector a, const ParamVector& b) { return a -= b; }
ParamVector operator*(double s, ParamVector a) { return a *= s; }

std::size_t window_sample_count(double duration_s, double h_s, double m_s, double stride_s) {
  if (!(stride_s > 0)) throw Error(Errc::non_positive_window, "stride must be positive");
  const double span = duration_s - h_s - m_s;
  if (span < -kTimeTol) {
    throw Error(Errc::non_positive_window, "episode shorter than one window");
  }
  return static_cast<std::size_t>(std::floor(std::max(0.0, span) / stride_s + kTimeTol)) + 1;
}

WindowPair slice_window(const Episode& ep, double t_start_s, double h_s, double m_s) {
  if (t_start_s < 0 || t_start_s + h_s + m_s > ep.duration_s + kTimeTol) {
    throw Error(Errc::out_of_range, "window at " + std::to_string(t_start_s) +
                                        " s exceeds episode " + ep.id);
  }
  const double fs = ep.sample_rate_hz;
  const auto start = to_samples(t_start_s, fs);
  const auto nx = to_samples(h_s, fs);
  const auto ny = to_samples(m_s, fs);
  if (start + nx + ny > ep.n_samples()) {
    throw Error(Errc::out_of_range, "window exceeds recorded samples of " + ep.id);
  }
  WindowPair w;
  const auto rows = ep.channels.rows();
  w.x = ep.channels.block(0, static_cast<Eigen::Index>(start), rows, static_cast<Eigen::Index>(nx));
  w.y = ep.channels.block(0, static_cast<Eigen::Index>(start + nx), rows,
                          static_cast<Eigen::Index>(ny));
  w.t_start_s = t_start_s;
  w.h_s = h_s;
  w.m_s = m_s;
  w.episode_id = ep.id;
  return w;
}

}  // namespace metaictal
