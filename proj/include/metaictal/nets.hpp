#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "metaictal/core.hpp"

namespace metaictal::nets {

/// Forward-pass intermediates kept for the backward pass.
struct Tape {
  virtual ~Tape() = default;
};

/// A scalar-logit network evaluated as a pure function of (params, input).
class Model {
 public:
  virtual ~Model() = default;

  virtual std::vector<TensorSpec> layout() const = 0;
  virtual ParamVector init(std::uint64_t seed) const = 0;

  /// Returns the pre-sigmoid output. When `tape` is non-null it receives the
  /// intermediates needed by backward().
  virtual double forward(const ParamVector& params, const Matrix& input,
                         std::unique_ptr<Tape>* tape) const = 0;

  /// Accumulates dlogit * d(logit)/d(params) into `grad`.
  virtual void backward(const ParamVector& params, const Tape& tape, double dlogit,
                        ParamVector& grad) const = 0;

  virtual Eigen::Index input_rows() const = 0;
  virtual Eigen::Index input_cols() const = 0;
  virtual nlohmann::json describe() const = 0;

 protected:
  void check_input(const Matrix& input) const;
};

struct ResNetHyper {
  int in_channels = 23;
  int input_len = 640;
  std::vector<int> widths{32, 64, 64};
  std::vector<int> strides{1, 1, 1};
  int kernel = 7;
};

/// Residual 1-D CNN: blocks of conv -> layer norm -> relu -> conv -> layer
/// norm, added to a (projected) shortcut, then global average pooling and an
/// affine head.
class ResNet1d final : public Model {
 public:
  explicit ResNet1d(ResNetHyper hyper);

  std::vector<TensorSpec> layout() const override;
  ParamVector init(std::uint64_t seed) const override;
  double forward(const ParamVector& params, const Matrix& input,
                 std::unique_ptr<Tape>* tape) const override;
  void backward(const ParamVector& params, const Tape& tape, double dlogit,
                ParamVector& grad) const override;
  Eigen::Index input_rows() const override { return hyper_.in_channels; }
  Eigen::Index input_cols() const override { return hyper_.input_len; }
  nlohmann::json describe() const override;

  const ResNetHyper& hyper() const { return hyper_; }

 private:
  struct Block {
    int in_ch;
    int out_ch;
    int stride;
    bool project;
    std::size_t w1, b1, g1, be1, w2, b2, g2, be2, wp, bp;  // offsets
  };

  ResNetHyper hyper_;
  std::vector<Block> blocks_;
  std::size_t head_w_ = 0;
  std::size_t head_b_ = 0;
  std::size_t n_params_ = 0;
};

struct LstmHyper {
  int in_features = 23;
  int seq_len = 640;
  int hidden = 64;
  /// Consecutive samples stacked into one recurrent step.
  int frame = 1;
};

/// Single-layer LSTM whose final hidden state feeds an affine head.
class LstmNet final : public Model {
 public:
  explicit LstmNet(LstmHyper hyper);

  std::vector<TensorSpec> layout() const override;
  ParamVector init(std::uint64_t seed) const override;
  double forward(const ParamVector& params, const Matrix& input,
                 std::unique_ptr<Tape>* tape) const override;
  void backward(const ParamVector& params, const Tape& tape, double dlogit,
                ParamVector& grad) const override;
  Eigen::Index input_rows() const override { return hyper_.in_features; }
  Eigen::Index input_cols() const override { return hyper_.seq_len; }
  nlohmann::json describe() const override;

  const LstmHyper& hyper() const { return hyper_; }

 private:
  LstmHyper hyper_;
};

std::shared_ptr<const Model> make_model(const nlohmann::json& description);

double sigmoid(double z);

inline constexpr double kProbEps = 1e-7;

enum class MainArch { resnet1d, lstm };

std::string to_string(MainArch arch);
MainArch main_arch_from_string(const std::string& s);

/// The classifier f: history window -> probability that the horizon is ictal.
struct MainNetwork {
  MainArch arch = MainArch::resnet1d;
  std::shared_ptr<const Model> model;
  ParamVector params;

  double logit(const Matrix& x) const;
  double forward(const Matrix& x) const;
  std::vector<double> forward_batch(std::span<const Matrix* const> xs) const;
};

MainNetwork make_resnet_main(const ResNetHyper& hyper, std::uint64_t seed);
MainNetwork make_lstm_main(const LstmHyper& hyper, std::uint64_t seed);

/// The labeler g: (history, horizon) -> soft label. The recurrent encoder runs
/// over the time-concatenated pair with a segment flag row appended (0 over
/// the history, 1 over the horizon).
struct MetaNetwork {
  std::shared_ptr<const Model> model;
  ParamVector params;
  Eigen::Index x_cols = 0;
  Eigen::Index y_cols = 0;

  Matrix join(const Matrix& x, const Matrix& y) const;
  double logit(const Matrix& x, const Matrix& y) const;
  double forward(const Matrix& x, const Matrix& y) const;
};

MetaNetwork make_meta(int n_channels, Eigen::Index x_cols, Eigen::Index y_cols, int hidden,
                      int frame, std::uint64_t seed);

/// Mean binary cross entropy with probabilities clamped to [eps, 1 - eps].
double bce_loss(std::span<const double> pred, std::span<const double> target);

/// d(bce)/d(logit) for one sample of a batch of size n; zero when clamped.
double bce_logit_grad(double prob, double target, std::size_t n);

/// Objectives return their value and, when `grad` is non-null, write the
/// gradient (same layout as params) into it.
template <class F>
concept Objective = requires(const F& f, const ParamVector& p, ParamVector* g) {
  { f(p, g) } -> std::convertible_to<double>;
};

/// Gradient of an objective. Throws non_finite on NaN or Inf.
template <Objective F>
ParamVector grad(const F& objective, const ParamVector& params) {
  ParamVector g(params.layout());
  const double v = objective(params, &g);
  if (!std::isfinite(v) || !g.all_finite()) {
    throw Error(Errc::non_finite, "objective or gradient is not finite");
  }
  return g;
}

/// Mean BCE of a main network over a batch, as an objective of its params.
struct MainBatchLoss {
  const MainNetwork* net;
  std::vector<const Matrix*> xs;
  std::vector<double> targets;

  double operator()(const ParamVector& params, ParamVector* grad) const;
};

/// Mean BCE of fixed predictions against meta-network targets, as an
/// objective of the meta params. Used for checks of the meta backward pass.
struct MetaTargetLoss {
  const MetaNetwork* net;
  std::vector<const Matrix*> xs;
  std::vector<const Matrix*> ys;
  std::vector<double> preds;

  double operator()(const ParamVector& params, ParamVector* grad) const;
};

// Checkpoints: `params.bin` (magic, header length, JSON layout header,
// float64 little-endian payload) plus `arch.json`.
void save_params(const ParamVector& params, const std::filesystem::path& file);
ParamVector load_params(const std::filesystem::path& file);

void save_main(const MainNetwork& net, const std::filesystem::path& dir);
MainNetwork load_main(const std::filesystem::path& dir);
void save_meta(const MetaNetwork& net, const std::filesystem::path& dir);
MetaNetwork load_meta(const std::filesystem::path& dir);

}  // namespace metaictal::nets
