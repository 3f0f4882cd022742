#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "metaictal/core.hpp"
#include "metaictal/nets.hpp"

namespace metaictal::trainer {

using nets::MainNetwork;
using nets::MetaNetwork;

enum class MetaGradMode { unrolled, first_order };

std::string to_string(MetaGradMode mode);
MetaGradMode meta_grad_mode_from_string(const std::string& s);

/// Update rule applied to the meta-gradient.
enum class MetaOptimizer { sgd, adam };

std::string to_string(MetaOptimizer opt);
MetaOptimizer meta_optimizer_from_string(const std::string& s);

/// inner_lr is the step size of the main-network update on meta-labelled
/// noisy data; meta_lr is the step size of the meta-network update.
struct TrainConfig {
  double inner_lr = 0.05;
  double meta_lr = 0.05;
  int inner_steps = 1;
  int episodes = 300;  // outer iterations
  int batch_size = 16;
  MetaGradMode meta_grad_mode = MetaGradMode::unrolled;
  MetaOptimizer meta_optimizer = MetaOptimizer::sgd;
  /// Draw clean batches with equal counts per label.
  bool stratify_clean = true;
  /// Weight of a supervised clean-batch term added to every main-network
  /// step. Zero trains the main network on meta labels only.
  double clean_weight = 0.0;
  std::uint64_t seed = 0;
  double h_s = 20.0;
  double m_s = 5.0;

  void validate() const;
};

struct HistoryRow {
  int iteration = 0;
  double loss_noisy = 0.0;  // NaN for baselines
  double loss_clean = 0.0;
  double mean_yc = 0.0;     // NaN for baselines
};

using History = std::vector<HistoryRow>;

void write_history(const History& history, const std::filesystem::path& file);
History read_history(const std::filesystem::path& file);

/// Non-owning view of a mini-batch.
struct Batch {
  std::vector<const Matrix*> x;
  std::vector<const Matrix*> y;
  std::vector<double> labels;

  std::size_t size() const { return x.size(); }
};

Batch make_batch(const std::vector<LabeledWindow>& windows, std::span<const std::size_t> idx);

/// Draws `n` indices in [0, size) with replacement.
std::vector<std::size_t> draw_indices(std::mt19937_64& rng, std::size_t size, std::size_t n);

/// Clean-batch indices: plain draws, or n/2 (rounded up) label-0 and the rest
/// label-1 windows when `stratify` is set and both labels are present.
std::vector<std::size_t> draw_clean_indices(std::mt19937_64& rng,
                                            const std::vector<LabeledWindow>& clean, std::size_t n,
                                            bool stratify);

struct BaselineResult {
  MainNetwork net;
  History history;
  bool diverged = false;
  std::string diagnostic;
};

/// Plain mini-batch gradient descent on clean windows. Runs
/// episodes * inner_steps updates so its budget matches train_meta.
BaselineResult train_baseline(MainNetwork net, const std::vector<LabeledWindow>& clean,
                              const TrainConfig& cfg);

/// Optional supervised term of a main-network step. It does not depend on the
/// meta params.
struct CleanTerm {
  const Batch* batch = nullptr;
  double weight = 0.0;
};

/// One descent step of the main network towards the meta network's soft
/// labels on a noisy batch, plus `clean_term` when given.
MainNetwork inner_update(const MainNetwork& main, const MetaNetwork& meta, const Batch& noisy,
                         double inner_lr, const CleanTerm& clean_term = {});

/// Everything produced by one differentiated inner step.
struct MetaStep {
  ParamVector meta_grad;
  ParamVector updated_main;  // main params after the inner step
  double loss_noisy = 0.0;   // noisy loss before the step
  double loss_clean = 0.0;   // clean loss after the step
  double mean_yc = 0.0;
};

/// Gradient of the post-step clean loss with respect to the meta params.
///
/// With w' = w - inner_lr * grad_w L_noisy(meta, w), the unrolled gradient is
/// exact: d L_clean(w') / d meta. The first-order variant evaluates the clean
/// gradient at w instead of w', dropping the clean-loss curvature term.
MetaStep meta_step(const MainNetwork& main, const MetaNetwork& meta, const Batch& noisy,
                   const Batch& clean, double inner_lr, MetaGradMode mode,
                   const CleanTerm& clean_term = {});

ParamVector meta_gradient(const MainNetwork& main, const MetaNetwork& meta, const Batch& noisy,
                          const Batch& clean, double inner_lr, MetaGradMode mode,
                          const CleanTerm& clean_term = {});

/// Resumable state of the bi-level loop.
struct MetaState {
  MainNetwork main;
  MetaNetwork meta;
  std::mt19937_64 rng;
  int iteration = 0;
  History history;
  // Lowest clean loss seen so far and the parameters that produced it.
  double best_clean_loss = 0.0;
  ParamVector best_main;
  ParamVector best_meta;
  // Adam moments of the meta update; empty until the first Adam step.
  ParamVector adam_m;
  ParamVector adam_v;
  int adam_t = 0;

  void save(const std::filesystem::path& dir) const;
  static MetaState load(const std::filesystem::path& dir);
};

struct MetaResult {
  MainNetwork main;
  MetaNetwork meta;
  History history;
  bool diverged = false;
  std::string diagnostic;
};

MetaState start_meta(MainNetwork main, MetaNetwork meta, const TrainConfig& cfg);

/// Advances `state` until it has completed `until_iteration` outer
/// iterations. Returns false and fills `diagnostic` when a loss diverges.
bool advance_meta(MetaState& state, const SplitDataset& split, const TrainConfig& cfg,
                  int until_iteration, std::string* diagnostic = nullptr);

MetaResult train_meta(MainNetwork main, MetaNetwork meta, const SplitDataset& split,
                      const TrainConfig& cfg);

/// Fraction of windows where (f(x) >= threshold) equals the label.
double evaluate_accuracy(const MainNetwork& net, const std::vector<LabeledWindow>& windows,
                         double threshold = 0.5);

double accuracy_from_predictions(std::span<const double> probs, std::span<const int> labels,
                                 double threshold = 0.5);

/// Noisy windows of a dataset with labels filled from onset ground truth.
std::vector<LabeledWindow> labeled_noisy(const SplitDataset& ds);

}  // namespace metaictal::trainer
