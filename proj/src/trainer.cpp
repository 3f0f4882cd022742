#include "metaictal/trainer.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "metaictal/episode_io.hpp"
#include "metaictal/pipeline.hpp"

namespace metaictal::trainer {

namespace fs = std::filesystem;
using nets::sigmoid;
using nets::Tape;

namespace {

constexpr double kDivergenceLoss = 1e3;
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

bool diverging(double loss) { return !std::isfinite(loss) || loss > kDivergenceLoss; }

}  // namespace

std::string to_string(MetaGradMode mode) {
  return mode == MetaGradMode::unrolled ? "unrolled" : "first_order";
}

MetaGradMode meta_grad_mode_from_string(const std::string& s) {
  if (s == "unrolled") return MetaGradMode::unrolled;
  if (s == "first_order") return MetaGradMode::first_order;
  throw Error(Errc::mode_unsupported, "unknown meta-gradient mode '" + s + "'");
}

std::string to_string(MetaOptimizer opt) { return opt == MetaOptimizer::sgd ? "sgd" : "adam"; }

MetaOptimizer meta_optimizer_from_string(const std::string& s) {
  if (s == "sgd") return MetaOptimizer::sgd;
  if (s == "adam") return MetaOptimizer::adam;
  throw Error(Errc::invalid_config, "unknown meta optimizer '" + s + "'");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(Errc::invalid_config, msg); };
  if (!(inner_lr >= 0) || !(meta_lr >= 0)) fail("learning rates must be non-negative");
  if (inner_steps < 1) fail("inner_steps must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (episodes < 0) fail("episodes must be >= 0");
  if (!(clean_weight >= 0)) fail("clean_weight must be non-negative");
}

void write_history(const History& history, const fs::path& file) {
  std::ofstream out(file);
  if (!out) throw Error(Errc::io_error, "cannot write " + file.string());
  auto cell = [](double v) { return std::isnan(v) ? std::string() : format_double(v); };
  out << "iteration,loss_noisy,loss_clean,mean_yc\n";
  for (const auto& r : history) {
    out << r.iteration << ',' << cell(r.loss_noisy) << ',' << cell(r.loss_clean) << ','
        << cell(r.mean_yc) << '\n';
  }
}

History read_history(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw Error(Errc::io_error, "cannot read " + file.string());
  History out;
  std::string line;
  std::getline(in, line);
  auto cell = [](const std::string& s) { return s.empty() ? kNaN : parse_double(s); };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) f.push_back(field);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 4) throw Error(Errc::format_error, "bad history row: " + line);
    out.push_back({std::stoi(f[0]), cell(f[1]), cell(f[2]), cell(f[3])});
  }
  return out;
}

Batch make_batch(const std::vector<LabeledWindow>& windows, std::span<const std::size_t> idx) {
  Batch b;
  for (auto i : idx) {
    const auto& w = windows.at(i);
    b.x.push_back(&w.pair.x);
    b.y.push_back(&w.pair.y);
    b.labels.push_back(static_cast<double>(w.label));
  }
  return b;
}

std::vector<std::size_t> draw_indices(std::mt19937_64& rng, std::size_t size, std::size_t n) {
  if (size == 0) throw Error(Errc::empty_set, "cannot draw from an empty set");
  std::vector<std::size_t> idx(n);
  for (auto& i : idx) i = static_cast<std::size_t>(rng() % size);
  return idx;
}

std::vector<std::size_t> draw_clean_indices(std::mt19937_64& rng,
                                            const std::vector<LabeledWindow>& clean, std::size_t n,
                                            bool stratify) {
  if (!stratify) return draw_indices(rng, clean.size(), n);
  std::vector<std::size_t> by_label[2];
  for (std::size_t i = 0; i < clean.size(); ++i) by_label[clean[i].label != 0].push_back(i);
  if (by_label[0].empty() || by_label[1].empty()) return draw_indices(rng, clean.size(), n);
  std::vector<std::size_t> idx;
  idx.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const auto& pool = by_label[k < (n + 1) / 2 ? 0 : 1];
    idx.push_back(pool[static_cast<std::size_t>(rng() % pool.size())]);
  }
  return idx;
}

BaselineResult train_baseline(MainNetwork net, const std::vector<LabeledWindow>& clean,
                              const TrainConfig& cfg) {
  cfg.validate();
  if (clean.empty()) throw Error(Errc::empty_set, "baseline training needs clean windows");
  BaselineResult res;
  std::mt19937_64 rng(cfg.seed);
  const int total = cfg.episodes * cfg.inner_steps;
  ParamVector best = net.params;
  double best_loss = std::numeric_limits<double>::infinity();
  for (int it = 0; it < total; ++it) {
    const auto idx = draw_clean_indices(rng, clean, static_cast<std::size_t>(cfg.batch_size),
                                        cfg.stratify_clean);
    const Batch b = make_batch(clean, idx);
    nets::MainBatchLoss loss{&net, b.x, b.labels};
    ParamVector g(net.params.layout());
    const double value = loss(net.params, &g);
    if (diverging(value) || !g.all_finite()) {
      res.diverged = true;
      res.diagnostic = "baseline loss diverged at iteration " + std::to_string(it) +
                       " (loss " + format_double(value) + ")";
      net.params = best;
      break;
    }
    if (value < best_loss) {
      best_loss = value;
      best = net.params;
    }
    net.params.axpy(-cfg.inner_lr, g);
    res.history.push_back({it, kNaN, value, kNaN});
  }
  res.net = std::move(net);
  return res;
}

namespace {

struct NoisyPass {
  std::vector<double> targets;  // meta soft labels
  std::vector<std::unique_ptr<Tape>> meta_tapes;
  std::vector<double> probs;
  std::vector<ParamVector> logit_grads;  // d(main logit)/d(w) per sample, empty when clamped
  ParamVector loss_grad;                 // d(noisy loss)/d(w)
  double loss = 0.0;
};

NoisyPass noisy_pass(const MainNetwork& main, const MetaNetwork& meta, const Batch& noisy,
                     bool keep_meta_tapes) {
  const auto n = noisy.size();
  if (n == 0) throw Error(Errc::empty_set, "empty noisy batch");
  NoisyPass np;
  np.targets.resize(n);
  np.probs.resize(n);
  np.meta_tapes.resize(n);
  np.logit_grads.resize(n);
  np.loss_grad = ParamVector(main.params.layout());
  for (std::size_t i = 0; i < n; ++i) {
    const Matrix joined = meta.join(*noisy.x[i], *noisy.y[i]);
    np.targets[i] = sigmoid(meta.model->forward(meta.params, joined,
                                                keep_meta_tapes ? &np.meta_tapes[i] : nullptr));
    std::unique_ptr<Tape> tape;
    np.probs[i] = sigmoid(main.model->forward(main.params, *noisy.x[i], &tape));
    const double d = nets::bce_logit_grad(np.probs[i], np.targets[i], n);
    if (np.probs[i] >= nets::kProbEps && np.probs[i] <= 1.0 - nets::kProbEps) {
      ParamVector g(main.params.layout());
      main.model->backward(main.params, *tape, 1.0, g);
      np.loss_grad.axpy(d, g);
      if (keep_meta_tapes) np.logit_grads[i] = std::move(g);
    }
  }
  np.loss = nets::bce_loss(np.probs, np.targets);
  return np;
}

void require_finite(const ParamVector& p, const char* what) {
  if (!p.all_finite()) throw Error(Errc::non_finite, std::string(what) + " is not finite");
}

void add_clean_term(const MainNetwork& main, const CleanTerm& term, ParamVector& grad) {
  if (!term.batch || term.weight == 0.0) return;
  nets::MainBatchLoss loss{&main, term.batch->x, term.batch->labels};
  ParamVector g(main.params.layout());
  loss(main.params, &g);
  grad.axpy(term.weight, g);
}

}  // namespace

MainNetwork inner_update(const MainNetwork& main, const MetaNetwork& meta, const Batch& noisy,
                         double inner_lr, const CleanTerm& clean_term) {
  auto np = noisy_pass(main, meta, noisy, false);
  add_clean_term(main, clean_term, np.loss_grad);
  require_finite(np.loss_grad, "inner gradient");
  MainNetwork out = main;
  out.params.axpy(-inner_lr, np.loss_grad);
  return out;
}

MetaStep meta_step(const MainNetwork& main, const MetaNetwork& meta, const Batch& noisy,
                   const Batch& clean, double inner_lr, MetaGradMode mode,
                   const CleanTerm& clean_term) {
  if (mode != MetaGradMode::unrolled && mode != MetaGradMode::first_order) {
    throw Error(Errc::mode_unsupported, "unsupported meta-gradient mode");
  }
  if (clean.size() == 0) throw Error(Errc::empty_set, "empty clean batch");
  auto np = noisy_pass(main, meta, noisy, true);
  ParamVector inner_grad = np.loss_grad;
  add_clean_term(main, clean_term, inner_grad);
  require_finite(inner_grad, "inner gradient");

  MetaStep step;
  step.loss_noisy = np.loss;
  step.updated_main = main.params;
  step.updated_main.axpy(-inner_lr, inner_grad);

  // Clean-loss gradient at the point where the outer objective is linearised.
  nets::MainBatchLoss clean_loss{&main, clean.x, clean.labels};
  ParamVector v(main.params.layout());
  if (mode == MetaGradMode::unrolled) {
    step.loss_clean = clean_loss(step.updated_main, &v);
  } else {
    clean_loss(main.params, &v);
    step.loss_clean = clean_loss(step.updated_main, nullptr);
  }
  require_finite(v, "clean gradient");

  // w' depends on each soft label t_i through +inner_lr / n * d(logit_i)/dw,
  // so dL/dt_i = inner_lr / n * <v, d(logit_i)/dw>.
  const auto n = noisy.size();
  step.meta_grad = ParamVector(meta.params.layout());
  double sum_yc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sum_yc += np.targets[i];
    if (np.logit_grads[i].size() == 0) continue;
    const double dl_dt = inner_lr / static_cast<double>(n) * v.dot(np.logit_grads[i]);
    const double t = np.targets[i];
    const double upstream = dl_dt * t * (1.0 - t);
    if (upstream != 0.0) meta.model->backward(meta.params, *np.meta_tapes[i], upstream, step.meta_grad);
  }
  require_finite(step.meta_grad, "meta gradient");
  step.mean_yc = sum_yc / static_cast<double>(n);
  return step;
}

ParamVector meta_gradient(const MainNetwork& main, const MetaNetwork& meta, const Batch& noisy,
                          const Batch& clean, double inner_lr, MetaGradMode mode,
                          const CleanTerm& clean_term) {
  return meta_step(main, meta, noisy, clean, inner_lr, mode, clean_term).meta_grad;
}

// ---------------------------------------------------------------------------
// Bi-level loop

namespace {

void apply_meta_update(MetaState& s, const ParamVector& grad, const TrainConfig& cfg) {
  if (cfg.meta_optimizer == MetaOptimizer::sgd) {
    s.meta.params.axpy(-cfg.meta_lr, grad);
    return;
  }
  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kEps = 1e-8;
  if (s.adam_m.size() == 0) {
    s.adam_m = ParamVector(grad.layout());
    s.adam_v = ParamVector(grad.layout());
  }
  ++s.adam_t;
  const double c1 = 1.0 - std::pow(kBeta1, s.adam_t);
  const double c2 = 1.0 - std::pow(kBeta2, s.adam_t);
  for (std::size_t i = 0; i < grad.size(); ++i) {
    s.adam_m[i] = kBeta1 * s.adam_m[i] + (1.0 - kBeta1) * grad[i];
    s.adam_v[i] = kBeta2 * s.adam_v[i] + (1.0 - kBeta2) * grad[i] * grad[i];
    s.meta.params[i] -= cfg.meta_lr * (s.adam_m[i] / c1) / (std::sqrt(s.adam_v[i] / c2) + kEps);
  }
}

}  // namespace

MetaState start_meta(MainNetwork main, MetaNetwork meta, const TrainConfig& cfg) {
  cfg.validate();
  MetaState s;
  s.rng.seed(cfg.seed);
  s.best_main = main.params;
  s.best_meta = meta.params;
  s.best_clean_loss = std::numeric_limits<double>::infinity();
  s.main = std::move(main);
  s.meta = std::move(meta);
  return s;
}

bool advance_meta(MetaState& s, const SplitDataset& split, const TrainConfig& cfg,
                  int until_iteration, std::string* diagnostic) {
  cfg.validate();
  if (split.clean.empty() || split.noisy.empty()) {
    throw Error(Errc::empty_set, "bi-level training needs clean and noisy windows");
  }
  const auto n = static_cast<std::size_t>(cfg.batch_size);
  // Supervised batch for the main step, drawn apart from the outer clean batch.
  auto clean_term = [&](Batch& storage) {
    if (cfg.clean_weight == 0.0) return CleanTerm{};
    storage = make_batch(split.clean, draw_clean_indices(s.rng, split.clean, n, cfg.stratify_clean));
    return CleanTerm{&storage, cfg.clean_weight};
  };
  while (s.iteration < until_iteration) {
    for (int k = 0; k + 1 < cfg.inner_steps; ++k) {
      const auto idx = draw_indices(s.rng, split.noisy.size(), n);
      Batch main_clean;
      const auto term = clean_term(main_clean);
      s.main = inner_update(s.main, s.meta, make_batch(split.noisy, idx), cfg.inner_lr, term);
    }
    const auto noisy_idx = draw_indices(s.rng, split.noisy.size(), n);
    const auto clean_idx = draw_clean_indices(s.rng, split.clean, n, cfg.stratify_clean);
    Batch main_clean;
    const auto term = clean_term(main_clean);
    MetaStep step;
    try {
      step = meta_step(s.main, s.meta, make_batch(split.noisy, noisy_idx),
                       make_batch(split.clean, clean_idx), cfg.inner_lr, cfg.meta_grad_mode, term);
    } catch (const Error& e) {
      if (e.code() != Errc::non_finite) throw;
      step.loss_clean = kNaN;
    }
    if (diverging(step.loss_clean) || diverging(step.loss_noisy)) {
      if (diagnostic) {
        *diagnostic = "loss diverged at outer iteration " + std::to_string(s.iteration) +
                      " (noisy " + format_double(step.loss_noisy) + ", clean " +
                      format_double(step.loss_clean) + ")";
      }
      s.main.params = s.best_main;
      s.meta.params = s.best_meta;
      return false;
    }
    if (step.loss_clean < s.best_clean_loss) {
      s.best_clean_loss = step.loss_clean;
      s.best_main = step.updated_main;
      s.best_meta = s.meta.params;
    }
    s.main.params = std::move(step.updated_main);
    apply_meta_update(s, step.meta_grad, cfg);
    s.history.push_back({s.iteration, step.loss_noisy, step.loss_clean, step.mean_yc});
    ++s.iteration;
  }
  return true;
}

MetaResult train_meta(MainNetwork main, MetaNetwork meta, const SplitDataset& split,
                      const TrainConfig& cfg) {
  if (split.clean.empty()) throw Error(Errc::empty_set, "clean set is empty");
  if (split.noisy.empty()) throw Error(Errc::empty_set, "noisy set is empty");
  auto state = start_meta(std::move(main), std::move(meta), cfg);
  MetaResult res;
  res.diverged = !advance_meta(state, split, cfg, cfg.episodes, &res.diagnostic);
  res.main = std::move(state.main);
  res.meta = std::move(state.meta);
  res.history = std::move(state.history);
  return res;
}

void MetaState::save(const fs::path& dir) const {
  fs::create_directories(dir);
  nets::save_main(main, dir / "main");
  nets::save_meta(meta, dir / "meta");
  nets::save_params(best_main, dir / "best_main.bin");
  nets::save_params(best_meta, dir / "best_meta.bin");
  write_history(history, dir / "history.csv");
  if (adam_m.size() > 0) {
    nets::save_params(adam_m, dir / "adam_m.bin");
    nets::save_params(adam_v, dir / "adam_v.bin");
  }
  std::ofstream out(dir / "state.txt");
  out << iteration << '\n' << format_double(best_clean_loss) << '\n' << adam_t << '\n' << rng << '\n';
  if (!out) throw Error(Errc::io_error, "cannot write trainer state");
}

MetaState MetaState::load(const fs::path& dir) {
  MetaState s;
  s.main = nets::load_main(dir / "main");
  s.meta = nets::load_meta(dir / "meta");
  s.best_main = nets::load_params(dir / "best_main.bin");
  s.best_meta = nets::load_params(dir / "best_meta.bin");
  s.history = read_history(dir / "history.csv");
  if (fs::exists(dir / "adam_m.bin")) {
    s.adam_m = nets::load_params(dir / "adam_m.bin");
    s.adam_v = nets::load_params(dir / "adam_v.bin");
  }
  std::ifstream in(dir / "state.txt");
  std::string best;
  if (!(in >> s.iteration >> best >> s.adam_t >> s.rng)) {
    throw Error(Errc::format_error, "unreadable trainer state in " + dir.string());
  }
  s.best_clean_loss = best == "inf" ? std::numeric_limits<double>::infinity() : parse_double(best);
  return s;
}

// ---------------------------------------------------------------------------
// Accuracy

double accuracy_from_predictions(std::span<const double> probs, std::span<const int> labels,
                                 double threshold) {
  if (probs.empty()) throw Error(Errc::empty_set, "no predictions to score");
  if (probs.size() != labels.size()) throw Error(Errc::shape_mismatch, "label count differs");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if ((probs[i] >= threshold ? 1 : 0) == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(probs.size());
}

double evaluate_accuracy(const MainNetwork& net, const std::vector<LabeledWindow>& windows,
                         double threshold) {
  if (windows.empty()) throw Error(Errc::empty_set, "no windows to evaluate");
  std::vector<double> probs;
  std::vector<int> labels;
  for (const auto& w : windows) {
    probs.push_back(net.forward(w.pair.x));
    labels.push_back(w.label);
  }
  return accuracy_from_predictions(probs, labels, threshold);
}

std::vector<LabeledWindow> labeled_noisy(const SplitDataset& ds) {
  std::vector<LabeledWindow> out = ds.noisy;
  for (auto& w : out) w.label = pipeline::noisy_ground_truth(ds, w);
  return out;
}

}  // namespace metaictal::trainer
