// Acceptance suite: one PASS/FAIL line per criterion.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <random>
#include <set>
#include <string>

#include "helpers.hpp"
#include "metaictal/episode_io.hpp"
#include "metaictal/eval.hpp"
#include "metaictal/pipeline.hpp"
#include "metaictal/study.hpp"
#include "metaictal/synthgen.hpp"
#include "metaictal/trainer.hpp"

using namespace metaictal;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void run(int id, const std::string& name, double limit_s, const std::function<Outcome()>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool in_time = limit_s <= 0 || secs < limit_s;
  const bool pass = o.pass && in_time;
  if (!pass) ++failures;
  std::printf("%s %d %s: %s (%.1f s%s)\n", pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str(),
              secs, limit_s > 0 ? (", limit " + format_double(limit_s) + " s").c_str() : "");
  std::fflush(stdout);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

trainer::Batch whole(const std::vector<LabeledWindow>& w) {
  std::vector<std::size_t> idx(w.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return trainer::make_batch(w, idx);
}

std::vector<LabeledWindow> random_windows(int n, int rows, int x_cols, int y_cols,
                                          std::mt19937_64& rng) {
  std::vector<LabeledWindow> out;
  for (int i = 0; i < n; ++i) {
    LabeledWindow w;
    w.pair.x = testutil::random_matrix(rows, x_cols, rng);
    w.pair.y = testutil::random_matrix(rows, y_cols, rng);
    w.label = i % 2;
    out.push_back(std::move(w));
  }
  return out;
}

// ---------------------------------------------------------------------------

Outcome meta_gradient_oracle() {
  double worst = 0;
  std::size_t total = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    nets::LstmHyper mh;
    mh.in_features = 1;
    mh.seq_len = 8;
    mh.hidden = 1;
    mh.frame = 2;
    auto main = nets::make_lstm_main(mh, seed);
    auto meta = nets::make_meta(1, 8, 4, 1, 2, seed + 1);
    testutil::randomize(main.params, rng, 1.0);
    testutil::randomize(meta.params, rng, 1.0);
    total = main.params.size() + meta.params.size();
    if (total > 50) return {false, "problem has " + std::to_string(total) + " parameters"};
    const auto noisy = random_windows(6, 1, 8, 4, rng);
    const auto clean = random_windows(6, 1, 8, 4, rng);
    const double lr = 0.5;
    const auto g = trainer::meta_gradient(main, meta, whole(noisy), whole(clean), lr,
                                          trainer::MetaGradMode::unrolled);
    const auto fd = testutil::finite_difference(
        [&](const ParamVector& a) {
          auto m = meta;
          m.params = a;
          const auto stepped = trainer::inner_update(main, m, whole(noisy), lr);
          nets::MainBatchLoss loss{&stepped, whole(clean).x, whole(clean).labels};
          return loss(stepped.params, nullptr);
        },
        meta.params);
    worst = std::max(worst, testutil::tolerance_ratio(g, fd, 1e-4, 1e-6));
  }
  return {worst <= 1.0, "5 problems with " + std::to_string(total) +
                            " parameters, worst error/tolerance " + fmt("%.3g", worst)};
}

Outcome fixed_point() {
  synth::SynthConfig sc;
  sc.n_channels = 2;
  sc.duration_s = 200;
  sc.onset_s = 120;
  sc.ramp_s = 40;
  const auto cohort = synth::generate_cohort(sc, 3, 0);
  WindowGrid grid;
  grid.h_s = 10;
  grid.m_s = 5;
  const auto tt = pipeline::split_train_test(cohort, "synth-002", grid);
  const auto x_cols = tt.train.clean[0].pair.x.cols();
  nets::ResNetHyper rh;
  rh.in_channels = 2;
  rh.input_len = static_cast<int>(x_cols);
  rh.widths = {4, 4};
  rh.strides = {2, 2};
  const auto main = nets::make_resnet_main(rh, 0);
  const auto meta = nets::make_meta(2, x_cols, tt.train.clean[0].pair.y.cols(), 8, 16, 1);
  // Both readings of a disabled step: no meta update, and no inner step
  // (which makes the meta-gradient vanish).
  bool same = true;
  for (auto opt : {trainer::MetaOptimizer::sgd, trainer::MetaOptimizer::adam}) {
    for (bool zero_inner : {false, true}) {
      trainer::TrainConfig cfg;
      cfg.episodes = 100;
      cfg.batch_size = 8;
      cfg.meta_optimizer = opt;
      cfg.clean_weight = 1.0;
      cfg.inner_lr = zero_inner ? 0.0 : 0.05;
      cfg.meta_lr = zero_inner ? 0.01 : 0.0;
      const auto res = trainer::train_meta(main, meta, tt.train, cfg);
      same = same && res.meta.params == meta.params && res.history.size() == 100;
    }
  }
  return {same, same ? "meta params bitwise unchanged after 100 iterations with meta_lr = 0 or "
                       "inner_lr = 0 (sgd and adam)"
                     : "meta params changed"};
}

Outcome loss_values() {
  const std::vector<double> p{0.5}, t{1.0};
  const double err = std::abs(nets::bce_loss(p, t) - std::log(2.0));
  std::mt19937_64 rng(0);
  std::uniform_real_distribution<double> u(0, 1);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::vector<double> a{u(rng)}, b{u(rng)};
    const std::vector<double> fa{1 - a[0]}, fb{1 - b[0]};
    worst = std::max(worst, std::abs(nets::bce_loss(a, b) - nets::bce_loss(fa, fb)));
  }
  return {err <= 1e-12 && worst <= 1e-12,
          "|bce(0.5,1) - ln 2| = " + fmt("%.2g", err) + ", worst symmetry gap " + fmt("%.2g", worst)};
}

Outcome protocol_counts() {
  const synth::SynthConfig sc;
  int checked = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    synth::SynthConfig c = sc;
    c.seed = 500 + seed;
    const auto ep = synth::generate_episode(c);
    const double o = ep.onset_times_s.front();
    for (double h : {10.0, 20.0, 30.0}) {
      for (double m : {5.0, 10.0, 15.0, 20.0}) {
        WindowGrid g;
        g.h_s = h;
        g.m_s = m;
        const auto p = pipeline::partition(ep, g);
        int zeros = 0, ones = 0;
        std::set<double> starts;
        for (const auto& w : p.noisy) {
          const double r = w.pair.horizon_end_s();
          if (!(r >= o - 10 && r < o + 10)) return {false, "noisy window outside the zone"};
          starts.insert(w.pair.t_start_s);
        }
        for (const auto& w : p.clean) {
          const double r = w.pair.horizon_end_s();
          if (w.label == 0 ? r > o - 10 : r < o + 10) return {false, "clean label on wrong side"};
          (w.label == 0 ? zeros : ones)++;
          if (!starts.insert(w.pair.t_start_s).second) return {false, "clean and noisy overlap"};
        }
        if (p.noisy.size() != 40 || zeros != 40 || ones != 40) {
          return {false, "counts " + std::to_string(p.noisy.size()) + "/" + std::to_string(zeros) +
                             "/" + std::to_string(ones) + " at h=" + format_double(h) +
                             " m=" + format_double(m)};
        }
        ++checked;
      }
    }
  }
  return {true, std::to_string(checked) +
                    " (episode, h, m) partitions: 40 noisy, 40 + 40 clean, disjoint, labels on "
                    "their side"};
}

Outcome gradient_check() {
  nets::ResNetHyper rh;
  rh.in_channels = 2;
  rh.input_len = 12;
  rh.widths = {3, 3};
  rh.strides = {1, 2};
  rh.kernel = 3;
  nets::LstmHyper lh;
  lh.in_features = 2;
  lh.seq_len = 8;
  lh.hidden = 4;
  lh.frame = 2;
  double worst = 0;
  std::size_t sizes[2] = {0, 0};
  for (int arch = 0; arch < 2; ++arch) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      std::mt19937_64 rng(seed + 10 * arch);
      auto net = arch == 0 ? nets::make_resnet_main(rh, seed) : nets::make_lstm_main(lh, seed);
      sizes[arch] = net.params.size();
      if (net.params.size() > 200) return {false, "network too large"};
      testutil::randomize(net.params, rng);
      const auto cols = arch == 0 ? 12 : 8;
      std::vector<Matrix> xs;
      std::vector<double> targets;
      for (int i = 0; i < 3; ++i) {
        xs.push_back(testutil::random_matrix(2, cols, rng));
        targets.push_back(std::uniform_real_distribution<double>(0, 1)(rng));
      }
      nets::MainBatchLoss loss{&net, {}, targets};
      for (const auto& x : xs) loss.xs.push_back(&x);
      const auto g = nets::grad(loss, net.params);
      const auto fd = testutil::finite_difference(
          [&](const ParamVector& p) { return loss(p, nullptr); }, net.params);
      worst = std::max(worst, testutil::tolerance_ratio(g, fd, 1e-4, 1e-6));
    }
  }
  return {worst <= 1.0, "resnet " + std::to_string(sizes[0]) + " and lstm " +
                            std::to_string(sizes[1]) + " parameters, 10 seeds, worst " +
                            "error/tolerance " + fmt("%.3g", worst)};
}

// Spearman correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      double less = 0, equal = 0;
      for (double w : v) {
        less += w < v[i];
        equal += w == v[i];
      }
      r[i] = less + (equal + 1) / 2;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += rx[i] / n;
    my += ry[i] / n;
  }
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxx > 0 && syy > 0 ? sxy / std::sqrt(sxx * syy) : std::nan("");
}

study::StudyConfig replication_config() {
  study::StudyConfig cfg;
  cfg.repeats = 5;
  cfg.cells = {{20, 5}, {20, 10}, {20, 15}, {20, 20}};
  return cfg;
}

Outcome replication(const fs::path& dir) {
  const auto cfg = replication_config();
  study::run_study(cfg, dir);
  const auto grid =
      eval::AccuracyGrid::from_csv(eval::read_text(dir / "results" / "accuracy_grid.csv"));
  std::printf("  noisy-zone test accuracy at h = 20 s, mean of %d seeds\n", cfg.repeats);
  std::printf("  m_s    lstm   resnet  meta\n");
  const std::vector<double> ms{5, 10, 15, 20};
  std::map<std::string, std::vector<double>> acc;
  for (double m : ms) {
    for (const auto& model : study::kModelNames) acc[model].push_back(grid.at(20, m, model).value());
    std::printf("  %-5s  %.3f  %.3f   %.3f\n", format_double(m).c_str(), acc["lstm"].back(),
                acc["resnet"].back(), acc["meta"].back());
  }
  bool pass = true;
  std::string detail;
  for (std::size_t i = 0; i < 2; ++i) {
    const bool beats = acc["meta"][i] > acc["lstm"][i] && acc["meta"][i] > acc["resnet"][i];
    pass = pass && beats;
    detail += "m=" + format_double(ms[i]) + (beats ? " meta ahead; " : " meta behind; ");
  }
  for (const auto& model : study::kModelNames) {
    const double rho = spearman(ms, acc[model]);
    pass = pass && rho < 0;
    detail += model + " rho " + fmt("%.2f", rho) + (model == "meta" ? "" : ", ");
  }
  return {pass, detail};
}

Outcome early_warning(const fs::path& dir) {
  const auto cfg = replication_config();
  const auto cell = study::cell_dir_name({20, 5});
  const auto train = pipeline::load_dataset(dir / "data" / cell / "train");
  std::vector<nets::MainNetwork> nets_;
  for (int r = 0; r < cfg.repeats; ++r) {
    nets_.push_back(study::load_trained_main(dir / "checkpoints" / cell / "meta" /
                                             ("r" + std::to_string(r))));
  }
  const std::vector<double> key_q{0.8, 0.9, 0.95};
  std::map<double, std::vector<double>> adv;
  std::printf("  episode     quantile  lead_prob_s  lead_var_s  advantage_s\n");
  for (int e = 0; e < 5; ++e) {
    synth::SynthConfig sc = cfg.synth;
    sc.seed = cfg.seed + 1000 + static_cast<std::uint64_t>(e);
    const auto ep = pipeline::apply_normalization(
        synth::generate_episode(sc, "fresh-" + std::to_string(e)), train.normalization_stats);
    std::vector<eval::IndicatorTrace> traces;
    for (const auto& n : nets_) traces.push_back(eval::probability_indicator(n, ep, 20, 0.5));
    const auto prob = eval::ensemble_indicator(traces);
    const auto var = eval::variance_indicator(ep, cfg.eval.variance_window_s, 0.5);
    for (const auto& row : eval::lead_time_comparison(prob, var, sc.onset_s, eval::kDefaultQuantiles)) {
      auto cell_text = [](const std::optional<double>& v) {
        return v ? format_double(*v) : std::string("none");
      };
      std::printf("  %-10s  %-8s  %-11s  %-10s  %s\n", ep.id.c_str(),
                  format_double(row.quantile).c_str(), cell_text(row.lead_prob_s).c_str(),
                  cell_text(row.lead_var_s).c_str(), format_double(row.advantage_s).c_str());
      adv[row.quantile].push_back(row.advantage_s);
    }
  }
  bool pass = true;
  std::string detail = "median advantage";
  for (double q : key_q) {
    auto v = adv.at(q);
    std::sort(v.begin(), v.end());
    const double med = v[v.size() / 2];
    pass = pass && med >= 0;
    detail += " q" + format_double(q) + " " + format_double(med) + " s";
  }
  return {pass, detail};
}

Outcome determinism() {
  auto cfg = study::StudyConfig{};
  cfg.cells = {{10, 5}};
  cfg.trainer.episodes = 40;
  const auto a = testutil::temp_dir("accept_det_a");
  const auto b = testutil::temp_dir("accept_det_b");
  study::run_study(cfg, a);
  study::run_study(cfg, b);
  bool same = true;
  for (const char* f : {"accuracy_grid.csv", "leadtime.csv"}) {
    same = same && eval::read_text(a / "results" / f) == eval::read_text(b / "results" / f);
  }
  return {same, same ? "accuracy_grid.csv and leadtime.csv byte-identical across two runs"
                     : "outputs differ"};
}

}  // namespace

int main() {
  run(1, "meta-gradient oracle", 10, meta_gradient_oracle);
  run(2, "zero inner step fixed point", 30, fixed_point);
  run(3, "loss unit values", 0, loss_values);
  run(4, "data protocol counts", 10, protocol_counts);
  run(5, "network gradients", 60, gradient_check);
  const auto dir = testutil::temp_dir("accept_replication");
  run(6, "directional replication", 1800, [&] { return replication(dir); });
  run(7, "early warning lead time", 300, [&] { return early_warning(dir); });
  run(8, "study determinism", 0, determinism);
  std::printf("%d of 8 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
