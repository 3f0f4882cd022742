// Command-line entry point: generate, split, train, evaluate, indicator, study.

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "metaictal/episode_io.hpp"
#include "metaictal/eval.hpp"
#include "metaictal/pipeline.hpp"
#include "metaictal/study.hpp"
#include "metaictal/synthgen.hpp"

namespace fs = std::filesystem;
using namespace metaictal;

namespace {

enum Exit { kOk = 0, kConfig = 2, kData = 3, kNumerical = 4 };

int exit_code(Errc code) {
  switch (code) {
    case Errc::invalid_config:
    case Errc::mode_unsupported:
      return kConfig;
    case Errc::non_finite:
      return kNumerical;
    default:
      return kData;
  }
}

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;

  void attach(CLI::App* app) {
    app->add_option("--config", path, "JSON config file")->check(CLI::ExistingFile);
    app->add_option("--set", overrides, "override, e.g. trainer.episodes=50");
  }

  study::StudyConfig load() const {
    nlohmann::json j = path.empty() ? study::StudyConfig{}.to_json() : study::load_config(path).to_json();
    return study::StudyConfig::from_json(study::apply_overrides(j, overrides));
  }
};

fs::path dataset_dir(const fs::path& data, const std::string& part) {
  return fs::exists(data / part / "index.json") ? data / part : data;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta label correction for seizure early warning"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "write a synthetic cohort");
  ConfigArgs gen_cfg;
  gen_cfg.attach(gen);
  std::string gen_out;
  gen->add_option("--out", gen_out, "output directory")->required();

  // split
  auto* split = app.add_subcommand("split", "window, normalize and split a cohort");
  ConfigArgs split_cfg;
  split_cfg.attach(split);
  std::string split_episodes, split_test, split_out;
  double split_h = 20, split_m = 5;
  split->add_option("--episodes", split_episodes, "cohort directory")->required();
  split->add_option("--test-id", split_test, "held-out episode (default: last by id)");
  split->add_option("--history", split_h, "history length in seconds");
  split->add_option("--horizon", split_m, "horizon length in seconds");
  split->add_option("--out", split_out, "output directory")->required();

  // train
  auto* train = app.add_subcommand("train", "train one model on a split");
  ConfigArgs train_cfg;
  train_cfg.attach(train);
  std::string train_mode, train_data, train_out;
  std::uint64_t train_seed = 0;
  train->add_option("--mode", train_mode, "baseline-lstm, baseline-resnet or meta")
      ->required()
      ->check(CLI::IsMember({"baseline-lstm", "baseline-resnet", "meta"}));
  train->add_option("--data", train_data, "split directory")->required();
  train->add_option("--out", train_out, "checkpoint directory")->required();
  train->add_option("--seed", train_seed, "run seed");

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "rebuild result tables from checkpoints");
  ConfigArgs eval_cfg;
  eval_cfg.attach(evaluate);
  std::string eval_ckpt, eval_data, eval_out;
  evaluate->add_option("--checkpoints", eval_ckpt, "checkpoints directory")->required();
  evaluate->add_option("--data", eval_data, "data directory")->required();
  evaluate->add_option("--out", eval_out, "results directory")->required();

  // indicator
  auto* indicator = app.add_subcommand("indicator", "write an indicator trace for one episode");
  std::string ind_kind = "probability", ind_ckpt, ind_episodes, ind_id, ind_out;
  double ind_stride = 0.5, ind_window = 0.5;
  indicator->add_option("--kind", ind_kind)->check(CLI::IsMember({"probability", "variance"}));
  indicator->add_option("--checkpoint", ind_ckpt, "model directory (probability only)");
  indicator->add_option("--episodes", ind_episodes, "episode directory")->required();
  indicator->add_option("--id", ind_id, "episode id")->required();
  indicator->add_option("--stride", ind_stride, "grid stride in seconds");
  indicator->add_option("--window", ind_window, "variance window in seconds");
  indicator->add_option("--out", ind_out, "output CSV")->required();

  // study
  auto* run = app.add_subcommand("study", "run the full synthetic study");
  ConfigArgs run_cfg;
  run_cfg.attach(run);
  std::vector<std::string> run_cells;
  std::string run_out;
  run->add_option("--cells", run_cells, "restrict to cells, e.g. h=10,m=5")->delimiter(';');
  run->add_option("--out", run_out, "run directory (default: timestamped under $METAICTAL_RUN_ROOT)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) {
      const auto cfg = gen_cfg.load();
      cfg.validate();
      for (const auto& ep : synth::generate_cohort(cfg.synth, cfg.n_episodes, cfg.seed)) {
        write_episode(ep, gen_out);
      }
    } else if (*split) {
      const auto cfg = split_cfg.load();
      cfg.validate();
      const auto cohort = read_episodes(split_episodes);
      if (cohort.empty()) throw Error(Errc::empty_set, "no episodes in " + split_episodes);
      WindowGrid grid = cfg.grid;
      grid.h_s = split_h;
      grid.m_s = split_m;
      const auto tt = pipeline::split_train_test(
          cohort, split_test.empty() ? cohort.back().id : split_test, grid);
      pipeline::save_dataset(tt.train, fs::path(split_out) / "train");
      pipeline::save_dataset(tt.test, fs::path(split_out) / "test");
      write_episode(tt.test_episode, fs::path(split_out) / "test_episode");
    } else if (*train) {
      const auto cfg = train_cfg.load();
      cfg.validate();
      const auto ds = pipeline::load_dataset(dataset_dir(train_data, "train"));
      const std::string model = train_mode == "meta" ? "meta" : train_mode.substr(9);
      study::train_model(cfg, model, ds, train_seed, train_out);
    } else if (*evaluate) {
      const auto cfg = eval_cfg.load();
      cfg.validate();
      study::EvaluateOptions opts;
      opts.eval = cfg.eval;
      opts.stride_s = cfg.grid.stride_s;
      for (const auto& m : study::evaluate(eval_ckpt, eval_data, eval_out, opts)) {
        std::cerr << m << '\n';
      }
    } else if (*indicator) {
      const Episode ep = read_episode(ind_episodes, ind_id);
      eval::IndicatorTrace tr;
      if (ind_kind == "variance") {
        tr = eval::variance_indicator(ep, ind_window, ind_stride);
      } else {
        if (ind_ckpt.empty()) throw Error(Errc::invalid_config, "--checkpoint is required");
        const auto net = study::load_trained_main(ind_ckpt);
        const double h = static_cast<double>(net.model->input_cols()) / ep.sample_rate_hz;
        tr = eval::probability_indicator(net, ep, h, ind_stride);
      }
      eval::write_text(ind_out, eval::trace_csv(tr));
    } else if (*run) {
      auto cfg = run_cfg.load();
      for (const auto& c : run_cells) cfg.cells.push_back(study::parse_cell(c));
      cfg.validate();
      const fs::path dir = run_out.empty() ? study::default_run_dir(cfg) : fs::path(run_out);
      study::run_study(cfg, dir);
      std::cout << dir.string() << '\n';
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kOk;
}
