#include "metaictal/study.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "metaictal/episode_io.hpp"
#include "metaictal/pipeline.hpp"

namespace metaictal::study {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<double> kGridH{10, 20, 30};
const std::vector<double> kGridM{5, 10, 15, 20};

[[noreturn]] void bad_config(const std::string& msg) { throw Error(Errc::invalid_config, msg); }

bool on_grid(double v, const std::vector<double>& grid) {
  return std::any_of(grid.begin(), grid.end(), [v](double g) { return std::abs(g - v) < 1e-9; });
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) bad_config("section '" + where + "' must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) bad_config("unknown key '" + where + "." + key + "'");
  }
}

template <class T>
void read_if(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    bad_config(std::string("bad value for '") + key + "': " + e.what());
  }
}

std::string cell_spec(const Cell& c) {
  return "h=" + format_double(c.h_s) + ",m=" + format_double(c.m_s);
}

bool divisible(double seconds, double fs, int frame) {
  const auto n = std::llround(seconds * fs);
  return frame > 0 && n % frame == 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void StudyConfig::validate() const {
  synth.validate();
  trainer.validate();
  if (!(trainer.inner_lr > 0) || !(trainer.meta_lr > 0)) bad_config("learning rates must be positive");
  if (baseline_lr && !(*baseline_lr > 0)) bad_config("baseline_lr must be positive");
  if (n_episodes < 2) bad_config("a study needs at least two episodes");
  if (repeats < 1) bad_config("repeats must be >= 1");
  if (!(grid.stride_s > 0) || !(grid.noisy_halfwidth_s > 0) || grid.clean_per_side < 1) {
    bad_config("window grid values must be positive");
  }
  if (eval.h_values.empty() || eval.m_values.empty()) bad_config("eval grid is empty");
  for (double h : eval.h_values) {
    if (!on_grid(h, kGridH)) bad_config("h = " + format_double(h) + " s is not on the grid {10, 20, 30}");
  }
  for (double m : eval.m_values) {
    if (!on_grid(m, kGridM)) bad_config("m = " + format_double(m) + " s is not on the grid {5, 10, 15, 20}");
  }
  for (double q : eval.quantiles) {
    if (!(q > 0 && q < 1)) bad_config("quantiles must lie in (0, 1)");
  }
  if (!(eval.variance_window_s > 0)) bad_config("variance window must be positive");
  for (const auto& c : cells) {
    if (!on_grid(c.h_s, eval.h_values) || !on_grid(c.m_s, eval.m_values)) {
      bad_config("cell " + cell_spec(c) + " is not on the grid");
    }
  }
  const double fs = synth.sample_rate_hz;
  for (const auto& c : active_cells()) {
    if (!divisible(c.h_s, fs, nets.lstm_frame)) bad_config("history length not a multiple of lstm_frame");
    if (!divisible(c.h_s + c.m_s, fs, nets.meta_frame)) {
      bad_config("window length not a multiple of meta_frame");
    }
  }
  if (nets.resnet_widths.empty() || nets.resnet_widths.size() != nets.resnet_strides.size()) {
    bad_config("resnet widths and strides must be non-empty and of equal length");
  }
}

std::vector<Cell> StudyConfig::active_cells() const {
  if (!cells.empty()) return cells;
  std::vector<Cell> out;
  for (double h : eval.h_values) {
    for (double m : eval.m_values) out.push_back({h, m});
  }
  return out;
}

int StudyConfig::cell_index(const Cell& c) const {
  int idx = 0;
  for (double h : kGridH) {
    for (double m : kGridM) {
      if (std::abs(h - c.h_s) < 1e-9 && std::abs(m - c.m_s) < 1e-9) return idx;
      ++idx;
    }
  }
  bad_config("cell " + cell_spec(c) + " is not on the grid");
}

trainer::TrainConfig default_study_trainer() {
  trainer::TrainConfig t;
  t.clean_weight = 1.0;
  t.meta_optimizer = trainer::MetaOptimizer::adam;
  t.meta_lr = 0.01;
  return t;
}

json StudyConfig::to_json() const {
  json cells_j = json::array();
  for (const auto& c : cells) cells_j.push_back(cell_spec(c));
  return {
      {"seed", seed},
      {"synthgen",
       {{"n_episodes", n_episodes},
        {"n_channels", synth.n_channels},
        {"sample_rate_hz", synth.sample_rate_hz},
        {"duration_s", synth.duration_s},
        {"onset_s", synth.onset_s},
        {"ramp_s", synth.ramp_s},
        {"rest_theta", synth.rest_theta},
        {"noise_sigma", synth.noise_sigma},
        {"ictal_amp", synth.ictal_amp},
        {"ictal_freq_hz", synth.ictal_freq_hz}}},
      {"pipeline",
       {{"stride_s", grid.stride_s},
        {"noisy_halfwidth_s", grid.noisy_halfwidth_s},
        {"clean_per_side", grid.clean_per_side},
        {"test_episode", test_episode}}},
      {"trainer",
       {{"inner_lr", trainer.inner_lr},
        {"meta_lr", trainer.meta_lr},
        {"inner_steps", trainer.inner_steps},
        {"episodes", trainer.episodes},
        {"batch_size", trainer.batch_size},
        {"meta_grad_mode", trainer::to_string(trainer.meta_grad_mode)},
        {"meta_optimizer", trainer::to_string(trainer.meta_optimizer)},
        {"stratify_clean", trainer.stratify_clean},
        {"clean_weight", trainer.clean_weight},
        {"baseline_lr", baseline_lr ? json(*baseline_lr) : json(nullptr)},
        {"repeats", repeats}}},
      {"nets",
       {{"resnet_widths", nets.resnet_widths},
        {"resnet_strides", nets.resnet_strides},
        {"resnet_kernel", nets.resnet_kernel},
        {"lstm_hidden", nets.lstm_hidden},
        {"lstm_frame", nets.lstm_frame},
        {"meta_hidden", nets.meta_hidden},
        {"meta_frame", nets.meta_frame},
        {"meta_main", nets::to_string(nets.meta_main)}}},
      {"eval",
       {{"h_values", eval.h_values},
        {"m_values", eval.m_values},
        {"quantiles", eval.quantiles},
        {"variance_window_s", eval.variance_window_s}}},
      {"cells", cells_j},
  };
}

StudyConfig StudyConfig::from_json(const json& j) {
  StudyConfig c;
  reject_unknown(j, {"seed", "synthgen", "pipeline", "trainer", "nets", "eval", "cells"}, "config");
  read_if(j, "seed", c.seed);
  if (j.contains("synthgen")) {
    const auto& s = j["synthgen"];
    reject_unknown(s,
                   {"n_episodes", "n_channels", "sample_rate_hz", "duration_s", "onset_s", "ramp_s",
                    "rest_theta", "noise_sigma", "ictal_amp", "ictal_freq_hz"},
                   "synthgen");
    read_if(s, "n_episodes", c.n_episodes);
    read_if(s, "n_channels", c.synth.n_channels);
    read_if(s, "sample_rate_hz", c.synth.sample_rate_hz);
    read_if(s, "duration_s", c.synth.duration_s);
    read_if(s, "onset_s", c.synth.onset_s);
    read_if(s, "ramp_s", c.synth.ramp_s);
    read_if(s, "rest_theta", c.synth.rest_theta);
    read_if(s, "noise_sigma", c.synth.noise_sigma);
    read_if(s, "ictal_amp", c.synth.ictal_amp);
    read_if(s, "ictal_freq_hz", c.synth.ictal_freq_hz);
  }
  if (j.contains("pipeline")) {
    const auto& p = j["pipeline"];
    reject_unknown(p, {"stride_s", "noisy_halfwidth_s", "clean_per_side", "test_episode"}, "pipeline");
    read_if(p, "stride_s", c.grid.stride_s);
    read_if(p, "noisy_halfwidth_s", c.grid.noisy_halfwidth_s);
    read_if(p, "clean_per_side", c.grid.clean_per_side);
    read_if(p, "test_episode", c.test_episode);
  }
  if (j.contains("trainer")) {
    const auto& t = j["trainer"];
    reject_unknown(t,
                   {"inner_lr", "meta_lr", "inner_steps", "episodes", "batch_size", "meta_grad_mode",
                    "meta_optimizer", "stratify_clean", "clean_weight", "baseline_lr", "repeats"},
                   "trainer");
    read_if(t, "inner_lr", c.trainer.inner_lr);
    read_if(t, "meta_lr", c.trainer.meta_lr);
    read_if(t, "inner_steps", c.trainer.inner_steps);
    read_if(t, "episodes", c.trainer.episodes);
    read_if(t, "batch_size", c.trainer.batch_size);
    read_if(t, "stratify_clean", c.trainer.stratify_clean);
    read_if(t, "clean_weight", c.trainer.clean_weight);
    read_if(t, "repeats", c.repeats);
    if (t.contains("meta_grad_mode")) {
      std::string mode;
      read_if(t, "meta_grad_mode", mode);
      try {
        c.trainer.meta_grad_mode = trainer::meta_grad_mode_from_string(mode);
      } catch (const Error& e) {
        bad_config(e.what());
      }
    }
    if (t.contains("meta_optimizer")) {
      std::string opt;
      read_if(t, "meta_optimizer", opt);
      c.trainer.meta_optimizer = trainer::meta_optimizer_from_string(opt);
    }
    if (t.contains("baseline_lr") && !t["baseline_lr"].is_null()) {
      double lr = 0;
      read_if(t, "baseline_lr", lr);
      c.baseline_lr = lr;
    }
  }
  if (j.contains("nets")) {
    const auto& n = j["nets"];
    reject_unknown(n,
                   {"resnet_widths", "resnet_strides", "resnet_kernel", "lstm_hidden", "lstm_frame",
                    "meta_hidden", "meta_frame", "meta_main"},
                   "nets");
    read_if(n, "resnet_widths", c.nets.resnet_widths);
    read_if(n, "resnet_strides", c.nets.resnet_strides);
    read_if(n, "resnet_kernel", c.nets.resnet_kernel);
    read_if(n, "lstm_hidden", c.nets.lstm_hidden);
    read_if(n, "lstm_frame", c.nets.lstm_frame);
    read_if(n, "meta_hidden", c.nets.meta_hidden);
    read_if(n, "meta_frame", c.nets.meta_frame);
    if (n.contains("meta_main")) {
      std::string arch;
      read_if(n, "meta_main", arch);
      try {
        c.nets.meta_main = nets::main_arch_from_string(arch);
      } catch (const Error& e) {
        bad_config(e.what());
      }
    }
  }
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    reject_unknown(e, {"h_values", "m_values", "quantiles", "variance_window_s"}, "eval");
    read_if(e, "h_values", c.eval.h_values);
    read_if(e, "m_values", c.eval.m_values);
    read_if(e, "quantiles", c.eval.quantiles);
    read_if(e, "variance_window_s", c.eval.variance_window_s);
  }
  if (j.contains("cells")) {
    if (!j["cells"].is_array()) bad_config("'cells' must be a list of \"h=..,m=..\" strings");
    for (const auto& s : j["cells"]) {
      if (!s.is_string()) bad_config("'cells' entries must be strings");
      c.cells.push_back(parse_cell(s.get<std::string>()));
    }
  }
  return c;
}

StudyConfig load_config(const fs::path& file) {
  std::ifstream in(file);
  if (!in) bad_config("cannot open config " + file.string());
  try {
    return StudyConfig::from_json(json::parse(in));
  } catch (const json::exception& e) {
    bad_config("config " + file.string() + " is not valid JSON: " + e.what());
  }
}

json apply_overrides(json config, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) bad_config("override '" + o + "' is not key=value");
    const std::string key = o.substr(0, eq);
    const std::string raw = o.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::exception&) {
      value = raw;
    }
    json::json_pointer ptr("/" + [&] {
      std::string p = key;
      std::replace(p.begin(), p.end(), '.', '/');
      return p;
    }());
    config[ptr] = value;
  }
  return config;
}

Cell parse_cell(const std::string& spec) {
  Cell c;
  bool has_h = false;
  bool has_m = false;
  std::stringstream ss(spec);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const auto eq = part.find('=');
    if (eq == std::string::npos) bad_config("bad cell '" + spec + "', expected h=..,m=..");
    const std::string key = part.substr(0, eq);
    double v = 0;
    try {
      v = parse_double(part.substr(eq + 1));
    } catch (const Error&) {
      bad_config("bad cell value in '" + spec + "'");
    }
    if (key == "h") {
      c.h_s = v;
      has_h = true;
    } else if (key == "m") {
      c.m_s = v;
      has_m = true;
    } else {
      bad_config("bad cell key '" + key + "'");
    }
  }
  if (!has_h || !has_m) bad_config("cell '" + spec + "' needs both h and m");
  return c;
}

std::string cell_dir_name(const Cell& c) {
  return "h" + format_double(c.h_s) + "_m" + format_double(c.m_s);
}

std::optional<Cell> parse_cell_dir_name(const std::string& name) {
  const auto us = name.find("_m");
  if (name.size() < 4 || name[0] != 'h' || us == std::string::npos) return std::nullopt;
  try {
    return Cell{parse_double(name.substr(1, us - 1)), parse_double(name.substr(us + 2))};
  } catch (const Error&) {
    return std::nullopt;
  }
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string file_checksum(const fs::path& file) { return fnv1a_hex(eval::read_text(file)); }

// ---------------------------------------------------------------------------
// Training

nets::MainNetwork make_main(const StudyConfig& cfg, nets::MainArch arch, std::size_t n_channels,
                            Eigen::Index x_cols, std::uint64_t seed) {
  if (arch == nets::MainArch::lstm) {
    nets::LstmHyper h;
    h.in_features = static_cast<int>(n_channels);
    h.seq_len = static_cast<int>(x_cols);
    h.hidden = cfg.nets.lstm_hidden;
    h.frame = cfg.nets.lstm_frame;
    return nets::make_lstm_main(h, seed);
  }
  nets::ResNetHyper h;
  h.in_channels = static_cast<int>(n_channels);
  h.input_len = static_cast<int>(x_cols);
  h.widths = cfg.nets.resnet_widths;
  h.strides = cfg.nets.resnet_strides;
  h.kernel = cfg.nets.resnet_kernel;
  return nets::make_resnet_main(h, seed);
}

std::uint64_t run_seed(const StudyConfig& cfg, const Cell& c, int r) {
  return cfg.seed + static_cast<std::uint64_t>(cfg.cell_index(c)) + 100ULL * static_cast<std::uint64_t>(r);
}

void train_model(const StudyConfig& cfg, const std::string& model, const SplitDataset& train,
                 std::uint64_t seed, const fs::path& dir) {
  if (train.clean.empty()) throw Error(Errc::empty_set, "training set has no clean windows");
  const auto x_cols = train.clean.front().pair.x.cols();
  const auto y_cols = train.clean.front().pair.y.cols();
  trainer::TrainConfig tc = cfg.trainer;
  tc.seed = seed;
  tc.h_s = train.grid.h_s;
  tc.m_s = train.grid.m_s;
  fs::create_directories(dir);
  if (model == "lstm" || model == "resnet") {
    tc.inner_lr = cfg.baseline_lr.value_or(cfg.trainer.inner_lr);
    const auto arch = model == "lstm" ? nets::MainArch::lstm : nets::MainArch::resnet1d;
    auto res = trainer::train_baseline(make_main(cfg, arch, train.n_channels, x_cols, seed),
                                       train.clean, tc);
    nets::save_main(res.net, dir);
    trainer::write_history(res.history, dir / "history.csv");
    if (res.diverged) throw Error(Errc::non_finite, res.diagnostic);
    return;
  }
  if (model != "meta") bad_config("unknown model '" + model + "'");
  auto main = make_main(cfg, cfg.nets.meta_main, train.n_channels, x_cols, seed);
  auto meta = nets::make_meta(static_cast<int>(train.n_channels), x_cols, y_cols,
                              cfg.nets.meta_hidden, cfg.nets.meta_frame, seed + 7919);
  auto res = trainer::train_meta(std::move(main), std::move(meta), train, tc);
  nets::save_main(res.main, dir / "main");
  nets::save_meta(res.meta, dir / "meta");
  trainer::write_history(res.history, dir / "history.csv");
  if (res.diverged) throw Error(Errc::non_finite, res.diagnostic);
}

nets::MainNetwork load_trained_main(const fs::path& dir) {
  if (fs::exists(dir / "main" / "params.bin")) return nets::load_main(dir / "main");
  if (!fs::exists(dir / "params.bin")) {
    throw Error(Errc::missing_checkpoint, "no checkpoint in " + dir.string());
  }
  return nets::load_main(dir);
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

std::vector<fs::path> sorted_subdirs(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory()) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<fs::path> repeat_dirs(const fs::path& model_dir) {
  std::vector<fs::path> out;
  for (const auto& d : sorted_subdirs(model_dir)) {
    const auto name = d.filename().string();
    if (name.size() > 1 && name[0] == 'r') out.push_back(d);
  }
  std::sort(out.begin(), out.end(), [](const fs::path& a, const fs::path& b) {
    return std::stoi(a.filename().string().substr(1)) < std::stoi(b.filename().string().substr(1));
  });
  return out;
}

}  // namespace

std::vector<std::string> evaluate(const fs::path& checkpoints, const fs::path& data,
                                  const fs::path& out, const EvaluateOptions& opts) {
  if (!fs::is_directory(checkpoints)) {
    throw Error(Errc::missing_checkpoint, "no checkpoints directory " + checkpoints.string());
  }
  std::vector<Cell> cells;
  for (const auto& d : sorted_subdirs(checkpoints)) {
    if (auto c = parse_cell_dir_name(d.filename().string())) cells.push_back(*c);
  }
  std::sort(cells.begin(), cells.end(), [](const Cell& a, const Cell& b) {
    return std::pair(a.h_s, a.m_s) < std::pair(b.h_s, b.m_s);
  });

  eval::AccuracyGrid grid;
  grid.h_values = opts.eval.h_values;
  grid.m_values = opts.eval.m_values;
  grid.models = kModelNames;
  std::ostringstream lead;
  lead << "h_s,m_s,model,episode_id," << eval::leadtime_csv_header() << '\n';

  for (const auto& cell : cells) {
    const auto name = cell_dir_name(cell);
    const SplitDataset test = pipeline::load_dataset(data / name / "test");
    const auto episodes = read_episodes(data / name / "test_episode");
    if (episodes.size() != 1) {
      throw Error(Errc::format_error, "expected one test episode in " + (data / name).string());
    }
    const Episode& ep = episodes.front();
    if (ep.onset_times_s.empty()) throw Error(Errc::format_error, "test episode has no onset");
    const double onset = ep.onset_times_s.front();
    const auto noisy = trainer::labeled_noisy(test);
    const auto var = eval::variance_indicator(ep, opts.eval.variance_window_s, opts.stride_s);
    eval::write_text(out / name / ("trace_" + ep.id + "_variance.csv"), eval::trace_csv(var));

    for (const auto& model : kModelNames) {
      const auto runs = repeat_dirs(checkpoints / name / model);
      if (runs.empty()) {
        grid.missing.push_back("missing_checkpoint: " + eval::AccuracyGrid::cell_key(cell.h_s, cell.m_s, model));
        continue;
      }
      double acc = 0.0;
      std::vector<eval::IndicatorTrace> traces;
      for (const auto& r : runs) {
        const auto net = load_trained_main(r);
        acc += trainer::evaluate_accuracy(net, noisy);
        traces.push_back(eval::probability_indicator(net, ep, cell.h_s, opts.stride_s));
      }
      grid.cells[eval::AccuracyGrid::cell_key(cell.h_s, cell.m_s, model)] =
          acc / static_cast<double>(runs.size());
      const auto prob = eval::ensemble_indicator(traces);
      eval::write_text(out / name / ("trace_" + ep.id + "_" + model + ".csv"), eval::trace_csv(prob));
      eval::write_text(out / name / ("onset_" + ep.id + "_" + model + ".csv"),
                       eval::onset_centered_csv(prob, onset));
      for (const auto& row : eval::lead_time_comparison(prob, var, onset, opts.eval.quantiles)) {
        lead << format_double(cell.h_s) << ',' << format_double(cell.m_s) << ',' << model << ','
             << ep.id << ',' << eval::leadtime_csv_row(row) << '\n';
      }
    }
  }
  eval::write_text(out / "accuracy_grid.csv", grid.to_csv());
  eval::write_text(out / "leadtime.csv", lead.str());
  std::string missing;
  for (const auto& m : grid.missing) missing += m + '\n';
  eval::write_text(out / "missing_checkpoints.txt", missing);
  return grid.missing;
}

// ---------------------------------------------------------------------------
// Study

namespace {

json artifact_checksums(const fs::path& root, const std::vector<std::string>& subdirs) {
  std::vector<std::string> files;
  for (const auto& sub : subdirs) {
    if (!fs::exists(root / sub)) continue;
    for (const auto& e : fs::recursive_directory_iterator(root / sub)) {
      if (e.is_regular_file()) files.push_back(fs::relative(e.path(), root).generic_string());
    }
  }
  std::sort(files.begin(), files.end());
  json out = json::object();
  for (const auto& f : files) out[f] = file_checksum(root / f);
  return out;
}

}  // namespace

void run_study(const StudyConfig& cfg, const fs::path& run_dir) {
  cfg.validate();
  fs::create_directories(run_dir);
  const std::string config_text = cfg.to_json().dump(2) + "\n";
  eval::write_text(run_dir / "config.json", config_text);

  json manifest = {{"config_hash", fnv1a_hex(cfg.to_json().dump())},
                   {"seed", cfg.seed},
                   {"status", "running"}};
  json seeds = json::object();
  std::string stage = "generate";
  auto write_manifest = [&] {
    manifest["seeds"] = seeds;
    manifest["artifacts"] = artifact_checksums(run_dir, {"episodes", "data", "checkpoints", "results"});
    eval::write_text(run_dir / "manifest.json", manifest.dump(2) + "\n");
  };

  try {
    const auto cohort = synth::generate_cohort(cfg.synth, cfg.n_episodes, cfg.seed);
    for (const auto& ep : cohort) write_episode(ep, run_dir / "episodes");
    const std::string test_id = cfg.test_episode.empty() ? cohort.back().id : cfg.test_episode;

    for (const auto& cell : cfg.active_cells()) {
      const auto name = cell_dir_name(cell);
      stage = "split " + name;
      WindowGrid grid = cfg.grid;
      grid.h_s = cell.h_s;
      grid.m_s = cell.m_s;
      const auto tt = pipeline::split_train_test(cohort, test_id, grid);
      pipeline::save_dataset(tt.train, run_dir / "data" / name / "train");
      pipeline::save_dataset(tt.test, run_dir / "data" / name / "test");
      write_episode(tt.test_episode, run_dir / "data" / name / "test_episode");

      for (const auto& model : kModelNames) {
        for (int r = 0; r < cfg.repeats; ++r) {
          const auto seed = run_seed(cfg, cell, r);
          const std::string run = "r" + std::to_string(r);
          stage = "train " + name + "/" + model + "/" + run;
          seeds[name + "/" + model + "/" + run] = seed;
          train_model(cfg, model, tt.train, seed, run_dir / "checkpoints" / name / model / run);
        }
      }
    }

    stage = "evaluate";
    EvaluateOptions opts;
    opts.eval = cfg.eval;
    opts.stride_s = cfg.grid.stride_s;
    evaluate(run_dir / "checkpoints", run_dir / "data", run_dir / "results", opts);
  } catch (const Error& e) {
    manifest["status"] = "failed";
    manifest["failed_stage"] = stage;
    manifest["error"] = e.what();
    write_manifest();
    throw StageError(stage, e);
  }
  manifest["status"] = "ok";
  write_manifest();
}

fs::path default_run_dir(const StudyConfig& cfg) {
  const char* root = std::getenv("METAICTAL_RUN_ROOT");
  const fs::path base = root && *root ? fs::path(root) : fs::path("runs");
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &tm);
  fs::path dir = base / (std::string(stamp) + "-" + fnv1a_hex(cfg.to_json().dump()).substr(0, 8));
  for (int k = 1; fs::exists(dir); ++k) {
    dir = base / (std::string(stamp) + "-" + fnv1a_hex(cfg.to_json().dump()).substr(0, 8) + "-" +
                  std::to_string(k));
  }
  return dir;
}

}  // namespace metaictal::study
