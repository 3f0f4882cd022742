#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "metaictal/core.hpp"
#include "metaictal/eval.hpp"
#include "metaictal/nets.hpp"
#include "metaictal/synthgen.hpp"
#include "metaictal/trainer.hpp"

namespace metaictal::study {

/// Architecture sizes shared by every cell.
struct NetConfig {
  std::vector<int> resnet_widths{8, 16, 16};
  std::vector<int> resnet_strides{1, 2, 2};
  int resnet_kernel = 7;
  int lstm_hidden = 16;
  int lstm_frame = 16;
  int meta_hidden = 16;
  int meta_frame = 16;
  nets::MainArch meta_main = nets::MainArch::resnet1d;
};

struct EvalConfig {
  std::vector<double> h_values{10, 20, 30};
  std::vector<double> m_values{5, 10, 15, 20};
  std::vector<double> quantiles = eval::kDefaultQuantiles;
  double variance_window_s = 0.5;
};

struct Cell {
  double h_s = 0.0;
  double m_s = 0.0;
  bool operator==(const Cell&) const = default;
};

/// Trainer settings used by studies: a supervised clean term and Adam on the
/// meta update. The bare TrainConfig defaults follow the plain listing.
trainer::TrainConfig default_study_trainer();

struct StudyConfig {
  std::uint64_t seed = 0;
  synth::SynthConfig synth;
  int n_episodes = 5;
  WindowGrid grid;           // h_s and m_s are set per cell
  std::string test_episode;  // empty: the last episode of the cohort
  trainer::TrainConfig trainer = default_study_trainer();
  std::optional<double> baseline_lr;  // defaults to trainer.inner_lr
  int repeats = 1;                    // seeded runs per model and cell
  NetConfig nets;
  EvalConfig eval;
  std::vector<Cell> cells;  // empty: every (h, m) of the eval grid

  /// Throws invalid_config on any bad value, including cells off the grid.
  void validate() const;
  std::vector<Cell> active_cells() const;
  /// Position of the cell in the full eval grid; seeds derive from it.
  int cell_index(const Cell& c) const;

  nlohmann::json to_json() const;
  static StudyConfig from_json(const nlohmann::json& j);
};

StudyConfig load_config(const std::filesystem::path& file);

/// Applies `section.key=value` overrides; values are parsed as JSON when
/// possible and taken as strings otherwise.
nlohmann::json apply_overrides(nlohmann::json config, const std::vector<std::string>& overrides);

/// Parses "h=10,m=5" into a cell.
Cell parse_cell(const std::string& spec);

std::string cell_dir_name(const Cell& c);
std::optional<Cell> parse_cell_dir_name(const std::string& name);

/// 64-bit FNV-1a, printed as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);
std::string file_checksum(const std::filesystem::path& file);

inline const std::vector<std::string> kModelNames{"lstm", "resnet", "meta"};

nets::MainNetwork make_main(const StudyConfig& cfg, nets::MainArch arch, std::size_t n_channels,
                            Eigen::Index x_cols, std::uint64_t seed);

/// Seed of repeat `r` of a cell.
std::uint64_t run_seed(const StudyConfig& cfg, const Cell& c, int r);

/// Trains one model of a cell and writes it under `dir`: `params.bin`,
/// `arch.json` and `history.csv` for baselines; `main/`, `meta/` and
/// `history.csv` for the meta model. Throws non_finite on divergence.
void train_model(const StudyConfig& cfg, const std::string& model, const SplitDataset& train,
                 std::uint64_t seed, const std::filesystem::path& dir);

/// Reads the trained main network of a model directory written by train_model.
nets::MainNetwork load_trained_main(const std::filesystem::path& dir);

struct EvaluateOptions {
  EvalConfig eval;
  double stride_s = 0.5;
};

/// Rebuilds every result file from a checkpoints directory laid out as
/// `<cell>/<model>/r<k>/` and a data directory laid out as
/// `<cell>/{test,test_episode}/`. Missing checkpoints are reported, not fatal.
/// Returns the diagnostics for missing cells.
std::vector<std::string> evaluate(const std::filesystem::path& checkpoints,
                                  const std::filesystem::path& data,
                                  const std::filesystem::path& out, const EvaluateOptions& opts);

/// Failure of one stage of a study, carrying the code of its cause.
class StageError : public Error {
 public:
  StageError(const std::string& stage, const Error& cause)
      : Error(cause.code(), "stage '" + stage + "': " + cause.what()), stage_(stage) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

/// Runs generate, split, train and evaluate for every active cell under
/// `run_dir` and writes `config.json` and `manifest.json` there.
void run_study(const StudyConfig& cfg, const std::filesystem::path& run_dir);

/// `<root>/<UTC timestamp>-<config hash>` where root is the environment
/// variable METAICTAL_RUN_ROOT or "runs".
std::filesystem::path default_run_dir(const StudyConfig& cfg);

}  // namespace metaictal::study
