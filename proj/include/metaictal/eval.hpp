#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "metaictal/core.hpp"
#include "metaictal/nets.hpp"

namespace metaictal::eval {

enum class IndicatorKind { probability, variance };

std::string to_string(IndicatorKind kind);

struct IndicatorTrace {
  std::vector<double> times_s;
  std::vector<double> values;
  IndicatorKind kind = IndicatorKind::probability;
  double smoothing_window_s = 0.0;

  std::size_t size() const { return times_s.size(); }
  /// Throws invalid_config when times are not strictly increasing, lengths
  /// differ, or values leave the range allowed by `kind`.
  void validate() const;
};

/// f(window [t - h, t)) stamped at t, for t = h, h + stride, ... up to the
/// end of the episode.
IndicatorTrace probability_indicator(const nets::MainNetwork& net, const Episode& ep, double h_s,
                                     double stride_s);

/// Pointwise mean of traces sharing one time grid.
IndicatorTrace ensemble_indicator(const std::vector<IndicatorTrace>& traces);

/// Channel-averaged sample variance over the trailing window [t - window, t),
/// for t = start, start + stride, ... up to the end of the episode. `start_s`
/// defaults to `window_s`.
IndicatorTrace variance_indicator(const Episode& ep, double window_s = 0.5, double stride_s = 0.5,
                                  std::optional<double> start_s = std::nullopt);

/// Linear-interpolation quantile of a non-empty sample.
double quantile(std::vector<double> values, double q);

/// Times of the trace that fall in the first quarter of [first time, onset].
std::vector<double> baseline_values(const IndicatorTrace& trace, double onset_s);

/// `q`-quantile of the trace's baseline segment.
double baseline_threshold(const IndicatorTrace& trace, double q, double onset_s);

/// Earliest grid time in [from_s, until_s] from which the trace stays at or
/// above `threshold` through `until_s`. Points outside the interval are ignored.
std::optional<double> first_crossing_at(const IndicatorTrace& trace, double threshold,
                                        double from_s, double until_s);

/// Crossing of the `q`-quantile of the baseline segment, searched after the
/// baseline segment: the earliest time from which the trace stays at or above
/// the threshold until its end. Crossings after the onset give negative leads.
std::optional<double> first_crossing(const IndicatorTrace& trace, double q, double onset_s);

struct LeadTimeRow {
  double quantile = 0.0;
  std::optional<double> lead_prob_s;  // empty when the trace ends below threshold
  std::optional<double> lead_var_s;
  /// Difference of leads. A missing crossing counts as a crossing at the end
  /// of its trace.
  double advantage_s = 0.0;
};

std::vector<LeadTimeRow> lead_time_comparison(const IndicatorTrace& prob, const IndicatorTrace& var,
                                              double onset_s, const std::vector<double>& quantiles);

inline const std::vector<double> kDefaultQuantiles{0.8, 0.85, 0.9, 0.95, 0.99};

/// Accuracy table with rows m and column groups (h, model).
struct AccuracyGrid {
  std::vector<double> h_values{10, 20, 30};
  std::vector<double> m_values{5, 10, 15, 20};
  std::vector<std::string> models{"lstm", "resnet", "meta"};
  std::map<std::string, double> cells;  // key from cell_key()
  std::vector<std::string> missing;     // diagnostics for cells without a checkpoint

  static std::string cell_key(double h_s, double m_s, const std::string& model);
  std::optional<double> at(double h_s, double m_s, const std::string& model) const;
  std::string to_csv() const;
  static AccuracyGrid from_csv(const std::string& text);
};

/// Test windows and the trained networks of one (h, m) cell. A null network
/// marks a missing checkpoint.
struct CellModels {
  double h_s = 0.0;
  double m_s = 0.0;
  const SplitDataset* test = nullptr;
  std::map<std::string, const nets::MainNetwork*> models;
};

/// Noisy-zone test accuracy of every model in every cell. Missing networks are
/// recorded in `missing` and leave their cell empty.
AccuracyGrid accuracy_grid(const std::vector<CellModels>& cells);

std::string trace_csv(const IndicatorTrace& trace);
IndicatorTrace read_trace_csv(const std::string& text, IndicatorKind kind);

/// 120 trace samples at 0.5 s spacing, from onset - 30 s to onset + 29.5 s.
std::string onset_centered_csv(const IndicatorTrace& trace, double onset_s);

std::string leadtime_csv_header();
std::string leadtime_csv_row(const LeadTimeRow& row);

void write_text(const std::filesystem::path& file, const std::string& text);
std::string read_text(const std::filesystem::path& file);

}  // namespace metaictal::eval
