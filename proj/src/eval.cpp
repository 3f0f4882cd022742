#include "metaictal/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "metaictal/episode_io.hpp"
#include "metaictal/trainer.hpp"

namespace metaictal::eval {

namespace {

constexpr double kTol = 1e-9;

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string opt_cell(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

}  // namespace

std::string to_string(IndicatorKind kind) {
  return kind == IndicatorKind::probability ? "probability" : "variance";
}

void IndicatorTrace::validate() const {
  if (times_s.size() != values.size()) throw Error(Errc::invalid_config, "trace length mismatch");
  for (std::size_t i = 1; i < times_s.size(); ++i) {
    if (!(times_s[i] > times_s[i - 1])) {
      throw Error(Errc::invalid_config, "trace times must be strictly increasing");
    }
  }
  for (double v : values) {
    const bool ok = kind == IndicatorKind::probability ? (v >= 0.0 && v <= 1.0) : v >= 0.0;
    if (!ok) throw Error(Errc::invalid_config, "trace value out of range for its kind");
  }
}

IndicatorTrace probability_indicator(const nets::MainNetwork& net, const Episode& ep, double h_s,
                                     double stride_s) {
  if (!(h_s > 0)) throw Error(Errc::non_positive_window, "history length must be positive");
  if (h_s > ep.duration_s + kTol) {
    throw Error(Errc::out_of_range, "episode " + ep.id + " is shorter than one history window");
  }
  const auto n = window_sample_count(ep.duration_s, h_s, 0.0, stride_s);
  IndicatorTrace tr;
  tr.kind = IndicatorKind::probability;
  tr.smoothing_window_s = h_s;
  tr.times_s.reserve(n);
  tr.values.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double start = static_cast<double>(k) * stride_s;
    const WindowPair w = slice_window(ep, start, h_s, 0.0);
    tr.times_s.push_back(start + h_s);
    tr.values.push_back(net.forward(w.x));
  }
  return tr;
}

IndicatorTrace ensemble_indicator(const std::vector<IndicatorTrace>& traces) {
  if (traces.empty()) throw Error(Errc::empty_trace, "no traces to ensemble");
  IndicatorTrace out = traces.front();
  for (std::size_t i = 1; i < traces.size(); ++i) {
    if (traces[i].times_s != out.times_s || traces[i].kind != out.kind) {
      throw Error(Errc::grid_mismatch, "traces do not share a time grid");
    }
    for (std::size_t j = 0; j < out.values.size(); ++j) out.values[j] += traces[i].values[j];
  }
  const double n = static_cast<double>(traces.size());
  for (auto& v : out.values) v /= n;
  return out;
}

IndicatorTrace variance_indicator(const Episode& ep, double window_s, double stride_s,
                                  std::optional<double> start_s) {
  if (!(window_s > 0) || !(stride_s > 0)) {
    throw Error(Errc::non_positive_window, "variance window and stride must be positive");
  }
  const double start = start_s.value_or(window_s);
  if (start < window_s - kTol) {
    throw Error(Errc::out_of_range, "variance trace cannot start before one full window");
  }
  const double fs = ep.sample_rate_hz;
  const auto len = static_cast<Eigen::Index>(to_samples(window_s, fs));
  if (len < 2) throw Error(Errc::non_positive_window, "variance window needs two samples");
  IndicatorTrace tr;
  tr.kind = IndicatorKind::variance;
  tr.smoothing_window_s = window_s;
  const auto rows = ep.channels.rows();
  for (std::size_t k = 0;; ++k) {
    const double t = start + static_cast<double>(k) * stride_s;
    if (t > ep.duration_s + kTol) break;
    const auto end = static_cast<Eigen::Index>(to_samples(t, fs));
    if (end > ep.channels.cols()) break;
    const auto block = ep.channels.middleCols(end - len, len);
    double acc = 0.0;
    for (Eigen::Index c = 0; c < rows; ++c) {
      const double mean = block.row(c).mean();
      acc += (block.row(c).array() - mean).square().sum() / static_cast<double>(len - 1);
    }
    tr.times_s.push_back(t);
    tr.values.push_back(acc / static_cast<double>(rows));
  }
  return tr;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw Error(Errc::empty_trace, "quantile of an empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw Error(Errc::invalid_config, "quantile must be in [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

namespace {

double baseline_end(const IndicatorTrace& trace, double onset_s) {
  const double t0 = trace.times_s.front();
  if (!(onset_s > t0)) {
    throw Error(Errc::out_of_range, "trace must start before the onset");
  }
  return t0 + 0.25 * (onset_s - t0);
}

}  // namespace

std::vector<double> baseline_values(const IndicatorTrace& trace, double onset_s) {
  if (trace.size() == 0) throw Error(Errc::empty_trace, "empty trace");
  const double end = baseline_end(trace, onset_s);
  std::vector<double> out;
  for (std::size_t i = 0; i < trace.size() && trace.times_s[i] <= end + kTol; ++i) {
    out.push_back(trace.values[i]);
  }
  return out;
}

double baseline_threshold(const IndicatorTrace& trace, double q, double onset_s) {
  if (!(q > 0.0 && q < 1.0)) throw Error(Errc::invalid_config, "threshold quantile must be in (0, 1)");
  return quantile(baseline_values(trace, onset_s), q);
}

std::optional<double> first_crossing_at(const IndicatorTrace& trace, double threshold,
                                        double from_s, double until_s) {
  if (trace.size() == 0) throw Error(Errc::empty_trace, "empty trace");
  std::optional<double> crossing;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const double t = trace.times_s[i];
    if (t < from_s - kTol) continue;
    if (t > until_s + kTol) break;
    if (trace.values[i] >= threshold) {
      if (!crossing) crossing = t;
    } else {
      crossing.reset();
    }
  }
  return crossing;
}

std::optional<double> first_crossing(const IndicatorTrace& trace, double q, double onset_s) {
  const double thr = baseline_threshold(trace, q, onset_s);
  const double end = baseline_end(trace, onset_s);
  return first_crossing_at(trace, thr, end + kTol * 10, trace.times_s.back());
}

std::vector<LeadTimeRow> lead_time_comparison(const IndicatorTrace& prob, const IndicatorTrace& var,
                                              double onset_s, const std::vector<double>& quantiles) {
  std::vector<LeadTimeRow> rows;
  for (double q : quantiles) {
    LeadTimeRow r;
    r.quantile = q;
    if (auto c = first_crossing(prob, q, onset_s)) r.lead_prob_s = onset_s - *c;
    if (auto c = first_crossing(var, q, onset_s)) r.lead_var_s = onset_s - *c;
    r.advantage_s = r.lead_prob_s.value_or(onset_s - prob.times_s.back()) -
                    r.lead_var_s.value_or(onset_s - var.times_s.back());
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Accuracy grid

std::string AccuracyGrid::cell_key(double h_s, double m_s, const std::string& model) {
  return "h" + format_double(h_s) + "_m" + format_double(m_s) + "_" + model;
}

std::optional<double> AccuracyGrid::at(double h_s, double m_s, const std::string& model) const {
  auto it = cells.find(cell_key(h_s, m_s, model));
  if (it == cells.end()) return std::nullopt;
  return it->second;
}

std::string AccuracyGrid::to_csv() const {
  std::ostringstream out;
  out << "m_s";
  for (double h : h_values) {
    for (const auto& model : models) out << ",h" << format_double(h) << '_' << model;
  }
  out << '\n';
  for (double m : m_values) {
    out << format_double(m);
    for (double h : h_values) {
      for (const auto& model : models) out << ',' << opt_cell(at(h, m, model));
    }
    out << '\n';
  }
  return out.str();
}

AccuracyGrid AccuracyGrid::from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw Error(Errc::format_error, "empty accuracy grid");
  const auto header = split_csv_line(line);
  if (header.empty() || header[0] != "m_s") throw Error(Errc::format_error, "bad grid header");
  AccuracyGrid g;
  g.h_values.clear();
  g.m_values.clear();
  g.models.clear();
  std::vector<std::pair<double, std::string>> columns;
  for (std::size_t i = 1; i < header.size(); ++i) {
    const auto& col = header[i];
    const auto us = col.find('_');
    if (col.size() < 2 || col[0] != 'h' || us == std::string::npos) {
      throw Error(Errc::format_error, "bad grid column '" + col + "'");
    }
    const double h = parse_double(col.substr(1, us - 1));
    const std::string model = col.substr(us + 1);
    if (std::find(g.h_values.begin(), g.h_values.end(), h) == g.h_values.end()) g.h_values.push_back(h);
    if (std::find(g.models.begin(), g.models.end(), model) == g.models.end()) g.models.push_back(model);
    columns.emplace_back(h, model);
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != header.size()) throw Error(Errc::format_error, "bad grid row: " + line);
    const double m = parse_double(f[0]);
    g.m_values.push_back(m);
    for (std::size_t i = 1; i < f.size(); ++i) {
      if (!f[i].empty()) g.cells[cell_key(columns[i - 1].first, m, columns[i - 1].second)] = parse_double(f[i]);
    }
  }
  return g;
}

AccuracyGrid accuracy_grid(const std::vector<CellModels>& cells) {
  AccuracyGrid g;
  for (const auto& cell : cells) {
    if (!cell.test) throw Error(Errc::empty_set, "cell without test data");
    const auto windows = trainer::labeled_noisy(*cell.test);
    for (const auto& [name, net] : cell.models) {
      if (!net) {
        g.missing.push_back("missing_checkpoint: " + AccuracyGrid::cell_key(cell.h_s, cell.m_s, name));
        continue;
      }
      g.cells[AccuracyGrid::cell_key(cell.h_s, cell.m_s, name)] =
          trainer::evaluate_accuracy(*net, windows);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// CSV output

std::string trace_csv(const IndicatorTrace& trace) {
  std::ostringstream out;
  out << "t_s,value\n";
  for (std::size_t i = 0; i < trace.size(); ++i) {
    out << format_double(trace.times_s[i]) << ',' << format_double(trace.values[i]) << '\n';
  }
  return out.str();
}

IndicatorTrace read_trace_csv(const std::string& text, IndicatorKind kind) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (line != "t_s,value") throw Error(Errc::format_error, "bad trace header");
  IndicatorTrace tr;
  tr.kind = kind;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 2) throw Error(Errc::format_error, "bad trace row: " + line);
    tr.times_s.push_back(parse_double(f[0]));
    tr.values.push_back(parse_double(f[1]));
  }
  return tr;
}

std::string onset_centered_csv(const IndicatorTrace& trace, double onset_s) {
  constexpr int kRows = 120;
  constexpr double kStep = 0.5;
  std::ostringstream out;
  out << "t_rel_s,t_s,value\n";
  std::size_t i = 0;
  for (int r = 0; r < kRows; ++r) {
    const double rel = (r - kRows / 2) * kStep;
    const double t = onset_s + rel;
    while (i < trace.size() && trace.times_s[i] < t - kTol) ++i;
    if (i == trace.size() || std::abs(trace.times_s[i] - t) > kTol) {
      throw Error(Errc::out_of_range, "trace has no sample at t = " + format_double(t));
    }
    out << format_double(rel) << ',' << format_double(t) << ',' << format_double(trace.values[i])
        << '\n';
  }
  return out.str();
}

std::string leadtime_csv_header() { return "quantile,lead_prob_s,lead_var_s,advantage_s"; }

std::string leadtime_csv_row(const LeadTimeRow& row) {
  return format_double(row.quantile) + ',' + opt_cell(row.lead_prob_s) + ',' +
         opt_cell(row.lead_var_s) + ',' + format_double(row.advantage_s);
}

void write_text(const std::filesystem::path& file, const std::string& text) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  out << text;
  if (!out) throw Error(Errc::io_error, "cannot write " + file.string());
}

std::string read_text(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error(Errc::io_error, "cannot read " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace metaictal::eval
