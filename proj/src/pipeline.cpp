#include "metaictal/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "metaictal/episode_io.hpp"

namespace metaictal::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {
constexpr double kStdGuard = 1e-12;
constexpr double kTimeTol = 1e-6;
}  // namespace

std::vector<ChannelStats> channel_stats(const std::vector<const Episode*>& episodes) {
  if (episodes.empty()) throw Error(Errc::empty_set, "no episodes for normalization statistics");
  const auto n_ch = episodes.front()->channels.rows();
  std::vector<ChannelStats> stats(static_cast<std::size_t>(n_ch));
  for (Eigen::Index c = 0; c < n_ch; ++c) {
    double sum = 0.0;
    double count = 0.0;
    for (const auto* ep : episodes) {
      if (ep->channels.rows() != n_ch) {
        throw Error(Errc::shape_mismatch, "episodes disagree on channel count");
      }
      sum += ep->channels.row(c).sum();
      count += static_cast<double>(ep->channels.cols());
    }
    const double mean = sum / count;
    double sq = 0.0;
    for (const auto* ep : episodes) sq += (ep->channels.row(c).array() - mean).square().sum();
    stats[static_cast<std::size_t>(c)] = {mean, std::sqrt(sq / count)};
  }
  return stats;
}

Episode apply_normalization(const Episode& ep, const std::vector<ChannelStats>& stats) {
  if (stats.size() != ep.n_channels()) {
    throw Error(Errc::shape_mismatch, "normalization stats do not match channels of " + ep.id);
  }
  Episode out = ep;
  for (Eigen::Index c = 0; c < out.channels.rows(); ++c) {
    const auto& st = stats[static_cast<std::size_t>(c)];
    out.channels.row(c).array() -= st.mean;
    if (st.std >= kStdGuard) out.channels.row(c) /= st.std;
  }
  return out;
}

Normalized normalize(const std::vector<Episode>& episodes,
                     const std::vector<std::string>& stats_from) {
  if (stats_from.empty()) throw Error(Errc::invalid_config, "stats_from must not be empty");
  std::vector<const Episode*> sources;
  for (const auto& id : stats_from) {
    const auto it = std::find_if(episodes.begin(), episodes.end(),
                                 [&](const Episode& e) { return e.id == id; });
    if (it == episodes.end()) throw Error(Errc::unknown_episode, id);
    sources.push_back(&*it);
  }
  Normalized out;
  out.stats = channel_stats(sources);
  out.episodes.reserve(episodes.size());
  for (const auto& ep : episodes) out.episodes.push_back(apply_normalization(ep, out.stats));
  return out;
}

int horizon_label(double horizon_end_s, const std::vector<double>& onsets,
                  double noisy_halfwidth_s) {
  for (double onset : onsets) {
    if (horizon_end_s >= onset - noisy_halfwidth_s - kTimeTol &&
        horizon_end_s < onset + noisy_halfwidth_s - kTimeTol) {
      return horizon_end_s > onset + kTimeTol ? 1 : 0;
    }
  }
  throw Error(Errc::out_of_range, "horizon end " + std::to_string(horizon_end_s) +
                                      " s is outside every noisy zone");
}

int noisy_ground_truth(const SplitDataset& ds, const LabeledWindow& w) {
  const auto it = ds.onsets.find(w.pair.episode_id);
  if (it == ds.onsets.end()) throw Error(Errc::unknown_episode, w.pair.episode_id);
  return horizon_label(w.pair.horizon_end_s(), it->second, ds.grid.noisy_halfwidth_s);
}

Partition partition(const Episode& ep, const WindowGrid& grid) {
  if (ep.onset_times_s.empty()) {
    throw Error(Errc::insufficient_data, "episode " + ep.id + " has no onset");
  }
  if (!(grid.stride_s > 0) || !(grid.noisy_halfwidth_s > 0) || grid.clean_per_side < 0) {
    throw Error(Errc::invalid_config, "invalid window grid");
  }
  const double span = grid.h_s + grid.m_s;
  const double hw = grid.noisy_halfwidth_s;
  const double stride = grid.stride_s;

  auto in_any_zone = [&](double r) {
    return std::any_of(ep.onset_times_s.begin(), ep.onset_times_s.end(), [&](double o) {
      return r >= o - hw - kTimeTol && r < o + hw - kTimeTol;
    });
  };
  auto fits = [&](double r) { return r - span >= -kTimeTol && r <= ep.duration_s + kTimeTol; };
  auto make = [&](double r, Purity purity, int label) {
    LabeledWindow w;
    w.pair = slice_window(ep, std::max(0.0, r - span), grid.h_s, grid.m_s);
    w.purity = purity;
    w.label = purity == Purity::clean ? label : 0;
    return w;
  };
  // Windows are keyed by the integer grid index of their horizon end relative
  // to the first onset so that deduplication is exact.
  const double anchor = ep.onset_times_s.front();
  auto key_of = [&](double r) { return std::llround((r - anchor) / stride); };

  std::set<long long> noisy_keys;
  std::vector<LabeledWindow> noisy;
  for (double onset : ep.onset_times_s) {
    const auto steps = static_cast<long long>(std::llround(hw / stride));
    for (long long k = -steps; k < steps; ++k) {
      const double r = onset + static_cast<double>(k) * stride;
      if (!in_any_zone(r) || !fits(r)) continue;
      if (noisy_keys.insert(key_of(r)).second) noisy.push_back(make(r, Purity::noisy, 0));
    }
  }

  std::set<long long> clean_keys;
  std::vector<LabeledWindow> clean;
  for (double onset : ep.onset_times_s) {
    const auto steps = static_cast<long long>(std::llround(hw / stride));
    for (int side : {-1, 1}) {
      int taken = 0;
      // Label 0 windows start at the first grid point before the zone; label 1
      // windows start at the zone's right edge.
      long long k = side < 0 ? -steps - 1 : steps;
      while (taken < grid.clean_per_side) {
        const double r = onset + static_cast<double>(k) * stride;
        if (!fits(r)) {
          throw Error(Errc::insufficient_data,
                      "episode " + ep.id + " cannot supply " +
                          std::to_string(grid.clean_per_side) + " clean windows " +
                          (side < 0 ? "before" : "after") + " onset " + std::to_string(onset));
        }
        if (!in_any_zone(r) && clean_keys.insert(key_of(r)).second) {
          clean.push_back(make(r, Purity::clean, side < 0 ? 0 : 1));
          ++taken;
        }
        k += side;
      }
    }
  }

  auto by_start = [](const LabeledWindow& a, const LabeledWindow& b) {
    return a.pair.t_start_s < b.pair.t_start_s;
  };
  std::sort(clean.begin(), clean.end(), by_start);
  std::sort(noisy.begin(), noisy.end(), by_start);
  return {std::move(clean), std::move(noisy)};
}

TrainTest split_train_test(const std::vector<Episode>& cohort, const std::string& test_episode_id,
                           const WindowGrid& grid) {
  const auto test_it = std::find_if(cohort.begin(), cohort.end(),
                                    [&](const Episode& e) { return e.id == test_episode_id; });
  if (test_it == cohort.end()) throw Error(Errc::unknown_episode, test_episode_id);

  std::vector<std::string> train_ids;
  for (const auto& ep : cohort) {
    if (ep.id != test_episode_id) train_ids.push_back(ep.id);
  }
  if (train_ids.empty()) throw Error(Errc::insufficient_data, "no training episodes left");
  const auto norm = normalize(cohort, train_ids);

  auto base = [&](SplitDataset& ds) {
    ds.normalization_stats = norm.stats;
    ds.grid = grid;
    ds.sample_rate_hz = cohort.front().sample_rate_hz;
    ds.n_channels = cohort.front().n_channels();
  };

  TrainTest out;
  base(out.train);
  base(out.test);
  for (const auto& ep : norm.episodes) {
    auto part = partition(ep, grid);
    SplitDataset& target = ep.id == test_episode_id ? out.test : out.train;
    target.episode_ids.push_back(ep.id);
    target.onsets[ep.id] = ep.onset_times_s;
    std::move(part.clean.begin(), part.clean.end(), std::back_inserter(target.clean));
    std::move(part.noisy.begin(), part.noisy.end(), std::back_inserter(target.noisy));
    if (ep.id == test_episode_id) out.test_episode = ep;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

void write_le(std::ostream& os, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(bytes), 8);
}

double read_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

void write_matrix(std::ostream& os, const Matrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) write_le(os, m(r, c));
  }
}

Matrix read_matrix(const unsigned char*& p, Eigen::Index rows, Eigen::Index cols) {
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      m(r, c) = read_le(p);
      p += 8;
    }
  }
  return m;
}

json grid_to_json(const WindowGrid& g) {
  return {{"h_s", g.h_s},
          {"m_s", g.m_s},
          {"stride_s", g.stride_s},
          {"noisy_halfwidth_s", g.noisy_halfwidth_s},
          {"clean_per_side", g.clean_per_side}};
}

WindowGrid grid_from_json(const json& j) {
  WindowGrid g;
  g.h_s = j.at("h_s").get<double>();
  g.m_s = j.at("m_s").get<double>();
  g.stride_s = j.at("stride_s").get<double>();
  g.noisy_halfwidth_s = j.at("noisy_halfwidth_s").get<double>();
  g.clean_per_side = j.at("clean_per_side").get<int>();
  return g;
}

}  // namespace

void save_dataset(const SplitDataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream csv(dir / "windows.csv");
  std::ofstream bin(dir / "tensors.bin", std::ios::binary);
  if (!csv || !bin) throw Error(Errc::io_error, "cannot write dataset into " + dir.string());

  csv << "episode_id,t_start_s,purity,label,h_s,m_s\n";
  Eigen::Index x_cols = -1;
  Eigen::Index y_cols = -1;
  auto emit = [&](const LabeledWindow& w) {
    if (x_cols < 0) {
      x_cols = w.pair.x.cols();
      y_cols = w.pair.y.cols();
    }
    if (w.pair.x.cols() != x_cols || w.pair.y.cols() != y_cols ||
        static_cast<std::size_t>(w.pair.x.rows()) != ds.n_channels) {
      throw Error(Errc::shape_mismatch, "dataset windows have inconsistent shapes");
    }
    csv << w.pair.episode_id << ',' << format_double(w.pair.t_start_s) << ','
        << (w.purity == Purity::clean ? "clean" : "noisy") << ','
        << (w.purity == Purity::clean ? std::to_string(w.label) : std::string()) << ','
        << format_double(w.pair.h_s) << ',' << format_double(w.pair.m_s) << '\n';
    write_matrix(bin, w.pair.x);
    write_matrix(bin, w.pair.y);
  };
  for (const auto& w : ds.clean) emit(w);
  for (const auto& w : ds.noisy) emit(w);
  if (!csv || !bin) throw Error(Errc::io_error, "write failed in " + dir.string());

  json onsets = json::object();
  for (const auto& [id, t] : ds.onsets) onsets[id] = t;
  json index = {{"format_version", kDatasetFormatVersion},
                {"n_channels", ds.n_channels},
                {"sample_rate_hz", ds.sample_rate_hz},
                {"grid", grid_to_json(ds.grid)},
                {"n_clean", ds.clean.size()},
                {"n_noisy", ds.noisy.size()},
                {"x_cols", std::max<Eigen::Index>(x_cols, 0)},
                {"y_cols", std::max<Eigen::Index>(y_cols, 0)},
                {"layout", "row-major float64 little-endian, per window x then y"},
                {"episode_ids", ds.episode_ids},
                {"onsets", onsets}};
  std::ofstream(dir / "index.json") << index.dump(2) << '\n';

  json stats = json::array();
  for (const auto& s : ds.normalization_stats) stats.push_back({{"mean", s.mean}, {"std", s.std}});
  std::ofstream(dir / "stats.json") << stats.dump(2) << '\n';
}

SplitDataset load_dataset(const fs::path& dir) {
  SplitDataset ds;
  json index;
  json stats;
  {
    std::ifstream in(dir / "index.json");
    std::ifstream sin(dir / "stats.json");
    if (!in || !sin) throw Error(Errc::io_error, "missing index.json or stats.json in " + dir.string());
    try {
      in >> index;
      sin >> stats;
    } catch (const json::exception& e) {
      throw Error(Errc::format_error, std::string("unreadable dataset metadata: ") + e.what());
    }
  }
  std::size_t n_clean = 0;
  std::size_t n_noisy = 0;
  Eigen::Index x_cols = 0;
  Eigen::Index y_cols = 0;
  try {
    const int version = index.at("format_version").get<int>();
    if (version != kDatasetFormatVersion) {
      throw Error(Errc::format_error, "dataset format version " + std::to_string(version) +
                                          " is not supported");
    }
    ds.n_channels = index.at("n_channels").get<std::size_t>();
    ds.sample_rate_hz = index.at("sample_rate_hz").get<double>();
    ds.grid = grid_from_json(index.at("grid"));
    n_clean = index.at("n_clean").get<std::size_t>();
    n_noisy = index.at("n_noisy").get<std::size_t>();
    x_cols = index.at("x_cols").get<Eigen::Index>();
    y_cols = index.at("y_cols").get<Eigen::Index>();
    ds.episode_ids = index.at("episode_ids").get<std::vector<std::string>>();
    for (const auto& [id, t] : index.at("onsets").items()) {
      ds.onsets[id] = t.get<std::vector<double>>();
    }
    for (const auto& s : stats) {
      ds.normalization_stats.push_back({s.at("mean").get<double>(), s.at("std").get<double>()});
    }
  } catch (const json::exception& e) {
    throw Error(Errc::format_error, std::string("bad dataset metadata: ") + e.what());
  }

  const auto rows = static_cast<Eigen::Index>(ds.n_channels);
  const auto per_window = static_cast<std::size_t>(rows * (x_cols + y_cols)) * 8;
  const auto n_total = n_clean + n_noisy;

  std::ifstream bin(dir / "tensors.bin", std::ios::binary);
  if (!bin) throw Error(Errc::io_error, "missing tensors.bin in " + dir.string());
  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(bin)),
                                  std::istreambuf_iterator<char>());
  if (blob.size() != per_window * n_total) {
    throw Error(Errc::format_error, "tensors.bin holds " + std::to_string(blob.size()) +
                                        " bytes, expected " + std::to_string(per_window * n_total));
  }

  std::ifstream csv(dir / "windows.csv");
  if (!csv) throw Error(Errc::io_error, "missing windows.csv in " + dir.string());
  std::string line;
  std::getline(csv, line);
  const unsigned char* p = blob.data();
  std::size_t n_read = 0;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) f.push_back(field);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 6 || n_read >= n_total) {
      throw Error(Errc::format_error, "malformed windows.csv row " + std::to_string(n_read + 1));
    }
    LabeledWindow w;
    w.pair.episode_id = f[0];
    w.pair.t_start_s = parse_double(f[1]);
    if (f[2] == "clean") {
      w.purity = Purity::clean;
      w.label = static_cast<int>(parse_double(f[3]));
    } else if (f[2] == "noisy") {
      w.purity = Purity::noisy;
    } else {
      throw Error(Errc::format_error, "unknown purity '" + f[2] + "'");
    }
    w.pair.h_s = parse_double(f[4]);
    w.pair.m_s = parse_double(f[5]);
    w.pair.x = read_matrix(p, rows, x_cols);
    w.pair.y = read_matrix(p, rows, y_cols);
    (w.purity == Purity::clean ? ds.clean : ds.noisy).push_back(std::move(w));
    ++n_read;
  }
  if (n_read != n_total || ds.clean.size() != n_clean) {
    throw Error(Errc::format_error, "windows.csv lists " + std::to_string(n_read) +
                                        " windows, index expects " + std::to_string(n_total));
  }
  return ds;
}

}  // namespace metaictal::pipeline
