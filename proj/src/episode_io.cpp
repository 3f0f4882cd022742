#include "metaictal/episode_io.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace metaictal {

namespace fs = std::filesystem;
using nlohmann::json;

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r' || s.back() == '\t')) s.remove_suffix(1);
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw Error(Errc::format_error, "not a number: '" + std::string(s) + "'");
  }
  return v;
}

namespace {

std::string channel_name(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "ch%02zu", i + 1);
  return buf;
}

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace

void write_episode(const Episode& ep, const fs::path& dir) {
  ep.validate();
  fs::create_directories(dir);
  std::ofstream csv(dir / (ep.id + ".csv"));
  if (!csv) throw Error(Errc::io_error, "cannot write " + (dir / (ep.id + ".csv")).string());
  csv << 't';
  for (std::size_t c = 0; c < ep.n_channels(); ++c) csv << ',' << channel_name(c);
  csv << '\n';
  for (Eigen::Index s = 0; s < ep.channels.cols(); ++s) {
    csv << format_double(static_cast<double>(s) / ep.sample_rate_hz);
    for (Eigen::Index c = 0; c < ep.channels.rows(); ++c) {
      csv << ',' << format_double(ep.channels(c, s));
    }
    csv << '\n';
  }
  if (!csv) throw Error(Errc::io_error, "write failed for episode " + ep.id);

  json meta = {{"id", ep.id},
               {"sample_rate_hz", ep.sample_rate_hz},
               {"duration_s", ep.duration_s},
               {"onset_times_s", ep.onset_times_s}};
  std::ofstream side(dir / (ep.id + ".meta.json"));
  side << meta.dump(2) << '\n';
  if (!side) throw Error(Errc::io_error, "write failed for sidecar of " + ep.id);
}

Episode read_episode(const fs::path& dir, const std::string& id) {
  Episode ep;
  {
    std::ifstream side(dir / (id + ".meta.json"));
    if (!side) throw Error(Errc::io_error, "missing sidecar for episode " + id);
    json meta;
    try {
      side >> meta;
      ep.id = meta.at("id").get<std::string>();
      ep.sample_rate_hz = meta.at("sample_rate_hz").get<double>();
      ep.duration_s = meta.at("duration_s").get<double>();
      ep.onset_times_s = meta.at("onset_times_s").get<std::vector<double>>();
    } catch (const json::exception& e) {
      throw Error(Errc::format_error, "bad sidecar for " + id + ": " + e.what());
    }
  }

  std::ifstream csv(dir / (id + ".csv"));
  if (!csv) throw Error(Errc::io_error, "missing CSV for episode " + id);
  std::string line;
  if (!std::getline(csv, line)) throw Error(Errc::format_error, "empty CSV for " + id);
  const auto header = split_csv(line);
  if (header.size() < 2 || header[0] != "t") {
    throw Error(Errc::format_error, "CSV header must start with 't' and list channels");
  }
  const auto n_channels = header.size() - 1;
  std::vector<double> flat;
  std::size_t n_rows = 0;
  while (std::getline(csv, line)) {
    if (line.empty() || line == "\r") continue;
    const auto fields = split_csv(line);
    if (fields.size() != header.size()) {
      throw Error(Errc::format_error, "row " + std::to_string(n_rows + 1) + " of " + id +
                                          " has " + std::to_string(fields.size()) + " fields");
    }
    for (std::size_t c = 1; c < fields.size(); ++c) flat.push_back(parse_double(fields[c]));
    ++n_rows;
  }
  ep.channels.resize(static_cast<Eigen::Index>(n_channels), static_cast<Eigen::Index>(n_rows));
  for (std::size_t s = 0; s < n_rows; ++s) {
    for (std::size_t c = 0; c < n_channels; ++c) {
      ep.channels(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(s)) =
          flat[s * n_channels + c];
    }
  }
  ep.validate();
  return ep;
}

std::vector<Episode> read_episodes(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(Errc::io_error, "not a directory: " + dir.string());
  std::vector<std::string> ids;
  const std::string suffix = ".meta.json";
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (name.size() > suffix.size() && name.ends_with(suffix)) {
      ids.push_back(name.substr(0, name.size() - suffix.size()));
    }
  }
  std::sort(ids.begin(), ids.end());
  std::vector<Episode> out;
  for (const auto& id : ids) out.push_back(read_episode(dir, id));
  return out;
}

}  // namespace metaictal
