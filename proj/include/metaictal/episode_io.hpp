#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "metaictal/core.hpp"

namespace metaictal {

/// Writes `<dir>/<id>.csv` (header `t,ch01,...`) and `<dir>/<id>.meta.json`.
/// Values are printed with round-trip precision.
void write_episode(const Episode& ep, const std::filesystem::path& dir);

/// Reads the episode whose sidecar is `<dir>/<id>.meta.json`.
Episode read_episode(const std::filesystem::path& dir, const std::string& id);

/// Reads every episode found in a directory, ordered by id.
std::vector<Episode> read_episodes(const std::filesystem::path& dir);

/// Formats a double so that parsing it back yields the same bits.
std::string format_double(double v);

/// Parses a decimal double, throwing format_error on junk.
double parse_double(std::string_view s);

}  // namespace metaictal
