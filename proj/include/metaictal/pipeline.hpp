#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "metaictal/core.hpp"

namespace metaictal::pipeline {

struct Normalized {
  std::vector<Episode> episodes;
  std::vector<ChannelStats> stats;
};

/// Per-channel z-scoring with statistics pooled over the `stats_from`
/// episodes. Channels whose std falls below 1e-12 are only centered.
Normalized normalize(const std::vector<Episode>& episodes,
                     const std::vector<std::string>& stats_from);

std::vector<ChannelStats> channel_stats(const std::vector<const Episode*>& episodes);
Episode apply_normalization(const Episode& ep, const std::vector<ChannelStats>& stats);

struct Partition {
  std::vector<LabeledWindow> clean;
  std::vector<LabeledWindow> noisy;
};

/// Splits an episode into noisy windows (horizon end within
/// [onset - halfwidth, onset + halfwidth)) and the nearest clean windows on
/// either side. The t_start grid is anchored so that horizon ends land on
/// onset + k * stride. Both lists are sorted by t_start.
Partition partition(const Episode& ep, const WindowGrid& grid);

/// Ground-truth label of a window whose horizon ends at `horizon_end_s`: 1 when
/// the horizon reaches past the onset owning the enclosing noisy zone.
int horizon_label(double horizon_end_s, const std::vector<double>& onsets,
                  double noisy_halfwidth_s);

/// Ground truth for a noisy window from the onset metadata kept in `ds`.
int noisy_ground_truth(const SplitDataset& ds, const LabeledWindow& w);

struct TrainTest {
  SplitDataset train;
  SplitDataset test;
  Episode test_episode;  // normalized with the training statistics
};

TrainTest split_train_test(const std::vector<Episode>& cohort, const std::string& test_episode_id,
                           const WindowGrid& grid);

inline constexpr int kDatasetFormatVersion = 1;

void save_dataset(const SplitDataset& ds, const std::filesystem::path& dir);
SplitDataset load_dataset(const std::filesystem::path& dir);

}  // namespace metaictal::pipeline
