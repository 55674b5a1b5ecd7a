#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "muslcat/data.hpp"
#include "muslcat/tensor.hpp"

namespace muslcat {

class Model;

// Mann-Whitney: P(random positive outranks random negative), ties count 1/2.
// nullopt when labels hold a single class.
std::optional<double> roc_auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels);

// Average precision: mean over positives of precision at the positive's rank.
// Ranking is descending by score; equal scores keep input order. nullopt when
// there are no positives.
std::optional<double> pr_auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels);

// (n_chunks, n_tags) -> elementwise mean over chunks.
std::vector<double> aggregate_song(const Tensor& chunks);

struct TagMetrics {
  std::string tag;
  std::size_t positives = 0, negatives = 0;
  std::optional<double> roc_auc, pr_auc;  // both empty when the tag is skipped
};

struct MetricsReport {
  std::vector<TagMetrics> tags;
  double macro_roc_auc = 0.0;
  double macro_pr_auc = 0.0;
  std::vector<std::string> skipped_tags;  // single-class in this set
  std::size_t songs = 0;
  std::size_t chunks = 0;
  std::vector<std::string> unreadable;

  std::size_t included() const { return tags.size() - skipped_tags.size(); }
};

// Per-song scores and labels, rows aligned with tag_names.
MetricsReport compute_metrics(const std::vector<std::vector<double>>& scores,
                              const std::vector<std::vector<std::uint8_t>>& labels,
                              const std::vector<std::string>& tag_names);

struct SongPredictions {
  std::vector<std::string> song_ids;
  std::vector<std::vector<double>> scores;
  std::vector<std::vector<std::uint8_t>> labels;
  std::size_t chunks = 0;
};

// Splits every clip into consecutive non-overlapping 3 s chunks, runs the model
// in eval mode, and averages chunk probabilities per song (clips sharing a song
// id pool their chunks). Songs are returned in first-appearance order.
SongPredictions predict_songs(Model& model, const ClipSet& clips, std::size_t batch = 16);

// Loads the split's audio (skipping unreadable files, aborting past 10%), then
// predict_songs and compute_metrics.
MetricsReport evaluate(Model& model, const Manifest& manifest, const std::string& split, std::size_t batch = 16);

nlohmann::json report_to_json(const MetricsReport& r);
std::string report_to_csv(const MetricsReport& r);

}  // namespace muslcat
