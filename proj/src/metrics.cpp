#include "muslcat/metrics.hpp"

#include <algorithm>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include "muslcat/errors.hpp"
#include "muslcat/model.hpp"

namespace muslcat {

namespace {

void check_sizes(const std::vector<double>& s, const std::vector<std::uint8_t>& l, const char* who) {
  if (s.size() != l.size())
    throw std::invalid_argument(std::string(who) + ": " + std::to_string(s.size()) + " scores but " +
                                std::to_string(l.size()) + " labels");
  for (auto v : l)
    if (v > 1) throw std::invalid_argument(std::string(who) + ": labels must be 0 or 1");
}

}  // namespace

std::optional<double> roc_auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
  check_sizes(scores, labels, "roc_auc");
  const std::size_t n = scores.size();
  const std::size_t pos = std::size_t(std::count(labels.begin(), labels.end(), 1));
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) return std::nullopt;

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Average 1-based ranks over tie groups; sums stay integral when doubled.
  long double rank_sum2 = 0.0L;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
    const std::size_t twice_avg = (i + 1) + j;  // 2 * mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (labels[idx[k]]) rank_sum2 += twice_avg;
    i = j;
  }
  const long double u = rank_sum2 / 2.0L - (long double)pos * (pos + 1) / 2.0L;
  return double(u / ((long double)pos * neg));
}

std::optional<double> pr_auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
  check_sizes(scores, labels, "pr_auc");
  const std::size_t pos = std::size_t(std::count(labels.begin(), labels.end(), 1));
  if (pos == 0) return std::nullopt;
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  long double acc = 0.0L;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (!labels[idx[k]]) continue;
    ++tp;
    acc += (long double)tp / (k + 1);
  }
  return double(acc / pos);
}

std::vector<double> aggregate_song(const Tensor& chunks) {
  if (chunks.rank() != 2) throw std::invalid_argument("aggregate_song: expected (n_chunks, n_tags), got " + shape_str(chunks.shape()));
  const std::size_t n = chunks.dim(0), t = chunks.dim(1);
  if (n == 0) throw std::invalid_argument("aggregate_song: no chunks");
  std::vector<double> out(t, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < t; ++j) out[j] += chunks[i * t + j];
  for (double& v : out) v /= double(n);
  return out;
}

MetricsReport compute_metrics(const std::vector<std::vector<double>>& scores,
                              const std::vector<std::vector<std::uint8_t>>& labels,
                              const std::vector<std::string>& tag_names) {
  if (scores.size() != labels.size()) throw std::invalid_argument("compute_metrics: score/label row mismatch");
  MetricsReport r;
  r.songs = scores.size();
  const std::size_t T = tag_names.size();
  double sum_roc = 0.0, sum_pr = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<double> s;
    std::vector<std::uint8_t> l;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i].size() != T || labels[i].size() != T)
        throw std::invalid_argument("compute_metrics: row " + std::to_string(i) + " width != " + std::to_string(T));
      s.push_back(scores[i][t]);
      l.push_back(labels[i][t]);
    }
    TagMetrics m;
    m.tag = tag_names[t];
    m.positives = std::size_t(std::count(l.begin(), l.end(), 1));
    m.negatives = l.size() - m.positives;
    if (m.positives && m.negatives) {
      m.roc_auc = roc_auc(s, l);
      m.pr_auc = pr_auc(s, l);
      sum_roc += *m.roc_auc;
      sum_pr += *m.pr_auc;
    } else {
      r.skipped_tags.push_back(m.tag);
    }
    r.tags.push_back(std::move(m));
  }
  if (r.included() == 0) throw ValidationError("no tag has both positive and negative songs; metrics undefined");
  r.macro_roc_auc = sum_roc / double(r.included());
  r.macro_pr_auc = sum_pr / double(r.included());
  return r;
}

SongPredictions predict_songs(Model& model, const ClipSet& clips, std::size_t batch) {
  if (batch == 0) throw std::invalid_argument("predict_songs: batch must be positive");
  const std::size_t L = model.config().input_length;
  const std::size_t T = model.config().n_tags;

  struct Job {
    std::size_t clip, offset;
  };
  std::vector<Job> jobs;
  for (std::size_t c = 0; c < clips.audio.size(); ++c) {
    if (clips.records[c].tags.size() != T)
      throw ValidationError("clip " + clips.records[c].path + " has " + std::to_string(clips.records[c].tags.size()) +
                            " tags, model predicts " + std::to_string(T));
    const std::size_t n = eval_chunk_count(clips.audio[c].samples.size(), L);
    for (std::size_t k = 0; k < n; ++k) jobs.push_back({c, k * L});
  }

  // Chunk probabilities, row per job.
  std::vector<double> probs(jobs.size() * T);
  for (std::size_t start = 0; start < jobs.size(); start += batch) {
    const std::size_t b = std::min(batch, jobs.size() - start);
    Tensor x({b, 1, L});
    for (std::size_t i = 0; i < b; ++i)
      copy_window(clips.audio[jobs[start + i].clip], jobs[start + i].offset, L, x.data() + i * L);
    const Tensor p = model_forward(model, x);
    std::copy(p.data(), p.data() + b * T, probs.begin() + std::ptrdiff_t(start * T));
  }

  SongPredictions out;
  out.chunks = jobs.size();
  std::map<std::string, std::size_t> song_row;
  std::vector<std::vector<std::size_t>> rows_of_song;
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    const ClipRecord& rec = clips.records[jobs[j].clip];
    auto [it, fresh] = song_row.emplace(rec.song_id, out.song_ids.size());
    if (fresh) {
      out.song_ids.push_back(rec.song_id);
      out.labels.push_back(rec.tags);
      rows_of_song.emplace_back();
    } else if (out.labels[it->second] != rec.tags) {
      throw ValidationError("song '" + rec.song_id + "' has clips with different tag vectors");
    }
    rows_of_song[it->second].push_back(j);
  }
  for (const auto& rows : rows_of_song) {
    Tensor m({rows.size(), T});
    for (std::size_t i = 0; i < rows.size(); ++i)
      std::copy_n(probs.begin() + std::ptrdiff_t(rows[i] * T), T, m.data() + i * T);
    out.scores.push_back(aggregate_song(m));
  }
  return out;
}

MetricsReport evaluate(Model& model, const Manifest& manifest, const std::string& split, std::size_t batch) {
  const auto records = manifest.split(split);
  if (records.empty()) throw ValidationError("manifest has no records in split '" + split + "'");
  if (manifest.tags.size() != model.config().n_tags)
    throw ValidationError("manifest declares " + std::to_string(manifest.tags.size()) + " tags, model predicts " +
                          std::to_string(model.config().n_tags));
  const ClipSet clips = load_clips(records, /*strict=*/false);
  const SongPredictions p = predict_songs(model, clips, batch);
  MetricsReport r = compute_metrics(p.scores, p.labels, manifest.tags);
  r.chunks = p.chunks;
  r.unreadable = clips.failures;
  return r;
}

nlohmann::json report_to_json(const MetricsReport& r) {
  nlohmann::json tags = nlohmann::json::array();
  for (const auto& t : r.tags) {
    nlohmann::json j = {{"tag", t.tag}, {"positives", t.positives}, {"negatives", t.negatives}};
    j["roc_auc"] = t.roc_auc ? nlohmann::json(*t.roc_auc) : nlohmann::json(nullptr);
    j["pr_auc"] = t.pr_auc ? nlohmann::json(*t.pr_auc) : nlohmann::json(nullptr);
    tags.push_back(j);
  }
  return {{"macro_roc_auc", r.macro_roc_auc}, {"macro_pr_auc", r.macro_pr_auc}, {"songs", r.songs},
          {"chunks", r.chunks},               {"skipped_tags", r.skipped_tags}, {"unreadable", r.unreadable},
          {"tags", tags}};
}

std::string report_to_csv(const MetricsReport& r) {
  std::ostringstream os;
  os << std::setprecision(10) << "tag,positives,negatives,roc_auc,pr_auc\n";
  for (const auto& t : r.tags) {
    os << t.tag << "," << t.positives << "," << t.negatives << ",";
    if (t.roc_auc) os << *t.roc_auc;
    os << ",";
    if (t.pr_auc) os << *t.pr_auc;
    os << "\n";
  }
  return os.str();
}

}  // namespace muslcat
