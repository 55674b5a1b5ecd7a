#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "muslcat/audio.hpp"
#include "muslcat/data.hpp"
#include "muslcat/errors.hpp"
#include "muslcat/metrics.hpp"
#include "muslcat/model.hpp"
#include "test_util.hpp"

using namespace muslcat;
namespace fs = std::filesystem;

namespace {

using Labels = std::vector<std::uint8_t>;

// Pairwise definition: P(score_pos > score_neg) with ties counted half.
double brute_roc(const std::vector<double>& s, const Labels& l) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (l[i] == 1 && l[j] == 0) {
        pairs += 1.0;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return wins / pairs;
}

// Precision at each positive's rank. Tied scores are ordered by input
// position, so rank = items strictly above + earlier ties.
double brute_ap(const std::vector<double>& s, const Labels& l) {
  double acc = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!l[i]) continue;
    ++pos;
    std::size_t rank = 1, tp = 1;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (j == i) continue;
      if (s[j] > s[i] || (s[j] == s[i] && j < i)) {
        ++rank;
        tp += l[j];
      }
    }
    acc += double(tp) / double(rank);
  }
  return acc / double(pos);
}

}  // namespace

TEST(RocAuc, WorkedExamples) {
  EXPECT_DOUBLE_EQ(*roc_auc({0.9, 0.8, 0.3, 0.2}, {1, 1, 0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(*roc_auc({0.9, 0.8, 0.3, 0.2}, {1, 0, 1, 0}), 0.75);
  EXPECT_DOUBLE_EQ(*roc_auc({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}), 0.5);
  EXPECT_DOUBLE_EQ(*roc_auc({0.9, 0.8, 0.3, 0.2}, {0, 0, 1, 1}), 0.0);
  EXPECT_FALSE(roc_auc({0.1, 0.2}, {1, 1}).has_value());
  EXPECT_FALSE(roc_auc({0.1, 0.2}, {0, 0}).has_value());
  EXPECT_THROW(roc_auc({0.1}, {1, 0}), std::invalid_argument);
}

TEST(PrAuc, WorkedExamples) {
  EXPECT_DOUBLE_EQ(*pr_auc({0.9, 0.1}, {1, 0}), 1.0);
  EXPECT_DOUBLE_EQ(*pr_auc({0.9, 0.1}, {0, 1}), 0.5);
  EXPECT_DOUBLE_EQ(*pr_auc({0.9, 0.1}, {1, 1}), 1.0);
  EXPECT_FALSE(pr_auc({0.9, 0.1}, {0, 0}).has_value());
}

TEST(RankingMetrics, MatchBruteForceWithTies) {
  Rng rng(2024);
  for (int inst = 0; inst < 200; ++inst) {
    const std::size_t n = 2 + rng() % 60;
    const bool coarse = inst % 2 == 0;  // half the instances draw from 5 levels: many ties
    std::vector<double> s(n);
    Labels l(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = coarse ? double(rng() % 5) / 4.0 : std::uniform_real_distribution<double>(0, 1)(rng);
      l[i] = std::uint8_t(rng() % 2);
    }
    l[0] = 1;
    l[1] = 0;
    EXPECT_NEAR(*roc_auc(s, l), brute_roc(s, l), 1e-12) << "instance " << inst;
    EXPECT_NEAR(*pr_auc(s, l), brute_ap(s, l), 1e-12) << "instance " << inst;
  }
}

TEST(RankingMetrics, InvariantUnderMonotoneTransformAndComplement) {
  Rng rng(77);
  std::uniform_real_distribution<double> u(-2, 2);
  for (int inst = 0; inst < 50; ++inst) {
    const std::size_t n = 40;
    std::vector<double> s(n), t(n);
    Labels l(n), flip(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = u(rng);
      t[i] = std::exp(3.0 * s[i]) + 7.0;
      l[i] = std::uint8_t(i % 3 == 0);
      flip[i] = 1 - l[i];
    }
    EXPECT_EQ(*roc_auc(s, l), *roc_auc(t, l));
    EXPECT_EQ(*pr_auc(s, l), *pr_auc(t, l));
    EXPECT_NEAR(*roc_auc(s, l) + *roc_auc(s, flip), 1.0, 1e-12);
  }
}

TEST(Aggregate, ChunkMean) {
  Tensor one({1, 3}, {0.1, 0.5, 0.9});
  EXPECT_EQ(aggregate_song(one), (std::vector<double>{0.1, 0.5, 0.9}));
  Tensor two({2, 1}, {0.2, 0.4});
  EXPECT_NEAR(aggregate_song(two)[0], 0.3, 1e-15);

  Rng rng(5);
  Tensor many({7, 4});
  for (std::size_t i = 0; i < many.size(); ++i) many[i] = std::uniform_real_distribution<double>(0, 1)(rng);
  const auto m = aggregate_song(many);
  for (std::size_t t = 0; t < 4; ++t) {
    double s = 0.0;
    for (std::size_t i = 0; i < 7; ++i) s += many[i * 4 + t];
    EXPECT_EQ(m[t], s / 7.0);
  }
  EXPECT_THROW(aggregate_song(Tensor({0, 4})), std::invalid_argument);
}

TEST(ComputeMetrics, ThreeSongHandComputation) {
  // Tag a: positives 0.9, 0.1 against negative 0.4 -> ROC 1/2; ranking +,-,+ -> AP (1 + 2/3)/2.
  // Tag b: positives 0.7, 0.6 above negative 0.2 -> ROC 1, AP 1.
  // Tag c: every song positive -> skipped.
  const std::vector<std::vector<double>> scores = {{0.9, 0.2, 0.5}, {0.4, 0.6, 0.5}, {0.1, 0.7, 0.5}};
  const std::vector<Labels> labels = {{1, 0, 1}, {0, 1, 1}, {1, 1, 1}};
  const MetricsReport r = compute_metrics(scores, labels, {"a", "b", "c"});
  EXPECT_DOUBLE_EQ(*r.tags[0].roc_auc, 0.5);
  EXPECT_DOUBLE_EQ(*r.tags[0].pr_auc, 5.0 / 6.0);
  EXPECT_DOUBLE_EQ(*r.tags[1].roc_auc, 1.0);
  EXPECT_DOUBLE_EQ(*r.tags[1].pr_auc, 1.0);
  EXPECT_FALSE(r.tags[2].roc_auc.has_value());
  EXPECT_EQ(r.skipped_tags, (std::vector<std::string>{"c"}));
  EXPECT_EQ(r.included(), 2u);
  EXPECT_DOUBLE_EQ(r.macro_roc_auc, 0.75);
  EXPECT_DOUBLE_EQ(r.macro_pr_auc, 11.0 / 12.0);
  EXPECT_EQ(r.tags[0].positives, 2u);
  EXPECT_EQ(r.tags[0].negatives, 1u);

  const auto j = report_to_json(r);
  EXPECT_TRUE(j["tags"][2]["roc_auc"].is_null());
  EXPECT_EQ(report_to_csv(r).substr(0, 38), "tag,positives,negatives,roc_auc,pr_auc");

  EXPECT_THROW(compute_metrics({{0.1}, {0.2}}, {{1}, {1}}, {"only"}), ValidationError);
}

TEST(PredictSongs, ChunkMeanOfModelOutputsAndDeterministic) {
  Model model(muslcat::testing::tiny("aac", 2));
  const std::size_t L = 2048;
  Rng rng(1);
  std::normal_distribution<float> n(0.0f, 0.1f);
  ClipSet clips;
  // Song a: two clips (10 and 3 chunks, the second with a ragged tail); song b: one short padded clip.
  for (std::size_t len : {10 * L, 3 * L + 700, L / 2}) {
    Waveform w;
    w.samples.resize(len);
    for (float& v : w.samples) v = n(rng);
    clips.audio.push_back(std::move(w));
  }
  clips.records = {{"a1", "a", "test", {1, 0}}, {"a2", "a", "test", {1, 0}}, {"b", "b", "test", {0, 1}}};

  const SongPredictions p = predict_songs(model, clips, 4);
  EXPECT_EQ(p.chunks, 14u);
  ASSERT_EQ(p.song_ids, (std::vector<std::string>{"a", "b"}));

  // Oracle: one chunk at a time, summed in chunk order.
  std::vector<std::vector<double>> expect(2, std::vector<double>(2, 0.0));
  std::vector<std::size_t> count(2, 0);
  for (std::size_t c = 0; c < 3; ++c) {
    const std::size_t song = c < 2 ? 0 : 1;
    for (std::size_t k = 0; k < eval_chunk_count(clips.audio[c].samples.size(), L); ++k) {
      Tensor x({1, 1, L});
      copy_window(clips.audio[c], k * L, L, x.data());
      const Tensor y = model_forward(model, x);
      for (std::size_t t = 0; t < 2; ++t) expect[song][t] += y[t];
      ++count[song];
    }
  }
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t t = 0; t < 2; ++t) EXPECT_NEAR(p.scores[s][t], expect[s][t] / double(count[s]), 1e-12);

  const SongPredictions q = predict_songs(model, clips, 16);
  EXPECT_EQ(p.scores, q.scores) << "batch size changed eval-mode outputs";

  clips.records[1].tags = {0, 1};
  EXPECT_THROW(predict_songs(model, clips, 4), ValidationError);
}

TEST(Evaluate, SkipsUnreadableClipsUnderTenPercent) {
  const fs::path dir = fs::temp_directory_path() / "muslcat_eval";
  fs::remove_all(dir);
  fs::create_directories(dir);
  Manifest m;
  m.tags = {"x", "y"};
  Rng rng(4);
  std::normal_distribution<float> n(0.0f, 0.1f);
  for (int s = 0; s < 10; ++s) {
    std::vector<float> x(4096);
    for (float& v : x) v = n(rng);
    const std::string name = "c" + std::to_string(s) + ".wav";
    write_wav((dir / name).string(), x, 16000);
    m.records.push_back({name, "s" + std::to_string(s), "test", {std::uint8_t(s % 2), std::uint8_t(s < 5)}});
  }
  m.records.push_back({"gone.wav", "s10", "test", {1, 1}});
  write_manifest((dir / "m.jsonl").string(), m);
  const Manifest loaded = load_manifest((dir / "m.jsonl").string());

  Model model(muslcat::testing::tiny("aac", 2));
  const MetricsReport a = evaluate(model, loaded, "test", 8);
  const MetricsReport b = evaluate(model, loaded, "test", 3);
  EXPECT_EQ(a.songs, 10u);
  EXPECT_EQ(a.chunks, 20u);
  ASSERT_EQ(a.unreadable.size(), 1u);
  EXPECT_NE(a.unreadable[0].find("gone.wav"), std::string::npos);
  EXPECT_EQ(a.macro_roc_auc, b.macro_roc_auc);
  EXPECT_EQ(a.macro_pr_auc, b.macro_pr_auc);

  m.records.push_back({"gone2.wav", "s11", "test", {0, 0}});
  write_manifest((dir / "m2.jsonl").string(), m);
  EXPECT_THROW(evaluate(model, load_manifest((dir / "m2.jsonl").string()), "test", 8), ValidationError);
  EXPECT_THROW(evaluate(model, loaded, "valid", 8), ValidationError);
  fs::remove_all(dir);
}
