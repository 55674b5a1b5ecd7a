#include "muslcat/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "json.hpp"
#include "muslcat/errors.hpp"

namespace muslcat {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<ClipRecord> Manifest::split(const std::string& name) const {
  if (name == "all") return records;
  std::vector<ClipRecord> out;
  for (const auto& r : records)
    if (r.split == name) out.push_back(r);
  return out;
}

Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest " + path);
  const fs::path dir = fs::path(path).parent_path();
  Manifest m;
  std::map<std::string, std::pair<std::string, std::size_t>> song_split;  // song -> (split, line)
  std::set<std::string> paths;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  auto fail = [&](const std::string& what) -> void {
    throw ValidationError(path + ":" + std::to_string(lineno) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      fail(std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) fail("expected a JSON object");
    if (!header) {
      for (auto it = j.begin(); it != j.end(); ++it)
        if (it.key() != "version" && it.key() != "tags") fail("unknown header field '" + it.key() + "'");
      if (!j.contains("version") || j["version"] != 1) fail("header must declare \"version\": 1");
      if (!j.contains("tags") || !j["tags"].is_array() || j["tags"].empty()) fail("header needs a non-empty tag list");
      for (const auto& t : j["tags"]) {
        if (!t.is_string()) fail("tag names must be strings");
        m.tags.push_back(t.get<std::string>());
      }
      header = true;
      continue;
    }
    for (auto it = j.begin(); it != j.end(); ++it)
      if (it.key() != "path" && it.key() != "song_id" && it.key() != "split" && it.key() != "tags")
        fail("unknown record field '" + it.key() + "'");
    for (const char* k : {"path", "song_id", "split"})
      if (!j.contains(k) || !j[k].is_string()) fail(std::string("record needs string field '") + k + "'");
    ClipRecord r;
    r.song_id = j["song_id"];
    r.split = j["split"];
    if (r.split != "train" && r.split != "valid" && r.split != "test")
      fail("split '" + r.split + "' is not one of train, valid, test");
    const fs::path p = j["path"].get<std::string>();
    r.path = (p.is_absolute() ? p : dir / p).lexically_normal().string();
    if (!j.contains("tags") || !j["tags"].is_array()) fail("record needs a 'tags' array");
    if (j["tags"].size() != m.tags.size())
      fail("tag vector has " + std::to_string(j["tags"].size()) + " entries, vocabulary has " +
           std::to_string(m.tags.size()));
    for (const auto& t : j["tags"]) {
      if (!t.is_number_integer() || (t != 0 && t != 1)) fail("tag entries must be 0 or 1");
      r.tags.push_back(std::uint8_t(t.get<int>()));
    }
    if (!paths.insert(r.path).second) fail("duplicate path " + r.path);
    const auto [it, fresh] = song_split.emplace(r.song_id, std::make_pair(r.split, lineno));
    if (!fresh && it->second.first != r.split)
      fail("song '" + r.song_id + "' is in split " + r.split + " but line " + std::to_string(it->second.second) +
           " put it in " + it->second.first);
    m.records.push_back(std::move(r));
  }
  if (!header) throw ValidationError(path + ": empty manifest (no header line)");
  return m;
}

void write_manifest(const std::string& path, const Manifest& m) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write manifest " + path);
  out << json{{"version", 1}, {"tags", m.tags}}.dump() << "\n";
  for (const auto& r : m.records) {
    json tags = json::array();
    for (auto t : r.tags) tags.push_back(int(t));
    out << json{{"path", r.path}, {"song_id", r.song_id}, {"split", r.split}, {"tags", tags}}.dump() << "\n";
  }
  if (!out) throw ValidationError("short write to " + path);
}

ClipSet load_clips(const std::vector<ClipRecord>& records, bool strict, double max_failure_fraction) {
  ClipSet set;
  for (const auto& r : records) {
    try {
      set.audio.push_back(load_audio_16k(r.path));
      set.records.push_back(r);
    } catch (const ValidationError& e) {
      if (strict) throw;
      set.failures.push_back(e.what());
      std::fprintf(stderr, "warning: skipping %s\n", e.what());
    }
  }
  if (!records.empty() && double(set.failures.size()) > max_failure_fraction * double(records.size()))
    throw ValidationError(std::to_string(set.failures.size()) + " of " + std::to_string(records.size()) +
                          " clips unreadable (limit " + std::to_string(int(max_failure_fraction * 100)) +
                          "%); first: " + set.failures.front());
  return set;
}

double synth_band_frequency(std::size_t tag) { return 200.0 * std::ldexp(1.0, int(tag)); }

std::string synth_dataset(const SynthConfig& cfg) {
  if (cfg.tags == 0) throw ValidationError("synth: need at least one tag");
  if (synth_band_frequency(cfg.tags - 1) >= kModelRate / 2.0)
    throw ValidationError("synth: " + std::to_string(cfg.tags) + " tags puts band " +
                          std::to_string(int(synth_band_frequency(cfg.tags - 1))) +
                          " Hz at or above the 8000 Hz Nyquist limit; use at most 6");
  if (cfg.songs < 3) throw ValidationError("synth: need at least 3 songs for train/valid/test");
  const fs::path root = cfg.out_dir;
  std::error_code ec;
  fs::create_directories(root / "audio", ec);
  if (ec) throw ValidationError("synth: cannot create " + (root / "audio").string() + ": " + ec.message());

  Manifest m;
  for (std::size_t t = 0; t < cfg.tags; ++t) m.tags.push_back("band_" + std::to_string(int(synth_band_frequency(t))) + "hz");

  // Split assignment from its own stream so audio does not depend on it.
  std::vector<std::size_t> order(cfg.songs);
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(derive_seed(cfg.seed, 0));
  std::shuffle(order.begin(), order.end(), split_rng);
  const std::size_t n_valid = std::max<std::size_t>(1, std::size_t(std::lround(0.1 * cfg.songs)));
  const std::size_t n_test = n_valid;
  std::vector<std::string> split(cfg.songs, "train");
  for (std::size_t i = 0; i < n_valid; ++i) split[order[i]] = "valid";
  for (std::size_t i = n_valid; i < n_valid + n_test; ++i) split[order[i]] = "test";

  const double amp = std::sqrt(2.0 * std::pow(10.0, cfg.snr_db / 10.0)) * cfg.noise_std;
  const std::size_t n = std::size_t(std::lround(cfg.seconds * kModelRate));
  std::vector<float> buf(n);
  for (std::size_t s = 0; s < cfg.songs; ++s) {
    Rng rng(derive_seed(cfg.seed, 1 + s));
    std::bernoulli_distribution present(cfg.tag_probability);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * M_PI);
    std::normal_distribution<double> noise(0.0, cfg.noise_std);
    ClipRecord r;
    std::vector<double> phases(cfg.tags, 0.0);
    for (std::size_t t = 0; t < cfg.tags; ++t) {
      r.tags.push_back(present(rng) ? 1 : 0);
      phases[t] = phase(rng);
    }
    for (std::size_t i = 0; i < n; ++i) {
      double x = noise(rng);
      for (std::size_t t = 0; t < cfg.tags; ++t)
        if (r.tags[t]) x += amp * std::sin(2.0 * M_PI * synth_band_frequency(t) * double(i) / kModelRate + phases[t]);
      buf[i] = float(std::clamp(x, -1.0, 1.0));
    }
    char name[32];
    std::snprintf(name, sizeof name, "song_%04zu", s);
    const std::string rel = std::string("audio/") + name + ".wav";
    write_wav((root / rel).string(), buf, kModelRate);
    r.path = rel;
    r.song_id = name;
    r.split = split[s];
    m.records.push_back(std::move(r));
  }
  const std::string manifest = (root / "manifest.jsonl").string();
  write_manifest(manifest, m);
  return manifest;
}

std::vector<double> band_energy_scores(const Waveform& w, std::size_t n_tags) {
  std::vector<double> out(n_tags);
  for (std::size_t t = 0; t < n_tags; ++t) {
    const double omega = 2.0 * M_PI * synth_band_frequency(t) / w.sample_rate;
    double re = 0.0, im = 0.0;
    for (std::size_t i = 0; i < w.samples.size(); ++i) {
      re += w.samples[i] * std::cos(omega * double(i));
      im -= w.samples[i] * std::sin(omega * double(i));
    }
    out[t] = (re * re + im * im) / double(std::max<std::size_t>(1, w.samples.size()));
  }
  return out;
}

}  // namespace muslcat
