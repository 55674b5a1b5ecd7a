#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "muslcat/audio.hpp"

namespace muslcat {

struct ClipRecord {
  std::string path;  // resolved against the manifest directory on load
  std::string song_id;
  std::string split;               // train | valid | test
  std::vector<std::uint8_t> tags;  // binary, one entry per vocabulary tag
};

// JSONL: a header line {"version": 1, "tags": [...]} then one record per line
// {"path", "song_id", "split", "tags": [0/1, ...]}.
struct Manifest {
  std::vector<std::string> tags;
  std::vector<ClipRecord> records;

  // Records of one split, in file order. "all" returns everything.
  std::vector<ClipRecord> split(const std::string& name) const;
};

// Throws ValidationError with the line number on malformed lines, unknown
// keys, wrong tag-vector length, or a song id appearing in two splits.
Manifest load_manifest(const std::string& path);
void write_manifest(const std::string& path, const Manifest& m);

// Decoded 16 kHz audio for a list of records.
struct ClipSet {
  std::vector<ClipRecord> records;
  std::vector<Waveform> audio;
  std::vector<std::string> failures;  // "path: reason" for skipped records
};

// strict: any unreadable file throws (naming it). Otherwise unreadable files
// are skipped and listed; more than max_failure_fraction of them throws.
ClipSet load_clips(const std::vector<ClipRecord>& records, bool strict, double max_failure_fraction = 0.1);

struct SynthConfig {
  std::size_t songs = 200;
  std::size_t tags = 4;  // at most 6: the seventh band (12.8 kHz) is above 8 kHz Nyquist
  std::uint64_t seed = 0;
  std::string out_dir;
  double seconds = 30.0;
  double noise_std = 0.03;
  double snr_db = 10.0;       // per present band: (A^2 / 2) / noise_std^2
  double tag_probability = 0.5;
};

// Tag t present <=> a sine at 200 * 2^t Hz (random phase) over white noise.
// Writes PCM16 WAVs under out_dir/audio and returns out_dir/manifest.jsonl.
// Songs split 80/10/10 into train/valid/test.
std::string synth_dataset(const SynthConfig& cfg);

double synth_band_frequency(std::size_t tag);

// Matched-filter oracle: per-tag energy of the clip at the tag's frequency.
std::vector<double> band_energy_scores(const Waveform& w, std::size_t n_tags);

}  // namespace muslcat
