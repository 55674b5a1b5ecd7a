#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "muslcat/random.hpp"
#include "muslcat/tensor.hpp"

namespace muslcat {

inline constexpr std::uint32_t kModelRate = 16000;
inline constexpr std::size_t kChunkSamples = 48000;  // 3 s at 16 kHz

// Mono samples in [-1, 1]. Float storage keeps a 30 s clip under 2 MB.
struct Waveform {
  std::vector<float> samples;
  std::uint32_t sample_rate = kModelRate;
};

enum class WavEncoding { kPcm16, kFloat32 };

// PCM16 or float32 (plain or WAVE_FORMAT_EXTENSIBLE), mono or stereo. Stereo is
// averaged to mono, PCM16 divided by 32768, float samples clamped to [-1, 1].
// Throws ValidationError naming the byte offset and field on malformed input.
Waveform load_wav(const std::string& path);

// Interleaved samples; PCM16 quantizes with round(x * 32768) clamped to int16.
void write_wav(const std::string& path, const std::vector<float>& interleaved, std::uint32_t sample_rate,
               std::uint16_t channels = 1, WavEncoding encoding = WavEncoding::kPcm16);

// Kaiser-windowed sinc, rational polyphase. Output length floor(L * 16000 / src).
// src == 16000 returns the input unchanged. Rates outside [8000, 192000] throw.
Waveform resample_16k(const Waveform& w);

// load_wav followed by resample_16k.
Waveform load_audio_16k(const std::string& path);

// Uniform start in [0, L - length]; 0 when the clip is not longer than length.
std::size_t random_offset(std::size_t clip_length, std::size_t length, Rng& rng);

// Copy [offset, offset + length) into dst, zero-filling past the end.
// Returns true when padding was needed.
bool copy_window(const Waveform& w, std::size_t offset, std::size_t length, double* dst);

// (1, 1, length) window at a random offset. padded, if given, reports zero fill.
Tensor sample_chunk(const Waveform& w, std::size_t length, Rng& rng, bool* padded = nullptr);

// Consecutive non-overlapping windows; the short tail is dropped, except that a
// clip shorter than one window still yields one (zero-padded) chunk.
std::size_t eval_chunk_count(std::size_t clip_length, std::size_t length = kChunkSamples);

}  // namespace muslcat
