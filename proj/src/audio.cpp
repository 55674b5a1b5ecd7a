#include "muslcat/audio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "muslcat/errors.hpp"

namespace muslcat {

namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open audio file " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Little-endian readers over a byte buffer, with located errors.
struct Cursor {
  const std::vector<unsigned char>& bytes;
  const std::string& path;

  [[noreturn]] void fail(std::size_t offset, const std::string& what) const {
    throw ValidationError(path + ": offset " + std::to_string(offset) + ": " + what);
  }
  void need(std::size_t offset, std::size_t n, const std::string& field) const {
    if (offset + n > bytes.size()) fail(offset, "truncated " + field);
  }
  std::uint32_t u32(std::size_t o, const std::string& field) const {
    need(o, 4, field);
    return std::uint32_t(bytes[o]) | std::uint32_t(bytes[o + 1]) << 8 | std::uint32_t(bytes[o + 2]) << 16 |
           std::uint32_t(bytes[o + 3]) << 24;
  }
  std::uint16_t u16(std::size_t o, const std::string& field) const {
    need(o, 2, field);
    return std::uint16_t(bytes[o] | bytes[o + 1] << 8);
  }
  bool tag(std::size_t o, const char* t) const {
    return o + 4 <= bytes.size() && std::memcmp(&bytes[o], t, 4) == 0;
  }
};

void put_u32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back((v >> (8 * i)) & 0xFF);
}
void put_u16(std::vector<unsigned char>& b, std::uint16_t v) {
  b.push_back(v & 0xFF);
  b.push_back(v >> 8);
}
void put_tag(std::vector<unsigned char>& b, const char* t) { b.insert(b.end(), t, t + 4); }

float decode_f32(const unsigned char* p) {
  const std::uint32_t bits = std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
                             std::uint32_t(p[3]) << 24;
  return std::bit_cast<float>(bits);
}

}  // namespace

Waveform load_wav(const std::string& path) {
  const auto bytes = read_file(path);
  const Cursor c{bytes, path};
  if (!c.tag(0, "RIFF")) c.fail(0, "missing RIFF tag");
  if (!c.tag(8, "WAVE")) c.fail(8, "missing WAVE tag");

  std::uint16_t format = 0, channels = 0, bits = 0, block_align = 0;
  std::uint32_t rate = 0;
  std::size_t fmt_at = 0, data_at = 0, data_size = 0;
  bool have_fmt = false, have_data = false;

  std::size_t o = 12;
  while (o + 8 <= bytes.size() && !have_data) {
    const std::uint32_t size = c.u32(o + 4, "chunk size");
    if (c.tag(o, "fmt ")) {
      if (size < 16) c.fail(o + 4, "fmt chunk size " + std::to_string(size) + " < 16");
      fmt_at = o;
      format = c.u16(o + 8, "audio format");
      channels = c.u16(o + 10, "channel count");
      rate = c.u32(o + 12, "sample rate");
      block_align = c.u16(o + 20, "block align");
      bits = c.u16(o + 22, "bits per sample");
      if (format == kFormatExtensible) {
        if (size < 40) c.fail(o + 4, "extensible fmt chunk size " + std::to_string(size) + " < 40");
        format = c.u16(o + 32, "extensible sub-format");
      }
      have_fmt = true;
    } else if (c.tag(o, "data")) {
      data_at = o + 8;
      data_size = size;
      if (data_at + data_size > bytes.size())
        c.fail(o + 4, "data chunk size " + std::to_string(size) + " runs past end of file (" +
                          std::to_string(bytes.size()) + " bytes)");
      have_data = true;
    }
    o += 8 + size + (size & 1);
  }
  if (!have_fmt) c.fail(12, "no fmt chunk");
  if (!have_data) c.fail(12, "no data chunk");

  const bool pcm16 = format == kFormatPcm && bits == 16;
  const bool f32 = format == kFormatFloat && bits == 32;
  if (!pcm16 && !f32)
    c.fail(fmt_at + 8, "unsupported encoding (format " + std::to_string(format) + ", " + std::to_string(bits) +
                           " bits); expected 16-bit PCM or 32-bit float");
  if (channels != 1 && channels != 2)
    c.fail(fmt_at + 10, "unsupported channel count " + std::to_string(channels));
  if (rate == 0) c.fail(fmt_at + 12, "sample rate 0");
  const std::size_t frame = std::size_t(channels) * (bits / 8);
  if (block_align != frame)
    c.fail(fmt_at + 20, "block align " + std::to_string(block_align) + " != " + std::to_string(frame));
  if (data_size % frame != 0)
    c.fail(data_at - 4, "data size " + std::to_string(data_size) + " not a multiple of frame size " +
                            std::to_string(frame));

  Waveform w;
  w.sample_rate = rate;
  const std::size_t frames = data_size / frame;
  w.samples.resize(frames);
  const unsigned char* p = bytes.data() + data_at;
  for (std::size_t i = 0; i < frames; ++i) {
    double acc = 0.0;
    for (std::size_t ch = 0; ch < channels; ++ch) {
      const unsigned char* s = p + i * frame + ch * (bits / 8);
      if (pcm16) {
        acc += double(std::int16_t(std::uint16_t(s[0] | s[1] << 8))) / 32768.0;
      } else {
        const float v = decode_f32(s);
        if (!std::isfinite(v))
          c.fail(std::size_t(s - bytes.data()), "non-finite float sample at frame " + std::to_string(i));
        acc += std::clamp(double(v), -1.0, 1.0);
      }
    }
    w.samples[i] = float(acc / channels);
  }
  return w;
}

void write_wav(const std::string& path, const std::vector<float>& interleaved, std::uint32_t sample_rate,
               std::uint16_t channels, WavEncoding encoding) {
  if (channels == 0 || interleaved.size() % channels != 0)
    throw std::invalid_argument("write_wav: sample count not a multiple of the channel count");
  const std::uint16_t bits = encoding == WavEncoding::kPcm16 ? 16 : 32;
  const std::uint16_t align = channels * bits / 8;
  const std::uint32_t data_size = std::uint32_t(interleaved.size() * (bits / 8));

  std::vector<unsigned char> b;
  b.reserve(44 + data_size);
  put_tag(b, "RIFF");
  put_u32(b, 36 + data_size);
  put_tag(b, "WAVE");
  put_tag(b, "fmt ");
  put_u32(b, 16);
  put_u16(b, encoding == WavEncoding::kPcm16 ? kFormatPcm : kFormatFloat);
  put_u16(b, channels);
  put_u32(b, sample_rate);
  put_u32(b, sample_rate * align);
  put_u16(b, align);
  put_u16(b, bits);
  put_tag(b, "data");
  put_u32(b, data_size);
  for (float x : interleaved) {
    if (encoding == WavEncoding::kPcm16) {
      const long q = std::lround(std::clamp(double(x), -1.0, 1.0) * 32768.0);
      put_u16(b, std::uint16_t(std::int16_t(std::clamp(q, -32768L, 32767L))));
    } else {
      put_u32(b, std::bit_cast<std::uint32_t>(x));
    }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(b.data()), std::streamsize(b.size()));
  if (!out) throw ValidationError("short write to " + path);
}

Waveform resample_16k(const Waveform& w) {
  const std::uint32_t src = w.sample_rate;
  if (src < 8000 || src > 192000)
    throw ValidationError("sample rate " + std::to_string(src) + " outside supported range 8000..192000");
  if (src == kModelRate) return w;

  const std::uint64_t g = std::gcd<std::uint64_t>(src, kModelRate);
  const std::uint64_t up = kModelRate / g, down = src / g;
  // Output sample n sits at input time n * down / up.
  const double cutoff = 0.5 * 0.94 * std::min<double>(src, kModelRate) / src;  // cycles per input sample
  const double beta = 8.6;
  const int zero_crossings = 32;
  const int half = int(std::ceil(zero_crossings * double(src) / std::min<double>(src, kModelRate)));
  const int taps = 2 * half + 1;
  const double i0b = std::cyl_bessel_i(0.0, beta);

  // table[phase][j] weights input index base - half + j, where the output time
  // is base + phase / up.
  std::vector<double> table(up * taps);
  for (std::uint64_t ph = 0; ph < up; ++ph) {
    const double frac = double(ph) / double(up);
    double total = 0.0;
    for (int j = 0; j < taps; ++j) {
      const double x = double(j - half) - frac;
      const double r = x / (half + 1);
      double h = 0.0;
      if (std::abs(r) < 1.0) {
        const double arg = 2.0 * cutoff * x;
        const double sinc = x == 0.0 ? 1.0 : std::sin(M_PI * arg) / (M_PI * arg);
        h = 2.0 * cutoff * sinc * std::cyl_bessel_i(0.0, beta * std::sqrt(1.0 - r * r)) / i0b;
      }
      table[ph * taps + j] = h;
      total += h;
    }
    for (int j = 0; j < taps; ++j) table[ph * taps + j] /= total;
  }

  const std::size_t n_in = w.samples.size();
  const std::size_t n_out = std::size_t(std::uint64_t(n_in) * kModelRate / src);
  Waveform out;
  out.sample_rate = kModelRate;
  out.samples.resize(n_out);
  for (std::size_t n = 0; n < n_out; ++n) {
    const std::uint64_t pos = std::uint64_t(n) * down;
    const std::int64_t base = std::int64_t(pos / up);
    const double* h = &table[(pos % up) * taps];
    double acc = 0.0;
    const std::int64_t first = base - half;
    const int j0 = int(std::max<std::int64_t>(0, -first));
    const int j1 = int(std::min<std::int64_t>(taps, std::int64_t(n_in) - first));
    for (int j = j0; j < j1; ++j) acc += h[j] * w.samples[std::size_t(first + j)];
    out.samples[n] = float(std::clamp(acc, -1.0, 1.0));
  }
  return out;
}

Waveform load_audio_16k(const std::string& path) { return resample_16k(load_wav(path)); }

std::size_t random_offset(std::size_t clip_length, std::size_t length, Rng& rng) {
  if (clip_length <= length) return 0;
  std::uniform_int_distribution<std::size_t> dist(0, clip_length - length);
  return dist(rng);
}

bool copy_window(const Waveform& w, std::size_t offset, std::size_t length, double* dst) {
  const std::size_t n = w.samples.size();
  const std::size_t avail = offset < n ? std::min(length, n - offset) : 0;
  for (std::size_t i = 0; i < avail; ++i) dst[i] = w.samples[offset + i];
  std::fill(dst + avail, dst + length, 0.0);
  return avail < length;
}

Tensor sample_chunk(const Waveform& w, std::size_t length, Rng& rng, bool* padded) {
  Tensor t({1, 1, length});
  const bool pad = copy_window(w, random_offset(w.samples.size(), length, rng), length, t.data());
  if (padded) *padded = pad;
  return t;
}

std::size_t eval_chunk_count(std::size_t clip_length, std::size_t length) {
  return std::max<std::size_t>(1, clip_length / length);
}

}  // namespace muslcat
