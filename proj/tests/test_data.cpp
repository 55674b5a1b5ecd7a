#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>

#include "muslcat/audio.hpp"
#include "muslcat/data.hpp"
#include "muslcat/errors.hpp"
#include "muslcat/metrics.hpp"

using namespace muslcat;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("muslcat_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& f) const { return (path / f).string(); }
};

void write_bytes(const std::string& path, const std::vector<unsigned char>& b) {
  std::ofstream(path, std::ios::binary).write(reinterpret_cast<const char*>(b.data()), std::streamsize(b.size()));
}

std::vector<unsigned char> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void le(std::vector<unsigned char>& b, std::uint32_t v, int n) {
  for (int i = 0; i < n; ++i) b.push_back((v >> (8 * i)) & 0xFF);
}

// Hand-assembled header, independent of write_wav.
std::vector<unsigned char> wav_header(std::uint16_t format, std::uint16_t channels, std::uint32_t rate,
                                      std::uint16_t bits, std::uint32_t data_bytes) {
  std::vector<unsigned char> b = {'R', 'I', 'F', 'F'};
  le(b, 36 + data_bytes, 4);
  for (char c : std::string("WAVEfmt ")) b.push_back(c);
  le(b, 16, 4);
  le(b, format, 2);
  le(b, channels, 2);
  le(b, rate, 4);
  le(b, rate * channels * bits / 8, 4);
  le(b, channels * bits / 8, 2);
  le(b, bits, 2);
  for (char c : std::string("data")) b.push_back(c);
  le(b, data_bytes, 4);
  return b;
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

// Blackman-Harris windowed DFT magnitude in dB relative to the peak, 1 Hz bins.
std::vector<double> spectrum_db(const std::vector<float>& x, double rate) {
  const std::size_t n = x.size();
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double a = 2.0 * M_PI * double(i) / double(n - 1);
    w[i] = x[i] * (0.35875 - 0.48829 * std::cos(a) + 0.14128 * std::cos(2 * a) - 0.01168 * std::cos(3 * a));
  }
  const std::size_t bins = std::size_t(rate / 2);
  std::vector<double> mag(bins);
  double peak = 0.0;
  for (std::size_t k = 0; k < bins; ++k) {
    // Recurrence for e^{-i 2 pi k t / n}.
    const std::complex<double> step = std::polar(1.0, -2.0 * M_PI * double(k) / double(n));
    std::complex<double> rot = 1.0, acc = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      acc += w[t] * rot;
      rot *= step;
    }
    mag[k] = std::abs(acc);
    peak = std::max(peak, mag[k]);
  }
  for (double& m : mag) m = 20.0 * std::log10(std::max(m, 1e-300) / peak);
  return mag;
}

}  // namespace

TEST(Wav, Pcm16NegativeFullScaleIsMinusOne) {
  TempDir d("wav1");
  auto b = wav_header(1, 1, 16000, 16, 4);
  le(b, 0x8000, 2);  // -32768
  le(b, 0x4000, 2);  // 16384
  write_bytes(d / "a.wav", b);
  const Waveform w = load_wav(d / "a.wav");
  ASSERT_EQ(w.samples.size(), 2u);
  EXPECT_EQ(w.samples[0], -1.0f);
  EXPECT_EQ(w.samples[1], 0.5f);
  EXPECT_EQ(w.sample_rate, 16000u);
}

TEST(Wav, StereoDownmixAverages) {
  TempDir d("wav2");
  auto b = wav_header(1, 2, 8000, 16, 8);
  le(b, 0x4000, 2);  // L 0.5
  le(b, 0xC000, 2);  // R -0.5
  le(b, 0x4000, 2);  // L 0.5
  le(b, 0x2000, 2);  // R 0.25
  write_bytes(d / "s.wav", b);
  const Waveform w = load_wav(d / "s.wav");
  ASSERT_EQ(w.samples.size(), 2u);
  EXPECT_EQ(w.samples[0], 0.0f);
  EXPECT_EQ(w.samples[1], 0.375f);
}

TEST(Wav, RoundTripWithinQuantizationBound) {
  TempDir d("wav3");
  Rng rng(3);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> x(5000);
  for (float& v : x) v = u(rng);
  x[0] = 1.0f;
  x[1] = -1.0f;
  write_wav(d / "p.wav", x, 16000);
  const Waveform p = load_wav(d / "p.wav");
  ASSERT_EQ(p.samples.size(), x.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(double(p.samples[i]) - x[i]));
  EXPECT_LE(worst, 1.0 / 32768.0);

  write_wav(d / "f.wav", x, 22050, 1, WavEncoding::kFloat32);
  const Waveform f = load_wav(d / "f.wav");
  EXPECT_EQ(f.samples, x);
  EXPECT_EQ(f.sample_rate, 22050u);
}

TEST(Wav, ExtensibleFloat) {
  TempDir d("wav4");
  std::vector<unsigned char> b = {'R', 'I', 'F', 'F'};
  le(b, 60 + 8, 4);
  for (char c : std::string("WAVEfmt ")) b.push_back(c);
  le(b, 40, 4);
  le(b, 0xFFFE, 2);
  le(b, 1, 2);
  le(b, 16000, 4);
  le(b, 64000, 4);
  le(b, 4, 2);
  le(b, 32, 2);
  le(b, 22, 2);  // cbSize
  le(b, 32, 2);  // valid bits
  le(b, 4, 4);   // channel mask
  le(b, 3, 2);   // sub-format: IEEE float, rest of GUID follows
  for (int i = 0; i < 14; ++i) b.push_back(0);
  for (char c : std::string("data")) b.push_back(c);
  le(b, 8, 4);
  const float v[2] = {0.25f, -0.75f};
  for (float f : v) le(b, std::bit_cast<std::uint32_t>(f), 4);
  write_bytes(d / "e.wav", b);
  const Waveform w = load_wav(d / "e.wav");
  EXPECT_EQ(w.samples, (std::vector<float>{0.25f, -0.75f}));
}

TEST(Wav, MalformedFilesNameOffsetOrField) {
  TempDir d("wav5");
  write_bytes(d / "short.wav", {'R', 'I', 'F'});
  EXPECT_NE(error_of([&] { load_wav(d / "short.wav"); }).find("offset 0"), std::string::npos);

  auto b = wav_header(1, 1, 16000, 24, 6);
  for (int i = 0; i < 6; ++i) b.push_back(0);
  write_bytes(d / "p24.wav", b);
  const std::string e24 = error_of([&] { load_wav(d / "p24.wav"); });
  EXPECT_NE(e24.find("offset 20"), std::string::npos) << e24;
  EXPECT_NE(e24.find("24 bits"), std::string::npos) << e24;

  auto t = wav_header(1, 1, 16000, 16, 100);
  le(t, 0, 2);
  write_bytes(d / "trunc.wav", t);
  const std::string et = error_of([&] { load_wav(d / "trunc.wav"); });
  EXPECT_NE(et.find("offset 40"), std::string::npos) << et;
  EXPECT_NE(et.find("data chunk size"), std::string::npos) << et;

  auto c = wav_header(1, 3, 16000, 16, 6);
  for (int i = 0; i < 6; ++i) c.push_back(0);
  write_bytes(d / "c3.wav", c);
  EXPECT_NE(error_of([&] { load_wav(d / "c3.wav"); }).find("channel count 3"), std::string::npos);

  EXPECT_NE(error_of([&] { load_wav(d / "missing.wav"); }).find("missing.wav"), std::string::npos);
}

TEST(Resample, NativeRateIsBitExactPassThrough) {
  Waveform w;
  w.samples = {0.1f, -0.2f, 0.3f, 0.7f};
  const Waveform r = resample_16k(w);
  EXPECT_EQ(r.samples, w.samples);
  EXPECT_EQ(r.sample_rate, 16000u);
}

TEST(Resample, OutputLengthFormula) {
  for (std::uint32_t src : {44100u, 48000u, 22050u, 8000u, 96000u, 11025u}) {
    for (std::size_t n : {std::size_t(src), std::size_t(12345)}) {
      Waveform w;
      w.sample_rate = src;
      w.samples.assign(n, 0.0f);
      EXPECT_EQ(resample_16k(w).samples.size(), std::size_t(std::uint64_t(n) * 16000 / src)) << src;
    }
  }
  Waveform bad;
  bad.sample_rate = 4000;
  EXPECT_THROW(resample_16k(bad), ValidationError);
}

TEST(Resample, SineSpectrumAt44k1) {
  Waveform w;
  w.sample_rate = 44100;
  w.samples.resize(44100);
  for (std::size_t i = 0; i < w.samples.size(); ++i)
    w.samples[i] = float(0.5 * std::sin(2.0 * M_PI * 1000.0 * double(i) / 44100.0));
  const Waveform r = resample_16k(w);
  ASSERT_EQ(r.samples.size(), 16000u);
  const auto db = spectrum_db(r.samples, 16000.0);
  const std::size_t peak = std::size_t(std::max_element(db.begin(), db.end()) - db.begin());
  EXPECT_LE(std::abs(long(peak) - 1000L), 1L);
  double floor = -1e9;
  for (std::size_t k = 0; k < db.size(); ++k)
    if (k + 8 < 1000 || k > 1008) floor = std::max(floor, db[k]);
  EXPECT_LE(floor, -60.0);
}

TEST(Resample, RejectsContentAboveNewNyquist) {
  Waveform w;
  w.sample_rate = 44100;
  w.samples.resize(44100);
  for (std::size_t i = 0; i < w.samples.size(); ++i)
    w.samples[i] = float(0.5 * std::sin(2.0 * M_PI * 12000.0 * double(i) / 44100.0));
  const Waveform r = resample_16k(w);
  double in_rms = 0.0, out_rms = 0.0;
  for (float v : w.samples) in_rms += v * v;
  for (std::size_t i = 200; i + 200 < r.samples.size(); ++i) out_rms += r.samples[i] * r.samples[i];
  in_rms = std::sqrt(in_rms / w.samples.size());
  out_rms = std::sqrt(out_rms / (r.samples.size() - 400));
  EXPECT_LE(20.0 * std::log10(out_rms / in_rms), -60.0);
}

TEST(Resample, IngestionIsIdempotent) {
  TempDir d("idem");
  Rng rng(5);
  std::normal_distribution<float> n(0.0f, 0.2f);
  std::vector<float> x(22050);
  for (float& v : x) v = n(rng);
  write_wav(d / "x.wav", x, 22050);
  EXPECT_EQ(load_audio_16k(d / "x.wav").samples, load_audio_16k(d / "x.wav").samples);
}

TEST(Chunks, OffsetsAndPadding) {
  Waveform w;
  w.samples.assign(480000, 0.0f);
  for (std::size_t i = 0; i < w.samples.size(); ++i) w.samples[i] = float(i % 1000) / 1000.0f;
  Rng a(9), b(9);
  std::size_t lo = SIZE_MAX, hi = 0;
  for (int i = 0; i < 2000; ++i) {
    const std::size_t o = random_offset(480000, 48000, a);
    EXPECT_EQ(o, random_offset(480000, 48000, b));
    lo = std::min(lo, o);
    hi = std::max(hi, o);
  }
  EXPECT_LE(hi, 432000u);
  EXPECT_LT(lo, 5000u);
  EXPECT_GT(hi, 427000u);

  Rng c(1);
  EXPECT_EQ(random_offset(48000, 48000, c), 0u);

  Waveform s;
  s.samples.assign(100, 0.5f);
  bool padded = false;
  const Tensor t = sample_chunk(s, 160, c, &padded);
  EXPECT_TRUE(padded);
  EXPECT_EQ(t.shape(), (Shape{1, 1, 160}));
  EXPECT_EQ(t[99], 0.5);
  EXPECT_EQ(t[100], 0.0);

  EXPECT_EQ(eval_chunk_count(480000), 10u);
  EXPECT_EQ(eval_chunk_count(480000 + 47999), 10u);
  EXPECT_EQ(eval_chunk_count(1000), 1u);
}

TEST(Manifest, RoundTripAndPathResolution) {
  TempDir d("man1");
  Manifest m;
  m.tags = {"a", "b"};
  m.records = {{"x.wav", "s1", "train", {1, 0}}, {"sub/y.wav", "s2", "test", {0, 1}}, {"z.wav", "s1", "train", {1, 0}}};
  write_manifest(d / "m.jsonl", m);
  const Manifest r = load_manifest(d / "m.jsonl");
  EXPECT_EQ(r.tags, m.tags);
  ASSERT_EQ(r.records.size(), 3u);
  EXPECT_EQ(r.records[1].path, (d.path / "sub/y.wav").string());
  EXPECT_EQ(r.records[1].tags, (std::vector<std::uint8_t>{0, 1}));
  EXPECT_EQ(r.split("train").size(), 2u);
  EXPECT_EQ(r.split("all").size(), 3u);
}

TEST(Manifest, RejectsMalformedRecords) {
  TempDir d("man2");
  auto check = [&](const std::string& body, const std::string& needle) {
    std::ofstream(d / "m.jsonl") << "{\"version\":1,\"tags\":[\"a\",\"b\"]}\n" << body;
    const std::string e = error_of([&] { load_manifest(d / "m.jsonl"); });
    EXPECT_NE(e.find(needle), std::string::npos) << "message: " << e;
  };
  check(R"({"path":"a.wav","song_id":"s","split":"train","tags":[1,0]})"
        "\n"
        R"({"path":"b.wav","song_id":"s","split":"valid","tags":[1,0]})",
        ":3: song 's' is in split valid but line 2 put it in train");
  check(R"({"path":"a.wav","song_id":"s","split":"train","tags":[1]})", "tag vector has 1 entries");
  check(R"({"path":"a.wav","song_id":"s","split":"dev","tags":[1,0]})", "split 'dev'");
  check(R"({"path":"a.wav","song_id":"s","split":"train","tags":[1,2]})", "0 or 1");
  check(R"({"path":"a.wav","song_id":"s","split":"train","tags":[1,0],"artist":"x"})", "unknown record field 'artist'");
  check(R"({"path":"a.wav","song_id":"s","split":"train","tags":[1,0]})"
        "\n"
        R"({"path":"a.wav","song_id":"t","split":"train","tags":[1,0]})",
        "duplicate path");
  std::ofstream(d / "h.jsonl") << "{\"tags\":[\"a\"]}\n";
  EXPECT_NE(error_of([&] { load_manifest(d / "h.jsonl"); }).find("version"), std::string::npos);
  EXPECT_NE(error_of([&] { load_manifest(d / "nope.jsonl"); }).find("nope.jsonl"), std::string::npos);
}

TEST(Synth, SameSeedIsBitIdentical) {
  TempDir a("syn_a"), b("syn_b");
  SynthConfig c;
  c.songs = 6;
  c.seconds = 0.5;
  c.seed = 4;
  c.out_dir = a.path.string();
  synth_dataset(c);
  c.out_dir = b.path.string();
  synth_dataset(c);
  EXPECT_EQ(read_bytes(a / "manifest.jsonl"), read_bytes(b / "manifest.jsonl"));
  for (int s = 0; s < 6; ++s) {
    char name[32];
    std::snprintf(name, sizeof name, "audio/song_%04d.wav", s);
    EXPECT_EQ(read_bytes(a / name), read_bytes(b / name)) << name;
  }
  const Manifest m = load_manifest(a / "manifest.jsonl");
  EXPECT_EQ(m.split("train").size(), 4u);
  EXPECT_EQ(m.split("valid").size(), 1u);
  EXPECT_EQ(m.split("test").size(), 1u);
}

TEST(Synth, AllZeroTagsIsPureNoise) {
  TempDir d("syn_z");
  SynthConfig c;
  c.songs = 3;
  c.seconds = 2.0;
  c.tag_probability = 0.0;
  c.out_dir = d.path.string();
  const Manifest m = load_manifest(synth_dataset(c));
  for (const auto& r : m.records) {
    EXPECT_EQ(r.tags, (std::vector<std::uint8_t>{0, 0, 0, 0}));
    const Waveform w = load_wav(r.path);
    double s2 = 0.0;
    for (float v : w.samples) s2 += double(v) * v;
    EXPECT_NEAR(std::sqrt(s2 / w.samples.size()), c.noise_std, 0.05 * c.noise_std);
    // White noise: every band's periodogram value is of order sigma^2, far
    // below a present band's N A^2 / 4.
    for (double e : band_energy_scores(w, 4)) EXPECT_LT(e, 50 * c.noise_std * c.noise_std);
  }
}

TEST(Synth, MatchedFilterOracleDecodesTags) {
  TempDir d("syn_o");
  SynthConfig c;
  c.songs = 60;
  c.seconds = 3.0;
  c.seed = 8;
  c.out_dir = d.path.string();
  const Manifest m = load_manifest(synth_dataset(c));
  std::vector<std::vector<double>> scores;
  std::vector<std::vector<std::uint8_t>> labels;
  for (const auto& r : m.records) {
    scores.push_back(band_energy_scores(load_audio_16k(r.path), c.tags));
    labels.push_back(r.tags);
  }
  const MetricsReport rep = compute_metrics(scores, labels, m.tags);
  EXPECT_TRUE(rep.skipped_tags.empty());
  EXPECT_GE(rep.macro_roc_auc, 0.99);
}

TEST(Synth, RejectsBandsAboveNyquistAndUnwritableDir) {
  TempDir d("syn_e");
  SynthConfig c;
  c.songs = 3;
  c.seconds = 0.1;
  c.tags = 7;
  c.out_dir = d.path.string();
  EXPECT_NE(error_of([&] { synth_dataset(c); }).find("Nyquist"), std::string::npos);
  c.tags = 6;
  std::ofstream(d / "file") << "x";
  c.out_dir = d / "file";
  EXPECT_NE(error_of([&] { synth_dataset(c); }).find("cannot create"), std::string::npos);
}

TEST(Clips, StrictAndLenientLoading) {
  TempDir d("clips");
  write_wav(d / "ok.wav", std::vector<float>(100, 0.1f), 16000);
  std::vector<ClipRecord> recs;
  for (int i = 0; i < 10; ++i) recs.push_back({d / "ok.wav", "s" + std::to_string(i), "test", {1}});
  recs.push_back({d / "missing.wav", "m", "test", {0}});
  EXPECT_NE(error_of([&] { load_clips(recs, true); }).find("missing.wav"), std::string::npos);
  const ClipSet s = load_clips(recs, false);  // 1 of 11 < 10%
  EXPECT_EQ(s.audio.size(), 10u);
  ASSERT_EQ(s.failures.size(), 1u);
  recs.push_back({d / "missing2.wav", "m2", "test", {0}});  // 2 of 12 > 10%
  EXPECT_THROW(load_clips(recs, false), ValidationError);
}
