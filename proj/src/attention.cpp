#include "muslcat/attention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace muslcat {

namespace {

struct MeterState {
  std::size_t current = 0;
  std::size_t peak = 0;
};
thread_local MeterState g_meter;

// Scratch buffer for gathered embeddings; its size is charged to the meter.
class EmbeddingBuffer {
 public:
  explicit EmbeddingBuffer(std::size_t n) : data_(n, 0.0) {
    g_meter.current += bytes();
    g_meter.peak = std::max(g_meter.peak, g_meter.current);
  }
  ~EmbeddingBuffer() { g_meter.current -= bytes(); }
  EmbeddingBuffer(const EmbeddingBuffer&) = delete;
  EmbeddingBuffer& operator=(const EmbeddingBuffer&) = delete;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

 private:
  std::size_t bytes() const { return data_.size() * sizeof(double); }
  std::vector<double> data_;
};

std::size_t table_max_distance(const Tensor& rel) {
  if (rel.rank() != 3 || rel.dim(1) % 2 == 0) {
    throw std::invalid_argument("relative embeddings must have shape (N_h, 2D+1, d), got " +
                                shape_str(rel.shape()));
  }
  return (rel.dim(1) - 1) / 2;
}

// R[m] = r_{m - (L - 1)} for m in [0, 2L - 1).
void gather_distances(const double* table, std::size_t max_distance, std::size_t depth,
                      std::size_t length, double* out) {
  const long offset = static_cast<long>(length) - 1;
  for (std::size_t m = 0; m + 1 < 2 * length; ++m) {
    const std::size_t row = relative_index(static_cast<long>(m) - offset, max_distance);
    std::copy_n(table + row * depth, depth, out + m * depth);
  }
}

// s[i, j] += q_i . R[j - i + L - 1] via one (L x 2L-1) product and a per-row shift.
void add_skewed_logits(const double* q, const double* gathered, std::size_t length,
                       std::size_t depth, double* s, std::vector<double>& scratch) {
  const std::size_t width = 2 * length - 1;
  scratch.assign(length * width, 0.0);
  gemm_nt_accumulate(q, gathered, scratch.data(), length, depth, width);
  for (std::size_t i = 0; i < length; ++i) {
    const double* row = scratch.data() + i * width + (length - 1 - i);
    double* out = s + i * length;
    for (std::size_t j = 0; j < length; ++j) out[j] += row[j];
  }
}

void require_input(const Tensor& x, const MHAParams& p) {
  if (x.rank() != 3 || x.dim(2) != p.in_channels) {
    throw std::invalid_argument("mha: expected (B, L, " + std::to_string(p.in_channels) +
                                ") input, got " + shape_str(x.shape()));
  }
  if (x.dim(1) < 1) throw std::invalid_argument("mha: sequence length must be >= 1");
}

void copy_head(const Tensor& src, std::size_t b, std::size_t h, std::size_t depth,
               std::vector<double>& dst) {
  const std::size_t len = src.dim(1), width = src.dim(2);
  dst.resize(len * depth);
  for (std::size_t i = 0; i < len; ++i) {
    std::copy_n(src.data() + (b * len + i) * width + h * depth, depth, dst.data() + i * depth);
  }
}

void store_head(Tensor& dst, std::size_t b, std::size_t h, std::size_t depth,
                const std::vector<double>& src) {
  const std::size_t len = dst.dim(1), width = dst.dim(2);
  for (std::size_t i = 0; i < len; ++i) {
    std::copy_n(src.data() + i * depth, depth, dst.data() + (b * len + i) * width + h * depth);
  }
}

// Keys are visited in lexicographic order of their input rows, so every
// reduction over keys sees its terms in the same order whatever the time
// ordering of the input.
std::vector<std::size_t> canonical_key_order(const Tensor& x, std::size_t b) {
  const std::size_t len = x.dim(1), width = x.dim(2);
  std::vector<std::size_t> order(len);
  std::iota(order.begin(), order.end(), 0);
  const double* base = x.data() + b * len * width;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t c) {
    return std::lexicographical_compare(base + a * width, base + (a + 1) * width, base + c * width,
                                        base + (c + 1) * width);
  });
  return order;
}

Tensor project(const Tensor& x, const Tensor& w) {
  const std::size_t rows = x.dim(0) * x.dim(1);
  Tensor out({x.dim(0), x.dim(1), w.dim(1)});
  gemm_accumulate(x.data(), w.data(), out.data(), rows, w.dim(0), w.dim(1));
  return out;
}

struct MhaCache {
  Tensor q, k, v, probs, concat;
};

Tensor mha_forward_impl(const Tensor& x, const MHAParams& p, bool relative, MhaCache& cache) {
  require_input(x, p);
  const std::size_t batch = x.dim(0), len = x.dim(1), heads = p.heads;
  const std::size_t dk = p.key_depth_per_head(), dv = p.value_depth_per_head();
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dk));

  cache.q = project(x, p.wq.value);
  cache.k = project(x, p.wk.value);
  cache.v = project(x, p.wv.value);
  cache.probs = Tensor({batch, heads, len, len});
  cache.concat = Tensor({batch, len, p.value_depth});

  std::vector<double> qh, kh, vh, oh, scratch;
  std::vector<double> logits(len * len);
  for (std::size_t h = 0; h < heads; ++h) {
    std::unique_ptr<EmbeddingBuffer> gathered;
    if (relative) {
      gathered = std::make_unique<EmbeddingBuffer>((2 * len - 1) * dk);
      gather_distances(p.rel.value.data() + h * p.rel.value.dim(1) * dk, p.max_distance, dk, len,
                       gathered->data());
    }
    for (std::size_t b = 0; b < batch; ++b) {
      const auto order = canonical_key_order(x, b);
      copy_head(cache.q, b, h, dk, qh);
      copy_head(cache.k, b, h, dk, kh);
      copy_head(cache.v, b, h, dv, vh);
      std::fill(logits.begin(), logits.end(), 0.0);
      gemm_nt_accumulate(qh.data(), kh.data(), logits.data(), len, dk, len);
      if (relative) add_skewed_logits(qh.data(), gathered->data(), len, dk, logits.data(), scratch);

      double* probs = cache.probs.data() + (b * heads + h) * len * len;
      oh.assign(len * dv, 0.0);
      for (std::size_t i = 0; i < len; ++i) {
        double* row = logits.data() + i * len;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < len; ++j) {
          row[j] *= inv_scale;
          mx = std::max(mx, row[j]);
        }
        double total = 0.0;
        for (std::size_t j : order) {
          row[j] = std::exp(row[j] - mx);
          total += row[j];
        }
        const double inv_total = 1.0 / total;
        double* prow = probs + i * len;
        double* orow = oh.data() + i * dv;
        for (std::size_t j : order) {
          prow[j] = row[j] * inv_total;
          const double* vrow = vh.data() + j * dv;
          for (std::size_t c = 0; c < dv; ++c) orow[c] += prow[j] * vrow[c];
        }
      }
      store_head(cache.concat, b, h, dv, oh);
    }
  }
  Tensor y = project(cache.concat, p.wo.value);
  check_finite(y, "mha");
  return y;
}

}  // namespace

std::size_t relative_index(long distance, std::size_t max_distance) {
  const long d = static_cast<long>(max_distance);
  return static_cast<std::size_t>(std::clamp(distance, -d, d) + d);
}

void EmbeddingStorageMeter::reset() { g_meter = MeterState{}; }
std::size_t EmbeddingStorageMeter::peak_bytes() { return g_meter.peak; }
std::size_t EmbeddingStorageMeter::current_bytes() { return g_meter.current; }

MHAParams make_mha(std::size_t in_channels, std::size_t heads, std::size_t key_depth,
                   std::size_t value_depth, std::size_t max_distance, Rng& rng) {
  if (heads == 0 || key_depth % heads != 0 || value_depth % heads != 0 || key_depth == 0 ||
      value_depth == 0) {
    throw std::invalid_argument("mha: d_k=" + std::to_string(key_depth) + " and d_v=" +
                                std::to_string(value_depth) + " must be positive multiples of " +
                                std::to_string(heads) + " heads");
  }
  if (in_channels == 0) throw std::invalid_argument("mha: zero input channels");
  MHAParams p;
  p.in_channels = in_channels;
  p.heads = heads;
  p.key_depth = key_depth;
  p.value_depth = value_depth;
  p.max_distance = max_distance;
  const double a = 1.0 / std::sqrt(static_cast<double>(in_channels));
  const double ao = 1.0 / std::sqrt(static_cast<double>(value_depth));
  Tensor wq({in_channels, key_depth}), wk({in_channels, key_depth}), wv({in_channels, value_depth});
  Tensor wo({value_depth, value_depth});
  fill_uniform(wq, rng, -a, a);
  fill_uniform(wk, rng, -a, a);
  fill_uniform(wv, rng, -a, a);
  fill_uniform(wo, rng, -ao, ao);
  p.wq = Param(std::move(wq));
  p.wk = Param(std::move(wk));
  p.wv = Param(std::move(wv));
  p.wo = Param(std::move(wo));
  p.rel = Param(Tensor({heads, 2 * max_distance + 1, key_depth / heads}));
  return p;
}

Tensor relative_logits_explicit(const Tensor& q, const Tensor& rel) {
  if (q.rank() != 4 || rel.dim(0) != q.dim(1) || rel.dim(2) != q.dim(3)) {
    throw std::invalid_argument("relative_logits: Q " + shape_str(q.shape()) +
                                " incompatible with table " + shape_str(rel.shape()));
  }
  const std::size_t max_distance = table_max_distance(rel);
  const std::size_t batch = q.dim(0), heads = q.dim(1), len = q.dim(2), depth = q.dim(3);
  Tensor s({batch, heads, len, len});
  for (std::size_t h = 0; h < heads; ++h) {
    EmbeddingBuffer full(len * len * depth);
    const double* table = rel.data() + h * rel.dim(1) * depth;
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = 0; j < len; ++j) {
        const std::size_t row =
            relative_index(static_cast<long>(j) - static_cast<long>(i), max_distance);
        std::copy_n(table + row * depth, depth, full.data() + (i * len + j) * depth);
      }
    for (std::size_t b = 0; b < batch; ++b) {
      const double* qb = q.data() + (b * heads + h) * len * depth;
      double* sb = s.data() + (b * heads + h) * len * len;
      for (std::size_t i = 0; i < len; ++i)
        for (std::size_t j = 0; j < len; ++j) {
          const double* r = full.data() + (i * len + j) * depth;
          double acc = 0.0;
          for (std::size_t c = 0; c < depth; ++c) acc += qb[i * depth + c] * r[c];
          sb[i * len + j] = acc;
        }
    }
  }
  return s;
}

Tensor relative_logits_skewed(const Tensor& q, const Tensor& rel) {
  if (q.rank() != 4 || rel.dim(0) != q.dim(1) || rel.dim(2) != q.dim(3)) {
    throw std::invalid_argument("relative_logits: Q " + shape_str(q.shape()) +
                                " incompatible with table " + shape_str(rel.shape()));
  }
  const std::size_t max_distance = table_max_distance(rel);
  const std::size_t batch = q.dim(0), heads = q.dim(1), len = q.dim(2), depth = q.dim(3);
  Tensor s({batch, heads, len, len});
  std::vector<double> scratch;
  for (std::size_t h = 0; h < heads; ++h) {
    EmbeddingBuffer gathered((2 * len - 1) * depth);
    gather_distances(rel.data() + h * rel.dim(1) * depth, max_distance, depth, len,
                     gathered.data());
    for (std::size_t b = 0; b < batch; ++b) {
      add_skewed_logits(q.data() + (b * heads + h) * len * depth, gathered.data(), len, depth,
                        s.data() + (b * heads + h) * len * len, scratch);
    }
  }
  return s;
}

Tensor mha_absolute_free(const Tensor& x, const MHAParams& p) {
  MhaCache cache;
  return mha_forward_impl(x, p, false, cache);
}

Tensor mha_relative(const Tensor& x, const MHAParams& p) {
  MhaCache cache;
  return mha_forward_impl(x, p, true, cache);
}

Tensor attention_weights(const Tensor& x, const MHAParams& p, bool relative) {
  MhaCache cache;
  mha_forward_impl(x, p, relative, cache);
  return std::move(cache.probs);
}

// ---------------------------------------------------------------------------

Tensor MultiHeadAttention::forward(const Tensor& x, Mode) {
  MhaCache cache;
  Tensor y = mha_forward_impl(x, p_, relative_, cache);
  x_ = x;
  q_ = std::move(cache.q);
  k_ = std::move(cache.k);
  v_ = std::move(cache.v);
  probs_ = std::move(cache.probs);
  concat_ = std::move(cache.concat);
  return y;
}

Tensor MultiHeadAttention::backward(const Tensor& grad_out) {
  const std::size_t batch = x_.dim(0), len = x_.dim(1), heads = p_.heads;
  const std::size_t dk = p_.key_depth_per_head(), dv = p_.value_depth_per_head();
  const std::size_t rows = batch * len;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dk));
  if (grad_out.shape() != Shape{batch, len, p_.value_depth}) {
    throw std::invalid_argument("mha_backward: grad shape " + shape_str(grad_out.shape()));
  }

  gemm_tn_accumulate(concat_.data(), grad_out.data(), p_.wo.grad.data(), p_.value_depth, rows,
                     p_.value_depth);
  Tensor dconcat({batch, len, p_.value_depth});
  gemm_nt_accumulate(grad_out.data(), p_.wo.value.data(), dconcat.data(), rows, p_.value_depth,
                     p_.value_depth);

  Tensor dq({batch, len, p_.key_depth}), dk_t({batch, len, p_.key_depth});
  Tensor dv_t({batch, len, p_.value_depth});
  std::vector<double> qh, kh, vh, doh, dqh, dkh, dvh, dprobs, dpad, dgathered;
  const std::size_t table_rows = p_.rel.value.dim(1);
  const std::size_t width = 2 * len - 1;

  for (std::size_t h = 0; h < heads; ++h) {
    std::unique_ptr<EmbeddingBuffer> gathered;
    if (relative_) {
      gathered = std::make_unique<EmbeddingBuffer>(width * dk);
      gather_distances(p_.rel.value.data() + h * table_rows * dk, p_.max_distance, dk, len,
                       gathered->data());
    }
    for (std::size_t b = 0; b < batch; ++b) {
      copy_head(q_, b, h, dk, qh);
      copy_head(k_, b, h, dk, kh);
      copy_head(v_, b, h, dv, vh);
      copy_head(dconcat, b, h, dv, doh);
      const double* probs = probs_.data() + (b * heads + h) * len * len;

      dvh.assign(len * dv, 0.0);
      gemm_tn_accumulate(probs, doh.data(), dvh.data(), len, len, dv);
      dprobs.assign(len * len, 0.0);
      gemm_nt_accumulate(doh.data(), vh.data(), dprobs.data(), len, dv, len);
      for (std::size_t i = 0; i < len; ++i) {
        const double* pr = probs + i * len;
        double* dr = dprobs.data() + i * len;
        double dot = 0.0;
        for (std::size_t j = 0; j < len; ++j) dot += pr[j] * dr[j];
        for (std::size_t j = 0; j < len; ++j) dr[j] = pr[j] * (dr[j] - dot) * inv_scale;
      }
      // dprobs now holds dL/d(QK^T + S_rel).
      dqh.assign(len * dk, 0.0);
      gemm_accumulate(dprobs.data(), kh.data(), dqh.data(), len, len, dk);
      dkh.assign(len * dk, 0.0);
      gemm_tn_accumulate(dprobs.data(), qh.data(), dkh.data(), len, len, dk);

      if (relative_) {
        dpad.assign(len * width, 0.0);
        for (std::size_t i = 0; i < len; ++i)
          std::copy_n(dprobs.data() + i * len, len, dpad.data() + i * width + (len - 1 - i));
        gemm_accumulate(dpad.data(), gathered->data(), dqh.data(), len, width, dk);
        dgathered.assign(width * dk, 0.0);
        gemm_tn_accumulate(dpad.data(), qh.data(), dgathered.data(), width, len, dk);
        double* dtable = p_.rel.grad.data() + h * table_rows * dk;
        const long offset = static_cast<long>(len) - 1;
        for (std::size_t m = 0; m < width; ++m) {
          const std::size_t row = relative_index(static_cast<long>(m) - offset, p_.max_distance);
          for (std::size_t c = 0; c < dk; ++c) dtable[row * dk + c] += dgathered[m * dk + c];
        }
      }
      store_head(dq, b, h, dk, dqh);
      store_head(dk_t, b, h, dk, dkh);
      store_head(dv_t, b, h, dv, dvh);
    }
  }

  gemm_tn_accumulate(x_.data(), dq.data(), p_.wq.grad.data(), p_.in_channels, rows, p_.key_depth);
  gemm_tn_accumulate(x_.data(), dk_t.data(), p_.wk.grad.data(), p_.in_channels, rows,
                     p_.key_depth);
  gemm_tn_accumulate(x_.data(), dv_t.data(), p_.wv.grad.data(), p_.in_channels, rows,
                     p_.value_depth);
  Tensor dx(x_.shape());
  gemm_nt_accumulate(dq.data(), p_.wq.value.data(), dx.data(), rows, p_.key_depth, p_.in_channels);
  gemm_nt_accumulate(dk_t.data(), p_.wk.value.data(), dx.data(), rows, p_.key_depth,
                     p_.in_channels);
  gemm_nt_accumulate(dv_t.data(), p_.wv.value.data(), dx.data(), rows, p_.value_depth,
                     p_.in_channels);
  return dx;
}

void MultiHeadAttention::collect(const std::string& prefix, std::vector<ParamRef>& params,
                                 std::vector<BufferRef>&) {
  params.push_back({join_name(prefix, "wq"), &p_.wq});
  params.push_back({join_name(prefix, "wk"), &p_.wk});
  params.push_back({join_name(prefix, "wv"), &p_.wv});
  params.push_back({join_name(prefix, "wo"), &p_.wo});
  if (relative_) params.push_back({join_name(prefix, "rel"), &p_.rel});
}

// ---------------------------------------------------------------------------

std::size_t AACConfig::key_depth() const {
  return static_cast<std::size_t>(std::llround(key_ratio * static_cast<double>(out_channels)));
}

std::size_t AACConfig::value_depth() const {
  return static_cast<std::size_t>(std::llround(value_ratio * static_cast<double>(out_channels)));
}

void AACConfig::validate() const {
  auto fail = [&](const std::string& why) {
    throw std::invalid_argument("aac(" + std::to_string(in_channels) + "->" +
                                std::to_string(out_channels) + "): " + why);
  };
  if (in_channels == 0 || out_channels == 0) fail("zero channels");
  if (!(value_ratio > 0.0 && value_ratio < 1.0)) fail("value ratio must satisfy 0 < v < 1");
  if (!(key_ratio > 0.0)) fail("key ratio must be > 0");
  if (kernel % 2 == 0) fail("kernel must be odd to preserve length");
  if (heads == 0) fail("zero heads");
  const std::size_t dk = key_depth(), dv = value_depth();
  if (dk == 0 || dv == 0 || dk % heads || dv % heads) {
    fail("d_k=" + std::to_string(dk) + " and d_v=" + std::to_string(dv) +
         " must be positive multiples of " + std::to_string(heads) + " heads");
  }
  if (dv >= out_channels) fail("d_v must leave at least one convolutional channel");
}

namespace {
const AACConfig& validated(const AACConfig& cfg) {
  cfg.validate();
  return cfg;
}
}  // namespace

AACBlock::AACBlock(const AACConfig& cfg, Rng& rng)
    : cfg_(validated(cfg)),
      conv_(cfg.in_channels, cfg.out_channels - cfg.value_depth(), cfg.kernel, 1,
            (cfg.kernel - 1) / 2, rng),
      mha_(make_mha(cfg.in_channels, cfg.heads, cfg.key_depth(), cfg.value_depth(),
                    cfg.max_distance, rng),
           cfg.relative),
      norm_(cfg.out_channels, 1),
      conv_channels_(cfg.out_channels - cfg.value_depth()) {}

Tensor AACBlock::forward(const Tensor& x, Mode mode) {
  if (x.rank() != 3 || x.dim(1) != cfg_.in_channels) {
    throw std::invalid_argument("aac: expected (B, " + std::to_string(cfg_.in_channels) +
                                ", L) input, got " + shape_str(x.shape()));
  }
  const Tensor conv_out = conv_.forward(x, mode);
  const Tensor attn_out = swap_last2(mha_.forward(swap_last2(x), mode));
  if (conv_out.dim(2) != attn_out.dim(2)) {
    throw std::invalid_argument("aac: convolution length " + std::to_string(conv_out.dim(2)) +
                                " != attention length " + std::to_string(attn_out.dim(2)));
  }
  return norm_.forward(concat({&conv_out, &attn_out}, 1), mode);
}

Tensor AACBlock::backward(const Tensor& grad_out) {
  const Tensor dcat = norm_.backward(grad_out);
  Tensor dx = conv_.backward(slice(dcat, 1, 0, conv_channels_));
  add_inplace(dx, swap_last2(mha_.backward(swap_last2(slice(dcat, 1, conv_channels_,
                                                            cfg_.out_channels)))));
  return dx;
}

void AACBlock::collect(const std::string& prefix, std::vector<ParamRef>& params,
                       std::vector<BufferRef>& buffers) {
  conv_.collect(join_name(prefix, "conv"), params, buffers);
  mha_.collect(join_name(prefix, "mha"), params, buffers);
  norm_.collect(join_name(prefix, "norm"), params, buffers);
}

double aac_param_estimate(double in_channels, double out_channels, double key_ratio,
                          double value_ratio, double kernel) {
  return in_channels * out_channels *
         (2.0 * key_ratio + (1.0 - kernel * kernel) * value_ratio +
          (out_channels / in_channels) * value_ratio * value_ratio);
}

}  // namespace muslcat
