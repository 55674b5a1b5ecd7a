#pragma once

#include <cstddef>
#include <vector>

#include "muslcat/layers.hpp"
#include "muslcat/tensor.hpp"

namespace muslcat {

// Multi-head self-attention parameters. Projections act on the channel axis of
// a (B, L, C_in) input; head h owns columns [h*d, (h+1)*d) of Q, K and V.
struct MHAParams {
  std::size_t in_channels = 0;
  std::size_t heads = 1;
  std::size_t key_depth = 0;    // d_k, summed over heads
  std::size_t value_depth = 0;  // d_v, summed over heads
  std::size_t max_distance = 512;
  Param wq;   // (C_in, d_k)
  Param wk;   // (C_in, d_k)
  Param wv;   // (C_in, d_v)
  Param wo;   // (d_v, d_v)
  Param rel;  // (heads, 2 * max_distance + 1, d_k / heads); row D is distance 0

  std::size_t key_depth_per_head() const { return key_depth / heads; }
  std::size_t value_depth_per_head() const { return value_depth / heads; }
};

// Projections drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); relative
// embeddings start at zero.
MHAParams make_mha(std::size_t in_channels, std::size_t heads, std::size_t key_depth,
                   std::size_t value_depth, std::size_t max_distance, Rng& rng);

// Embedding row for the signed query-to-key distance j - i, clipped to
// [-D, D].
std::size_t relative_index(long distance, std::size_t max_distance);

// Both take Q of shape (B, N_h, L, d) and the table (N_h, 2D + 1, d) and return
// S_rel of shape (B, N_h, L, L) with S_rel[i, j] = Q_i . r_{j - i}.
//
// The explicit form gathers a full (L, L, d) embedding tensor per head. The
// skewed form gathers only the 2L - 1 distances that occur, multiplies Q
// against them once and shifts each row into place.
Tensor relative_logits_explicit(const Tensor& q, const Tensor& rel);
Tensor relative_logits_skewed(const Tensor& q, const Tensor& rel);

// Bytes held by gathered relative-embedding buffers on this thread.
struct EmbeddingStorageMeter {
  static void reset();
  static std::size_t peak_bytes();
  static std::size_t current_bytes();
};

Tensor mha_absolute_free(const Tensor& x, const MHAParams& p);
Tensor mha_relative(const Tensor& x, const MHAParams& p);

// Attention probabilities (B, N_h, L, L) for the given input.
Tensor attention_weights(const Tensor& x, const MHAParams& p, bool relative);

class MultiHeadAttention : public Module {
 public:
  MultiHeadAttention(MHAParams params, bool relative)
      : p_(std::move(params)), relative_(relative) {}

  // x: (B, L, C_in) -> (B, L, d_v)
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(const std::string& prefix, std::vector<ParamRef>& params,
               std::vector<BufferRef>& buffers) override;

  MHAParams& params() { return p_; }
  const MHAParams& params() const { return p_; }
  bool relative() const { return relative_; }
  const Tensor& last_weights() const { return probs_; }

 private:
  MHAParams p_;
  bool relative_;
  Tensor x_, q_, k_, v_, probs_, concat_;
};

struct AACConfig {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t heads = 8;
  double key_ratio = 0.25;    // k = d_k / C_out
  double value_ratio = 0.25;  // v = d_v / C_out
  std::size_t max_distance = 512;
  bool relative = true;

  std::size_t key_depth() const;
  std::size_t value_depth() const;
  // Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
};

// Attention-augmented convolution over (B, C_in, L): channel concatenation of
// a stride-1 length-preserving convolution (C_out - d_v filters) and MHA
// (d_v channels), followed by layer norm over channels.
class AACBlock : public Module {
 public:
  AACBlock(const AACConfig& cfg, Rng& rng);

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(const std::string& prefix, std::vector<ParamRef>& params,
               std::vector<BufferRef>& buffers) override;

  const AACConfig& config() const { return cfg_; }
  Conv1d& conv() { return conv_; }
  MultiHeadAttention& attention() { return mha_; }
  LayerNorm& norm() { return norm_; }

 private:
  AACConfig cfg_;
  Conv1d conv_;
  MultiHeadAttention mha_;
  LayerNorm norm_;
  std::size_t conv_channels_ = 0;
};

// Attention-augmented convolution parameter estimate as printed:
// C_in * C_out * (2k + (1 - r^2) v + (C_out / C_in) v^2).
double aac_param_estimate(double in_channels, double out_channels, double key_ratio,
                          double value_ratio, double kernel);

}  // namespace muslcat
