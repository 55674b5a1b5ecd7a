#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "muslcat/random.hpp"
#include "muslcat/tensor.hpp"

namespace muslcat {

enum class Mode { kTrain, kEval };

struct Param {
  Tensor value;
  Tensor grad;

  Param() = default;
  explicit Param(Tensor v) : value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { grad = Tensor(value.shape()); }
};

struct ParamRef {
  std::string name;
  Param* param;
};

struct BufferRef {
  std::string name;
  Tensor* tensor;
};

// A layer with a hand-written backward. forward() caches whatever backward()
// needs; backward() accumulates parameter gradients and returns dL/dx for the
// most recent forward call.
class Module {
 public:
  virtual ~Module() = default;
  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual void collect(const std::string& prefix, std::vector<ParamRef>& params,
                       std::vector<BufferRef>& buffers) {
    (void)prefix;
    (void)params;
    (void)buffers;
  }
};

std::vector<ParamRef> parameters_of(Module& m, const std::string& prefix = "");
std::vector<BufferRef> buffers_of(Module& m, const std::string& prefix = "");
std::size_t count_parameters(Module& m);
void zero_grads(Module& m);

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

// ---------------------------------------------------------------------------
// Convolution

struct Conv1dParams {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t filter = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  Param weight;  // (C_out, C_in, f)
  Param bias;    // (C_out)
};

// floor((L_in + 2p - f) / s) + 1; throws if the padded input is shorter than f.
std::size_t conv1d_output_length(std::size_t length, std::size_t filter, std::size_t stride,
                                 std::size_t padding);

Conv1dParams make_conv1d(std::size_t in_channels, std::size_t out_channels, std::size_t filter,
                         std::size_t stride, std::size_t padding, Rng& rng);

Tensor conv1d_forward(const Tensor& x, const Conv1dParams& p);

struct Conv1dGrads {
  Tensor dx;
  Tensor dweight;
  Tensor dbias;
};
Conv1dGrads conv1d_backward(const Tensor& x, const Conv1dParams& p, const Tensor& dy);

class Conv1d : public Module {
 public:
  explicit Conv1d(Conv1dParams params) : p_(std::move(params)) {}
  Conv1d(std::size_t in, std::size_t out, std::size_t filter, std::size_t stride,
         std::size_t padding, Rng& rng)
      : p_(make_conv1d(in, out, filter, stride, padding, rng)) {}

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(const std::string& prefix, std::vector<ParamRef>& params,
               std::vector<BufferRef>& buffers) override;

  Conv1dParams& params() { return p_; }
  const Conv1dParams& params() const { return p_; }

 private:
  Conv1dParams p_;
  Tensor x_;
};

// ---------------------------------------------------------------------------
// Pooling

struct PoolResult {
  Tensor y;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

// Leftmost maximum wins on ties.
PoolResult maxpool1d(const Tensor& x, std::size_t filter, std::size_t stride);

class MaxPool1d : public Module {
 public:
  MaxPool1d(std::size_t filter, std::size_t stride) : filter_(filter), stride_(stride) {}
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;

 private:
  std::size_t filter_, stride_;
  Shape in_shape_;
  std::vector<std::size_t> argmax_;
};

// (B, C, L) -> (B, C)
class TemporalMean : public Module {
 public:
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;

 private:
  Shape in_shape_;
};

// ---------------------------------------------------------------------------
// Dense: applies to the last axis, (..., in) -> (..., out).

class Dense : public Module {
 public:
  Dense(std::size_t in, std::size_t out, Rng& rng, bool bias = true);

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(const std::string& prefix, std::vector<ParamRef>& params,
               std::vector<BufferRef>& buffers) override;

  Param& weight() { return weight_; }  // (in, out)
  Param& bias() { return bias_; }
  bool has_bias() const { return has_bias_; }

 private:
  std::size_t in_, out_;
  bool has_bias_;
  Param weight_, bias_;
  Tensor x_;
};

// ---------------------------------------------------------------------------
// Elementwise activations

class ReLU : public Module {
 public:
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;

 private:
  Shape shape_;
  std::vector<unsigned char> active_;
};

// Exact (erf) GELU.
class GELU : public Module {
 public:
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;

 private:
  Tensor x_;
};

class Sigmoid : public Module {
 public:
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;

 private:
  Tensor y_;
};

double sigmoid(double x);

// Inverted dropout; identity in eval mode.
class Dropout : public Module {
 public:
  Dropout(double rate, std::uint64_t seed);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  double rate() const { return rate_; }

 private:
  double rate_;
  Rng rng_;
  Tensor mask_;
  bool active_ = false;
};

// ---------------------------------------------------------------------------
// Normalization

// While one of these is alive on the current thread, every train-mode
// BatchNorm1d forward overwrites its running statistics with the plain average
// of the batch statistics it has seen since the guard was created. Used to
// re-estimate population statistics for the current weights before eval.
class BatchNormRefresh {
 public:
  BatchNormRefresh();
  ~BatchNormRefresh();
  BatchNormRefresh(const BatchNormRefresh&) = delete;
  BatchNormRefresh& operator=(const BatchNormRefresh&) = delete;
};

// Batch norm over (batch, time) per channel of a (B, C, L) input.
class BatchNorm1d : public Module {
 public:
  explicit BatchNorm1d(std::size_t channels, double eps = 1e-5, double momentum = 0.1);

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(const std::string& prefix, std::vector<ParamRef>& params,
               std::vector<BufferRef>& buffers) override;

  Param& gamma() { return gamma_; }
  Param& beta() { return beta_; }
  Tensor& running_mean() { return running_mean_; }
  Tensor& running_var() { return running_var_; }

 private:
  std::size_t channels_;
  double eps_, momentum_;
  Param gamma_, beta_;
  Tensor running_mean_, running_var_;
  Mode mode_ = Mode::kEval;
  Tensor xhat_;
  std::vector<double> inv_std_;
  std::uint64_t refresh_generation_ = 0;
  std::size_t refresh_count_ = 0;
};

// Layer norm over one axis of a rank-3 tensor: axis 1 normalizes channels per
// time step of (B, C, L); axis 2 normalizes features per token of (B, T, D).
class LayerNorm : public Module {
 public:
  LayerNorm(std::size_t features, std::size_t axis, double eps = 1e-5);

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(const std::string& prefix, std::vector<ParamRef>& params,
               std::vector<BufferRef>& buffers) override;

  Param& gamma() { return gamma_; }
  Param& beta() { return beta_; }
  // Normalized input before the affine transform, from the last forward.
  const Tensor& normalized() const { return xhat_; }

 private:
  std::size_t features_, axis_;
  double eps_;
  Param gamma_, beta_;
  Tensor xhat_;
  std::vector<double> inv_std_;
};

// ---------------------------------------------------------------------------
// Squeeze-and-excitation: global temporal mean -> FC -> ReLU -> FC -> sigmoid,
// then channel-wise rescaling of the input.

class SEBlock : public Module {
 public:
  SEBlock(std::size_t channels, std::size_t reduction, Rng& rng);

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(const std::string& prefix, std::vector<ParamRef>& params,
               std::vector<BufferRef>& buffers) override;

  Dense& squeeze_fc() { return fc1_; }
  Dense& excite_fc() { return fc2_; }
  // Per-channel statistic (B, C) and gate (B, C) from the last forward.
  const Tensor& squeeze_stats() const { return z_; }
  const Tensor& gate() const { return gate_; }

 private:
  std::size_t channels_;
  Dense fc1_, fc2_;
  ReLU relu_;
  Tensor x_, z_, gate_;
};

// ---------------------------------------------------------------------------

class Sequential : public Module {
 public:
  Sequential() = default;
  Sequential& add(std::string name, std::unique_ptr<Module> m);
  template <typename M, typename... Args>
  M& emplace(std::string name, Args&&... args) {
    auto p = std::make_unique<M>(std::forward<Args>(args)...);
    M& ref = *p;
    add(std::move(name), std::move(p));
    return ref;
  }

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(const std::string& prefix, std::vector<ParamRef>& params,
               std::vector<BufferRef>& buffers) override;

  std::size_t size() const { return modules_.size(); }
  Module& at(std::size_t i) { return *modules_.at(i).second; }

 private:
  std::vector<std::pair<std::string, std::unique_ptr<Module>>> modules_;
};

}  // namespace muslcat
