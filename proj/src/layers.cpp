#include "muslcat/layers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace muslcat {

std::vector<ParamRef> parameters_of(Module& m, const std::string& prefix) {
  std::vector<ParamRef> params;
  std::vector<BufferRef> buffers;
  m.collect(prefix, params, buffers);
  return params;
}

std::vector<BufferRef> buffers_of(Module& m, const std::string& prefix) {
  std::vector<ParamRef> params;
  std::vector<BufferRef> buffers;
  m.collect(prefix, params, buffers);
  return buffers;
}

std::size_t count_parameters(Module& m) {
  std::size_t n = 0;
  for (const auto& p : parameters_of(m)) n += p.param->value.size();
  return n;
}

void zero_grads(Module& m) {
  for (auto& p : parameters_of(m)) p.param->zero_grad();
}

namespace {

void require_rank3(const Tensor& x, const char* op) {
  if (x.rank() != 3) {
    throw std::invalid_argument(std::string(op) + ": expected (B, C, L) input, got " +
                                shape_str(x.shape()));
  }
}

constexpr std::size_t kTimeTile = 256;

// Range of output positions t with 0 <= t*s + k - p < len.
std::pair<std::size_t, std::size_t> valid_range(std::size_t len, std::size_t out_len,
                                                std::size_t k, std::size_t s, std::size_t p) {
  const long lo_num = static_cast<long>(p) - static_cast<long>(k);
  const long lo = lo_num <= 0 ? 0 : (lo_num + static_cast<long>(s) - 1) / static_cast<long>(s);
  const long hi_num = static_cast<long>(len) - 1 + static_cast<long>(p) - static_cast<long>(k);
  if (hi_num < 0) return {0, 0};
  const long hi = std::min<long>(static_cast<long>(out_len), hi_num / static_cast<long>(s) + 1);
  if (hi <= lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace

std::size_t conv1d_output_length(std::size_t length, std::size_t filter, std::size_t stride,
                                 std::size_t padding) {
  if (filter < 1 || stride < 1) throw std::invalid_argument("conv1d: filter and stride must be >= 1");
  if (length + 2 * padding < filter) {
    throw std::invalid_argument("conv1d: input length " + std::to_string(length) +
                                " with padding " + std::to_string(padding) +
                                " is shorter than filter " + std::to_string(filter));
  }
  return (length + 2 * padding - filter) / stride + 1;
}

Conv1dParams make_conv1d(std::size_t in_channels, std::size_t out_channels, std::size_t filter,
                         std::size_t stride, std::size_t padding, Rng& rng) {
  if (in_channels == 0 || out_channels == 0) throw std::invalid_argument("conv1d: zero channels");
  if (filter < 1 || stride < 1) throw std::invalid_argument("conv1d: filter and stride must be >= 1");
  Conv1dParams p;
  p.in_channels = in_channels;
  p.out_channels = out_channels;
  p.filter = filter;
  p.stride = stride;
  p.padding = padding;
  Tensor w({out_channels, in_channels, filter});
  fill_normal(w, rng, 0.0, std::sqrt(2.0 / static_cast<double>(in_channels * filter)));
  p.weight = Param(std::move(w));
  p.bias = Param(Tensor({out_channels}));
  return p;
}

Tensor conv1d_forward(const Tensor& x, const Conv1dParams& p) {
  require_rank3(x, "conv1d");
  if (x.dim(1) != p.in_channels) {
    throw std::invalid_argument("conv1d: input " + shape_str(x.shape()) + " has " +
                                std::to_string(x.dim(1)) + " channels, expected " +
                                std::to_string(p.in_channels));
  }
  const std::size_t batch = x.dim(0), cin = p.in_channels, cout = p.out_channels;
  const std::size_t len = x.dim(2), f = p.filter, s = p.stride, pad = p.padding;
  const std::size_t out_len = conv1d_output_length(len, f, s, pad);
  Tensor y({batch, cout, out_len});
  const double* w = p.weight.value.data();
  const double* bias = p.bias.value.data();
  const double* xd = x.data();
  double* yd = y.data();
#pragma omp parallel for schedule(static)
  for (long bo = 0; bo < static_cast<long>(batch * cout); ++bo) {
    const std::size_t b = static_cast<std::size_t>(bo) / cout;
    const std::size_t o = static_cast<std::size_t>(bo) % cout;
    double* yr = yd + (b * cout + o) * out_len;
    std::fill(yr, yr + out_len, bias[o]);
    // Time tiles keep the output row in L1 across all (i, k) passes; the
    // per-element summation order is unchanged.
    for (std::size_t t0 = 0; t0 < out_len; t0 += kTimeTile) {
      const std::size_t t1 = std::min(out_len, t0 + kTimeTile);
      for (std::size_t i = 0; i < cin; ++i) {
        const double* xr = xd + (b * cin + i) * len;
        const double* wr = w + (o * cin + i) * f;
        for (std::size_t k = 0; k < f; ++k) {
          const double wk = wr[k];
          auto [lo, hi] = valid_range(len, out_len, k, s, pad);
          lo = std::max(lo, t0);
          hi = std::min(hi, t1);
          if (s == 1) {
            const double* xs = xr + k - pad;
            for (std::size_t t = lo; t < hi; ++t) yr[t] += wk * xs[t];
          } else {
            for (std::size_t t = lo; t < hi; ++t) yr[t] += wk * xr[t * s + k - pad];
          }
        }
      }
    }
  }
  return y;
}

Conv1dGrads conv1d_backward(const Tensor& x, const Conv1dParams& p, const Tensor& dy) {
  const std::size_t batch = x.dim(0), cin = p.in_channels, cout = p.out_channels;
  const std::size_t len = x.dim(2), f = p.filter, s = p.stride, pad = p.padding;
  const std::size_t out_len = conv1d_output_length(len, f, s, pad);
  if (dy.shape() != Shape{batch, cout, out_len}) {
    throw std::invalid_argument("conv1d_backward: grad shape " + shape_str(dy.shape()) +
                                " does not match output " +
                                shape_str(Shape{batch, cout, out_len}));
  }
  Conv1dGrads g{Tensor(x.shape()), Tensor(p.weight.value.shape()), Tensor({cout})};
  const double* w = p.weight.value.data();
  const double* xd = x.data();
  const double* gd = dy.data();

#pragma omp parallel for schedule(static)
  for (long oi = 0; oi < static_cast<long>(cout); ++oi) {
    const std::size_t o = static_cast<std::size_t>(oi);
    double db = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      const double* gr = gd + (b * cout + o) * out_len;
      for (std::size_t t = 0; t < out_len; ++t) db += gr[t];
      for (std::size_t t0 = 0; t0 < out_len; t0 += kTimeTile) {
        const std::size_t t1 = std::min(out_len, t0 + kTimeTile);
        for (std::size_t i = 0; i < cin; ++i) {
          const double* xr = xd + (b * cin + i) * len;
          double* dwr = g.dweight.data() + (o * cin + i) * f;
          for (std::size_t k = 0; k < f; ++k) {
            auto [lo, hi] = valid_range(len, out_len, k, s, pad);
            lo = std::max(lo, t0);
            hi = std::min(hi, t1);
            double acc = 0.0;
            if (s == 1) {
              const double* xs = xr + k - pad;
              for (std::size_t t = lo; t < hi; ++t) acc += gr[t] * xs[t];
            } else {
              for (std::size_t t = lo; t < hi; ++t) acc += gr[t] * xr[t * s + k - pad];
            }
            dwr[k] += acc;
          }
        }
      }
    }
    g.dbias[o] = db;
  }

#pragma omp parallel for schedule(static)
  for (long bi = 0; bi < static_cast<long>(batch * cin); ++bi) {
    const std::size_t b = static_cast<std::size_t>(bi) / cin;
    const std::size_t i = static_cast<std::size_t>(bi) % cin;
    double* dxr = g.dx.data() + (b * cin + i) * len;
    for (std::size_t t0 = 0; t0 < out_len; t0 += kTimeTile) {
      const std::size_t t1 = std::min(out_len, t0 + kTimeTile);
      for (std::size_t o = 0; o < cout; ++o) {
        const double* gr = gd + (b * cout + o) * out_len;
        const double* wr = w + (o * cin + i) * f;
        for (std::size_t k = 0; k < f; ++k) {
          const double wk = wr[k];
          auto [lo, hi] = valid_range(len, out_len, k, s, pad);
          lo = std::max(lo, t0);
          hi = std::min(hi, t1);
          if (s == 1) {
            double* dxs = dxr + k - pad;
            for (std::size_t t = lo; t < hi; ++t) dxs[t] += wk * gr[t];
          } else {
            for (std::size_t t = lo; t < hi; ++t) dxr[t * s + k - pad] += wk * gr[t];
          }
        }
      }
    }
  }
  return g;
}

Tensor Conv1d::forward(const Tensor& x, Mode) {
  x_ = x;
  return conv1d_forward(x, p_);
}

Tensor Conv1d::backward(const Tensor& grad_out) {
  auto g = conv1d_backward(x_, p_, grad_out);
  add_inplace(p_.weight.grad, g.dweight);
  add_inplace(p_.bias.grad, g.dbias);
  return std::move(g.dx);
}

void Conv1d::collect(const std::string& prefix, std::vector<ParamRef>& params,
                     std::vector<BufferRef>&) {
  params.push_back({join_name(prefix, "weight"), &p_.weight});
  params.push_back({join_name(prefix, "bias"), &p_.bias});
}

// ---------------------------------------------------------------------------

PoolResult maxpool1d(const Tensor& x, std::size_t filter, std::size_t stride) {
  require_rank3(x, "maxpool1d");
  if (filter < 1 || stride < 1) throw std::invalid_argument("maxpool1d: filter and stride must be >= 1");
  const std::size_t len = x.dim(2);
  if (len < filter) {
    throw std::invalid_argument("maxpool1d: window " + std::to_string(filter) +
                                " larger than input length " + std::to_string(len));
  }
  const std::size_t out_len = (len - filter) / stride + 1;
  const std::size_t rows = x.dim(0) * x.dim(1);
  PoolResult r{Tensor({x.dim(0), x.dim(1), out_len}), std::vector<std::size_t>(rows * out_len)};
  for (std::size_t row = 0; row < rows; ++row) {
    const double* xr = x.data() + row * len;
    for (std::size_t t = 0; t < out_len; ++t) {
      std::size_t best = t * stride;
      for (std::size_t j = best + 1; j < t * stride + filter; ++j) {
        if (xr[j] > xr[best]) best = j;
      }
      r.y[row * out_len + t] = xr[best];
      r.argmax[row * out_len + t] = row * len + best;
    }
  }
  return r;
}

Tensor MaxPool1d::forward(const Tensor& x, Mode) {
  auto r = maxpool1d(x, filter_, stride_);
  in_shape_ = x.shape();
  argmax_ = std::move(r.argmax);
  return std::move(r.y);
}

Tensor MaxPool1d::backward(const Tensor& grad_out) {
  if (grad_out.size() != argmax_.size()) throw std::invalid_argument("maxpool1d_backward: grad shape mismatch");
  Tensor dx(in_shape_);
  for (std::size_t i = 0; i < argmax_.size(); ++i) dx[argmax_[i]] += grad_out[i];
  return dx;
}

Tensor TemporalMean::forward(const Tensor& x, Mode) {
  require_rank3(x, "temporal_mean");
  in_shape_ = x.shape();
  const std::size_t len = x.dim(2);
  if (len == 0) throw std::invalid_argument("temporal_mean: empty time axis");
  Tensor y({x.dim(0), x.dim(1)});
  for (std::size_t r = 0; r < y.size(); ++r) {
    double s = 0.0;
    for (std::size_t t = 0; t < len; ++t) s += x[r * len + t];
    y[r] = s / static_cast<double>(len);
  }
  return y;
}

Tensor TemporalMean::backward(const Tensor& grad_out) {
  Tensor dx(in_shape_);
  const std::size_t len = in_shape_[2];
  const double inv = 1.0 / static_cast<double>(len);
  for (std::size_t r = 0; r < grad_out.size(); ++r) {
    for (std::size_t t = 0; t < len; ++t) dx[r * len + t] = grad_out[r] * inv;
  }
  return dx;
}

// ---------------------------------------------------------------------------

Dense::Dense(std::size_t in, std::size_t out, Rng& rng, bool bias)
    : in_(in), out_(out), has_bias_(bias) {
  if (in == 0 || out == 0) throw std::invalid_argument("dense: zero extent");
  Tensor w({in, out});
  fill_normal(w, rng, 0.0, std::sqrt(2.0 / static_cast<double>(in)));
  weight_ = Param(std::move(w));
  if (has_bias_) bias_ = Param(Tensor({out}));
}

Tensor Dense::forward(const Tensor& x, Mode) {
  if (x.rank() < 1 || x.dim(x.rank() - 1) != in_) {
    throw std::invalid_argument("dense: input " + shape_str(x.shape()) + " last extent != " +
                                std::to_string(in_));
  }
  x_ = x;
  const std::size_t rows = x.size() / in_;
  Shape s = x.shape();
  s.back() = out_;
  Tensor y(s);
  if (has_bias_) {
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(bias_.value.data(), out_, y.data() + r * out_);
  }
  gemm_accumulate(x.data(), weight_.value.data(), y.data(), rows, in_, out_);
  return y;
}

Tensor Dense::backward(const Tensor& grad_out) {
  const std::size_t rows = x_.size() / in_;
  if (grad_out.size() != rows * out_) throw std::invalid_argument("dense_backward: grad shape mismatch");
  gemm_tn_accumulate(x_.data(), grad_out.data(), weight_.grad.data(), in_, rows, out_);
  if (has_bias_) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < out_; ++j) bias_.grad[j] += grad_out[r * out_ + j];
  }
  Tensor dx(x_.shape());
  gemm_nt_accumulate(grad_out.data(), weight_.value.data(), dx.data(), rows, out_, in_);
  return dx;
}

void Dense::collect(const std::string& prefix, std::vector<ParamRef>& params,
                    std::vector<BufferRef>&) {
  params.push_back({join_name(prefix, "weight"), &weight_});
  if (has_bias_) params.push_back({join_name(prefix, "bias"), &bias_});
}

// ---------------------------------------------------------------------------

Tensor ReLU::forward(const Tensor& x, Mode) {
  shape_ = x.shape();
  active_.resize(x.size());
  Tensor y = x;
  for (std::size_t i = 0; i < y.size(); ++i) {
    active_[i] = y[i] > 0.0;
    if (!active_[i]) y[i] = 0.0;
  }
  return y;
}

Tensor ReLU::backward(const Tensor& grad_out) {
  if (grad_out.shape() != shape_)
    throw std::invalid_argument("relu backward: grad " + shape_str(grad_out.shape()) + " vs input " + shape_str(shape_));
  Tensor dx = grad_out;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (!active_[i]) dx[i] = 0.0;
  return dx;
}

Tensor GELU::forward(const Tensor& x, Mode) {
  x_ = x;
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * M_SQRT1_2));
  return y;
}

Tensor GELU::backward(const Tensor& grad_out) {
  Tensor dx(x_.shape());
  const double inv_sqrt_2pi = 0.5 * M_2_SQRTPI * M_SQRT1_2;
  for (std::size_t i = 0; i < dx.size(); ++i) {
    const double v = x_[i];
    const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
    const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
    dx[i] = grad_out[i] * (cdf + v * pdf);
  }
  return dx;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor Sigmoid::forward(const Tensor& x, Mode) {
  y_ = Tensor(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y_[i] = sigmoid(x[i]);
  return y_;
}

Tensor Sigmoid::backward(const Tensor& grad_out) {
  Tensor dx(y_.shape());
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = grad_out[i] * y_[i] * (1.0 - y_[i]);
  return dx;
}

Dropout::Dropout(double rate, std::uint64_t seed) : rate_(rate), rng_(seed) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw std::invalid_argument("dropout: rate must satisfy 0 <= r < 1, got " + std::to_string(rate));
  }
}

Tensor Dropout::forward(const Tensor& x, Mode mode) {
  active_ = mode == Mode::kTrain && rate_ > 0.0;
  if (!active_) return x;
  mask_ = Tensor(x.shape());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double keep_scale = 1.0 / (1.0 - rate_);
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask_[i] = u(rng_) >= rate_ ? keep_scale : 0.0;
    y[i] = x[i] * mask_[i];
  }
  return y;
}

Tensor Dropout::backward(const Tensor& grad_out) {
  if (!active_) return grad_out;
  return mul(grad_out, mask_);
}

// ---------------------------------------------------------------------------

namespace {
thread_local std::uint64_t g_refresh_generation = 0;
thread_local bool g_refresh_active = false;
}  // namespace

BatchNormRefresh::BatchNormRefresh() {
  if (g_refresh_active) throw std::logic_error("BatchNormRefresh: already active on this thread");
  g_refresh_active = true;
  ++g_refresh_generation;
}

BatchNormRefresh::~BatchNormRefresh() { g_refresh_active = false; }

BatchNorm1d::BatchNorm1d(std::size_t channels, double eps, double momentum)
    : channels_(channels),
      eps_(eps),
      momentum_(momentum),
      gamma_(Tensor::ones({channels})),
      beta_(Tensor({channels})),
      running_mean_({channels}),
      running_var_(Tensor::ones({channels})) {}

Tensor BatchNorm1d::forward(const Tensor& x, Mode mode) {
  require_rank3(x, "batchnorm");
  if (x.dim(1) != channels_) {
    throw std::invalid_argument("batchnorm: expected " + std::to_string(channels_) +
                                " channels, got " + shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0), len = x.dim(2);
  if (mode == Mode::kTrain && batch < 2) {
    throw std::invalid_argument("batchnorm: batch size 1 in training mode has undefined batch variance");
  }
  mode_ = mode;
  xhat_ = Tensor(x.shape());
  inv_std_.assign(channels_, 0.0);
  double momentum = momentum_;
  if (mode == Mode::kTrain && g_refresh_active) {
    if (refresh_generation_ != g_refresh_generation) {
      refresh_generation_ = g_refresh_generation;
      refresh_count_ = 0;
    }
    momentum = 1.0 / static_cast<double>(++refresh_count_);
  }
  Tensor y(x.shape());
  const double n = static_cast<double>(batch * len);
  for (std::size_t c = 0; c < channels_; ++c) {
    double mean, var;
    if (mode == Mode::kTrain) {
      double s = 0.0;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < len; ++t) s += x.at(b, c, t);
      mean = s / n;
      double v = 0.0;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < len; ++t) {
          const double d = x.at(b, c, t) - mean;
          v += d * d;
        }
      var = v / n;
      const double unbiased = n > 1.0 ? v / (n - 1.0) : var;
      running_mean_[c] = (1.0 - momentum) * running_mean_[c] + momentum * mean;
      running_var_[c] = (1.0 - momentum) * running_var_[c] + momentum * unbiased;
    } else {
      mean = running_mean_[c];
      var = running_var_[c];
    }
    const double inv = 1.0 / std::sqrt(var + eps_);
    inv_std_[c] = inv;
    const double g = gamma_.value[c], bt = beta_.value[c];
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t < len; ++t) {
        const double xh = (x.at(b, c, t) - mean) * inv;
        xhat_.at(b, c, t) = xh;
        y.at(b, c, t) = g * xh + bt;
      }
    }
  }
  return y;
}

Tensor BatchNorm1d::backward(const Tensor& grad_out) {
  const std::size_t batch = xhat_.dim(0), len = xhat_.dim(2);
  const double n = static_cast<double>(batch * len);
  Tensor dx(xhat_.shape());
  for (std::size_t c = 0; c < channels_; ++c) {
    double sum_dy = 0.0, sum_dy_xh = 0.0;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < len; ++t) {
        const double dy = grad_out.at(b, c, t);
        sum_dy += dy;
        sum_dy_xh += dy * xhat_.at(b, c, t);
      }
    gamma_.grad[c] += sum_dy_xh;
    beta_.grad[c] += sum_dy;
    const double g = gamma_.value[c];
    const double inv = inv_std_[c];
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < len; ++t) {
        const double dy = grad_out.at(b, c, t);
        if (mode_ == Mode::kTrain) {
          dx.at(b, c, t) = g * inv * (dy - sum_dy / n - xhat_.at(b, c, t) * sum_dy_xh / n);
        } else {
          dx.at(b, c, t) = g * inv * dy;
        }
      }
  }
  return dx;
}

void BatchNorm1d::collect(const std::string& prefix, std::vector<ParamRef>& params,
                          std::vector<BufferRef>& buffers) {
  params.push_back({join_name(prefix, "gamma"), &gamma_});
  params.push_back({join_name(prefix, "beta"), &beta_});
  buffers.push_back({join_name(prefix, "running_mean"), &running_mean_});
  buffers.push_back({join_name(prefix, "running_var"), &running_var_});
}

LayerNorm::LayerNorm(std::size_t features, std::size_t axis, double eps)
    : features_(features),
      axis_(axis),
      eps_(eps),
      gamma_(Tensor::ones({features})),
      beta_(Tensor({features})) {
  if (axis != 1 && axis != 2) throw std::invalid_argument("layernorm: axis must be 1 or 2");
}

namespace {

struct NormGeometry {
  std::size_t groups;  // independent normalization groups
  std::size_t stride;  // distance between consecutive features
  std::size_t inner;   // groups sharing one outer index
};

NormGeometry norm_geometry(const Shape& s, std::size_t axis) {
  if (axis == 1) return {s[0] * s[2], s[2], s[2]};
  return {s[0] * s[1], 1, 1};
}

std::size_t group_base(const NormGeometry& g, const Shape& s, std::size_t axis, std::size_t grp) {
  if (axis == 1) return (grp / g.inner) * s[1] * s[2] + grp % g.inner;
  return grp * s[2];
}

}  // namespace

Tensor LayerNorm::forward(const Tensor& x, Mode) {
  require_rank3(x, "layernorm");
  if (x.dim(axis_) != features_) {
    throw std::invalid_argument("layernorm: expected " + std::to_string(features_) +
                                " features on axis " + std::to_string(axis_) + ", got " +
                                shape_str(x.shape()));
  }
  const auto geo = norm_geometry(x.shape(), axis_);
  xhat_ = Tensor(x.shape());
  inv_std_.assign(geo.groups, 0.0);
  Tensor y(x.shape());
  const double n = static_cast<double>(features_);
  for (std::size_t grp = 0; grp < geo.groups; ++grp) {
    const std::size_t base = group_base(geo, x.shape(), axis_, grp);
    double s = 0.0;
    for (std::size_t c = 0; c < features_; ++c) s += x[base + c * geo.stride];
    const double mean = s / n;
    double v = 0.0;
    for (std::size_t c = 0; c < features_; ++c) {
      const double d = x[base + c * geo.stride] - mean;
      v += d * d;
    }
    const double inv = 1.0 / std::sqrt(v / n + eps_);
    inv_std_[grp] = inv;
    for (std::size_t c = 0; c < features_; ++c) {
      const std::size_t idx = base + c * geo.stride;
      const double xh = (x[idx] - mean) * inv;
      xhat_[idx] = xh;
      y[idx] = gamma_.value[c] * xh + beta_.value[c];
    }
  }
  return y;
}

Tensor LayerNorm::backward(const Tensor& grad_out) {
  const auto geo = norm_geometry(xhat_.shape(), axis_);
  Tensor dx(xhat_.shape());
  const double n = static_cast<double>(features_);
  std::vector<double> dxh(features_);
  for (std::size_t grp = 0; grp < geo.groups; ++grp) {
    const std::size_t base = group_base(geo, xhat_.shape(), axis_, grp);
    double mean_dxh = 0.0, mean_dxh_xh = 0.0;
    for (std::size_t c = 0; c < features_; ++c) {
      const std::size_t idx = base + c * geo.stride;
      const double dy = grad_out[idx];
      gamma_.grad[c] += dy * xhat_[idx];
      beta_.grad[c] += dy;
      dxh[c] = dy * gamma_.value[c];
      mean_dxh += dxh[c];
      mean_dxh_xh += dxh[c] * xhat_[idx];
    }
    mean_dxh /= n;
    mean_dxh_xh /= n;
    const double inv = inv_std_[grp];
    for (std::size_t c = 0; c < features_; ++c) {
      const std::size_t idx = base + c * geo.stride;
      dx[idx] = inv * (dxh[c] - mean_dxh - xhat_[idx] * mean_dxh_xh);
    }
  }
  return dx;
}

void LayerNorm::collect(const std::string& prefix, std::vector<ParamRef>& params,
                        std::vector<BufferRef>&) {
  params.push_back({join_name(prefix, "gamma"), &gamma_});
  params.push_back({join_name(prefix, "beta"), &beta_});
}

// ---------------------------------------------------------------------------

namespace {
std::size_t se_hidden(std::size_t channels, std::size_t reduction) {
  if (reduction == 0 || channels % reduction != 0) {
    throw std::invalid_argument("se_block: channels " + std::to_string(channels) +
                                " not divisible by reduction ratio " + std::to_string(reduction));
  }
  return channels / reduction;
}
}  // namespace

SEBlock::SEBlock(std::size_t channels, std::size_t reduction, Rng& rng)
    : channels_(channels),
      fc1_(channels, se_hidden(channels, reduction), rng),
      fc2_(se_hidden(channels, reduction), channels, rng) {}

Tensor SEBlock::forward(const Tensor& x, Mode mode) {
  require_rank3(x, "se_block");
  if (x.dim(1) != channels_) {
    throw std::invalid_argument("se_block: expected " + std::to_string(channels_) +
                                " channels, got " + shape_str(x.shape()));
  }
  x_ = x;
  const std::size_t batch = x.dim(0), len = x.dim(2);
  z_ = Tensor({batch, channels_});
  for (std::size_t r = 0; r < batch * channels_; ++r) {
    double s = 0.0;
    for (std::size_t t = 0; t < len; ++t) s += x[r * len + t];
    z_[r] = s / static_cast<double>(len);
  }
  Tensor h = relu_.forward(fc1_.forward(z_, mode), mode);
  Tensor logits = fc2_.forward(h, mode);
  gate_ = Tensor(logits.shape());
  for (std::size_t i = 0; i < logits.size(); ++i) gate_[i] = sigmoid(logits[i]);
  Tensor y(x.shape());
  for (std::size_t r = 0; r < batch * channels_; ++r)
    for (std::size_t t = 0; t < len; ++t) y[r * len + t] = x[r * len + t] * gate_[r];
  return y;
}

Tensor SEBlock::backward(const Tensor& grad_out) {
  const std::size_t batch = x_.dim(0), len = x_.dim(2);
  Tensor dgate_logits({batch, channels_});
  Tensor dx(x_.shape());
  for (std::size_t r = 0; r < batch * channels_; ++r) {
    double dg = 0.0;
    for (std::size_t t = 0; t < len; ++t) {
      dg += grad_out[r * len + t] * x_[r * len + t];
      dx[r * len + t] = grad_out[r * len + t] * gate_[r];
    }
    dgate_logits[r] = dg * gate_[r] * (1.0 - gate_[r]);
  }
  Tensor dz = fc1_.backward(relu_.backward(fc2_.backward(dgate_logits)));
  const double inv = 1.0 / static_cast<double>(len);
  for (std::size_t r = 0; r < batch * channels_; ++r)
    for (std::size_t t = 0; t < len; ++t) dx[r * len + t] += dz[r] * inv;
  return dx;
}

void SEBlock::collect(const std::string& prefix, std::vector<ParamRef>& params,
                      std::vector<BufferRef>& buffers) {
  fc1_.collect(join_name(prefix, "fc1"), params, buffers);
  fc2_.collect(join_name(prefix, "fc2"), params, buffers);
}

// ---------------------------------------------------------------------------

Sequential& Sequential::add(std::string name, std::unique_ptr<Module> m) {
  modules_.emplace_back(std::move(name), std::move(m));
  return *this;
}

Tensor Sequential::forward(const Tensor& x, Mode mode) {
  Tensor h = x;
  for (auto& [name, m] : modules_) h = m->forward(h, mode);
  return h;
}

Tensor Sequential::backward(const Tensor& grad_out) {
  Tensor g = grad_out;
  for (auto it = modules_.rbegin(); it != modules_.rend(); ++it) g = it->second->backward(g);
  return g;
}

void Sequential::collect(const std::string& prefix, std::vector<ParamRef>& params,
                         std::vector<BufferRef>& buffers) {
  for (auto& [name, m] : modules_) m->collect(join_name(prefix, name), params, buffers);
}

}  // namespace muslcat
