#include "muslcat/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace muslcat {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (data_.size() != shape_numel(shape_)) {
    throw std::invalid_argument("tensor: " + std::to_string(data_.size()) +
                                " values do not fill shape " + shape_str(shape_));
  }
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t m = rows.size();
  const std::size_t n = m ? rows.begin()->size() : 0;
  std::vector<double> v;
  v.reserve(m * n);
  for (const auto& r : rows) {
    if (r.size() != n) throw std::invalid_argument("tensor: ragged matrix literal");
    v.insert(v.end(), r.begin(), r.end());
  }
  return Tensor({m, n}, std::move(v));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw std::out_of_range("tensor: axis " + std::to_string(axis) + " out of range for " +
                            shape_str(shape_));
  }
  return shape_[axis];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw std::invalid_argument("reshape: " + shape_str(shape_) + " -> " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool all_finite(const Tensor& t) {
  return std::all_of(t.values().begin(), t.values().end(),
                     [](double v) { return std::isfinite(v); });
}

void check_finite(const Tensor& t, const std::string& where) {
  const auto v = t.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      std::ostringstream os;
      os << where << ": non-finite value " << v[i] << " at flat index " << i << " of "
         << shape_str(t.shape());
      throw std::domain_error(os.str());
    }
  }
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("max_abs_diff: shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double sum(const Tensor& t) {
  long double s = 0.0L;
  for (double v : t.values()) s += v;
  return static_cast<double>(s);
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, const char* op, F f) {
  require_same_shape(a, b, op);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return zip(a, b, "add", [](double x, double y) { return x + y; });
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return zip(a, b, "sub", [](double x, double y) { return x - y; });
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return zip(a, b, "mul", [](double x, double y) { return x * y; });
}

Tensor scale(const Tensor& a, double s) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
  return out;
}

void add_inplace(Tensor& acc, const Tensor& b) {
  require_same_shape(acc, b, "add_inplace");
  double* p = acc.data();
  const double* q = b.data();
  for (std::size_t i = 0; i < acc.size(); ++i) p[i] += q[i];
}

void gemm_accumulate(const double* a, const double* b, double* c, std::size_t m,
                     std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

void gemm_nt_accumulate(const double* a, const double* b, double* c, std::size_t m,
                        std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * n + j] += s;
    }
  }
}

void gemm_tn_accumulate(const double* a, const double* b, double* c, std::size_t m,
                        std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double api = arow[i];
      if (api == 0.0) continue;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw std::invalid_argument("matmul: operands must have rank >= 2, got " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(a.rank() - 2);
  const std::size_t k = a.dim(a.rank() - 1);
  const std::size_t kb = b.dim(b.rank() - 2);
  const std::size_t n = b.dim(b.rank() - 1);
  const Shape lead_a(a.shape().begin(), a.shape().end() - 2);
  const Shape lead_b(b.shape().begin(), b.shape().end() - 2);
  const bool broadcast_b = b.rank() == 2;
  if (k != kb || (!broadcast_b && lead_a != lead_b)) {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  }
  Shape out_shape = lead_a;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor out(out_shape);
  const std::size_t batches = shape_numel(lead_a);
  for (std::size_t i = 0; i < batches; ++i) {
    const double* bp = broadcast_b ? b.data() : b.data() + i * k * n;
    gemm_accumulate(a.data() + i * m * k, bp, out.data() + i * m * n, m, k, n);
  }
  check_finite(out, "matmul");
  return out;
}

Tensor transpose_last2(const Tensor& a) {
  if (a.rank() < 2) throw std::invalid_argument("transpose_last2: rank < 2");
  const std::size_t m = a.dim(a.rank() - 2);
  const std::size_t n = a.dim(a.rank() - 1);
  Shape s = a.shape();
  std::swap(s[s.size() - 1], s[s.size() - 2]);
  Tensor out(s);
  if (m == 0 || n == 0) return out;
  const std::size_t batches = a.size() / (m * n);
  for (std::size_t bi = 0; bi < batches; ++bi) {
    const double* src = a.data() + bi * m * n;
    double* dst = out.data() + bi * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  }
  return out;
}

Tensor swap_last2(const Tensor& x) {
  if (x.rank() != 3) throw std::invalid_argument("swap_last2: expected rank 3, got " +
                                                 shape_str(x.shape()));
  return transpose_last2(x);
}

Tensor softmax_rows(const Tensor& x) {
  if (x.rank() < 1 || x.dim(x.rank() - 1) < 1) {
    throw std::invalid_argument("softmax_rows: last extent must be >= 1, got " +
                                shape_str(x.shape()));
  }
  const std::size_t n = x.dim(x.rank() - 1);
  const std::size_t rows = x.size() / n;
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      s += o[j];
    }
    const double inv = 1.0 / s;
    for (std::size_t j = 0; j < n; ++j) o[j] *= inv;
  }
  return out;
}

Tensor softmax_rows_backward(const Tensor& y, const Tensor& dy) {
  require_same_shape(y, dy, "softmax_rows_backward");
  const std::size_t n = y.dim(y.rank() - 1);
  const std::size_t rows = y.size() / n;
  Tensor dx(y.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* yr = y.data() + r * n;
    const double* gr = dy.data() + r * n;
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
    double* o = dx.data() + r * n;
    for (std::size_t j = 0; j < n; ++j) o[j] = yr[j] * (gr[j] - dot);
  }
  return dx;
}

Tensor concat(const std::vector<const Tensor*>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& ref = parts.front()->shape();
  if (axis >= ref.size()) throw std::invalid_argument("concat: axis out of range");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const Tensor* p : parts) {
    const Shape& s = p->shape();
    bool ok = s.size() == ref.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == ref[d];
    if (!ok) {
      throw std::invalid_argument("concat: shape " + shape_str(s) + " incompatible with " +
                                  shape_str(ref) + " along axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
  for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];
  Tensor out(out_shape);
  const std::size_t out_stride = out_shape[axis] * inner;
  std::size_t offset = 0;
  for (const Tensor* p : parts) {
    const std::size_t chunk = p->shape()[axis] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p->data() + o * chunk, chunk, out.data() + o * out_stride + offset);
    }
    offset += chunk;
  }
  return out;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin > end || end > x.dim(axis)) {
    throw std::invalid_argument("slice: [" + std::to_string(begin) + ", " + std::to_string(end) +
                                ") invalid on axis " + std::to_string(axis) + " of " +
                                shape_str(x.shape()));
  }
  Shape s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t in_stride = s[axis] * inner;
  s[axis] = end - begin;
  Tensor out(s);
  const std::size_t chunk = (end - begin) * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.data() + o * in_stride + begin * inner, chunk, out.data() + o * chunk);
  }
  return out;
}

}  // namespace muslcat
