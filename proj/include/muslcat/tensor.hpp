#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace muslcat {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense row-major array of doubles. Activations use (batch, channel, time).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Rank-3 accessor, the common activation layout.
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  Tensor reshaped(Shape shape) const;
  void fill(double value);

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Throws std::domain_error naming `where` and the first offending index.
void check_finite(const Tensor& t, const std::string& where);
bool all_finite(const Tensor& t);

double max_abs_diff(const Tensor& a, const Tensor& b);
double sum(const Tensor& t);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
void add_inplace(Tensor& acc, const Tensor& b);

// (..., m, k) x (..., k, n) -> (..., m, n). A rank-2 right operand is
// broadcast over the leading extents of the left one.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose_last2(const Tensor& a);

// Softmax over the last axis with max subtraction.
Tensor softmax_rows(const Tensor& x);
// Given y = softmax_rows(x) and dL/dy, returns dL/dx.
Tensor softmax_rows_backward(const Tensor& y, const Tensor& dy);

// (B, C, L) <-> (B, L, C).
Tensor swap_last2(const Tensor& x);

Tensor concat(const std::vector<const Tensor*>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);

// Plain triple-loop kernel: c[m x n] += a[m x k] * b[k x n].
void gemm_accumulate(const double* a, const double* b, double* c, std::size_t m,
                     std::size_t k, std::size_t n);
// c[m x n] += a[m x k] * b[n x k]^T
void gemm_nt_accumulate(const double* a, const double* b, double* c, std::size_t m,
                        std::size_t k, std::size_t n);
// c[m x n] += a[k x m]^T * b[k x n]
void gemm_tn_accumulate(const double* a, const double* b, double* c, std::size_t m,
                        std::size_t k, std::size_t n);

}  // namespace muslcat
