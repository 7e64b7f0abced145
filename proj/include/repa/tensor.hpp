#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "repa/rng.hpp"

namespace repa {

template <class T>
concept ScalarType = std::same_as<T, float> || std::same_as<T, double>;

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1 };

template <ScalarType T>
constexpr Dtype dtype_of() {
  if constexpr (std::same_as<T, float>) return Dtype::f32;
  return Dtype::f64;
}

inline const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) {
    require(d > 0, "tensor: dims must be positive");
    n *= d;
  }
  return n;
}

}  // namespace detail

// Dense row-major n-d array. Mixing element types in one expression is a
// compile error; there are no implicit casts anywhere.
template <ScalarType T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
    data_.assign(detail::shape_numel(shape_), T{0});
  }

  Tensor(std::vector<std::size_t> shape, std::vector<T> values)
      : shape_(std::move(shape)), data_(std::move(values)) {
    detail::require(detail::shape_numel(shape_) == data_.size(),
                    "tensor: product(dims) != data length");
  }

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<std::size_t> shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = T{1};
    return t;
  }

  static Tensor randn(Rng& rng, std::vector<std::size_t> shape, T stddev = T{1}) {
    Tensor t(std::move(shape));
    for (T& v : t.data_) v = static_cast<T>(rng.normal()) * stddev;
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const {
    detail::require(rank() == 2, "tensor: rows() requires rank 2");
    return shape_[0];
  }
  std::size_t cols() const {
    detail::require(rank() == 2, "tensor: cols() requires rank 2");
    return shape_[1];
  }

  // flat access
  T operator[](std::size_t i) const { return data_[i]; }
  T& operator[](std::size_t i) { return data_[i]; }

  // rank-2 access
  T operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  T& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }

  const std::vector<T>& data() const { return data_; }
  std::vector<T>& data() { return data_; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

namespace detail {

template <ScalarType T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.same_shape(b), std::string(op) + ": shape mismatch");
}

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

template <ScalarType T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  return out;
}

template <ScalarType T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
  return out;
}

template <ScalarType T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "hadamard");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
  return out;
}

template <ScalarType T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
  return out;
}

// adds a length-d row vector to every row of an n x d matrix
template <ScalarType T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& row) {
  detail::require(a.rank() == 2 && row.rank() == 1 && row.dim(0) == a.cols(),
                  "add_row: need n x d matrix and length-d vector");
  Tensor<T> out = a;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) += row[j];
  return out;
}

// ---- matmul ----------------------------------------------------------------

// Reference product. The inner summation runs left-to-right over k so results
// are bit-reproducible for a given element type.
template <ScalarType T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 operands required");
  detail::require(a.cols() == b.rows(), "matmul: inner dimensions mismatch (" +
                                            std::to_string(a.cols()) + " vs " +
                                            std::to_string(b.rows()) + ")");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor<T> out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc{0};
      for (std::size_t kk = 0; kk < k; ++kk) acc += a(i, kk) * b(kk, j);
      out(i, j) = acc;
    }
  }
  return out;
}

// Optional cache-blocked path. Summation order differs from matmul(), so it is
// held to tolerance-based tests only and is never used on equivalence-critical
// paths.
template <ScalarType T>
Tensor<T> matmul_blocked(const Tensor<T>& a, const Tensor<T>& b, std::size_t block = 32) {
  detail::require(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 operands required");
  detail::require(a.cols() == b.rows(), "matmul: inner dimensions mismatch");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor<T> out({m, n});
  for (std::size_t i0 = 0; i0 < m; i0 += block)
    for (std::size_t k0 = 0; k0 < k; k0 += block)
      for (std::size_t j0 = 0; j0 < n; j0 += block)
        for (std::size_t i = i0; i < std::min(i0 + block, m); ++i)
          for (std::size_t kk = k0; kk < std::min(k0 + block, k); ++kk) {
            const T aik = a(i, kk);
            for (std::size_t j = j0; j < std::min(j0 + block, n); ++j)
              out(i, j) += aik * b(kk, j);
          }
  return out;
}

template <ScalarType T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require(a.rank() == 2, "transpose: rank-2 required");
  Tensor<T> out({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

// ---- slicing / concatenation ------------------------------------------------

// columns [c0, c1) of a rank-2 tensor
template <ScalarType T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t c0, std::size_t c1) {
  detail::require(a.rank() == 2 && c0 < c1 && c1 <= a.cols(), "slice_cols: bad range");
  Tensor<T> out({a.rows(), c1 - c0});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = c0; j < c1; ++j) out(i, j - c0) = a(i, j);
  return out;
}

template <ScalarType T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_cols: empty input");
  std::size_t rows = parts[0].rows(), total = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == 2 && p.rows() == rows, "concat_cols: row mismatch");
    total += p.cols();
  }
  Tensor<T> out({rows, total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out(i, off + j) = p(i, j);
    off += p.cols();
  }
  return out;
}

template <ScalarType T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_rows: empty input");
  std::size_t cols = parts[0].cols(), total = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == 2 && p.cols() == cols, "concat_rows: col mismatch");
    total += p.rows();
  }
  Tensor<T> out({total, cols});
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < p.rows(); ++i)
      for (std::size_t j = 0; j < cols; ++j) out(off + i, j) = p(i, j);
    off += p.rows();
  }
  return out;
}

// ---- reductions --------------------------------------------------------------

template <ScalarType T>
Tensor<T> col_sums(const Tensor<T>& a) {  // length-d vector of column sums
  detail::require(a.rank() == 2, "col_sums: rank-2 required");
  Tensor<T> out({a.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out[j] += a(i, j);
  return out;
}

template <ScalarType T>
Tensor<T> col_means(const Tensor<T>& a) {
  Tensor<T> out = col_sums(a);
  for (std::size_t j = 0; j < out.numel(); ++j) out[j] /= static_cast<T>(a.rows());
  return out;
}

// ---- nonlinearities -----------------------------------------------------------

// row-wise softmax with per-row max subtraction
template <ScalarType T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
  detail::require(a.rank() == 2, "softmax_rows: rank-2 required");
  for (std::size_t i = 0; i < a.numel(); ++i)
    detail::require(!std::isnan(a[i]), "softmax_rows: NaN input");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T mx = a(i, 0);
    for (std::size_t j = 1; j < a.cols(); ++j) mx = std::max(mx, a(i, j));
    T sum{0};
    for (std::size_t j = 0; j < a.cols(); ++j) {
      out(i, j) = std::exp(a(i, j) - mx);
      sum += out(i, j);
    }
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) /= sum;
  }
  return out;
}

// exact (erf-based) GELU
template <ScalarType T>
T gelu_scalar(T x) {
  return x * T{0.5} * (T{1} + std::erf(x * static_cast<T>(0.7071067811865475)));
}

template <ScalarType T>
T gelu_prime_scalar(T x) {
  const T phi_cdf = T{0.5} * (T{1} + std::erf(x * static_cast<T>(0.7071067811865475)));
  const T phi_pdf = std::exp(-x * x * T{0.5}) * static_cast<T>(0.3989422804014327);
  return phi_cdf + x * phi_pdf;
}

template <ScalarType T>
Tensor<T> gelu(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = gelu_scalar(a[i]);
  return out;
}

template <ScalarType T>
Tensor<T> relu(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] > T{0} ? a[i] : T{0};
  return out;
}

// per-row normalization, then affine (gamma, beta). Variance is the biased
// (1/d) estimate.
template <ScalarType T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    T eps) {
  detail::require(x.rank() == 2, "layernorm: rank-2 required");
  detail::require(gamma.rank() == 1 && beta.rank() == 1 && gamma.dim(0) == x.cols() &&
                      beta.dim(0) == x.cols(),
                  "layernorm: gamma/beta must be length-d vectors");
  detail::require(eps > T{0}, "layernorm: eps must be positive");
  const std::size_t n = x.rows(), d = x.cols();
  Tensor<T> out({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    T mean{0};
    for (std::size_t j = 0; j < d; ++j) mean += x(i, j);
    mean /= static_cast<T>(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) {
      const T c = x(i, j) - mean;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T inv = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j)
      out(i, j) = gamma[j] * ((x(i, j) - mean) * inv) + beta[j];
  }
  return out;
}

// ---- comparison metrics --------------------------------------------------------

template <ScalarType T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "max_abs_diff");
  T m{0};
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// relative error at the scale of the compared tensors:
// max|a-b| / max(max|a|, max|b|, tiny). Robust against near-zero entries.
template <ScalarType T>
T scale_rel_err(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "scale_rel_err");
  T diff{0}, mag{0};
  for (std::size_t i = 0; i < a.numel(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    mag = std::max({mag, std::abs(a[i]), std::abs(b[i])});
  }
  const T tiny = static_cast<T>(1e-30);
  return diff / std::max(mag, tiny);
}

template <ScalarType T>
bool is_exact_identity(const Tensor<T>& w) {
  if (w.rank() != 2 || w.rows() != w.cols()) return false;
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j)
      if (w(i, j) != (i == j ? T{1} : T{0})) return false;
  return true;
}

template <ScalarType T>
bool all_zero(const Tensor<T>& t) {
  for (std::size_t i = 0; i < t.numel(); ++i)
    if (t[i] != T{0}) return false;
  return true;
}

}  // namespace repa
