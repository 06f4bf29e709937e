#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "m3bind/common.hpp"
#include "m3bind/rng.hpp"

namespace m3bind {

// Dense row-major tensor of 64-bit floats. The only value type used for
// signals, embeddings, parameters and gradients. Tensors are plain values:
// copyable, movable, safe to share read-only.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(checked_size(shape_), 0.0) {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_size(shape_) != data_.size()) {
      throw ShapeError("Tensor: shape " + shape_str() + " does not match data length " +
                       std::to_string(data_.size()));
    }
  }

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

  static Tensor filled(std::vector<std::size_t> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor randn(std::vector<std::size_t> shape, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = stddev * rng.gaussian();
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const { require_rank2("rows"); return shape_[0]; }
  std::size_t cols() const { require_rank2("cols"); return shape_[1]; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<const double> span() const { return {data_.data(), data_.size()}; }
  std::span<double> span() { return {data_.data(), data_.size()}; }

  // Scalar extraction; the value of loss nodes.
  double item() const {
    if (size() != 1) throw ShapeError("Tensor::item: tensor " + shape_str() + " is not scalar");
    return data_[0];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double x : data_) {
      if (!std::isfinite(x)) return false;
    }
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) os << 'x';
      os << shape_[i];
    }
    os << ']';
    return os.str();
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  static std::size_t checked_size(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("Tensor: zero dimension not allowed");
      n *= d;
    }
    return shape.empty() ? 0 : n;
  }

  void require_rank2(const char* what) const {
    if (rank() != 2) throw ShapeError(std::string("Tensor::") + what + ": tensor " + shape_str() + " is not 2-D");
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

namespace detail {

inline void check_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) {
    throw NumericError(std::string(op) + ": non-finite values in result");
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  }
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected 2-D tensor, got " + t.shape_str());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural primitives. Every public operation verifies its
// result is finite; NaN/Inf poisoning fails loudly instead of propagating.
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  detail::check_finite(out, "add");
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  detail::check_finite(out, "sub");
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  detail::check_finite(out, "mul");
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
  detail::check_finite(out, "scale");
  return out;
}

inline Tensor tanh_ew(const Tensor& a) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
  detail::check_finite(out, "tanh");
  return out;
}

inline Tensor exp_ew(const Tensor& a) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
  detail::check_finite(out, "exp");
  return out;
}

// x: [n x d], bias: [d]; adds bias to every row.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  detail::require_rank2(x, "add_bias");
  if (bias.rank() != 1 || bias.size() != x.cols()) {
    throw ShapeError("add_bias: bias " + bias.shape_str() + " does not match " + x.shape_str());
  }
  Tensor out = x;
  const std::size_t n = x.rows(), d = x.cols();
  for (std::size_t r = 0; r < n; ++r) {
    double* row = out.data() + r * d;
    for (std::size_t c = 0; c < d; ++c) row[c] += bias[c];
  }
  detail::check_finite(out, "add_bias");
  return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions do not match: " + a.shape_str() + " x " + b.shape_str());
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a.data() + i * k;
    double* orow = out.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  detail::check_finite(out, "matmul");
  return out;
}

// a [n x k] times b^T where b is [m x k]; both operands stream row-wise.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul_nt");
  detail::require_rank2(b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: inner dimensions do not match: " + a.shape_str() + " x " +
                     b.shape_str() + "^T");
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a.data() + i * k;
    double* orow = out.data() + i * m;
    for (std::size_t j = 0; j < m; ++j) {
      const double* brow = b.data() + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      orow[j] = acc;
    }
  }
  detail::check_finite(out, "matmul_nt");
  return out;
}

// a^T times b where a is [k x n], b is [k x m].
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul_tn");
  detail::require_rank2(b, "matmul_tn");
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: inner dimensions do not match: " + a.shape_str() + "^T x " +
                     b.shape_str());
  }
  const std::size_t k = a.rows(), n = a.cols(), m = b.cols();
  Tensor out({n, m});
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a.data() + p * n;
    const double* brow = b.data() + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* orow = out.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  detail::check_finite(out, "matmul_tn");
  return out;
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank2(a, "transpose");
  const std::size_t n = a.rows(), m = a.cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

// Divides each row by its Euclidean norm. Rows with norm <= 1e-12 are
// degenerate embeddings and rejected by index.
inline Tensor row_l2_normalize(const Tensor& x) {
  detail::require_rank2(x, "row_l2_normalize");
  const std::size_t n = x.rows(), d = x.cols();
  Tensor out = x;
  for (std::size_t r = 0; r < n; ++r) {
    double* row = out.data() + r * d;
    double sq = 0.0;
    for (std::size_t c = 0; c < d; ++c) sq += row[c] * row[c];
    const double norm = std::sqrt(sq);
    if (!(norm > 1e-12)) {
      throw NumericError("row_l2_normalize: degenerate embedding at row " + std::to_string(r) +
                         " (norm " + std::to_string(norm) + ")");
    }
    const double inv = 1.0 / norm;
    for (std::size_t c = 0; c < d; ++c) row[c] *= inv;
  }
  detail::check_finite(out, "row_l2_normalize");
  return out;
}

// Row-wise log-softmax with max subtraction; rows sum to one after exp for
// any finite input, including logits of magnitude ~1e3.
inline Tensor log_softmax_rows(const Tensor& x) {
  detail::require_rank2(x, "log_softmax_rows");
  const std::size_t n = x.rows(), m = x.cols();
  Tensor out = x;
  for (std::size_t r = 0; r < n; ++r) {
    double* row = out.data() + r * m;
    double mx = row[0];
    for (std::size_t c = 1; c < m; ++c) mx = std::max(mx, row[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < m; ++c) sum += std::exp(row[c] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t c = 0; c < m; ++c) row[c] -= lse;
  }
  detail::check_finite(out, "log_softmax_rows");
  return out;
}

// Mean over all elements of the squared difference.
inline Tensor mse(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mse");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  Tensor out = Tensor::scalar(acc / static_cast<double>(a.size()));
  detail::check_finite(out, "mse");
  return out;
}

inline Tensor sum_diag(const Tensor& x) {
  detail::require_rank2(x, "sum_diag");
  if (x.rows() != x.cols()) {
    throw ShapeError("sum_diag: tensor " + x.shape_str() + " is not square");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) acc += x.at(i, i);
  Tensor out = Tensor::scalar(acc);
  detail::check_finite(out, "sum_diag");
  return out;
}

inline Tensor reduce_sum(const Tensor& x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i];
  Tensor out = Tensor::scalar(acc);
  detail::check_finite(out, "reduce_sum");
  return out;
}

inline Tensor reduce_mean(const Tensor& x) {
  if (x.size() == 0) throw ShapeError("reduce_mean: empty tensor");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i];
  Tensor out = Tensor::scalar(acc / static_cast<double>(x.size()));
  detail::check_finite(out, "reduce_mean");
  return out;
}

// Selects rows of a [V x d] table by id.
inline Tensor gather_rows(const Tensor& table, const std::vector<std::uint32_t>& ids) {
  detail::require_rank2(table, "gather_rows");
  if (ids.empty()) throw ValueError("gather_rows: empty id list");
  const std::size_t d = table.cols();
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= table.rows()) {
      throw ValueError("gather_rows: id " + std::to_string(ids[i]) + " out of range for table " +
                       table.shape_str());
    }
    const double* src = table.data() + ids[i] * d;
    std::copy(src, src + d, out.data() + i * d);
  }
  return out;
}

// Mean token embedding per sequence: out row i = mean of table rows named by
// sequences[i]. The pooled-lookup used by the text encoders.
inline Tensor embed_mean(const Tensor& table,
                         const std::vector<std::vector<std::uint32_t>>& sequences) {
  detail::require_rank2(table, "embed_mean");
  if (sequences.empty()) throw ValueError("embed_mean: empty batch");
  const std::size_t d = table.cols();
  Tensor out({sequences.size(), d});
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    const auto& seq = sequences[i];
    if (seq.empty()) {
      throw ValueError("embed_mean: empty token sequence at batch index " + std::to_string(i));
    }
    double* row = out.data() + i * d;
    for (std::uint32_t id : seq) {
      if (id >= table.rows()) {
        throw ValueError("embed_mean: token id " + std::to_string(id) +
                         " out of vocabulary (V=" + std::to_string(table.rows()) + ")");
      }
      const double* src = table.data() + id * d;
      for (std::size_t c = 0; c < d; ++c) row[c] += src[c];
    }
    const double inv = 1.0 / static_cast<double>(seq.size());
    for (std::size_t c = 0; c < d; ++c) row[c] *= inv;
  }
  detail::check_finite(out, "embed_mean");
  return out;
}

}  // namespace m3bind
