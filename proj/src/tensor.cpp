// SPDX-License-Identifier: Apache-2.0
#include "dil/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "dil/error.hpp"

namespace dil {
namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

ConstMap view(const Matrix& m) { return ConstMap(m.data(), Eigen::Index(m.rows()), Eigen::Index(m.cols())); }
MutMap view(Matrix& m) { return MutMap(m.data(), Eigen::Index(m.rows()), Eigen::Index(m.cols())); }

std::string shape(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, Storage values)
    : rows_(rows), cols_(cols), data_(std::move(values)) {
  require(data_.size() == rows * cols, "Matrix: value count does not match shape");
}

Matrix::Matrix(std::size_t rows, std::size_t cols, const std::vector<double>& values)
    : Matrix(rows, cols, Storage(values.begin(), values.end())) {}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    require(r.size() == cols_, "Matrix: ragged initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::slice_rows(std::size_t begin, std::size_t end) const {
  require(begin <= end && end <= rows_, "slice_rows: range out of bounds");
  return Matrix(end - begin, cols_,
                Storage(data_.begin() + std::ptrdiff_t(begin * cols_), data_.begin() + std::ptrdiff_t(end * cols_)));
}

Matrix Matrix::slice_cols(std::size_t begin, std::size_t end) const {
  require(begin <= end && end <= cols_, "slice_cols: range out of bounds");
  Matrix out(rows_, end - begin);
  for (std::size_t r = 0; r < rows_; ++r) {
    std::copy_n(data_.begin() + std::ptrdiff_t(r * cols_ + begin), end - begin, out.row(r).begin());
  }
  return out;
}

void Matrix::set_cols(std::size_t begin, const Matrix& block) {
  require(block.rows() == rows_ && begin + block.cols() <= cols_, "set_cols: shape mismatch");
  for (std::size_t r = 0; r < rows_; ++r) {
    std::copy(block.row(r).begin(), block.row(r).end(), row(r).begin() + std::ptrdiff_t(begin));
  }
}

Matrix Matrix::transposed() const {
  Matrix out(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) out(c, r) = (*this)(r, c);
  return out;
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::vstack(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.cols() || a.empty() || b.empty(), "vstack: column mismatch");
  const std::size_t cols = a.empty() ? b.cols() : a.cols();
  Storage v;
  v.reserve(a.size() + b.size());
  v.insert(v.end(), a.values().begin(), a.values().end());
  v.insert(v.end(), b.values().begin(), b.values().end());
  return Matrix(a.rows() + b.rows(), cols, std::move(v));
}

AttentionMask AttentionMask::block_diagonal(std::size_t n, std::size_t split) {
  require(split <= n, "block_diagonal: split beyond size");
  AttentionMask m(n, false);
  for (std::size_t r = 0; r < n; ++r) {
    const bool first = r < split;
    for (std::size_t c = 0; c < n; ++c) m.set(r, c, first == (c < split));
  }
  return m;
}

AttentionMask AttentionMask::with_padding(std::size_t n, std::size_t valid) {
  require(valid >= 1 && valid <= n, "with_padding: need at least one valid column");
  AttentionMask m(n, false);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < valid; ++c) m.set(r, c, true);
  return m;
}

void ensure_finite(const Matrix& m, const char* where) {
  if (!m.all_finite()) throw ContractError(std::string(where) + ": non-finite value");
}

Matrix matmul(const Matrix& a, const Matrix& b, MacCounter* counter) {
  if (a.cols() != b.rows()) {
    throw ContractError("matmul: dimension mismatch " + shape(a) + " * " + shape(b));
  }
  Matrix out(a.rows(), b.cols());
  if (!out.empty() && a.cols() > 0) view(out).noalias() = view(a) * view(b);
  if (counter) counter->add(std::uint64_t(a.rows()) * a.cols() * b.cols());
  ensure_finite(out, "matmul");
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b, MacCounter* counter) {
  if (a.rows() != b.rows()) {
    throw ContractError("matmul_tn: dimension mismatch " + shape(a) + "^T * " + shape(b));
  }
  Matrix out(a.cols(), b.cols());
  if (!out.empty() && a.rows() > 0) view(out).noalias() = view(a).transpose() * view(b);
  if (counter) counter->add(std::uint64_t(a.cols()) * a.rows() * b.cols());
  ensure_finite(out, "matmul_tn");
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b, MacCounter* counter) {
  if (a.cols() != b.cols()) {
    throw ContractError("matmul_nt: dimension mismatch " + shape(a) + " * " + shape(b) + "^T");
  }
  Matrix out(a.rows(), b.rows());
  if (!out.empty() && a.cols() > 0) view(out).noalias() = view(a) * view(b).transpose();
  if (counter) counter->add(std::uint64_t(a.rows()) * a.cols() * b.rows());
  ensure_finite(out, "matmul_nt");
  return out;
}

void add_row_vector(Matrix& m, const Matrix& bias) {
  require(bias.rows() == 1 && bias.cols() == m.cols(), "add_row_vector: shape mismatch");
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) row[c] += bias(0, c);
  }
}

void add_inplace(Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add_inplace: shape mismatch");
  auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) av[i] += bv[i];
}

void scale_inplace(Matrix& a, double s) {
  for (auto& v : a.values()) v *= s;
}

Matrix column_sums(const Matrix& m) {
  Matrix out(1, m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) out(0, c) += row[c];
  }
  return out;
}

Matrix softmax_rows(const Matrix& m, const AttentionMask* mask) {
  if (mask) require(mask->size() == m.rows() && m.rows() == m.cols(), "softmax_rows: mask shape mismatch");
  Matrix out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto in = m.row(r);
    auto dst = out.row(r);
    const auto allowed = [&](std::size_t c) { return mask == nullptr || (*mask)(r, c); };
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < m.cols(); ++c)
      if (allowed(c)) mx = std::max(mx, in[c]);
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw ContractError("softmax_rows: row " + std::to_string(r) + " is fully masked");
    }
    double sum = 0.0;
    for (std::size_t c = 0; c < m.cols(); ++c) {
      const double e = allowed(c) ? std::exp(in[c] - mx) : 0.0;
      dst[c] = e;
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (auto& v : dst) v *= inv;
  }
  ensure_finite(out, "softmax_rows");
  return out;
}

Matrix layer_norm(const Matrix& m, const Matrix& gamma, const Matrix& beta, double eps,
                  LayerNormCache* cache) {
  require(gamma.size() == m.cols() && beta.size() == m.cols(), "layer_norm: gamma/beta length mismatch");
  const std::size_t n = m.cols();
  Matrix out(m.rows(), n);
  if (cache) {
    cache->normalized = Matrix(m.rows(), n);
    cache->inv_std.assign(m.rows(), 0.0);
  }
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto x = m.row(r);
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= double(n);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= double(n);
    const double inv_std = 1.0 / std::sqrt(var + eps);
    auto y = out.row(r);
    for (std::size_t c = 0; c < n; ++c) {
      const double xhat = (x[c] - mean) * inv_std;
      if (cache) cache->normalized(r, c) = xhat;
      y[c] = gamma.values()[c] * xhat + beta.values()[c];
    }
    if (cache) cache->inv_std[r] = inv_std;
  }
  ensure_finite(out, "layer_norm");
  return out;
}

namespace {
constexpr double kGeluC = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);
}  // namespace

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kSqrt2OverPi * (x + kGeluC * x * x * x)));
}

double gelu_derivative(double x) {
  const double u = kSqrt2OverPi * (x + kGeluC * x * x * x);
  const double t = std::tanh(u);
  const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluC * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

Matrix gelu(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) out.values()[i] = gelu(m.values()[i]);
  ensure_finite(out, "gelu");
  return out;
}

}  // namespace dil
