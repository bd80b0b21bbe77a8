// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major float64 kernels with multiply-accumulate accounting.
#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <new>
#include <optional>
#include <span>
#include <vector>

namespace dil {

/// 64-byte aligned storage. Vectorized kernels choose their summation order
/// from the data address, so equal inputs at differently aligned addresses
/// could otherwise round differently.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
    return true;
  }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, Storage values);
  Matrix(std::size_t rows, std::size_t cols, const std::vector<double>& values);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  [[nodiscard]] std::size_t rows() const { return rows_; }
  [[nodiscard]] std::size_t cols() const { return cols_; }
  [[nodiscard]] std::size_t size() const { return data_.size(); }
  [[nodiscard]] bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  [[nodiscard]] std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }
  double* data() { return data_.data(); }
  [[nodiscard]] const double* data() const { return data_.data(); }
  Storage& values() { return data_; }
  [[nodiscard]] const Storage& values() const { return data_; }

  /// Rows [begin, end) as a new matrix.
  [[nodiscard]] Matrix slice_rows(std::size_t begin, std::size_t end) const;
  /// Columns [begin, end) as a new matrix.
  [[nodiscard]] Matrix slice_cols(std::size_t begin, std::size_t end) const;
  void set_cols(std::size_t begin, const Matrix& block);
  [[nodiscard]] Matrix transposed() const;
  [[nodiscard]] bool all_finite() const;

  static Matrix identity(std::size_t n);
  /// Stacks a on top of b.
  static Matrix vstack(const Matrix& a, const Matrix& b);

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Storage data_;
};

/// Cumulative multiply-accumulate counter. One per execution context.
class MacCounter {
 public:
  void add(std::uint64_t macs) {
    if (enabled_) count_ += macs;
  }
  [[nodiscard]] std::uint64_t count() const { return count_; }
  void reset() { count_ = 0; }
  void set_enabled(bool on) { enabled_ = on; }
  [[nodiscard]] bool enabled() const { return enabled_; }

 private:
  std::uint64_t count_ = 0;
  bool enabled_ = true;
};

/// Row-wise attendability mask; true = attendable.
class AttentionMask {
 public:
  AttentionMask() = default;
  explicit AttentionMask(std::size_t n, bool fill = true) : n_(n), bits_(n * n, fill ? 1 : 0) {}

  [[nodiscard]] std::size_t size() const { return n_; }
  [[nodiscard]] bool operator()(std::size_t r, std::size_t c) const { return bits_[r * n_ + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v) { bits_[r * n_ + c] = v ? 1 : 0; }
  [[nodiscard]] std::span<const std::uint8_t> row(std::size_t r) const { return {bits_.data() + r * n_, n_}; }

  static AttentionMask full(std::size_t n) { return AttentionMask(n, true); }
  /// Attention allowed only inside [0, split) and inside [split, n).
  static AttentionMask block_diagonal(std::size_t n, std::size_t split);
  /// Full attention among the first `valid` rows; trailing padding columns masked everywhere.
  static AttentionMask with_padding(std::size_t n, std::size_t valid);

 private:
  std::size_t n_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// a × b; counter += a.rows × a.cols × b.cols.
Matrix matmul(const Matrix& a, const Matrix& b, MacCounter* counter = nullptr);
/// aᵀ × b.
Matrix matmul_tn(const Matrix& a, const Matrix& b, MacCounter* counter = nullptr);
/// a × bᵀ.
Matrix matmul_nt(const Matrix& a, const Matrix& b, MacCounter* counter = nullptr);

/// Adds the 1×cols row vector `bias` to every row.
void add_row_vector(Matrix& m, const Matrix& bias);
void add_inplace(Matrix& a, const Matrix& b);
void scale_inplace(Matrix& a, double s);
/// Column sums as a 1×cols matrix.
Matrix column_sums(const Matrix& m);

/// Row softmax with max subtraction. Masked entries are exactly zero.
Matrix softmax_rows(const Matrix& m, const AttentionMask* mask = nullptr);

struct LayerNormCache {
  Matrix normalized;             // x̂ before the affine transform
  std::vector<double> inv_std;   // per row
};

Matrix layer_norm(const Matrix& m, const Matrix& gamma, const Matrix& beta, double eps,
                  LayerNormCache* cache = nullptr);

double gelu(double x);
double gelu_derivative(double x);
Matrix gelu(const Matrix& m);

/// Throws ContractError when the matrix holds NaN or Inf.
void ensure_finite(const Matrix& m, const char* where);

}  // namespace dil
