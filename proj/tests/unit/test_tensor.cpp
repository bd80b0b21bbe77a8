// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "dil/error.hpp"
#include "dil/tensor.hpp"
#include "support/oracles.hpp"

using namespace dil;

TEST_CASE("matmul basics and MAC charge") {
  MacCounter c;
  const Matrix m{{1, 2, 3}, {4, 5, 6}};
  CHECK(matmul(Matrix::identity(2), m, &c) == m);
  CHECK(c.count() == 2 * 2 * 3);

  c.reset();
  const Matrix p = matmul(Matrix{{2}}, Matrix{{3}}, &c);
  CHECK(p(0, 0) == 6.0);
  CHECK(c.count() == 1);

  CHECK_THROWS_AS(matmul(Matrix(2, 3), Matrix(2, 3)), ContractError);
}

TEST_CASE("matmul variants match the triple loop") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = oracle::random_matrix(rng, 3, 4), b = oracle::random_matrix(rng, 4, 5);
    CHECK(oracle::max_abs_diff(matmul(a, b), oracle::naive_matmul(a, b)) <= 1e-12);
    CHECK(oracle::max_abs_diff(matmul_tn(a.transposed(), b), oracle::naive_matmul(a, b)) <= 1e-12);
    CHECK(oracle::max_abs_diff(matmul_nt(a, b.transposed()), oracle::naive_matmul(a, b)) <= 1e-12);
  }
}

TEST_CASE("matmul is associative at tolerance") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> dim(1, 8);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t r = dim(rng), s = dim(rng), t = dim(rng), u = dim(rng);
    const Matrix a = oracle::random_matrix(rng, r, s), b = oracle::random_matrix(rng, s, t),
                 c = oracle::random_matrix(rng, t, u);
    CHECK(oracle::max_abs_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) <= 1e-9);
  }
}

TEST_CASE("non-finite values are contract violations") {
  Matrix a{{1.0, std::numeric_limits<double>::quiet_NaN()}};
  CHECK_THROWS_AS(matmul(a, Matrix{{1.0}, {1.0}}), ContractError);
}

TEST_CASE("softmax rows") {
  const Matrix half = softmax_rows(Matrix{{0.0, 0.0}});
  CHECK(half(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(half(0, 1) == doctest::Approx(0.5).epsilon(1e-15));

  const Matrix big = softmax_rows(Matrix{{1000.0, 0.0}});
  CHECK(big.all_finite());
  CHECK(big(0, 0) == doctest::Approx(1.0));
  CHECK(big(0, 1) < 1e-300);

  const Matrix s = softmax_rows(Matrix{{1.0, 2.0, 3.0}});
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int j = 0; j < 3; ++j) CHECK(std::abs(s(0, j) - std::exp(j + 1.0) / z) <= 1e-12);
}

TEST_CASE("softmax masking, normalization and shift invariance") {
  std::mt19937_64 rng(2);
  AttentionMask mask = AttentionMask::block_diagonal(6, 2);
  const Matrix x = oracle::random_matrix(rng, 6, 6, -5, 5);
  const Matrix p = softmax_rows(x, &mask);
  for (std::size_t i = 0; i < 6; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 6; ++j) {
      if (!mask(i, j)) CHECK(p(i, j) == 0.0);
      sum += p(i, j);
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
  Matrix shifted = x;
  for (auto& v : shifted.values()) v += 123.25;
  CHECK(oracle::max_abs_diff(softmax_rows(shifted, &mask), p) <= 1e-12);

  AttentionMask dead(2, true);
  dead.set(1, 0, false);
  dead.set(1, 1, false);
  CHECK_THROWS_AS(softmax_rows(Matrix(2, 2), &dead), ContractError);
}

TEST_CASE("attention masks") {
  const auto bd = AttentionMask::block_diagonal(5, 2);
  CHECK(bd(0, 1));
  CHECK_FALSE(bd(0, 2));
  CHECK_FALSE(bd(4, 1));
  CHECK(bd(4, 2));
  const auto pad = AttentionMask::with_padding(4, 3);
  for (std::size_t r = 0; r < 4; ++r) CHECK_FALSE(pad(r, 3));
  CHECK(pad(3, 0));
}

TEST_CASE("layer norm") {
  const Matrix gamma(1, 4, 1.0), beta(1, 4, 0.0);
  const Matrix flat = layer_norm(Matrix{{3, 3, 3, 3}}, gamma, beta, 1e-12);
  for (double v : flat.values()) CHECK(v == 0.0);

  const Matrix b2{{0.5, -1, 2, 7}};
  const Matrix shifted = layer_norm(Matrix{{1, 2, 3, 9}}, Matrix(1, 4, 0.0), b2, 1e-12);
  CHECK(shifted == b2);

  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix x = oracle::random_matrix(rng, 1, 16, -3, 3);
    const Matrix g = oracle::random_matrix(rng, 1, 16), b = oracle::random_matrix(rng, 1, 16);
    const auto want = oracle::naive_layer_norm_row(x.values(), g, b, 1e-12);
    CHECK(oracle::max_abs_diff(layer_norm(x, g, b, 1e-12).values(), want) <= 1e-12);

    LayerNormCache cache;
    (void)layer_norm(x, g, b, 1e-12, &cache);
    double mean = 0.0, var = 0.0;
    for (double v : cache.normalized.values()) mean += v;
    mean /= 16.0;
    for (double v : cache.normalized.values()) var += (v - mean) * (v - mean);
    var /= 16.0;
    CHECK(std::abs(mean) <= 1e-10);
    CHECK(std::abs(var - 1.0) <= 1e-10);
  }
}

TEST_CASE("gelu") {
  CHECK(gelu(0.0) == 0.0);
  CHECK(std::abs(gelu(10.0) - 10.0) <= 1e-6);
  CHECK(std::abs(gelu(1.0) - oracle::naive_gelu(1.0)) <= 1e-15);
  // tanh form stays within 1e-3 of the exact erf form
  for (double x = -4.0; x <= 4.0; x += 0.25) CHECK(std::abs(gelu(x) - 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)))) <= 1e-3);
  double prev = gelu(-0.75);
  for (double x = -0.7; x <= 6.0; x += 0.05) {
    CHECK(gelu(x) > prev);
    prev = gelu(x);
  }
  for (double x = -3.0; x <= 3.0; x += 0.5) {
    const double h = 1e-6;
    CHECK(std::abs(gelu_derivative(x) - (gelu(x + h) - gelu(x - h)) / (2 * h)) <= 1e-8);
  }
}

TEST_CASE("MAC counter determinism and enable flag") {
  std::mt19937_64 rng(1);
  const Matrix a = oracle::random_matrix(rng, 5, 7), b = oracle::random_matrix(rng, 7, 3);
  MacCounter c1, c2;
  for (int i = 0; i < 3; ++i) (void)matmul(a, b, &c1), (void)matmul(a, b, &c2);
  CHECK(c1.count() == c2.count());
  CHECK(c1.count() == 3 * 5 * 7 * 3);
  c1.set_enabled(false);
  (void)matmul(a, b, &c1);
  CHECK(c1.count() == 3 * 5 * 7 * 3);
}
