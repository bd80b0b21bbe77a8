// SPDX-License-Identifier: Apache-2.0
//
// Closed-form MAC cost model of the split encoder and a wall-clock harness
// that measures q questions against p paragraphs phase by phase.
//
// MACs count matrix products only: softmax, layer norm, GELU and bias adds
// are O(n·d) and left out. Embedding lookups cost no MACs.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "dil/encoder.hpp"

namespace dil {

class CostModel {
 public:
  explicit CostModel(const ModelConfig& config) : config_(config) {}

  /// 4·n·d² + 2·n²·d + 2·n·d·d_ff.
  [[nodiscard]] std::uint64_t block_cost(std::uint64_t n) const;
  [[nodiscard]] std::uint64_t embedding_cost(std::uint64_t /*n*/) const { return 0; }
  /// d × 2 start/end projection.
  [[nodiscard]] std::uint64_t head_cost(std::uint64_t n) const { return 2 * n * config_.d_model; }

 private:
  ModelConfig config_;
};

struct OdqaCostEstimate {
  std::uint64_t q = 0, p = 0, n_q = 0, n_p = 0, n_s = 0, l = 0, k = 0;
  std::uint64_t ni_q = 0;      // k · q · blockcost(n_q)
  std::uint64_t ni_p = 0;      // k · p · blockcost(n_p)
  std::uint64_t i_qp = 0;      // (l - k) · q · p · blockcost(n_s)
  std::uint64_t baseline = 0;  // l · q · p · blockcost(n_s)
  std::uint64_t head = 0;      // q · p · headcost(n_s), identical in both models

  [[nodiscard]] std::uint64_t dil_encoder() const { return ni_q + ni_p + i_qp; }
  [[nodiscard]] std::uint64_t dil_interactive() const { return ni_q + i_qp; }
  /// Baseline encoder MACs over delayed-interaction encoder MACs.
  [[nodiscard]] double speedup() const;
  /// Same, with the paragraph phase treated as precomputed.
  [[nodiscard]] double interactive_speedup() const;
};

/// n_q and n_p are actual segment lengths; n_s = n_q + n_p.
OdqaCostEstimate estimate(const ModelConfig& config, std::uint64_t q, std::uint64_t p, std::uint64_t n_q,
                          std::uint64_t n_p);

enum class BenchMode { kBaseline, kDil, kDilWithPrebuiltCache };
std::string to_string(BenchMode m);
BenchMode bench_mode_from_string(const std::string& s);

struct PhaseStats {
  double seconds = 0.0;
  std::uint64_t macs = 0;
};

struct BenchReport {
  BenchMode mode = BenchMode::kDil;
  ModelConfig config;
  std::uint64_t q = 0, p = 0, n_q = 0, n_p = 0;
  std::size_t workers = 1;
  PhaseStats ni_q;     // question encoding, blocks [0, k)
  PhaseStats ni_p;     // paragraph encoding, blocks [0, k)
  PhaseStats i_qp;     // pairs through blocks [k, l) (all l blocks for baseline) and the head
  PhaseStats head;     // QA head MACs over all pairs (time included in i_qp)
  bool ni_p_prebuilt = false;  // paragraph phase done ahead of time, excluded from total
  double speedup = 0.0;        // baseline total / this total, when a baseline is attached

  [[nodiscard]] double total_seconds() const;
  [[nodiscard]] std::uint64_t total_encoder_macs() const;
};

struct BenchOptions {
  std::uint64_t q = 100;
  std::uint64_t p = 100;
  std::uint64_t n_q = 16;
  std::uint64_t n_p = 0;  // 0 = fill the budget: max_sequence - n_q
  std::size_t workers = 1;
  std::uint64_t seed = 0;
};

/// Random weights from config.seed, random token ids from options.seed.
BenchReport run_benchmark(const ModelConfig& config, const BenchOptions& options, BenchMode mode);

/// Sets report.speedup from a baseline measured on the same shapes.
void attach_baseline(BenchReport& report, const BenchReport& baseline);

/// Row layout: NI Q, NI P, I Q-P, Total, Speedup. Normalized values
/// divide each phase time by its block count times its input count.
void report(std::ostream& out, const BenchReport& bench, bool normalize, bool tsv = false);

enum class Phase { kNiQ, kNiP, kIQp };

/// Phase time divided by (blocks × inputs); 0 when the divisor is 0.
double normalized_seconds(const BenchReport& bench, Phase phase);

}  // namespace dil
