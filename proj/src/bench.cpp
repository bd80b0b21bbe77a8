// SPDX-License-Identifier: Apache-2.0
#include "dil/bench.hpp"

#include <chrono>
#include <iomanip>
#include <ostream>
#include <random>
#include <sstream>

#include "dil/error.hpp"
#include "dil/parallel.hpp"
#include "dil/reader.hpp"

namespace dil {

std::uint64_t CostModel::block_cost(std::uint64_t n) const { return block_macs(config_, n); }

double OdqaCostEstimate::speedup() const {
  return dil_encoder() == 0 ? 0.0 : double(baseline) / double(dil_encoder());
}

double OdqaCostEstimate::interactive_speedup() const {
  return dil_interactive() == 0 ? 0.0 : double(baseline) / double(dil_interactive());
}

OdqaCostEstimate estimate(const ModelConfig& config, std::uint64_t q, std::uint64_t p, std::uint64_t n_q,
                          std::uint64_t n_p) {
  config.validate();
  require(n_q <= config.q_max && n_p <= config.p_max, "estimate: segment lengths exceed the q_max/p_max budgets");
  const CostModel cost(config);
  OdqaCostEstimate e;
  e.q = q, e.p = p, e.n_q = n_q, e.n_p = n_p, e.n_s = n_q + n_p;
  e.l = config.layers;
  e.k = config.non_interaction_blocks;
  e.ni_q = e.k * q * cost.block_cost(n_q);
  e.ni_p = e.k * p * cost.block_cost(n_p);
  e.i_qp = (e.l - e.k) * q * p * cost.block_cost(e.n_s);
  e.baseline = e.l * q * p * cost.block_cost(e.n_s);
  e.head = q * p * cost.head_cost(e.n_s);
  return e;
}

std::string to_string(BenchMode m) {
  switch (m) {
    case BenchMode::kBaseline:
      return "baseline";
    case BenchMode::kDil:
      return "dil";
    case BenchMode::kDilWithPrebuiltCache:
      return "dil_with_prebuilt_cache";
  }
  return "?";
}

BenchMode bench_mode_from_string(const std::string& s) {
  if (s == "baseline") return BenchMode::kBaseline;
  if (s == "dil") return BenchMode::kDil;
  if (s == "dil_with_prebuilt_cache") return BenchMode::kDilWithPrebuiltCache;
  throw ContractError("unknown bench mode '" + s + "'");
}

double BenchReport::total_seconds() const {
  return ni_q.seconds + (ni_p_prebuilt ? 0.0 : ni_p.seconds) + i_qp.seconds;
}

std::uint64_t BenchReport::total_encoder_macs() const { return ni_q.macs + ni_p.macs + i_qp.macs; }

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<text::TokenId> random_ids(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
  std::uniform_int_distribution<text::TokenId> dist(text::TokenId(text::kNumReserved), text::TokenId(vocab - 1));
  std::vector<text::TokenId> ids(n);
  for (auto& id : ids) id = dist(rng);
  return ids;
}

/// Sums per-worker counters into a phase.
std::uint64_t total(const std::vector<MacCounter>& counters) {
  std::uint64_t n = 0;
  for (const auto& c : counters) n += c.count();
  return n;
}

}  // namespace

BenchReport run_benchmark(const ModelConfig& config, const BenchOptions& options, BenchMode mode) {
  config.validate();
  BenchReport r;
  r.mode = mode;
  r.config = config;
  r.q = options.q;
  r.p = options.p;
  r.n_q = options.n_q;
  r.n_p = options.n_p == 0 ? config.max_sequence() - options.n_q : options.n_p;
  r.workers = std::max<std::size_t>(1, options.workers);
  r.ni_p_prebuilt = mode == BenchMode::kDilWithPrebuiltCache;
  require(r.n_q >= 2 && r.n_q <= config.q_max, "run_benchmark: n_q outside [2, q_max]");
  require(r.n_p >= 2 && r.n_p <= config.p_max, "run_benchmark: n_p outside [2, p_max]");

  if (r.q == 0 || r.p == 0) return r;

  const EncoderWeights w = init_weights(config);
  std::mt19937_64 rng(options.seed);
  std::vector<QuestionSegment> questions;
  for (std::uint64_t i = 0; i < r.q; ++i) questions.push_back(make_question_segment(random_ids(rng, r.n_q - 2, config.vocab_size), config));
  std::vector<ParagraphSegment> paragraphs;
  for (std::uint64_t i = 0; i < r.p; ++i) paragraphs.push_back(make_paragraph_segment(random_ids(rng, r.n_p - 1, config.vocab_size), config));

  const std::size_t pairs = r.q * r.p;
  std::vector<MacCounter> block_counters(r.workers), head_counters(r.workers);

  if (mode == BenchMode::kBaseline) {
    const auto t0 = Clock::now();
    parallel_for(pairs, r.workers, [&](std::size_t worker, std::size_t i) {
      SegmentedInput in{questions[i / r.p], paragraphs[i % r.p]};
      Matrix h = embed(in.ids(), in.positions(), in.segments(), w);
      h = run_blocks(std::move(h), AttentionMask::full(in.size()), w, 0, config.layers, &block_counters[worker]);
      (void)qa_head(h, w, &head_counters[worker]);
    });
    r.i_qp = {seconds_since(t0), total(block_counters)};
    r.head.macs = total(head_counters);
    return r;
  }

  std::vector<Matrix> q_states(r.q), p_states(r.p);
  std::vector<MacCounter> q_counters(r.workers), p_counters(r.workers);
  auto t0 = Clock::now();
  parallel_for(r.q, r.workers, [&](std::size_t worker, std::size_t i) {
    q_states[i] = encode_question(questions[i], w, &q_counters[worker]);
  });
  r.ni_q = {seconds_since(t0), total(q_counters)};
  t0 = Clock::now();
  parallel_for(r.p, r.workers, [&](std::size_t worker, std::size_t i) {
    p_states[i] = encode_paragraph(paragraphs[i], w, &p_counters[worker]);
  });
  r.ni_p = {seconds_since(t0), total(p_counters)};
  t0 = Clock::now();
  parallel_for(pairs, r.workers, [&](std::size_t worker, std::size_t i) {
    Matrix h = Matrix::vstack(q_states[i / r.p], p_states[i % r.p]);
    const std::size_t n = h.rows();
    h = run_blocks(std::move(h), AttentionMask::full(n), w, config.non_interaction_blocks, config.layers,
                   &block_counters[worker]);
    (void)qa_head(h, w, &head_counters[worker]);
  });
  r.i_qp = {seconds_since(t0), total(block_counters)};
  r.head.macs = total(head_counters);
  return r;
}

void attach_baseline(BenchReport& report, const BenchReport& baseline) {
  const double t = report.total_seconds();
  report.speedup = t > 0.0 ? baseline.total_seconds() / t : 0.0;
}

double normalized_seconds(const BenchReport& bench, Phase phase) {
  const std::uint64_t l = bench.config.layers;
  const std::uint64_t k = bench.mode == BenchMode::kBaseline ? 0 : bench.config.non_interaction_blocks;
  double time = 0.0;
  std::uint64_t divisor = 0;
  switch (phase) {
    case Phase::kNiQ:
      time = bench.ni_q.seconds, divisor = k * bench.q;
      break;
    case Phase::kNiP:
      time = bench.ni_p.seconds, divisor = k * bench.p;
      break;
    case Phase::kIQp:
      time = bench.i_qp.seconds, divisor = (l - k) * bench.q * bench.p;
      break;
  }
  return divisor == 0 ? 0.0 : time / double(divisor);
}

void report(std::ostream& out, const BenchReport& b, bool normalize, bool tsv) {
  struct Row {
    std::string label;
    double seconds;
    std::uint64_t macs;
    double normalized;
    bool has_norm;
  };
  const bool baseline = b.mode == BenchMode::kBaseline;
  std::vector<Row> rows;
  if (!baseline) {
    rows.push_back({"NI Q", b.ni_q.seconds, b.ni_q.macs, normalized_seconds(b, Phase::kNiQ), true});
    rows.push_back({b.ni_p_prebuilt ? "NI P (prebuilt)" : "NI P", b.ni_p.seconds, b.ni_p.macs,
                    normalized_seconds(b, Phase::kNiP), true});
  }
  rows.push_back({"I Q-P", b.i_qp.seconds, b.i_qp.macs, normalized_seconds(b, Phase::kIQp), true});
  rows.push_back({"Total", b.total_seconds(), b.total_encoder_macs(), 0.0, false});

  std::ostringstream speed;
  speed << 'x' << std::fixed << std::setprecision(1) << (baseline ? 1.0 : b.speedup);
  if (tsv) {
    out << "mode\tphase\tseconds\tmacs" << (normalize ? "\tnormalized" : "") << '\n';
    for (const auto& r : rows) {
      out << to_string(b.mode) << '\t' << r.label << '\t' << r.seconds << '\t' << r.macs;
      if (normalize) out << '\t' << (r.has_norm ? r.normalized : 0.0);
      out << '\n';
    }
    out << to_string(b.mode) << "\tSpeedup\t" << speed.str() << "\t-" << (normalize ? "\t-" : "") << '\n';
    return;
  }
  out << "mode=" << to_string(b.mode) << " l=" << b.config.layers << " k=" << b.config.non_interaction_blocks
      << " q=" << b.q << " p=" << b.p << " n_q=" << b.n_q << " n_p=" << b.n_p << " workers=" << b.workers << '\n';
  out << std::left << std::setw(18) << "phase" << std::right << std::setw(14) << "seconds" << std::setw(18)
      << "MACs";
  if (normalize) out << std::setw(14) << "normalized";
  out << '\n';
  for (const auto& r : rows) {
    out << std::left << std::setw(18) << r.label << std::right << std::setw(14) << std::setprecision(4) << std::fixed
        << r.seconds << std::setw(18) << r.macs;
    if (normalize) {
      out << std::setw(14);
      if (r.has_norm) {
        out << std::scientific << std::setprecision(2) << r.normalized;
      } else {
        out << "";
      }
    }
    out << '\n' << std::defaultfloat;
  }
  out << std::left << std::setw(18) << "Speedup" << std::right << std::setw(14) << speed.str() << '\n';
  out << "MACs count matrix products only; softmax, layer norm and GELU are excluded. "
         "Tokenization is not timed. I Q-P time includes the QA head.\n";
}

}  // namespace dil
