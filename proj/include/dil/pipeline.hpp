// SPDX-License-Identifier: Apache-2.0
//
// Retriever + reader open-domain QA: top-p BM25 retrieval, cache-backed
// reading of every candidate, score aggregation, and EM/F1/R evaluation.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dil/cache.hpp"
#include "dil/encoder.hpp"
#include "dil/reader.hpp"
#include "dil/retriever.hpp"
#include "dil/text.hpp"

namespace dil {

inline constexpr std::size_t kDefaultTopP = 29;
inline constexpr double kDefaultMu = 0.5;

enum class AggregationMode { kReaderOnly, kFused };

struct AggregationPolicy {
  AggregationMode mode = AggregationMode::kFused;
  double mu = kDefaultMu;

  /// s_r for reader-only, mu·s_r + (1 - mu)·s_bm25 when fused.
  [[nodiscard]] double score(double reader_score, double bm25_score) const;
  static AggregationPolicy reader_only() { return {AggregationMode::kReaderOnly, 1.0}; }
  static AggregationPolicy fused(double mu) { return {AggregationMode::kFused, mu}; }
};

/// Best span of one retrieved paragraph.
struct Candidate {
  std::uint32_t paragraph = 0;
  double bm25 = 0.0;
  SpanPrediction span;
};

struct OdqaAnswer {
  std::string question_id;
  bool has_answer = false;
  std::string answer;
  std::uint32_t paragraph = 0;
  double reader_score = 0.0;
  double bm25_score = 0.0;
  double fused_score = 0.0;  // policy score of the winner
};

/// Highest policy score wins; ties go to the smaller paragraph id.
OdqaAnswer select_answer(const std::vector<Candidate>& candidates, const AggregationPolicy& policy);

/// Read-only bundle of everything ask() needs. With cache == nullptr paragraph
/// states are computed on the fly.
class OdqaSystem {
 public:
  OdqaSystem(const ParagraphStore& store, const InvertedIndex& index, const EncoderWeights& weights,
             const text::Vocab& vocab, const ParagraphCache* cache = nullptr);

  [[nodiscard]] std::vector<RetrievalResult> retrieve(std::string_view question, std::size_t p) const;
  /// Retrieval plus the best span of every retrieved paragraph.
  [[nodiscard]] std::vector<Candidate> candidates(std::string_view question, std::size_t p) const;
  [[nodiscard]] Candidate read_candidate(const QuestionSegment& question, const Matrix& q_states,
                                         const RetrievalResult& hit) const;
  /// Logits of every window of a paragraph for a question, in window order.
  [[nodiscard]] std::vector<SpanLogits> paragraph_logits(std::string_view question, std::uint32_t paragraph) const;
  [[nodiscard]] OdqaAnswer ask(std::string_view question, std::size_t p, const AggregationPolicy& policy) const;

  [[nodiscard]] const ParagraphStore& store() const { return store_; }
  [[nodiscard]] const InvertedIndex& index() const { return index_; }
  [[nodiscard]] const EncoderWeights& weights() const { return weights_; }
  [[nodiscard]] const text::Vocab& vocab() const { return vocab_; }

 private:
  [[nodiscard]] std::vector<Matrix> paragraph_states(std::uint32_t paragraph,
                                                     const std::vector<ParagraphSegment>& windows) const;

  const ParagraphStore& store_;
  const InvertedIndex& index_;
  const EncoderWeights& weights_;
  const text::Vocab& vocab_;
  const ParagraphCache* cache_;
  std::uint64_t fingerprint_;
};

/// SQuAD-style exact match and token F1 (each in [0, 1]), max over golds.
std::pair<double, double> compute_em_f1(std::string_view prediction, const std::vector<std::string>& golds);

/// Percent of questions with some normalized gold answer contained in some
/// normalized retrieved paragraph.
double compute_recall(const std::vector<std::vector<std::string>>& retrieved_texts,
                      const std::vector<std::vector<std::string>>& golds);

struct EvalReport {
  double em = 0.0;  // percent
  double f1 = 0.0;  // percent
  double recall = 0.0;
  std::size_t questions = 0;
  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

struct EvalRow {
  std::string question_id;
  OdqaAnswer answer;
  double em = 0.0;
  double f1 = 0.0;
};

/// Both aggregation variants scored over the same top-p candidate lists.
struct EvalResult {
  EvalReport reader_only;
  EvalReport fused;
  double mu = kDefaultMu;
  std::size_t p = 0;
  std::vector<EvalRow> reader_only_rows;  // sorted by question id
  std::vector<EvalRow> fused_rows;
};

EvalResult evaluate(const text::QaDataset& dataset, const OdqaSystem& system, std::size_t p, double mu,
                    std::size_t workers = 1);

/// Per-question TSV rows (policy, question id, prediction, EM, F1, paragraph,
/// s_r, s_bm25) then a summary line with EM/F1 without and with the retriever score, and R.
void write_eval_tsv(std::ostream& out, const EvalResult& result);

struct CvCandidate {
  std::uint32_t paragraph = 0;
  double reader_score = 0.0;
  double bm25_score = 0.0;
  bool correct = false;
};

using CvQuestion = std::vector<CvCandidate>;

struct MuSelection {
  double mu = kDefaultMu;
  std::vector<std::pair<double, double>> grid;  // (mu, mean EM across folds)
};

/// Grid 0.1..0.9 step 0.1. Best mean EM across folds wins; ties go to the
/// larger mean fused margin between the best correct and best incorrect
/// candidate, then to the smaller mu.
MuSelection cross_validate_mu(const std::vector<CvQuestion>& questions, std::size_t folds = 5);

/// Candidate lists with EM correctness for cross_validate_mu.
std::vector<CvQuestion> collect_cv_questions(const text::QaDataset& dataset, const OdqaSystem& system, std::size_t p);

}  // namespace dil
