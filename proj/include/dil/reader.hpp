// SPDX-License-Identifier: Apache-2.0
//
// Delayed-interaction forward pass, QA output head and span decoding.
//
// The first k blocks run on the question and on the paragraph separately; the
// remaining l - k blocks run on their concatenation. Paragraph positions start
// at q_max whatever the question length, so paragraph states after the first k
// blocks depend on the paragraph alone and can be computed ahead of time.
#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "dil/encoder.hpp"
#include "dil/text.hpp"

namespace dil {

inline constexpr std::size_t kMaxAnswerTokens = 30;

/// [CLS] q... [SEP]; positions 0..n_q-1; segment 0.
struct QuestionSegment {
  std::vector<text::TokenId> ids;

  [[nodiscard]] std::size_t size() const { return ids.size(); }
  [[nodiscard]] std::vector<std::size_t> positions() const;
  [[nodiscard]] std::vector<std::size_t> segments() const;
};

/// p... [SEP]; positions q_max..q_max+n_p-1; segment 1.
struct ParagraphSegment {
  std::vector<text::TokenId> ids;
  std::vector<text::Span> offsets;  // one per paragraph token, excluding the final [SEP]
  std::size_t q_max = 0;

  [[nodiscard]] std::size_t size() const { return ids.size(); }
  [[nodiscard]] std::vector<std::size_t> positions() const;
  [[nodiscard]] std::vector<std::size_t> segments() const;
};

struct SegmentedInput {
  QuestionSegment question;
  ParagraphSegment paragraph;

  [[nodiscard]] std::size_t size() const { return question.size() + paragraph.size(); }
  [[nodiscard]] std::vector<text::TokenId> ids() const;
  [[nodiscard]] std::vector<std::size_t> positions() const;
  [[nodiscard]] std::vector<std::size_t> segments() const;
};

/// Questions longer than q_max - 2 tokens are truncated.
QuestionSegment make_question_segment(const text::TokenizedText& question, const text::Vocab& vocab,
                                      const ModelConfig& config);
/// One paragraph segment built from raw ids (offsets left empty).
ParagraphSegment make_paragraph_segment(std::vector<text::TokenId> tokens, const ModelConfig& config);
QuestionSegment make_question_segment(std::vector<text::TokenId> tokens, const ModelConfig& config);

/// Token windows of at most p_max - 1 tokens, stride half the window, covering the paragraph.
std::vector<ParagraphSegment> make_paragraph_windows(const text::TokenizedText& paragraph,
                                                     const text::Vocab& vocab, const ModelConfig& config);

struct SpanLogits {
  std::vector<double> start;
  std::vector<double> end;
};

/// Embedding plus blocks [0, k) over the question alone.
Matrix encode_question(const QuestionSegment& q, const EncoderWeights& w, MacCounter* counter = nullptr);
/// Embedding plus blocks [0, k) over the paragraph alone. Question-free by construction.
Matrix encode_paragraph(const ParagraphSegment& p, const EncoderWeights& w, MacCounter* counter = nullptr);

/// d × 2 projection of the final hidden states into start/end logits.
SpanLogits qa_head(const Matrix& hidden, const EncoderWeights& w, MacCounter* counter = nullptr);

/// Concatenates question then paragraph rows, runs blocks [k, l) with full attention, then the QA head.
SpanLogits dil_forward(const Matrix& q_states, const Matrix& p_states, const EncoderWeights& w,
                       MacCounter* counter = nullptr);

/// The unsplit model: embedding and all l blocks over the concatenated input.
SpanLogits baseline_forward(const SegmentedInput& input, const EncoderWeights& w, MacCounter* counter = nullptr);

struct SpanPrediction {
  std::size_t start = 0;  // paragraph-segment token index
  std::size_t end = 0;    // inclusive
  double start_logit = 0.0;
  double end_logit = 0.0;
  double reader_score = 0.0;  // (start_logit + end_logit) / 2
  std::string answer;
  std::size_t paragraph_id = 0;
  std::size_t window = 0;
};

/// Best (i, j) with i <= j < i + max_answer_tokens inside the paragraph
/// segment (final [SEP] excluded). Ties: smaller start, then smaller end.
SpanPrediction decode_span(const SpanLogits& logits, const SegmentedInput& input,
                           std::size_t max_answer_tokens = kMaxAnswerTokens);

/// Recovers answer text from the paragraph's character offsets.
std::string span_text(const ParagraphSegment& p, std::string_view paragraph_text, std::size_t start,
                      std::size_t end);

/// Tokenize, segment, encode both parts, run the delayed-interaction forward
/// and decode. Long paragraphs are windowed and the best-scoring window wins.
SpanPrediction read(std::string_view question, std::string_view paragraph, const EncoderWeights& w,
                    const text::Vocab& vocab, MacCounter* counter = nullptr);

/// Same pipeline using the unsplit model.
SpanPrediction read_baseline(std::string_view question, std::string_view paragraph, const EncoderWeights& w,
                             const text::Vocab& vocab);

}  // namespace dil
