// SPDX-License-Identifier: Apache-2.0
#include "dil/reader.hpp"

#include <algorithm>
#include <limits>

#include "dil/error.hpp"

namespace dil {

std::vector<std::size_t> QuestionSegment::positions() const {
  std::vector<std::size_t> pos(ids.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
  return pos;
}

std::vector<std::size_t> QuestionSegment::segments() const { return std::vector<std::size_t>(ids.size(), 0); }

std::vector<std::size_t> ParagraphSegment::positions() const {
  std::vector<std::size_t> pos(ids.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = q_max + i;
  return pos;
}

std::vector<std::size_t> ParagraphSegment::segments() const { return std::vector<std::size_t>(ids.size(), 1); }

std::vector<text::TokenId> SegmentedInput::ids() const {
  std::vector<text::TokenId> out = question.ids;
  out.insert(out.end(), paragraph.ids.begin(), paragraph.ids.end());
  return out;
}

std::vector<std::size_t> SegmentedInput::positions() const {
  auto out = question.positions();
  const auto p = paragraph.positions();
  out.insert(out.end(), p.begin(), p.end());
  return out;
}

std::vector<std::size_t> SegmentedInput::segments() const {
  auto out = question.segments();
  const auto p = paragraph.segments();
  out.insert(out.end(), p.begin(), p.end());
  return out;
}

QuestionSegment make_question_segment(std::vector<text::TokenId> tokens, const ModelConfig& config) {
  if (tokens.size() + 2 > config.q_max) tokens.resize(config.q_max - 2);
  QuestionSegment q;
  q.ids.reserve(tokens.size() + 2);
  q.ids.push_back(text::kCls);
  q.ids.insert(q.ids.end(), tokens.begin(), tokens.end());
  q.ids.push_back(text::kSep);
  return q;
}

QuestionSegment make_question_segment(const text::TokenizedText& question, const text::Vocab& vocab,
                                      const ModelConfig& config) {
  return make_question_segment(vocab.encode(question), config);
}

ParagraphSegment make_paragraph_segment(std::vector<text::TokenId> tokens, const ModelConfig& config) {
  require(!tokens.empty(), "make_paragraph_segment: empty paragraph");
  require(tokens.size() + 1 <= config.p_max, "make_paragraph_segment: paragraph exceeds p_max - 1 tokens");
  ParagraphSegment p;
  p.ids = std::move(tokens);
  p.ids.push_back(text::kSep);
  p.q_max = config.q_max;
  return p;
}

std::vector<ParagraphSegment> make_paragraph_windows(const text::TokenizedText& paragraph,
                                                     const text::Vocab& vocab, const ModelConfig& config) {
  const std::size_t size = config.p_max - 1;
  const std::size_t stride = std::max<std::size_t>(1, size / 2);
  const auto ids = vocab.encode(paragraph);
  std::vector<ParagraphSegment> out;
  for (const auto& win : text::sliding_windows(ids.size(), size, stride)) {
    ParagraphSegment seg = make_paragraph_segment(
        std::vector<text::TokenId>(ids.begin() + std::ptrdiff_t(win.begin), ids.begin() + std::ptrdiff_t(win.end)),
        config);
    seg.offsets.assign(paragraph.offsets.begin() + std::ptrdiff_t(win.begin),
                       paragraph.offsets.begin() + std::ptrdiff_t(win.end));
    out.push_back(std::move(seg));
  }
  return out;
}

Matrix encode_question(const QuestionSegment& q, const EncoderWeights& w, MacCounter* counter) {
  require(q.size() >= 2 && q.size() <= w.config.q_max, "encode_question: question length outside [2, q_max]");
  Matrix h = embed(q.ids, q.positions(), q.segments(), w);
  return run_blocks(std::move(h), AttentionMask::full(q.size()), w, 0, w.config.non_interaction_blocks, counter);
}

Matrix encode_paragraph(const ParagraphSegment& p, const EncoderWeights& w, MacCounter* counter) {
  require(p.size() >= 1 && p.size() <= w.config.p_max, "encode_paragraph: paragraph length outside [1, p_max]");
  require(p.q_max == w.config.q_max, "encode_paragraph: segment built for a different q_max");
  Matrix h = embed(p.ids, p.positions(), p.segments(), w);
  return run_blocks(std::move(h), AttentionMask::full(p.size()), w, 0, w.config.non_interaction_blocks, counter);
}

SpanLogits qa_head(const Matrix& hidden, const EncoderWeights& w, MacCounter* counter) {
  Matrix logits = matmul(hidden, w.qa_weight, counter);
  add_row_vector(logits, w.qa_bias);
  SpanLogits out;
  out.start.resize(logits.rows());
  out.end.resize(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    out.start[i] = logits(i, 0);
    out.end[i] = logits(i, 1);
  }
  return out;
}

SpanLogits dil_forward(const Matrix& q_states, const Matrix& p_states, const EncoderWeights& w,
                       MacCounter* counter) {
  const std::size_t d = w.config.d_model;
  require(q_states.cols() == d && p_states.cols() == d, "dil_forward: state width does not match d_model");
  require(q_states.rows() >= 2 && p_states.rows() >= 1, "dil_forward: empty segment");
  Matrix joint = Matrix::vstack(q_states, p_states);
  const std::size_t n = joint.rows();
  joint = run_blocks(std::move(joint), AttentionMask::full(n), w, w.config.non_interaction_blocks,
                     w.config.layers, counter);
  return qa_head(joint, w, counter);
}

SpanLogits baseline_forward(const SegmentedInput& input, const EncoderWeights& w, MacCounter* counter) {
  Matrix h = embed(input.ids(), input.positions(), input.segments(), w);
  h = run_blocks(std::move(h), AttentionMask::full(input.size()), w, 0, w.config.layers, counter);
  return qa_head(h, w, counter);
}

SpanPrediction decode_span(const SpanLogits& logits, const SegmentedInput& input, std::size_t max_answer_tokens) {
  const std::size_t n_q = input.question.size();
  const std::size_t n_p = input.paragraph.size();
  require(logits.start.size() == n_q + n_p && logits.end.size() == n_q + n_p,
          "decode_span: logits do not cover the full sequence");
  require(n_p >= 2, "decode_span: empty paragraph");
  require(max_answer_tokens >= 1, "decode_span: max_answer_tokens must be positive");
  const std::size_t content = n_p - 1;  // final [SEP] excluded
  SpanPrediction best;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < content; ++i) {
    const std::size_t last = std::min(content, i + max_answer_tokens);
    for (std::size_t j = i; j < last; ++j) {
      const double ss = logits.start[n_q + i];
      const double se = logits.end[n_q + j];
      const double score = (ss + se) / 2.0;
      if (score > best_score) {
        best_score = score;
        best.start = i;
        best.end = j;
        best.start_logit = ss;
        best.end_logit = se;
        best.reader_score = score;
      }
    }
  }
  return best;
}

std::string span_text(const ParagraphSegment& p, std::string_view paragraph_text, std::size_t start,
                      std::size_t end) {
  require(start <= end && end < p.offsets.size(), "span_text: span outside the paragraph offsets");
  const std::size_t b = p.offsets[start].begin;
  const std::size_t e = p.offsets[end].end;
  return std::string(paragraph_text.substr(b, e - b));
}

namespace {

template <typename Forward>
SpanPrediction read_impl(std::string_view question, std::string_view paragraph, const EncoderWeights& w,
                         const text::Vocab& vocab, Forward&& forward) {
  const auto qtok = text::tokenize(question);
  const auto ptok = text::tokenize(paragraph);
  require(!qtok.tokens.empty(), "read: empty question");
  require(!ptok.tokens.empty(), "read: empty paragraph");
  SegmentedInput input;
  input.question = make_question_segment(qtok, vocab, w.config);
  SpanPrediction best;
  bool have = false;
  const auto windows = make_paragraph_windows(ptok, vocab, w.config);
  for (std::size_t wi = 0; wi < windows.size(); ++wi) {
    input.paragraph = windows[wi];
    SpanPrediction cand = decode_span(forward(input), input);
    if (!have || cand.reader_score > best.reader_score) {
      cand.window = wi;
      cand.answer = span_text(input.paragraph, paragraph, cand.start, cand.end);
      best = std::move(cand);
      have = true;
    }
  }
  return best;
}

}  // namespace

SpanPrediction read(std::string_view question, std::string_view paragraph, const EncoderWeights& w,
                    const text::Vocab& vocab, MacCounter* counter) {
  Matrix q_states;
  bool encoded = false;
  return read_impl(question, paragraph, w, vocab, [&](const SegmentedInput& in) {
    if (!encoded) {
      q_states = encode_question(in.question, w, counter);
      encoded = true;
    }
    return dil_forward(q_states, encode_paragraph(in.paragraph, w, counter), w, counter);
  });
}

SpanPrediction read_baseline(std::string_view question, std::string_view paragraph, const EncoderWeights& w,
                             const text::Vocab& vocab) {
  return read_impl(question, paragraph, w, vocab,
                   [&](const SegmentedInput& in) { return baseline_forward(in, w); });
}

}  // namespace dil
