// SPDX-License-Identifier: Apache-2.0
#include "dil/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <ostream>

#include "dil/error.hpp"
#include "dil/parallel.hpp"

namespace dil {

double AggregationPolicy::score(double reader_score, double bm25_score) const {
  if (mode == AggregationMode::kReaderOnly) return reader_score;
  return mu * reader_score + (1.0 - mu) * bm25_score;
}

OdqaAnswer select_answer(const std::vector<Candidate>& candidates, const AggregationPolicy& policy) {
  OdqaAnswer best;
  for (const auto& c : candidates) {
    const double s = policy.score(c.span.reader_score, c.bm25);
    if (!best.has_answer || s > best.fused_score || (s == best.fused_score && c.paragraph < best.paragraph)) {
      best.has_answer = true;
      best.answer = c.span.answer;
      best.paragraph = c.paragraph;
      best.reader_score = c.span.reader_score;
      best.bm25_score = c.bm25;
      best.fused_score = s;
    }
  }
  return best;
}

OdqaSystem::OdqaSystem(const ParagraphStore& store, const InvertedIndex& index, const EncoderWeights& weights,
                       const text::Vocab& vocab, const ParagraphCache* cache)
    : store_(store),
      index_(index),
      weights_(weights),
      vocab_(vocab),
      cache_(cache),
      fingerprint_(model_fingerprint(weights, vocab)) {
  if (index.num_paragraphs() != store.size()) {
    throw ContractError("OdqaSystem: index and paragraph store disagree on paragraph count");
  }
  if (cache_) {
    if (cache_->fingerprint() != fingerprint_) {
      throw StaleCacheError("OdqaSystem: cache was built for a different model; rebuild it");
    }
    if (cache_->size() != store.size()) {
      throw ContractError("OdqaSystem: cache and paragraph store disagree on paragraph count");
    }
  }
}

std::vector<RetrievalResult> OdqaSystem::retrieve(std::string_view question, std::size_t p) const {
  if (p == 0) return {};
  return search(question, index_, p);
}

std::vector<Matrix> OdqaSystem::paragraph_states(std::uint32_t paragraph,
                                                 const std::vector<ParagraphSegment>& windows) const {
  if (cache_) {
    auto states = cache_->get(paragraph, fingerprint_);
    if (states.size() != windows.size()) throw ChecksumError("cached window count does not match the paragraph");
    return states;
  }
  std::vector<Matrix> states;
  states.reserve(windows.size());
  for (const auto& w : windows) states.push_back(encode_paragraph(w, weights_));
  return states;
}

Candidate OdqaSystem::read_candidate(const QuestionSegment& question, const Matrix& q_states,
                                     const RetrievalResult& hit) const {
  const std::string& text = store_.paragraphs.at(hit.paragraph).text;
  const auto windows = make_paragraph_windows(text::tokenize(text), vocab_, weights_.config);
  const auto states = paragraph_states(hit.paragraph, windows);
  Candidate best{hit.paragraph, hit.score, {}};
  bool have = false;
  SegmentedInput input;
  input.question = question;
  for (std::size_t wi = 0; wi < windows.size(); ++wi) {
    input.paragraph = windows[wi];
    SpanPrediction span = decode_span(dil_forward(q_states, states[wi], weights_), input);
    if (!have || span.reader_score > best.span.reader_score) {
      span.window = wi;
      span.paragraph_id = hit.paragraph;
      span.answer = span_text(input.paragraph, text, span.start, span.end);
      best.span = std::move(span);
      have = true;
    }
  }
  if (!have) best.span.reader_score = -std::numeric_limits<double>::infinity();
  return best;
}

std::vector<Candidate> OdqaSystem::candidates(std::string_view question, std::size_t p) const {
  const auto hits = retrieve(question, p);
  std::vector<Candidate> out;
  if (hits.empty()) return out;
  const QuestionSegment q = make_question_segment(text::tokenize(question), vocab_, weights_.config);
  const Matrix q_states = encode_question(q, weights_);
  out.reserve(hits.size());
  for (const auto& hit : hits) out.push_back(read_candidate(q, q_states, hit));
  return out;
}

std::vector<SpanLogits> OdqaSystem::paragraph_logits(std::string_view question, std::uint32_t paragraph) const {
  const QuestionSegment q = make_question_segment(text::tokenize(question), vocab_, weights_.config);
  const Matrix q_states = encode_question(q, weights_);
  const auto windows =
      make_paragraph_windows(text::tokenize(store_.paragraphs.at(paragraph).text), vocab_, weights_.config);
  const auto states = paragraph_states(paragraph, windows);
  std::vector<SpanLogits> out;
  for (const auto& s : states) out.push_back(dil_forward(q_states, s, weights_));
  return out;
}

OdqaAnswer OdqaSystem::ask(std::string_view question, std::size_t p, const AggregationPolicy& policy) const {
  return select_answer(candidates(question, p), policy);
}

std::pair<double, double> compute_em_f1(std::string_view prediction, const std::vector<std::string>& golds) {
  require(!golds.empty(), "compute_em_f1: need at least one gold answer");
  const std::string pred = text::normalize_answer(prediction);
  const auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < s.size()) {
      const std::size_t j = std::min(s.find(' ', i), s.size());
      if (j > i) out.push_back(s.substr(i, j - i));
      i = j + 1;
    }
    return out;
  };
  const auto pred_tokens = split(pred);
  double best_em = 0.0;
  double best_f1 = 0.0;
  for (const auto& g : golds) {
    const std::string gold = text::normalize_answer(g);
    best_em = std::max(best_em, pred == gold ? 1.0 : 0.0);
    const auto gold_tokens = split(gold);
    double f1 = 0.0;
    if (pred_tokens.empty() || gold_tokens.empty()) {
      f1 = pred_tokens.empty() && gold_tokens.empty() ? 1.0 : 0.0;
    } else {
      std::map<std::string, int> counts;
      for (const auto& t : gold_tokens) ++counts[t];
      std::size_t common = 0;
      for (const auto& t : pred_tokens) {
        auto it = counts.find(t);
        if (it != counts.end() && it->second > 0) {
          --it->second;
          ++common;
        }
      }
      if (common > 0) {
        const double precision = double(common) / double(pred_tokens.size());
        const double recall = double(common) / double(gold_tokens.size());
        f1 = 2.0 * precision * recall / (precision + recall);
      }
    }
    best_f1 = std::max(best_f1, f1);
  }
  return {best_em, best_f1};
}

double compute_recall(const std::vector<std::vector<std::string>>& retrieved_texts,
                      const std::vector<std::vector<std::string>>& golds) {
  require(retrieved_texts.size() == golds.size(), "compute_recall: question count mismatch");
  if (golds.empty()) return 0.0;
  std::size_t covered = 0;
  for (std::size_t q = 0; q < golds.size(); ++q) {
    bool hit = false;
    for (const auto& t : retrieved_texts[q]) {
      const std::string norm = text::normalize_answer(t);
      for (const auto& g : golds[q]) {
        const std::string ng = text::normalize_answer(g);
        if (!ng.empty() && norm.find(ng) != std::string::npos) {
          hit = true;
          break;
        }
      }
      if (hit) break;
    }
    covered += hit ? 1 : 0;
  }
  return 100.0 * double(covered) / double(golds.size());
}

namespace {

std::vector<std::string> gold_texts(const text::QaExample& ex) {
  std::vector<std::string> out;
  for (const auto& a : ex.answers) out.push_back(a.text);
  return out;
}

EvalRow score_row(const text::QaExample& ex, OdqaAnswer answer) {
  EvalRow row;
  row.question_id = ex.id;
  answer.question_id = ex.id;
  const auto golds = gold_texts(ex);
  if (!golds.empty()) {
    const auto [em, f1] = compute_em_f1(answer.has_answer ? answer.answer : std::string(), golds);
    row.em = em;
    row.f1 = f1;
  }
  row.answer = std::move(answer);
  return row;
}

EvalReport summarize(const std::vector<EvalRow>& rows, double recall) {
  EvalReport r;
  r.questions = rows.size();
  r.recall = recall;
  if (rows.empty()) return r;
  for (const auto& row : rows) {
    r.em += row.em;
    r.f1 += row.f1;
  }
  r.em *= 100.0 / double(rows.size());
  r.f1 *= 100.0 / double(rows.size());
  return r;
}

}  // namespace

EvalResult evaluate(const text::QaDataset& dataset, const OdqaSystem& system, std::size_t p, double mu,
                    std::size_t workers) {
  require(mu >= 0.0 && mu <= 1.0, "evaluate: mu must be in [0, 1]");
  // Canonical order makes the report independent of dataset order.
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dataset[a].id < dataset[b].id; });

  EvalResult result;
  result.mu = mu;
  result.p = p;
  result.reader_only_rows.resize(order.size());
  result.fused_rows.resize(order.size());
  std::vector<std::vector<std::string>> retrieved(order.size());
  std::vector<std::vector<std::string>> golds(order.size());
  const AggregationPolicy reader = AggregationPolicy::reader_only();
  const AggregationPolicy fused = AggregationPolicy::fused(mu);
  parallel_for(order.size(), workers, [&](std::size_t, std::size_t i) {
    const auto& ex = dataset[order[i]];
    const auto cands = system.candidates(ex.question, p);
    result.reader_only_rows[i] = score_row(ex, select_answer(cands, reader));
    result.fused_rows[i] = score_row(ex, select_answer(cands, fused));
    for (const auto& c : cands) retrieved[i].push_back(system.store().paragraphs[c.paragraph].text);
    golds[i] = gold_texts(ex);
  });
  const double recall = compute_recall(retrieved, golds);
  result.reader_only = summarize(result.reader_only_rows, recall);
  result.fused = summarize(result.fused_rows, recall);
  return result;
}

void write_eval_tsv(std::ostream& out, const EvalResult& result) {
  out << std::setprecision(10);
  out << "policy\tquestion_id\tprediction\tem\tf1\tparagraph\ts_r\ts_bm25\n";
  const auto rows = [&out](const char* policy, const std::vector<EvalRow>& rs) {
    for (const auto& r : rs) {
      out << policy << '\t' << r.question_id << '\t' << r.answer.answer << '\t' << r.em << '\t' << r.f1 << '\t';
      if (r.answer.has_answer) {
        out << r.answer.paragraph << '\t' << r.answer.reader_score << '\t' << r.answer.bm25_score << '\n';
      } else {
        out << "-\t-\t-\n";
      }
    }
  };
  rows("w/o", result.reader_only_rows);
  rows("w/", result.fused_rows);
  out << "# p=" << result.p << "\tmu=" << result.mu << "\tEM w/o=" << result.reader_only.em
      << "\tEM w/=" << result.fused.em << "\tF1 w/o=" << result.reader_only.f1 << "\tF1 w/=" << result.fused.f1
      << "\tR=" << result.reader_only.recall << '\n';
}

MuSelection cross_validate_mu(const std::vector<CvQuestion>& questions, std::size_t folds) {
  require(folds >= 2, "cross_validate_mu: need at least two folds");
  MuSelection sel;
  double best_em = -1.0;
  double best_margin = -std::numeric_limits<double>::infinity();
  for (int step = 1; step <= 9; ++step) {
    const double mu = step / 10.0;
    const AggregationPolicy policy = AggregationPolicy::fused(mu);
    std::vector<double> fold_hits(folds, 0.0);
    std::vector<std::size_t> fold_count(folds, 0);
    double margin_sum = 0.0;
    std::size_t margin_count = 0;
    for (std::size_t q = 0; q < questions.size(); ++q) {
      const auto& cands = questions[q];
      const std::size_t f = q % folds;
      ++fold_count[f];
      if (cands.empty()) continue;
      const CvCandidate* winner = nullptr;
      double win_score = 0.0;
      double best_right = -std::numeric_limits<double>::infinity();
      double best_wrong = -std::numeric_limits<double>::infinity();
      for (const auto& c : cands) {
        const double s = policy.score(c.reader_score, c.bm25_score);
        if (!winner || s > win_score || (s == win_score && c.paragraph < winner->paragraph)) {
          winner = &c;
          win_score = s;
        }
        (c.correct ? best_right : best_wrong) = std::max(c.correct ? best_right : best_wrong, s);
      }
      fold_hits[f] += winner->correct ? 1.0 : 0.0;
      if (std::isfinite(best_right) && std::isfinite(best_wrong)) {
        margin_sum += best_right - best_wrong;
        ++margin_count;
      }
    }
    double mean_em = 0.0;
    std::size_t used = 0;
    for (std::size_t f = 0; f < folds; ++f) {
      if (fold_count[f] == 0) continue;
      mean_em += 100.0 * fold_hits[f] / double(fold_count[f]);
      ++used;
    }
    mean_em = used ? mean_em / double(used) : 0.0;
    const double margin = margin_count ? margin_sum / double(margin_count) : 0.0;
    sel.grid.emplace_back(mu, mean_em);
    const double tol = 1e-12 * std::max(1.0, std::abs(margin));
    if (mean_em > best_em || (mean_em == best_em && margin > best_margin + tol)) {
      best_em = mean_em;
      best_margin = margin;
      sel.mu = mu;
    }
  }
  return sel;
}

std::vector<CvQuestion> collect_cv_questions(const text::QaDataset& dataset, const OdqaSystem& system,
                                             std::size_t p) {
  std::vector<CvQuestion> out;
  out.reserve(dataset.size());
  for (const auto& ex : dataset) {
    const auto golds = gold_texts(ex);
    CvQuestion q;
    for (const auto& c : system.candidates(ex.question, p)) {
      q.push_back({c.paragraph, c.span.reader_score, c.bm25, compute_em_f1(c.span.answer, golds).first > 0.0});
    }
    out.push_back(std::move(q));
  }
  return out;
}

}  // namespace dil
