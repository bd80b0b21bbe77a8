// SPDX-License-Identifier: Apache-2.0
#include "dil/retriever.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "dil/binary_io.hpp"
#include "dil/error.hpp"
#include "dil/text.hpp"

namespace dil {

std::string to_string(SplitStrategy s) { return s == SplitStrategy::kNewline ? "newline" : "window"; }

SplitStrategy split_strategy_from_string(std::string_view s) {
  if (s == "newline") return SplitStrategy::kNewline;
  if (s == "window") return SplitStrategy::kWindow;
  throw ContractError("unknown split strategy '" + std::string(s) + "'");
}

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

struct Word {
  std::size_t begin, end;
};

std::vector<Word> words_of(std::string_view s) {
  std::vector<Word> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && is_space(s[i])) ++i;
    const std::size_t b = i;
    while (i < s.size() && !is_space(s[i])) ++i;
    if (b < i) out.push_back({b, i});
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

}  // namespace

std::vector<Paragraph> split_paragraphs(std::string_view doc, SplitStrategy strategy, const std::string& doc_id) {
  std::vector<Paragraph> out;
  const auto words = words_of(doc);
  if (strategy == SplitStrategy::kWindow) {
    for (const auto& win : text::sliding_windows(words.size(), kWindowWords, kWindowStride)) {
      Paragraph p{doc_id, {}, win.begin, win.end};
      for (std::size_t i = win.begin; i < win.end; ++i) {
        if (i > win.begin) p.text.push_back(' ');
        p.text.append(doc.substr(words[i].begin, words[i].end - words[i].begin));
      }
      out.push_back(std::move(p));
    }
    return out;
  }
  // Blank-line delimited blocks: a line holding only whitespace ends a block.
  std::size_t pos = 0;
  std::size_t block_begin = 0;
  std::size_t word_cursor = 0;
  const auto flush = [&](std::size_t block_end) {
    const std::string_view block = trim(doc.substr(block_begin, block_end - block_begin));
    const std::size_t first_word = word_cursor;
    while (word_cursor < words.size() && words[word_cursor].begin < block_end) ++word_cursor;
    if (block.size() >= kMinParagraphChars) out.push_back({doc_id, std::string(block), first_word, word_cursor});
  };
  while (pos < doc.size()) {
    std::size_t eol = doc.find('\n', pos);
    if (eol == std::string_view::npos) eol = doc.size();
    const bool blank = trim(doc.substr(pos, eol - pos)).empty();
    if (blank) {
      if (!trim(doc.substr(block_begin, pos - block_begin)).empty()) flush(pos);
      block_begin = std::min(doc.size(), eol + 1);
    }
    pos = eol + 1;
  }
  if (block_begin < doc.size() && !trim(doc.substr(block_begin)).empty()) flush(doc.size());
  return out;
}

void ParagraphStore::add_document(const std::string& doc_id, std::string_view text) {
  for (auto& p : split_paragraphs(text, strategy, doc_id)) paragraphs.push_back(std::move(p));
}

namespace {
constexpr std::uint32_t kStoreVersion = 1;
constexpr std::uint32_t kIndexVersion = 1;
}  // namespace

void ParagraphStore::save(const std::string& path) const {
  io::Writer out;
  out.put_magic("DILS");
  out.put<std::uint32_t>(kStoreVersion);
  out.put<std::uint8_t>(strategy == SplitStrategy::kNewline ? 0 : 1);
  out.put<std::uint32_t>(static_cast<std::uint32_t>(paragraphs.size()));
  for (const auto& p : paragraphs) {
    out.put_string(p.doc_id);
    out.put<std::uint64_t>(p.word_begin);
    out.put<std::uint64_t>(p.word_end);
    out.put_string(p.text);
  }
  io::write_file(path, out.bytes());
}

ParagraphStore ParagraphStore::load(const std::string& path) {
  const auto bytes = io::read_file(path);
  io::Reader in(bytes);
  in.expect_magic("DILS");
  if (in.get<std::uint32_t>() != kStoreVersion) throw FormatError(path + ": unsupported store version");
  ParagraphStore store;
  store.strategy = in.get<std::uint8_t>() == 0 ? SplitStrategy::kNewline : SplitStrategy::kWindow;
  const auto n = in.get<std::uint32_t>();
  store.paragraphs.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    Paragraph p;
    p.doc_id = in.get_string();
    p.word_begin = in.get<std::uint64_t>();
    p.word_end = in.get<std::uint64_t>();
    p.text = in.get_string();
    store.paragraphs.push_back(std::move(p));
  }
  if (!in.at_end()) throw FormatError(path + ": trailing bytes in paragraph store");
  return store;
}

std::vector<std::string> retrieval_terms(std::string_view s) {
  std::vector<std::string> out;
  for (auto& tok : text::tokenize(s).tokens) {
    const bool punct_only = tok.size() == 1 && static_cast<unsigned char>(tok[0]) < 0x80 &&
                            std::ispunct(static_cast<unsigned char>(tok[0]));
    if (!punct_only) out.push_back(std::move(tok));
  }
  return out;
}

double InvertedIndex::average_length() const {
  return lengths.empty() ? 0.0 : double(total_length) / double(lengths.size());
}

const std::vector<Posting>& InvertedIndex::postings_for(std::string_view term) const {
  static const std::vector<Posting> kEmpty;
  const auto it = postings.find(term);
  return it == postings.end() ? kEmpty : it->second;
}

std::uint32_t InvertedIndex::term_frequency(std::string_view term, std::uint32_t paragraph) const {
  const auto& list = postings_for(term);
  const auto it = std::lower_bound(list.begin(), list.end(), paragraph,
                                   [](const Posting& p, std::uint32_t id) { return p.paragraph < id; });
  return it != list.end() && it->paragraph == paragraph ? it->tf : 0;
}

InvertedIndex build_index(const ParagraphStore& store) {
  require(store.size() > 0, "build_index: empty paragraph store");
  InvertedIndex index;
  index.strategy = store.strategy;
  index.lengths.reserve(store.size());
  for (std::uint32_t id = 0; id < store.size(); ++id) {
    const auto terms = retrieval_terms(store.paragraphs[id].text);
    std::map<std::string, std::uint32_t> tf;
    for (const auto& t : terms) ++tf[t];
    for (const auto& [term, count] : tf) index.postings[term].push_back({id, count});
    index.lengths.push_back(static_cast<std::uint32_t>(terms.size()));
    index.total_length += terms.size();
  }
  return index;
}

void InvertedIndex::save(const std::string& path) const {
  io::Writer out;
  out.put_magic("DILI");
  out.put<std::uint32_t>(kIndexVersion);
  out.put<std::uint8_t>(strategy == SplitStrategy::kNewline ? 0 : 1);
  out.put<std::uint32_t>(static_cast<std::uint32_t>(lengths.size()));
  out.put<std::uint64_t>(total_length);
  for (auto len : lengths) out.put_varint(len);
  out.put_varint(postings.size());
  for (const auto& [term, list] : postings) {
    out.put_varint(term.size());
    out.put_bytes(term.data(), term.size());
    out.put_varint(list.size());
    std::uint32_t prev = 0;
    for (const auto& p : list) {
      out.put_varint(p.paragraph - prev);
      out.put_varint(p.tf);
      prev = p.paragraph;
    }
  }
  io::write_file(path, out.bytes());
}

InvertedIndex InvertedIndex::load(const std::string& path) {
  const auto bytes = io::read_file(path);
  io::Reader in(bytes);
  in.expect_magic("DILI");
  if (in.get<std::uint32_t>() != kIndexVersion) throw FormatError(path + ": unsupported index version");
  InvertedIndex index;
  index.strategy = in.get<std::uint8_t>() == 0 ? SplitStrategy::kNewline : SplitStrategy::kWindow;
  const auto n = in.get<std::uint32_t>();
  index.total_length = in.get<std::uint64_t>();
  index.lengths.resize(n);
  for (auto& len : index.lengths) len = static_cast<std::uint32_t>(in.get_varint());
  const auto terms = in.get_varint();
  for (std::uint64_t t = 0; t < terms; ++t) {
    std::string term(in.get_varint(), '\0');
    in.get_bytes(term.data(), term.size());
    const auto df = in.get_varint();
    std::vector<Posting> list;
    list.reserve(df);
    std::uint32_t prev = 0;
    for (std::uint64_t i = 0; i < df; ++i) {
      prev += static_cast<std::uint32_t>(in.get_varint());
      list.push_back({prev, static_cast<std::uint32_t>(in.get_varint())});
      if (prev >= n) throw FormatError(path + ": posting refers to unknown paragraph");
    }
    index.postings.emplace(std::move(term), std::move(list));
  }
  if (!in.at_end()) throw FormatError(path + ": trailing bytes in index");
  return index;
}

double bm25_idf(std::size_t num_paragraphs, std::size_t df) {
  return std::log(1.0 + (double(num_paragraphs) - double(df) + 0.5) / (double(df) + 0.5));
}

namespace {

std::vector<std::string> unique_sorted(std::vector<std::string> terms) {
  std::sort(terms.begin(), terms.end());
  terms.erase(std::unique(terms.begin(), terms.end()), terms.end());
  return terms;
}

double term_weight(double idf, std::uint32_t tf, std::uint32_t len, double avg, Bm25Params params) {
  const double f = tf;
  return idf * f * (params.k1 + 1.0) / (f + params.k1 * (1.0 - params.b + params.b * double(len) / avg));
}

}  // namespace

double bm25_score(const std::vector<std::string>& query_terms, std::uint32_t paragraph, const InvertedIndex& index,
                  Bm25Params params) {
  require(paragraph < index.num_paragraphs(), "bm25_score: unknown paragraph id");
  const double avg = index.average_length();
  double score = 0.0;
  for (const auto& term : unique_sorted(query_terms)) {
    const auto& list = index.postings_for(term);
    const std::uint32_t tf = index.term_frequency(term, paragraph);
    if (tf == 0) continue;
    score += term_weight(bm25_idf(index.num_paragraphs(), list.size()), tf, index.lengths[paragraph], avg, params);
  }
  return score;
}

std::vector<RetrievalResult> search(std::string_view question, const InvertedIndex& index, std::size_t p,
                                    Bm25Params params) {
  require(p >= 1, "search: p must be at least 1");
  const auto terms = unique_sorted(retrieval_terms(question));
  if (terms.empty() || index.num_paragraphs() == 0) return {};
  const double avg = index.average_length();
  std::vector<double> scores(index.num_paragraphs(), 0.0);
  for (const auto& term : terms) {
    const auto& list = index.postings_for(term);
    if (list.empty()) continue;
    const double idf = bm25_idf(index.num_paragraphs(), list.size());
    for (const auto& post : list) {
      scores[post.paragraph] += term_weight(idf, post.tf, index.lengths[post.paragraph], avg, params);
    }
  }
  std::vector<RetrievalResult> all(scores.size());
  for (std::uint32_t i = 0; i < scores.size(); ++i) all[i] = {i, scores[i]};
  const std::size_t keep = std::min(p, all.size());
  std::partial_sort(all.begin(), all.begin() + std::ptrdiff_t(keep), all.end(),
                    [](const RetrievalResult& a, const RetrievalResult& b) {
                      return a.score != b.score ? a.score > b.score : a.paragraph < b.paragraph;
                    });
  all.resize(keep);
  return all;
}

}  // namespace dil
