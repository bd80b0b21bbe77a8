// SPDX-License-Identifier: Apache-2.0
//
// Paragraph splitting and Okapi BM25 over an in-memory inverted index.
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace dil {

enum class SplitStrategy {
  kNewline,  // blank-line delimited, items under 30 characters dropped
  kWindow,   // 100-word windows every 50 words
};

std::string to_string(SplitStrategy s);
SplitStrategy split_strategy_from_string(std::string_view s);

inline constexpr std::size_t kMinParagraphChars = 30;
inline constexpr std::size_t kWindowWords = 100;
inline constexpr std::size_t kWindowStride = 50;

struct Paragraph {
  std::string doc_id;
  std::string text;
  std::size_t word_begin = 0;  // offsets in whitespace-separated words of the document
  std::size_t word_end = 0;
};

std::vector<Paragraph> split_paragraphs(std::string_view doc, SplitStrategy strategy,
                                        const std::string& doc_id = {});

/// Paragraph ids are positions in `paragraphs`.
struct ParagraphStore {
  SplitStrategy strategy = SplitStrategy::kWindow;
  std::vector<Paragraph> paragraphs;

  [[nodiscard]] std::size_t size() const { return paragraphs.size(); }
  void add_document(const std::string& doc_id, std::string_view text);

  /// "DILS" magic, version, strategy, then length-prefixed UTF-8 records.
  void save(const std::string& path) const;
  static ParagraphStore load(const std::string& path);
};

/// Terms used for retrieval: tokenizer output with punctuation-only tokens dropped.
std::vector<std::string> retrieval_terms(std::string_view text);

struct Posting {
  std::uint32_t paragraph = 0;
  std::uint32_t tf = 0;
  friend bool operator==(const Posting&, const Posting&) = default;
};

struct InvertedIndex {
  std::map<std::string, std::vector<Posting>, std::less<>> postings;  // sorted by paragraph id
  std::vector<std::uint32_t> lengths;                                  // terms per paragraph
  std::uint64_t total_length = 0;
  SplitStrategy strategy = SplitStrategy::kWindow;

  [[nodiscard]] std::size_t num_paragraphs() const { return lengths.size(); }
  [[nodiscard]] double average_length() const;
  [[nodiscard]] const std::vector<Posting>& postings_for(std::string_view term) const;
  [[nodiscard]] std::uint32_t term_frequency(std::string_view term, std::uint32_t paragraph) const;

  /// "DILI" magic, version, store metadata, term-sorted postings as varints.
  void save(const std::string& path) const;
  static InvertedIndex load(const std::string& path);

  friend bool operator==(const InvertedIndex&, const InvertedIndex&) = default;
};

InvertedIndex build_index(const ParagraphStore& store);

struct Bm25Params {
  double k1 = 0.9;
  double b = 0.4;
};

/// ln(1 + (N - df + 0.5) / (df + 0.5)).
double bm25_idf(std::size_t num_paragraphs, std::size_t df);

double bm25_score(const std::vector<std::string>& query_terms, std::uint32_t paragraph, const InvertedIndex& index,
                  Bm25Params params = {});

struct RetrievalResult {
  std::uint32_t paragraph = 0;
  double score = 0.0;
  friend bool operator==(const RetrievalResult&, const RetrievalResult&) = default;
};

/// Top-p by BM25, score descending then paragraph id ascending. Paragraphs
/// sharing no term with the query score 0 and still fill the list.
std::vector<RetrievalResult> search(std::string_view question, const InvertedIndex& index, std::size_t p,
                                    Bm25Params params = {});

}  // namespace dil
