// SPDX-License-Identifier: Apache-2.0
//
// Word-level tokenization, vocabularies, answer normalization and SQuAD ingestion.
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace dil::text {

using TokenId = std::int32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kCls = 2;
inline constexpr TokenId kSep = 3;
inline constexpr std::size_t kNumReserved = 4;

struct Span {
  std::size_t begin = 0;  // byte offset, inclusive
  std::size_t end = 0;    // byte offset, exclusive
};

struct TokenizedText {
  std::vector<std::string> tokens;  // lowercased surface forms
  std::vector<Span> offsets;        // into the original string

  [[nodiscard]] std::size_t size() const { return tokens.size(); }
};

/// Lowercases and splits on whitespace; every ASCII punctuation character is its own token.
TokenizedText tokenize(std::string_view text);

class Vocab {
 public:
  /// Reserved ids only.
  Vocab();
  explicit Vocab(const std::vector<std::string>& regular_tokens);

  [[nodiscard]] TokenId id(std::string_view token) const;
  [[nodiscard]] const std::string& token(TokenId id) const;
  [[nodiscard]] std::size_t size() const { return id_to_token_.size(); }
  [[nodiscard]] std::vector<TokenId> encode(const TokenizedText& t) const;

  /// One regular token per line; line i holds id i + 4.
  void save(const std::string& path) const;
  static Vocab load(const std::string& path);

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.id_to_token_ == b.id_to_token_; }

 private:
  void add(const std::string& token);

  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
};

/// Keeps the max_size - 4 most frequent tokens; ties broken lexicographically.
Vocab build_vocab(const std::vector<std::string>& corpus, std::size_t max_size);

struct Window {
  std::size_t begin = 0;
  std::size_t end = 0;  // exclusive
};

/// Windows [s, min(s + size, count)) for s = 0, stride, 2*stride, ... < count,
/// skipping a window whose end equals the previous window's end.
std::vector<Window> sliding_windows(std::size_t count, std::size_t size, std::size_t stride);

/// Lowercase, drop punctuation, drop the articles a/an/the, collapse whitespace.
std::string normalize_answer(std::string_view text);

struct GoldAnswer {
  std::string text;
  std::int64_t answer_start = -1;  // -1 when the source has no offset
};

struct QaExample {
  std::string id;
  std::string question;
  std::string context;
  std::vector<GoldAnswer> answers;
};

using QaDataset = std::vector<QaExample>;

/// Flattens a SQuAD v1.1 file. Throws FormatError on malformed JSON and
/// SchemaError (naming the JSON path) on missing fields or misplaced answers.
QaDataset load_squad_json(const std::string& path);
QaDataset parse_squad_json(std::string_view json, const std::string& source_name = "<memory>");

}  // namespace dil::text
