// SPDX-License-Identifier: Apache-2.0
#include "dil/text.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

#include "dil/error.hpp"

namespace dil::text {
namespace {

bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }
bool is_punct(unsigned char c) { return c < 0x80 && std::ispunct(c) != 0; }
char lower(char c) {
  const auto u = static_cast<unsigned char>(c);
  return u < 0x80 ? static_cast<char>(std::tolower(u)) : c;
}

}  // namespace

TokenizedText tokenize(std::string_view text) {
  TokenizedText out;
  std::size_t i = 0;
  const auto emit = [&](std::size_t b, std::size_t e) {
    std::string tok(text.substr(b, e - b));
    std::transform(tok.begin(), tok.end(), tok.begin(), lower);
    out.tokens.push_back(std::move(tok));
    out.offsets.push_back({b, e});
  };
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (is_space(c)) {
      ++i;
    } else if (is_punct(c)) {
      emit(i, i + 1);
      ++i;
    } else {
      const std::size_t b = i;
      while (i < text.size()) {
        const auto d = static_cast<unsigned char>(text[i]);
        if (is_space(d) || is_punct(d)) break;
        ++i;
      }
      emit(b, i);
    }
  }
  return out;
}

Vocab::Vocab() {
  for (const char* t : {"[PAD]", "[UNK]", "[CLS]", "[SEP]"}) add(t);
}

Vocab::Vocab(const std::vector<std::string>& regular_tokens) : Vocab() {
  for (const auto& t : regular_tokens) {
    if (token_to_id_.contains(t)) throw ContractError("Vocab: duplicate token '" + t + "'");
    add(t);
  }
}

void Vocab::add(const std::string& token) {
  token_to_id_.emplace(token, static_cast<TokenId>(id_to_token_.size()));
  id_to_token_.push_back(token);
}

TokenId Vocab::id(std::string_view token) const {
  const auto it = token_to_id_.find(std::string(token));
  return it == token_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(TokenId id) const {
  require(id >= 0 && std::size_t(id) < id_to_token_.size(), "Vocab::token: id out of range");
  return id_to_token_[std::size_t(id)];
}

std::vector<TokenId> Vocab::encode(const TokenizedText& t) const {
  std::vector<TokenId> ids;
  ids.reserve(t.size());
  for (const auto& tok : t.tokens) ids.push_back(id(tok));
  return ids;
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write vocabulary file " + path);
  for (std::size_t i = kNumReserved; i < id_to_token_.size(); ++i) out << id_to_token_[i] << '\n';
  if (!out) throw std::runtime_error("failed writing vocabulary file " + path);
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open vocabulary file " + path);
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) tokens.push_back(line);
  return Vocab(tokens);
}

Vocab build_vocab(const std::vector<std::string>& corpus, std::size_t max_size) {
  require(max_size >= kNumReserved, "build_vocab: max_size must be at least 4");
  std::map<std::string, std::size_t> counts;
  for (const auto& doc : corpus)
    for (auto& tok : tokenize(doc).tokens) ++counts[tok];
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> keep;
  for (const auto& [tok, n] : ranked) {
    if (keep.size() + kNumReserved >= max_size) break;
    keep.push_back(tok);
  }
  return Vocab(keep);
}

std::vector<Window> sliding_windows(std::size_t count, std::size_t size, std::size_t stride) {
  require(size >= 1 && stride >= 1, "sliding_windows: size and stride must be positive");
  std::vector<Window> out;
  for (std::size_t s = 0; s < count; s += stride) {
    const std::size_t e = std::min(s + size, count);
    if (!out.empty() && out.back().end == e) continue;
    out.push_back({s, e});
  }
  return out;
}

std::string normalize_answer(std::string_view text) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (char c : text) {
    if (!is_punct(static_cast<unsigned char>(c))) cleaned.push_back(lower(c));
  }
  std::string out;
  std::size_t i = 0;
  while (i < cleaned.size()) {
    while (i < cleaned.size() && is_space(static_cast<unsigned char>(cleaned[i]))) ++i;
    const std::size_t b = i;
    while (i < cleaned.size() && !is_space(static_cast<unsigned char>(cleaned[i]))) ++i;
    if (b == i) break;
    const std::string_view word(cleaned.data() + b, i - b);
    if (word == "a" || word == "an" || word == "the") continue;
    if (!out.empty()) out.push_back(' ');
    out.append(word);
  }
  return out;
}

namespace {

using nlohmann::json;

const json& field(const json& obj, const char* key, const std::string& path) {
  if (!obj.is_object() || !obj.contains(key)) throw SchemaError(path + ": missing field '" + key + "'");
  return obj.at(key);
}

std::string string_field(const json& obj, const char* key, const std::string& path) {
  const auto& v = field(obj, key, path);
  if (!v.is_string()) throw SchemaError(path + "." + key + ": expected a string");
  return v.get<std::string>();
}

const json& array_field(const json& obj, const char* key, const std::string& path) {
  const auto& v = field(obj, key, path);
  if (!v.is_array()) throw SchemaError(path + "." + key + ": expected an array");
  return v;
}

}  // namespace

QaDataset parse_squad_json(std::string_view json_text, const std::string& source_name) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw FormatError(source_name + ": parse error: " + e.what());
  }
  QaDataset out;
  const auto& data = array_field(root, "data", "$");
  for (std::size_t a = 0; a < data.size(); ++a) {
    const std::string apath = "$.data[" + std::to_string(a) + "]";
    const auto& paragraphs = array_field(data[a], "paragraphs", apath);
    for (std::size_t p = 0; p < paragraphs.size(); ++p) {
      const std::string ppath = apath + ".paragraphs[" + std::to_string(p) + "]";
      const std::string context = string_field(paragraphs[p], "context", ppath);
      const auto& qas = array_field(paragraphs[p], "qas", ppath);
      for (std::size_t q = 0; q < qas.size(); ++q) {
        const std::string qpath = ppath + ".qas[" + std::to_string(q) + "]";
        QaExample ex;
        ex.id = string_field(qas[q], "id", qpath);
        ex.question = string_field(qas[q], "question", qpath);
        ex.context = context;
        const auto& answers = array_field(qas[q], "answers", qpath);
        for (std::size_t i = 0; i < answers.size(); ++i) {
          const std::string apath2 = qpath + ".answers[" + std::to_string(i) + "]";
          GoldAnswer g;
          g.text = string_field(answers[i], "text", apath2);
          if (answers[i].contains("answer_start")) {
            const auto& s = answers[i].at("answer_start");
            if (!s.is_number_integer()) throw SchemaError(apath2 + ".answer_start: expected an integer");
            g.answer_start = s.get<std::int64_t>();
            if (g.answer_start < 0 || std::size_t(g.answer_start) + g.text.size() > context.size() ||
                context.compare(std::size_t(g.answer_start), g.text.size(), g.text) != 0) {
              throw SchemaError(apath2 + ": answer text does not occur at answer_start " +
                                std::to_string(g.answer_start));
            }
          }
          ex.answers.push_back(std::move(g));
        }
        out.push_back(std::move(ex));
      }
    }
  }
  return out;
}

QaDataset load_squad_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_squad_json(ss.str(), path);
}

}  // namespace dil::text
