// SPDX-License-Identifier: Apache-2.0
#include "dil/synthetic.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "dil/error.hpp"

namespace dil {
namespace {

std::string word(char prefix, std::size_t i) { return std::string(1, prefix) + std::to_string(i); }

struct Generated {
  std::string paragraph;
  std::string question;
  std::string answer;
  std::size_t answer_start = 0;
};

/// Paragraph "tN : kA vB . wF kC vD vE . ...", question "where is kC in tN ?".
Generated generate_one(const SyntheticTask& task, std::mt19937_64& rng, std::size_t topic) {
  require(task.records_per_paragraph >= 1 && task.records_per_paragraph <= task.num_keys,
          "SyntheticTask: records_per_paragraph must be in [1, num_keys]");
  std::vector<std::size_t> keys(task.num_keys);
  std::iota(keys.begin(), keys.end(), 0);
  for (std::size_t i = 0; i < task.records_per_paragraph; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, keys.size() - 1);
    std::swap(keys[i], keys[pick(rng)]);
  }
  std::uniform_int_distribution<std::size_t> target_dist(0, task.records_per_paragraph - 1);
  std::uniform_int_distribution<std::size_t> len_dist(1, task.max_value_tokens);
  require(task.values_per_key >= 1, "SyntheticTask: values_per_key must be positive");
  std::uniform_int_distribution<std::size_t> value_dist(0, task.values_per_key - 1);
  std::uniform_int_distribution<std::size_t> gap_dist(0, task.max_filler_gap);
  std::uniform_int_distribution<std::size_t> filler_dist(0, task.num_fillers - 1);
  const std::size_t target = target_dist(rng);

  Generated g;
  g.paragraph = word('t', topic) + " :";
  for (std::size_t r = 0; r < task.records_per_paragraph; ++r) {
    const std::size_t gap = task.num_fillers > 0 ? gap_dist(rng) : 0;
    for (std::size_t f = 0; f < gap; ++f) g.paragraph += " " + word('w', filler_dist(rng));
    g.paragraph += " " + word('k', keys[r]);
    const std::size_t len = len_dist(rng);
    std::string values;
    for (std::size_t v = 0; v < len; ++v) {
      if (!values.empty()) values += ' ';
      values += word('v', keys[r] * task.values_per_key + value_dist(rng));
    }
    g.paragraph += ' ';
    if (r == target) {
      g.answer = values;
      g.answer_start = g.paragraph.size();
    }
    g.paragraph += values + " .";
  }
  g.question = "where is " + word('k', keys[target]) + " in " + word('t', topic) + " ?";
  return g;
}

}  // namespace

text::Vocab SyntheticTask::vocabulary() const {
  std::vector<std::string> words = {"where", "is", "in", "?", ".", ":"};
  for (std::size_t i = 0; i < num_keys; ++i) words.push_back(word('k', i));
  for (std::size_t i = 0; i < num_values(); ++i) words.push_back(word('v', i));
  for (std::size_t i = 0; i < num_fillers; ++i) words.push_back(word('w', i));
  for (std::size_t i = 0; i < num_topics; ++i) words.push_back(word('t', i));
  return text::Vocab(words);
}

text::QaDataset SyntheticTask::generate(std::size_t count, std::uint64_t stream) const {
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + stream);
  std::uniform_int_distribution<std::size_t> topic_dist(0, num_topics - 1);
  text::QaDataset out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const Generated g = generate_one(*this, rng, topic_dist(rng));
    text::QaExample ex;
    ex.id = "s" + std::to_string(stream) + "-" + std::to_string(i);
    ex.question = g.question;
    ex.context = g.paragraph;
    ex.answers.push_back({g.answer, static_cast<std::int64_t>(g.answer_start)});
    out.push_back(std::move(ex));
  }
  return out;
}

SyntheticCorpus make_synthetic_corpus(const SyntheticTask& task, std::size_t documents, std::size_t questions,
                                      std::uint64_t stream) {
  require(documents >= 1 && documents <= task.num_topics, "make_synthetic_corpus: need one topic per document");
  std::mt19937_64 rng(task.seed * 0x9e3779b97f4a7c15ULL + 1000 + stream);
  // Each document gets its own topic; questions are generated against the document.
  std::vector<std::mt19937_64::result_type> doc_seeds(documents);
  for (auto& s : doc_seeds) s = rng();
  SyntheticCorpus corpus;
  for (std::size_t d = 0; d < documents; ++d) {
    std::mt19937_64 doc_rng(doc_seeds[d]);
    corpus.documents.push_back(generate_one(task, doc_rng, d).paragraph);
  }
  std::uniform_int_distribution<std::size_t> doc_dist(0, documents - 1);
  for (std::size_t i = 0; i < questions; ++i) {
    const std::size_t d = doc_dist(rng);
    // Re-ask about a random record of the stored paragraph.
    const auto toks = text::tokenize(corpus.documents[d]);
    std::vector<std::size_t> key_positions;
    for (std::size_t t = 0; t < toks.size(); ++t)
      if (toks.tokens[t].size() > 1 && toks.tokens[t][0] == 'k') key_positions.push_back(t);
    std::uniform_int_distribution<std::size_t> rec_dist(0, key_positions.size() - 1);
    const std::size_t kp = key_positions[rec_dist(rng)];
    std::size_t last = kp + 1;
    while (last + 1 < toks.size() && toks.tokens[last + 1] != ".") ++last;
    text::QaExample ex;
    ex.id = "q" + std::to_string(stream) + "-" + std::to_string(i);
    ex.question = "where is " + toks.tokens[kp] + " in " + word('t', d) + " ?";
    ex.context = corpus.documents[d];
    const std::size_t b = toks.offsets[kp + 1].begin;
    const std::size_t e = toks.offsets[last].end;
    ex.answers.push_back({corpus.documents[d].substr(b, e - b), static_cast<std::int64_t>(b)});
    corpus.questions.push_back(std::move(ex));
  }
  return corpus;
}

}  // namespace dil
