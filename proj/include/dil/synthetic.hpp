// SPDX-License-Identifier: Apache-2.0
//
// Synthetic extractive QA task whose answer depends on the question.
//
// A paragraph lists records "key value... ." with distinct keys; the question
// names one key (and the paragraph's topic word) and the answer is that
// record's values. Each key owns a family of value words, so a value span can
// be tied to the question's key. Without attention between question and
// paragraph a reader can only guess a record, so exact match sits at
// 1 / records_per_paragraph.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dil/text.hpp"

namespace dil {

struct SyntheticTask {
  std::uint64_t seed = 0;
  std::size_t num_keys = 24;
  std::size_t values_per_key = 4;
  std::size_t num_fillers = 12;
  std::size_t records_per_paragraph = 5;
  std::size_t max_value_tokens = 2;
  std::size_t max_filler_gap = 1;
  /// Every paragraph opens with a topic word that the question repeats; it
  /// lets BM25 find the paragraph in a corpus and carries no answer signal.
  std::size_t num_topics = 256;

  /// All words the generator can emit, in a fixed order.
  [[nodiscard]] text::Vocab vocabulary() const;
  /// Deterministic examples: stream `stream` of the task seed, `count` items.
  [[nodiscard]] text::QaDataset generate(std::size_t count, std::uint64_t stream) const;
  [[nodiscard]] text::QaDataset train_split(std::size_t count) const { return generate(count, 1); }
  [[nodiscard]] text::QaDataset eval_split(std::size_t count) const { return generate(count, 2); }
  [[nodiscard]] std::size_t num_values() const { return num_keys * values_per_key; }
  [[nodiscard]] double chance_em() const { return 100.0 / double(records_per_paragraph); }
};

/// A retrieval corpus of `documents` topic-tagged paragraphs plus questions
/// whose topic word and key identify one paragraph.
struct SyntheticCorpus {
  std::vector<std::string> documents;
  text::QaDataset questions;  // context = the source document
};

SyntheticCorpus make_synthetic_corpus(const SyntheticTask& task, std::size_t documents,
                                      std::size_t questions, std::uint64_t stream);

}  // namespace dil
