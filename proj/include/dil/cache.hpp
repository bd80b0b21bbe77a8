// SPDX-License-Identifier: Apache-2.0
//
// Precomputed paragraph states after the k non-interaction blocks.
//
// File layout (little-endian):
//   "DILC" | u32 version | u64 fingerprint | u32 d | u8 bytes-per-value | u32 count
//   count × { u32 paragraph id | u64 entry offset }          (sorted by id)
//   entries: u32 paragraph id | u32 windows | windows × { u32 n_p | n_p·d values } | u64 FNV-1a of the entry
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dil/encoder.hpp"
#include "dil/retriever.hpp"
#include "dil/text.hpp"

namespace dil {

enum class CachePrecision : std::uint8_t {
  kFloat32 = 4,
  kFloat64 = 8,
};

/// Hash of the model config (including k), the weights checksum and the vocabulary.
std::uint64_t model_fingerprint(const EncoderWeights& w, const text::Vocab& vocab);

struct ParagraphCacheEntry {
  std::uint32_t paragraph_id = 0;
  std::vector<Matrix> windows;  // each n_p × d, n_p <= p_max
};

class CacheWriter {
 public:
  CacheWriter(std::uint64_t fingerprint, std::size_t d, CachePrecision precision = CachePrecision::kFloat32);
  void put(ParagraphCacheEntry entry);
  void write(const std::string& path) const;

 private:
  std::uint64_t fingerprint_;
  std::size_t d_;
  CachePrecision precision_;
  std::map<std::uint32_t, ParagraphCacheEntry> entries_;
};

/// Loaded cache file. Immutable after load; safe for concurrent get().
class ParagraphCache {
 public:
  static ParagraphCache load(const std::string& path);

  [[nodiscard]] std::uint64_t fingerprint() const { return fingerprint_; }
  [[nodiscard]] std::size_t d() const { return d_; }
  [[nodiscard]] std::size_t size() const { return table_.size(); }
  [[nodiscard]] CachePrecision precision() const { return precision_; }
  [[nodiscard]] bool contains(std::uint32_t paragraph_id) const;

  /// Stored window states. Throws StaleCacheError when `expected_fingerprint`
  /// differs, NotFoundError for an unknown id and ChecksumError on corruption.
  [[nodiscard]] std::vector<Matrix> get(std::uint32_t paragraph_id, std::uint64_t expected_fingerprint) const;

 private:
  [[nodiscard]] std::size_t find(std::uint32_t paragraph_id) const;

  std::vector<std::byte> bytes_;
  std::uint64_t fingerprint_ = 0;
  std::size_t d_ = 0;
  CachePrecision precision_ = CachePrecision::kFloat32;
  std::vector<std::pair<std::uint32_t, std::uint64_t>> table_;
};

struct PrecomputeReport {
  std::size_t paragraphs = 0;
  std::size_t windows = 0;
  std::uint64_t macs = 0;
  std::uint64_t fingerprint = 0;
};

/// Encodes every paragraph window of the store with encode_paragraph and
/// writes the cache file. No question is involved.
PrecomputeReport precompute(const ParagraphStore& store, const EncoderWeights& w, const text::Vocab& vocab,
                            const std::string& path, CachePrecision precision = CachePrecision::kFloat32,
                            std::size_t workers = 1);

/// Closed-form MACs for precompute(): k · blockcost(n_p) summed over windows.
std::uint64_t precompute_macs(const ParagraphStore& store, const EncoderWeights& w, const text::Vocab& vocab);

}  // namespace dil
