// SPDX-License-Identifier: Apache-2.0
#include "dil/cache.hpp"

#include <algorithm>
#include <cstring>

#include "dil/binary_io.hpp"
#include "dil/error.hpp"
#include "dil/parallel.hpp"
#include "dil/reader.hpp"

namespace dil {
namespace {
constexpr std::uint32_t kCacheVersion = 1;
constexpr std::size_t kHeaderBytes = 4 + 4 + 8 + 4 + 1 + 4;
}  // namespace

std::uint64_t model_fingerprint(const EncoderWeights& w, const text::Vocab& vocab) {
  io::Fnv1a h;
  const std::string cfg = config_to_json(w.config);
  h.update(cfg.data(), cfg.size());
  h.update_value(w.checksum());
  h.update_value(static_cast<std::uint64_t>(w.config.non_interaction_blocks));
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    const auto& t = vocab.token(static_cast<text::TokenId>(i));
    h.update(t.data(), t.size());
    h.update("\n", 1);
  }
  return h.digest();
}

CacheWriter::CacheWriter(std::uint64_t fingerprint, std::size_t d, CachePrecision precision)
    : fingerprint_(fingerprint), d_(d), precision_(precision) {}

void CacheWriter::put(ParagraphCacheEntry entry) {
  for (const auto& m : entry.windows) require(m.cols() == d_, "CacheWriter::put: state width does not match d");
  const auto id = entry.paragraph_id;
  entries_[id] = std::move(entry);
}

void CacheWriter::write(const std::string& path) const {
  io::Writer out;
  out.put_magic("DILC");
  out.put<std::uint32_t>(kCacheVersion);
  out.put<std::uint64_t>(fingerprint_);
  out.put<std::uint32_t>(static_cast<std::uint32_t>(d_));
  out.put<std::uint8_t>(static_cast<std::uint8_t>(precision_));
  out.put<std::uint32_t>(static_cast<std::uint32_t>(entries_.size()));
  const std::size_t table_pos = out.size();
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    out.put<std::uint32_t>(0);
    out.put<std::uint64_t>(0);
  }
  std::size_t slot = 0;
  for (const auto& [id, entry] : entries_) {
    const std::uint64_t offset = out.size();
    std::memcpy(out.bytes().data() + table_pos + slot * 12, &id, 4);
    std::memcpy(out.bytes().data() + table_pos + slot * 12 + 4, &offset, 8);
    ++slot;
    out.put<std::uint32_t>(id);
    out.put<std::uint32_t>(static_cast<std::uint32_t>(entry.windows.size()));
    for (const auto& m : entry.windows) {
      out.put<std::uint32_t>(static_cast<std::uint32_t>(m.rows()));
      if (precision_ == CachePrecision::kFloat32) {
        for (double v : m.values()) out.put<float>(static_cast<float>(v));
      } else {
        out.put_bytes(m.data(), m.size() * sizeof(double));
      }
    }
    const auto body = std::span<const std::byte>(out.bytes()).subspan(offset);
    out.put<std::uint64_t>(io::fnv1a(body));
  }
  io::write_file(path, out.bytes());
}

ParagraphCache ParagraphCache::load(const std::string& path) {
  ParagraphCache c;
  c.bytes_ = io::read_file(path);
  io::Reader in(c.bytes_);
  in.expect_magic("DILC");
  const auto version = in.get<std::uint32_t>();
  if (version != kCacheVersion) throw FormatError(path + ": unsupported cache version " + std::to_string(version));
  c.fingerprint_ = in.get<std::uint64_t>();
  c.d_ = in.get<std::uint32_t>();
  const auto precision = in.get<std::uint8_t>();
  if (precision != 4 && precision != 8) throw FormatError(path + ": unknown value width");
  c.precision_ = static_cast<CachePrecision>(precision);
  const auto count = in.get<std::uint32_t>();
  c.table_.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto id = in.get<std::uint32_t>();
    const auto offset = in.get<std::uint64_t>();
    if (offset < kHeaderBytes || offset >= c.bytes_.size()) throw FormatError(path + ": entry offset out of range");
    if (!c.table_.empty() && c.table_.back().first >= id) throw FormatError(path + ": offset table not sorted");
    c.table_.emplace_back(id, offset);
  }
  return c;
}

std::size_t ParagraphCache::find(std::uint32_t paragraph_id) const {
  // Dense ids index the table directly; otherwise fall back to binary search.
  if (paragraph_id < table_.size() && table_[paragraph_id].first == paragraph_id) return paragraph_id;
  const auto it = std::lower_bound(table_.begin(), table_.end(), paragraph_id,
                                   [](const auto& e, std::uint32_t id) { return e.first < id; });
  if (it == table_.end() || it->first != paragraph_id) return table_.size();
  return std::size_t(it - table_.begin());
}

bool ParagraphCache::contains(std::uint32_t paragraph_id) const { return find(paragraph_id) < table_.size(); }

std::vector<Matrix> ParagraphCache::get(std::uint32_t paragraph_id, std::uint64_t expected_fingerprint) const {
  if (expected_fingerprint != fingerprint_) {
    throw StaleCacheError("cache fingerprint " + std::to_string(fingerprint_) + " does not match model fingerprint " +
                          std::to_string(expected_fingerprint) + "; rebuild the cache");
  }
  const std::size_t slot = find(paragraph_id);
  if (slot == table_.size()) throw NotFoundError("paragraph " + std::to_string(paragraph_id) + " not in cache");
  io::Reader in(bytes_);
  const std::size_t begin = table_[slot].second;
  in.seek(begin);
  if (in.get<std::uint32_t>() != paragraph_id) throw ChecksumError("cache entry id does not match offset table");
  const auto windows = in.get<std::uint32_t>();
  std::vector<Matrix> out;
  out.reserve(windows);
  for (std::uint32_t w = 0; w < windows; ++w) {
    const auto rows = in.get<std::uint32_t>();
    Matrix m(rows, d_);
    if (precision_ == CachePrecision::kFloat32) {
      for (auto& v : m.values()) v = in.get<float>();
    } else {
      in.get_bytes(m.data(), m.size() * sizeof(double));
    }
    out.push_back(std::move(m));
  }
  const std::size_t end = in.pos();
  const auto stored = in.get<std::uint64_t>();
  if (io::fnv1a(std::span<const std::byte>(bytes_).subspan(begin, end - begin)) != stored) {
    throw ChecksumError("checksum mismatch for cached paragraph " + std::to_string(paragraph_id));
  }
  return out;
}

std::uint64_t precompute_macs(const ParagraphStore& store, const EncoderWeights& w, const text::Vocab& vocab) {
  std::uint64_t total = 0;
  for (const auto& p : store.paragraphs) {
    for (const auto& seg : make_paragraph_windows(text::tokenize(p.text), vocab, w.config)) {
      total += w.config.non_interaction_blocks * block_macs(w.config, seg.size());
    }
  }
  return total;
}

PrecomputeReport precompute(const ParagraphStore& store, const EncoderWeights& w, const text::Vocab& vocab,
                            const std::string& path, CachePrecision precision, std::size_t workers) {
  PrecomputeReport report;
  report.fingerprint = model_fingerprint(w, vocab);
  report.paragraphs = store.size();
  std::vector<ParagraphCacheEntry> entries(store.size());
  workers = std::max<std::size_t>(1, workers);
  std::vector<MacCounter> counters(workers);
  parallel_for(store.size(), workers, [&](std::size_t worker, std::size_t id) {
    auto& entry = entries[id];
    entry.paragraph_id = static_cast<std::uint32_t>(id);
    const auto tokens = text::tokenize(store.paragraphs[id].text);
    for (const auto& seg : make_paragraph_windows(tokens, vocab, w.config)) {
      entry.windows.push_back(encode_paragraph(seg, w, &counters[worker]));
    }
  });
  CacheWriter writer(report.fingerprint, w.config.d_model, precision);
  for (auto& e : entries) {
    report.windows += e.windows.size();
    writer.put(std::move(e));
  }
  for (const auto& c : counters) report.macs += c.count();
  writer.write(path);
  return report;
}

}  // namespace dil
