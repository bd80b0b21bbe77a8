// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "dil/binary_io.hpp"
#include "dil/cache.hpp"
#include "dil/error.hpp"
#include "dil/reader.hpp"
#include "support/oracles.hpp"

using namespace dil;

namespace {

struct Fixture {
  std::filesystem::path dir = std::filesystem::temp_directory_path() / "dil_test_cache";
  ParagraphStore store;
  text::Vocab vocab;
  ModelConfig config;

  Fixture() {
    std::filesystem::create_directories(dir);
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> len(2, 40), term(0, 30);
    std::vector<std::string> corpus;
    for (int d = 0; d < 12; ++d) {
      std::string text;
      for (int i = len(rng); i > 0; --i) text += "w" + std::to_string(term(rng)) + (i % 7 == 0 ? ". " : " ");
      store.add_document("d" + std::to_string(d), text);
      corpus.push_back(text);
    }
    vocab = text::build_vocab(corpus, 40);
    config.layers = 3;
    config.non_interaction_blocks = 2;
    config.d_model = 16;
    config.n_heads = 2;
    config.d_ff = 16;
    config.vocab_size = 40;
    config.q_max = 8;
    config.p_max = 16;
  }
  ~Fixture() { std::filesystem::remove_all(dir); }
  [[nodiscard]] std::string path(const char* name) const { return (dir / name).string(); }
};

std::vector<Matrix> fresh_states(const Fixture& f, const EncoderWeights& w, std::size_t id) {
  std::vector<Matrix> out;
  for (const auto& seg : make_paragraph_windows(text::tokenize(f.store.paragraphs[id].text), f.vocab, w.config))
    out.push_back(encode_paragraph(seg, w));
  return out;
}

}  // namespace

TEST_CASE("writer/reader round-trip") {
  Fixture f;
  std::mt19937_64 rng(1);
  CacheWriter writer(42, 5, CachePrecision::kFloat64);
  const Matrix a = oracle::random_matrix(rng, 3, 5), b = oracle::random_matrix(rng, 7, 5);
  writer.put({9, {a, b}});
  writer.put({2, {b}});
  writer.write(f.path("rt.dilc"));
  const auto cache = ParagraphCache::load(f.path("rt.dilc"));
  CHECK(cache.size() == 2);
  CHECK(cache.d() == 5);
  CHECK(cache.contains(9));
  CHECK_FALSE(cache.contains(3));
  const auto got = cache.get(9, 42);
  REQUIRE(got.size() == 2);
  CHECK(got[0] == a);
  CHECK(got[1] == b);
  CHECK(cache.get(2, 42).at(0) == b);
  CHECK_THROWS_AS((void)cache.get(3, 42), NotFoundError);
  CHECK_THROWS_AS((void)cache.get(9, 43), StaleCacheError);
  CHECK_THROWS_AS(writer.put({1, {Matrix(2, 4)}}), ContractError);
}

TEST_CASE("precompute stores encode_paragraph output") {
  Fixture f;
  for (std::size_t k : {0u, 2u}) {
    ModelConfig c = f.config;
    c.non_interaction_blocks = k;
    const EncoderWeights w = oracle::random_weights(c);
    const auto r64 = precompute(f.store, w, f.vocab, f.path("c64.dilc"), CachePrecision::kFloat64);
    const auto r32 = precompute(f.store, w, f.vocab, f.path("c32.dilc"), CachePrecision::kFloat32, 3);
    CHECK(r64.macs == precompute_macs(f.store, w, f.vocab));
    CHECK(r32.macs == r64.macs);
    CHECK(r64.fingerprint == model_fingerprint(w, f.vocab));
    CHECK(r64.paragraphs == f.store.size());
    const auto c64 = ParagraphCache::load(f.path("c64.dilc"));
    const auto c32 = ParagraphCache::load(f.path("c32.dilc"));
    for (std::uint32_t id = 0; id < f.store.size(); ++id) {
      const auto want = fresh_states(f, w, id);
      const auto got64 = c64.get(id, r64.fingerprint);
      const auto got32 = c32.get(id, r64.fingerprint);
      REQUIRE(got64.size() == want.size());
      for (std::size_t i = 0; i < want.size(); ++i) {
        INFO("k=" << k << " id=" << id << " win=" << i << " diff=" << oracle::max_abs_diff(got64[i], want[i]));
        CHECK(got64[i] == want[i]);
        CHECK(oracle::max_abs_diff(got32[i], want[i]) <= 1e-6);
        if (k == 0) {
          const auto segs = make_paragraph_windows(text::tokenize(f.store.paragraphs[id].text), f.vocab, c);
          CHECK(got64[i] == embed(segs[i].ids, segs[i].positions(), segs[i].segments(), w));
        }
      }
    }
  }
}

TEST_CASE("precompute MACs follow the per-window block formula") {
  Fixture f;
  const EncoderWeights w = oracle::random_weights(f.config);
  std::uint64_t expected = 0;
  for (const auto& p : f.store.paragraphs)
    for (const auto& seg : make_paragraph_windows(text::tokenize(p.text), f.vocab, f.config)) {
      const std::uint64_t n = seg.size(), d = f.config.d_model;
      expected += f.config.non_interaction_blocks * (4 * n * d * d + 2 * n * n * d + 2 * n * d * f.config.d_ff);
    }
  CHECK(precompute(f.store, w, f.vocab, f.path("m.dilc")).macs == expected);
}

TEST_CASE("tampering and staleness are detected") {
  Fixture f;
  const EncoderWeights w = oracle::random_weights(f.config);
  const auto report = precompute(f.store, w, f.vocab, f.path("t.dilc"));

  ModelConfig reseeded = f.config;
  reseeded.seed = 1234;
  const EncoderWeights w2 = init_weights(reseeded);
  CHECK(model_fingerprint(w2, f.vocab) != report.fingerprint);
  const auto cache = ParagraphCache::load(f.path("t.dilc"));
  CHECK_THROWS_AS((void)cache.get(0, model_fingerprint(w2, f.vocab)), StaleCacheError);

  ModelConfig other_k = f.config;
  other_k.non_interaction_blocks = 1;
  EncoderWeights w3 = w;
  w3.config = other_k;
  CHECK(model_fingerprint(w3, f.vocab) != report.fingerprint);

  auto bytes = io::read_file(f.path("t.dilc"));
  bytes[bytes.size() - 12] ^= std::byte{0x40};  // inside the last entry's values
  io::write_file(f.path("bad.dilc"), bytes);
  const auto bad = ParagraphCache::load(f.path("bad.dilc"));
  CHECK_THROWS_AS((void)bad.get(std::uint32_t(f.store.size() - 1), report.fingerprint), ChecksumError);
  CHECK_NOTHROW((void)bad.get(0, report.fingerprint));

  std::vector<std::byte> junk(bytes.begin(), bytes.begin() + 6);
  io::write_file(f.path("short.dilc"), junk);
  CHECK_THROWS_AS(ParagraphCache::load(f.path("short.dilc")), FormatError);
  CHECK_THROWS_AS(ParagraphCache::load(f.path("missing.dilc")), NotFoundError);
}

TEST_CASE("failed writes leave no partial file") {
  Fixture f;
  CacheWriter writer(1, 4);
  writer.put({0, {Matrix(2, 4)}});
  const auto target = f.dir / "no_such_dir" / "x.dilc";
  CHECK_THROWS(writer.write(target.string()));
  CHECK_FALSE(std::filesystem::exists(target));
  CHECK_FALSE(std::filesystem::exists(target.string() + ".partial"));
}
