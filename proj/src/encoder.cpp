// SPDX-License-Identifier: Apache-2.0
#include "dil/encoder.hpp"

#include <cmath>
#include <nlohmann/json.hpp>
#include <random>

#include "dil/binary_io.hpp"
#include "dil/error.hpp"

namespace dil {

void ModelConfig::validate() const {
  require(layers >= 1, "ModelConfig: need at least one block");
  require(non_interaction_blocks <= layers, "ModelConfig: k must not exceed l");
  require(d_model >= 1 && n_heads >= 1 && d_model % n_heads == 0,
          "ModelConfig: d_model must be a multiple of n_heads");
  require(d_ff >= 1, "ModelConfig: d_ff must be positive");
  require(vocab_size >= text::kNumReserved, "ModelConfig: vocabulary smaller than the reserved ids");
  require(q_max >= 2, "ModelConfig: q_max must fit [CLS] and [SEP]");
  require(p_max >= 2, "ModelConfig: p_max must fit one token and [SEP]");
  require(init_std > 0.0 && embedding_init_std > 0.0, "ModelConfig: init std must be positive");
}

std::string config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["layers"] = c.layers;
  j["k"] = c.non_interaction_blocks;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["d_ff"] = c.d_ff;
  j["vocab_size"] = c.vocab_size;
  j["q_max"] = c.q_max;
  j["p_max"] = c.p_max;
  j["share_blocks"] = c.share_blocks;
  j["pre_norm"] = c.pre_norm;
  j["init_std"] = c.init_std;
  j["embedding_init_std"] = c.embedding_init_std;
  j["seed"] = c.seed;
  return j.dump();
}

ModelConfig config_from_json(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
  ModelConfig c;
  const auto get = [&j](const char* key, auto& out) {
    if (j.contains(key)) out = j.at(key).get<std::decay_t<decltype(out)>>();
  };
  get("layers", c.layers);
  get("k", c.non_interaction_blocks);
  get("d_model", c.d_model);
  get("n_heads", c.n_heads);
  get("d_ff", c.d_ff);
  get("vocab_size", c.vocab_size);
  get("q_max", c.q_max);
  get("p_max", c.p_max);
  get("share_blocks", c.share_blocks);
  get("pre_norm", c.pre_norm);
  get("init_std", c.init_std);
  get("embedding_init_std", c.embedding_init_std);
  get("seed", c.seed);
  c.validate();
  return c;
}

const BlockWeights& EncoderWeights::block(std::size_t i) const {
  require(i < config.layers, "EncoderWeights::block: index out of range");
  return block_params[config.share_blocks ? 0 : i];
}

BlockWeights& EncoderWeights::block(std::size_t i) {
  require(i < config.layers, "EncoderWeights::block: index out of range");
  return block_params[config.share_blocks ? 0 : i];
}

std::size_t EncoderWeights::parameter_count() const {
  std::size_t n = 0;
  visit([&n](const std::string&, const Matrix& m) { n += m.size(); });
  return n;
}

std::uint64_t EncoderWeights::checksum() const {
  io::Fnv1a h;
  visit([&h](const std::string&, const Matrix& m) { h.update(m.data(), m.size() * sizeof(double)); });
  return h.digest();
}

EncoderWeights EncoderWeights::zeros_like() const {
  EncoderWeights z = *this;
  z.visit([](const std::string&, Matrix& m) { std::fill(m.values().begin(), m.values().end(), 0.0); });
  return z;
}

namespace {

Matrix ones(std::size_t n) { return Matrix(1, n, 1.0); }
Matrix zeros(std::size_t n) { return Matrix(1, n, 0.0); }

class TruncatedNormal {
 public:
  explicit TruncatedNormal(std::uint64_t seed) : rng_(seed) {}
  Matrix sample(std::size_t rows, std::size_t cols, double std) {
    Matrix m(rows, cols);
    for (auto& v : m.values()) {
      double x;
      do {
        x = dist_(rng_);
      } while (std::abs(x) > 2.0);
      v = std * x;
    }
    return m;
  }

 private:
  std::mt19937_64 rng_;
  std::normal_distribution<double> dist_{0.0, 1.0};
};

}  // namespace

EncoderWeights init_weights(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.d_model;
  TruncatedNormal rng(config.seed);
  const auto sample = [&rng, &config](std::size_t r, std::size_t c) { return rng.sample(r, c, config.init_std); };
  EncoderWeights w;
  w.config = config;
  w.token_embedding = rng.sample(config.vocab_size, d, config.embedding_init_std);
  w.position_embedding = rng.sample(config.max_sequence(), d, config.embedding_init_std);
  w.segment_embedding = rng.sample(2, d, config.embedding_init_std);
  w.embedding_ln_gamma = ones(d);
  w.embedding_ln_beta = zeros(d);
  const std::size_t distinct = config.share_blocks ? 1 : config.layers;
  for (std::size_t i = 0; i < distinct; ++i) {
    BlockWeights b;
    b.wq = sample(d, d), b.bq = zeros(d);
    b.wk = sample(d, d), b.bk = zeros(d);
    b.wv = sample(d, d), b.bv = zeros(d);
    b.wo = sample(d, d), b.bo = zeros(d);
    b.ln1_gamma = ones(d), b.ln1_beta = zeros(d);
    b.w1 = sample(d, config.d_ff), b.b1 = zeros(config.d_ff);
    b.w2 = sample(config.d_ff, d), b.b2 = zeros(d);
    b.ln2_gamma = ones(d), b.ln2_beta = zeros(d);
    w.block_params.push_back(std::move(b));
  }
  w.qa_weight = sample(d, 2);
  w.qa_bias = zeros(2);
  return w;
}

namespace {
constexpr std::uint32_t kWeightsVersion = 2;

void put_config(io::Writer& out, const ModelConfig& c) {
  for (std::size_t v : {c.layers, c.non_interaction_blocks, c.d_model, c.n_heads, c.d_ff, c.vocab_size,
                        c.q_max, c.p_max}) {
    out.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  }
  out.put<std::uint8_t>(c.share_blocks ? 1 : 0);
  out.put<std::uint8_t>(c.pre_norm ? 1 : 0);
  out.put<double>(c.init_std);
  out.put<double>(c.embedding_init_std);
  out.put<std::uint64_t>(c.seed);
}

ModelConfig get_config(io::Reader& in) {
  ModelConfig c;
  for (std::size_t* v : {&c.layers, &c.non_interaction_blocks, &c.d_model, &c.n_heads, &c.d_ff,
                         &c.vocab_size, &c.q_max, &c.p_max}) {
    *v = in.get<std::uint32_t>();
  }
  c.share_blocks = in.get<std::uint8_t>() != 0;
  c.pre_norm = in.get<std::uint8_t>() != 0;
  c.init_std = in.get<double>();
  c.embedding_init_std = in.get<double>();
  c.seed = in.get<std::uint64_t>();
  return c;
}
}  // namespace

void save_weights(const EncoderWeights& w, const std::string& path) {
  io::Writer out;
  out.put_magic("DILW");
  out.put<std::uint32_t>(kWeightsVersion);
  put_config(out, w.config);
  w.visit([&out](const std::string&, const Matrix& m) { out.put_bytes(m.data(), m.size() * sizeof(double)); });
  io::write_file(path, out.bytes());
}

EncoderWeights load_weights(const std::string& path) {
  const auto bytes = io::read_file(path);
  io::Reader in(bytes);
  in.expect_magic("DILW");
  const auto version = in.get<std::uint32_t>();
  if (version != kWeightsVersion) throw FormatError(path + ": unsupported weights version " + std::to_string(version));
  ModelConfig config = get_config(in);
  try {
    config.validate();
  } catch (const ContractError& e) {
    throw FormatError(path + ": invalid stored config: " + e.what());
  }
  EncoderWeights w = init_weights(config);  // shapes only; values overwritten below
  w.visit([&in](const std::string&, Matrix& m) { in.get_bytes(m.data(), m.size() * sizeof(double)); });
  if (!in.at_end()) throw FormatError(path + ": trailing bytes after weights");
  return w;
}

Matrix embed(std::span<const text::TokenId> ids, std::span<const std::size_t> positions,
             std::span<const std::size_t> segments, const EncoderWeights& w, EmbedCache* cache) {
  require(ids.size() == positions.size() && ids.size() == segments.size(), "embed: length mismatch");
  const std::size_t d = w.config.d_model;
  Matrix sum(ids.size(), d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && std::size_t(ids[i]) < w.token_embedding.rows(), "embed: token id out of range");
    require(positions[i] < w.position_embedding.rows(), "embed: position id out of range");
    require(segments[i] < w.segment_embedding.rows(), "embed: segment id out of range");
    const auto tok = w.token_embedding.row(std::size_t(ids[i]));
    const auto pos = w.position_embedding.row(positions[i]);
    const auto seg = w.segment_embedding.row(segments[i]);
    auto out = sum.row(i);
    for (std::size_t c = 0; c < d; ++c) out[c] = tok[c] + pos[c] + seg[c];
  }
  if (cache) {
    cache->ids.assign(ids.begin(), ids.end());
    cache->positions.assign(positions.begin(), positions.end());
    cache->segments.assign(segments.begin(), segments.end());
  }
  return layer_norm(sum, w.embedding_ln_gamma, w.embedding_ln_beta, kLayerNormEps,
                    cache ? &cache->ln : nullptr);
}

std::uint64_t block_macs(const ModelConfig& c, std::uint64_t n) {
  const std::uint64_t d = c.d_model;
  return 4 * n * d * d + 2 * n * n * d + 2 * n * d * c.d_ff;
}

Matrix encoder_block(const Matrix& h, const AttentionMask& mask, const BlockWeights& bw,
                     const ModelConfig& config, MacCounter* counter, BlockCache* cache) {
  const std::size_t n = h.rows();
  const std::size_t d = config.d_model;
  require(h.cols() == d, "encoder_block: hidden width does not match d_model");
  require(mask.size() == n, "encoder_block: mask size does not match sequence length");
  const std::size_t heads = config.n_heads;
  const std::size_t dh = config.head_dim();
  const double scale = 1.0 / std::sqrt(double(dh));

  const bool pre = config.pre_norm;
  LayerNormCache ln1, ln2;
  // Post-norm: x1 = LN1(x + Attn(x)), out = LN2(x1 + FFN(x1)).
  // Pre-norm:  x1 = x + Attn(LN1(x)), out = x1 + FFN(LN2(x1)).
  Matrix a = pre ? layer_norm(h, bw.ln1_gamma, bw.ln1_beta, kLayerNormEps, cache ? &ln1 : nullptr) : h;

  Matrix q = matmul(a, bw.wq, counter);
  add_row_vector(q, bw.bq);
  Matrix k = matmul(a, bw.wk, counter);
  add_row_vector(k, bw.bk);
  Matrix v = matmul(a, bw.wv, counter);
  add_row_vector(v, bw.bv);

  Matrix context(n, d);
  std::vector<Matrix> probs;
  if (cache) probs.reserve(heads);
  for (std::size_t head = 0; head < heads; ++head) {
    const std::size_t c0 = head * dh;
    const Matrix qh = q.slice_cols(c0, c0 + dh);
    const Matrix kh = k.slice_cols(c0, c0 + dh);
    const Matrix vh = v.slice_cols(c0, c0 + dh);
    Matrix scores = matmul_nt(qh, kh, counter);
    scale_inplace(scores, scale);
    Matrix p = softmax_rows(scores, &mask);
    context.set_cols(c0, matmul(p, vh, counter));
    if (cache) probs.push_back(std::move(p));
  }

  Matrix h1 = matmul(context, bw.wo, counter);
  add_row_vector(h1, bw.bo);
  add_inplace(h1, h);
  if (!pre) h1 = layer_norm(h1, bw.ln1_gamma, bw.ln1_beta, kLayerNormEps, cache ? &ln1 : nullptr);

  Matrix b = pre ? layer_norm(h1, bw.ln2_gamma, bw.ln2_beta, kLayerNormEps, cache ? &ln2 : nullptr) : h1;
  Matrix pre_act = matmul(b, bw.w1, counter);
  add_row_vector(pre_act, bw.b1);
  Matrix act = gelu(pre_act);
  Matrix out = matmul(act, bw.w2, counter);
  add_row_vector(out, bw.b2);
  add_inplace(out, h1);
  if (!pre) out = layer_norm(out, bw.ln2_gamma, bw.ln2_beta, kLayerNormEps, cache ? &ln2 : nullptr);

  if (cache) {
    cache->input = h;
    cache->qkv_input = std::move(a);
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->probs = std::move(probs);
    cache->context = std::move(context);
    cache->ln1 = std::move(ln1);
    cache->ffn_input = std::move(b);
    cache->ffn_pre = std::move(pre_act);
    cache->ffn_act = std::move(act);
    cache->ln2 = std::move(ln2);
    cache->mask = mask;
  }
  return out;
}

Matrix run_blocks(Matrix h, const AttentionMask& mask, const EncoderWeights& w, std::size_t from,
                  std::size_t to, MacCounter* counter, std::vector<BlockCache>* caches) {
  require(from <= to && to <= w.config.layers, "run_blocks: block range out of bounds");
  for (std::size_t i = from; i < to; ++i) {
    BlockCache* cache = nullptr;
    if (caches) cache = &caches->emplace_back();
    h = encoder_block(h, mask, w.block(i), w.config, counter, cache);
  }
  return h;
}

}  // namespace dil
