// SPDX-License-Identifier: Apache-2.0
//
// Embedding layer and the stack of transformer blocks (post-layer-norm by
// default, pre-layer-norm on request). The same code runs the unsplit model and
// both phases of the delayed-interaction model.
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dil/tensor.hpp"
#include "dil/text.hpp"

namespace dil {

inline constexpr double kLayerNormEps = 1e-12;

struct ModelConfig {
  std::size_t layers = 6;                  // l
  std::size_t non_interaction_blocks = 0;  // k
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t vocab_size = 128;
  std::size_t q_max = 16;  // incl. [CLS] and the first [SEP]
  std::size_t p_max = 48;  // incl. the final [SEP]
  bool share_blocks = false;
  /// Normalize each sub-layer's input instead of the residual sum.
  bool pre_norm = false;
  double init_std = 0.02;            // block and head matrices
  double embedding_init_std = 0.02;  // token, position and segment tables
  std::uint64_t seed = 0;

  [[nodiscard]] std::size_t max_sequence() const { return q_max + p_max; }
  [[nodiscard]] std::size_t interaction_blocks() const { return layers - non_interaction_blocks; }
  [[nodiscard]] std::size_t head_dim() const { return d_model / n_heads; }
  /// Throws ContractError on an inconsistent configuration.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

std::string config_to_json(const ModelConfig& c);
ModelConfig config_from_json(const std::string& json_text);

struct BlockWeights {
  Matrix wq, bq, wk, bk, wv, bv, wo, bo;
  Matrix ln1_gamma, ln1_beta;
  Matrix w1, b1, w2, b2;
  Matrix ln2_gamma, ln2_beta;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "wq", wq), f(prefix + "bq", bq), f(prefix + "wk", wk), f(prefix + "bk", bk);
    f(prefix + "wv", wv), f(prefix + "bv", bv), f(prefix + "wo", wo), f(prefix + "bo", bo);
    f(prefix + "ln1_gamma", ln1_gamma), f(prefix + "ln1_beta", ln1_beta);
    f(prefix + "w1", w1), f(prefix + "b1", b1), f(prefix + "w2", w2), f(prefix + "b2", b2);
    f(prefix + "ln2_gamma", ln2_gamma), f(prefix + "ln2_beta", ln2_beta);
  }
};

/// All parameters. With share_blocks one BlockWeights backs every block slot.
/// The parameter set never depends on the interaction split k.
struct EncoderWeights {
  ModelConfig config;
  Matrix token_embedding;     // V × d
  Matrix position_embedding;  // n_s × d
  Matrix segment_embedding;   // 2 × d
  Matrix embedding_ln_gamma, embedding_ln_beta;
  std::vector<BlockWeights> block_params;
  Matrix qa_weight;  // d × 2
  Matrix qa_bias;    // 1 × 2

  [[nodiscard]] const BlockWeights& block(std::size_t i) const;
  BlockWeights& block(std::size_t i);

  /// Visits every parameter matrix in declaration order.
  template <typename F>
  void visit(F&& f) {
    f(std::string("token_embedding"), token_embedding);
    f(std::string("position_embedding"), position_embedding);
    f(std::string("segment_embedding"), segment_embedding);
    f(std::string("embedding_ln_gamma"), embedding_ln_gamma);
    f(std::string("embedding_ln_beta"), embedding_ln_beta);
    for (std::size_t i = 0; i < block_params.size(); ++i) block_params[i].visit("block" + std::to_string(i) + ".", f);
    f(std::string("qa_weight"), qa_weight);
    f(std::string("qa_bias"), qa_bias);
  }
  template <typename F>
  void visit(F&& f) const {
    const_cast<EncoderWeights*>(this)->visit(
        [&f](const std::string& name, Matrix& m) { f(name, static_cast<const Matrix&>(m)); });
  }

  [[nodiscard]] std::size_t parameter_count() const;
  /// FNV-1a over every parameter value in visit order.
  [[nodiscard]] std::uint64_t checksum() const;
  /// Same shapes, all zeros.
  [[nodiscard]] EncoderWeights zeros_like() const;
};

EncoderWeights init_weights(const ModelConfig& config);

void save_weights(const EncoderWeights& w, const std::string& path);
EncoderWeights load_weights(const std::string& path);

struct EmbedCache {
  std::vector<text::TokenId> ids;
  std::vector<std::size_t> positions;
  std::vector<std::size_t> segments;
  LayerNormCache ln;
};

/// Row i = LN(token[ids[i]] + position[positions[i]] + segment[segments[i]]).
Matrix embed(std::span<const text::TokenId> ids, std::span<const std::size_t> positions,
             std::span<const std::size_t> segments, const EncoderWeights& w,
             EmbedCache* cache = nullptr);

/// Activations retained for the backward pass.
struct BlockCache {
  Matrix input;
  Matrix qkv_input;  // input of the q/k/v projections
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per head, n × n
  Matrix context;
  LayerNormCache ln1;
  Matrix ffn_input;  // input of the first feed-forward projection
  Matrix ffn_pre;    // before GELU
  Matrix ffn_act;    // after GELU
  LayerNormCache ln2;
  AttentionMask mask;
};

/// MACs charged by one block on a sequence of n tokens.
std::uint64_t block_macs(const ModelConfig& c, std::uint64_t n);

Matrix encoder_block(const Matrix& h, const AttentionMask& mask, const BlockWeights& bw,
                     const ModelConfig& config, MacCounter* counter = nullptr,
                     BlockCache* cache = nullptr);

/// Applies blocks [from, to) in order; from == to is the identity.
Matrix run_blocks(Matrix h, const AttentionMask& mask, const EncoderWeights& w, std::size_t from,
                  std::size_t to, MacCounter* counter = nullptr,
                  std::vector<BlockCache>* caches = nullptr);

}  // namespace dil
