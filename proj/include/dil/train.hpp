// SPDX-License-Identifier: Apache-2.0
//
// Analytic backpropagation through the delayed-interaction model, the span
// loss, Adam, and desk-scale training on the synthetic key/value task.
#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <vector>

#include "dil/encoder.hpp"
#include "dil/reader.hpp"
#include "dil/synthetic.hpp"

namespace dil {

struct SpanLoss {
  double loss = 0.0;
  std::size_t gold_start = 0;
  std::size_t gold_end = 0;
};

/// Mean of the start and end cross-entropies restricted to `valid` positions.
/// Gold indices are full-sequence indices. When `dlogits` is given it receives
/// the n × 2 gradient of the loss w.r.t. the (start, end) logits.
SpanLoss span_loss(const SpanLogits& logits, std::size_t gold_start, std::size_t gold_end,
                   const std::vector<bool>& valid, Matrix* dlogits = nullptr);

/// Positions a span may start or end on: paragraph tokens without the final [SEP].
std::vector<bool> paragraph_valid_mask(const SegmentedInput& input);

enum class ForwardMode {
  kDelayed,  // question and paragraph split through the first k blocks
  kUnsplit,  // original model, one sequence through all l blocks
};

/// Forward pass with every activation retained for backward().
struct ForwardTape {
  ForwardMode mode = ForwardMode::kDelayed;
  std::size_t n_q = 0;
  EmbedCache question_embed, paragraph_embed, joint_embed;
  std::vector<BlockCache> question_blocks, paragraph_blocks, joint_blocks;
  Matrix final_hidden;
  SpanLogits logits;
};

ForwardTape forward_with_tape(const SegmentedInput& input, const EncoderWeights& w,
                              ForwardMode mode = ForwardMode::kDelayed);

/// Accumulates d(loss)/d(parameters) into `grads` (same shapes as the weights)
/// given the n × 2 logit gradient. Shared blocks receive the sum over every
/// slot they back.
void backward(const ForwardTape& tape, const EncoderWeights& w, const Matrix& dlogits, EncoderWeights& grads);

struct LabeledInput {
  SegmentedInput input;
  std::size_t gold_start = 0;  // full-sequence index
  std::size_t gold_end = 0;
};

struct LossAndGradient {
  double loss = 0.0;
  EncoderWeights gradient;
};

LossAndGradient loss_and_gradient(const EncoderWeights& w, const LabeledInput& example,
                                  ForwardMode mode = ForwardMode::kDelayed);
double loss_only(const EncoderWeights& w, const LabeledInput& example, ForwardMode mode = ForwardMode::kDelayed);

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  EncoderWeights m, v;

  AdamState(const EncoderWeights& like, double learning_rate);
  void apply(EncoderWeights& w, const EncoderWeights& grad);
};

/// Desk-scale model for the synthetic task: l=6, d=64, 4 heads, d_ff=128,
/// q_max=16, p_max=48. Trains pre-norm with init std 0.07 (blocks) and 1.0
/// (embedding tables); the post-norm 0.02 default stalls on this task.
ModelConfig toy_model_config(std::size_t k = 0);

struct TrainOptions {
  std::size_t epochs = 2;
  std::size_t batch = 16;
  double lr = 3e-4;
  std::size_t train_examples = 20000;
  std::size_t eval_examples = 500;
  ForwardMode mode = ForwardMode::kDelayed;
  std::uint64_t seed = 0;
  /// Optional progress sink, called every `log_every` steps.
  std::size_t log_every = 0;
  std::function<void(std::size_t step, double smoothed_loss)> on_log;
};

struct EvalMetrics {
  double em = 0.0;  // percent
  double f1 = 0.0;  // percent
};

struct TrainResult {
  EncoderWeights weights;
  EvalMetrics metrics;
  std::vector<double> loss_history;  // per step, batch mean
};

/// Converts a generated example into model input with token-level gold indices.
LabeledInput label_example(const text::QaExample& ex, const text::Vocab& vocab, const ModelConfig& config);

/// Exact-match / F1 of read() over a dataset (percent).
EvalMetrics evaluate_reader(const EncoderWeights& w, const text::Vocab& vocab, const text::QaDataset& data);

/// Trains from init_weights(config) on task.train_split(); evaluates on task.eval_split().
/// Throws std::runtime_error when the loss diverges.
TrainResult train_toy(const ModelConfig& config, const SyntheticTask& task, const TrainOptions& options);

struct SweepRow {
  std::size_t k = 0;
  double em = 0.0;
  double f1 = 0.0;
};

/// One training run per k in [0, l], identical seed and data for each.
std::vector<SweepRow> k_sweep(const ModelConfig& config, const SyntheticTask& task, const TrainOptions& options,
                              const std::function<void(const SweepRow&)>& on_row = {});

/// Tab-separated "k\tem\tf1" with a header line.
void write_sweep_tsv(std::ostream& out, const std::vector<SweepRow>& rows);

}  // namespace dil
