// SPDX-License-Identifier: Apache-2.0
#include "dil/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <stdexcept>

#include "dil/error.hpp"
#include "dil/pipeline.hpp"

namespace dil {

std::vector<bool> paragraph_valid_mask(const SegmentedInput& input) {
  std::vector<bool> valid(input.size(), false);
  const std::size_t n_q = input.question.size();
  for (std::size_t i = 0; i + 1 < input.paragraph.size(); ++i) valid[n_q + i] = true;
  return valid;
}

namespace {

/// Cross-entropy of one logit column over the valid positions; writes
/// 0.5 * (softmax - onehot) into column `col` of dlogits.
double masked_cross_entropy(const std::vector<double>& logits, std::size_t gold, const std::vector<bool>& valid,
                            Matrix* dlogits, std::size_t col) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (valid[i]) mx = std::max(mx, logits[i]);
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (valid[i]) sum += std::exp(logits[i] - mx);
  const double log_z = mx + std::log(sum);
  if (dlogits) {
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const double p = valid[i] ? std::exp(logits[i] - log_z) : 0.0;
      (*dlogits)(i, col) = 0.5 * (p - (i == gold ? 1.0 : 0.0));
    }
  }
  return log_z - logits[gold];
}

}  // namespace

SpanLoss span_loss(const SpanLogits& logits, std::size_t gold_start, std::size_t gold_end,
                   const std::vector<bool>& valid, Matrix* dlogits) {
  const std::size_t n = logits.start.size();
  require(logits.end.size() == n && valid.size() == n, "span_loss: length mismatch");
  require(gold_start < n && valid[gold_start], "span_loss: gold start is not a valid position");
  require(gold_end < n && valid[gold_end], "span_loss: gold end is not a valid position");
  if (dlogits) *dlogits = Matrix(n, 2);
  const double ls = masked_cross_entropy(logits.start, gold_start, valid, dlogits, 0);
  const double le = masked_cross_entropy(logits.end, gold_end, valid, dlogits, 1);
  return {0.5 * (ls + le), gold_start, gold_end};
}

ForwardTape forward_with_tape(const SegmentedInput& input, const EncoderWeights& w, ForwardMode mode) {
  ForwardTape tape;
  tape.mode = mode;
  tape.n_q = input.question.size();
  const std::size_t k = w.config.non_interaction_blocks;
  const std::size_t l = w.config.layers;
  Matrix h;
  if (mode == ForwardMode::kDelayed) {
    Matrix q = embed(input.question.ids, input.question.positions(), input.question.segments(), w,
                     &tape.question_embed);
    q = run_blocks(std::move(q), AttentionMask::full(q.rows()), w, 0, k, nullptr, &tape.question_blocks);
    Matrix p = embed(input.paragraph.ids, input.paragraph.positions(), input.paragraph.segments(), w,
                     &tape.paragraph_embed);
    p = run_blocks(std::move(p), AttentionMask::full(p.rows()), w, 0, k, nullptr, &tape.paragraph_blocks);
    h = Matrix::vstack(q, p);
    h = run_blocks(std::move(h), AttentionMask::full(h.rows()), w, k, l, nullptr, &tape.joint_blocks);
  } else {
    h = embed(input.ids(), input.positions(), input.segments(), w, &tape.joint_embed);
    h = run_blocks(std::move(h), AttentionMask::full(h.rows()), w, 0, l, nullptr, &tape.joint_blocks);
  }
  tape.logits = qa_head(h, w);
  tape.final_hidden = std::move(h);
  return tape;
}

namespace {

/// dx for y = gamma * x̂ + beta with x̂ = (x - mean) * inv_std; accumulates dgamma/dbeta.
Matrix layer_norm_backward(const Matrix& dy, const LayerNormCache& cache, const Matrix& gamma, Matrix& dgamma,
                           Matrix& dbeta) {
  const std::size_t n = dy.rows();
  const std::size_t d = dy.cols();
  Matrix dx(n, d);
  std::vector<double> dxhat(d);
  for (std::size_t r = 0; r < n; ++r) {
    const auto g = dy.row(r);
    const auto xhat = cache.normalized.row(r);
    double sum = 0.0;
    double dot = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      dgamma(0, c) += g[c] * xhat[c];
      dbeta(0, c) += g[c];
      dxhat[c] = g[c] * gamma(0, c);
      sum += dxhat[c];
      dot += dxhat[c] * xhat[c];
    }
    const double scale = cache.inv_std[r] / double(d);
    auto out = dx.row(r);
    for (std::size_t c = 0; c < d; ++c) out[c] = scale * (double(d) * dxhat[c] - sum - xhat[c] * dot);
  }
  return dx;
}

void accumulate_bias(Matrix& dbias, const Matrix& dy) {
  for (std::size_t r = 0; r < dy.rows(); ++r) {
    const auto row = dy.row(r);
    for (std::size_t c = 0; c < dy.cols(); ++c) dbias(0, c) += row[c];
  }
}

Matrix block_backward(const BlockCache& c, const BlockWeights& bw, const ModelConfig& config, const Matrix& dout,
                      BlockWeights& g) {
  const std::size_t n = c.input.rows();
  const std::size_t dh = config.head_dim();
  const double scale = 1.0 / std::sqrt(double(dh));
  const bool pre = config.pre_norm;

  // Feed-forward sub-layer: r2 = x1 + act·W2 + b2; out = LN2(r2) (post) or r2 (pre).
  const Matrix dr2 = pre ? dout : layer_norm_backward(dout, c.ln2, bw.ln2_gamma, g.ln2_gamma, g.ln2_beta);
  add_inplace(g.w2, matmul_tn(c.ffn_act, dr2));
  accumulate_bias(g.b2, dr2);
  Matrix dpre = matmul_nt(dr2, bw.w2);
  for (std::size_t i = 0; i < dpre.size(); ++i) dpre.values()[i] *= gelu_derivative(c.ffn_pre.values()[i]);
  add_inplace(g.w1, matmul_tn(c.ffn_input, dpre));
  accumulate_bias(g.b1, dpre);
  Matrix dffn_in = matmul_nt(dpre, bw.w1);
  Matrix dh1 = dr2;
  if (pre) {
    add_inplace(dh1, layer_norm_backward(dffn_in, c.ln2, bw.ln2_gamma, g.ln2_gamma, g.ln2_beta));
  } else {
    add_inplace(dh1, dffn_in);
  }

  // Attention sub-layer: r1 = x + context·Wo + bo; x1 = LN1(r1) (post) or r1 (pre).
  const Matrix dr1 = pre ? dh1 : layer_norm_backward(dh1, c.ln1, bw.ln1_gamma, g.ln1_gamma, g.ln1_beta);
  add_inplace(g.wo, matmul_tn(c.context, dr1));
  accumulate_bias(g.bo, dr1);
  const Matrix dcontext = matmul_nt(dr1, bw.wo);

  Matrix dq(n, config.d_model), dk(n, config.d_model), dv(n, config.d_model);
  for (std::size_t head = 0; head < config.n_heads; ++head) {
    const std::size_t c0 = head * dh;
    const Matrix& p = c.probs[head];
    const Matrix dctx = dcontext.slice_cols(c0, c0 + dh);
    const Matrix vh = c.v.slice_cols(c0, c0 + dh);
    const Matrix qh = c.q.slice_cols(c0, c0 + dh);
    const Matrix kh = c.k.slice_cols(c0, c0 + dh);
    dv.set_cols(c0, matmul_tn(p, dctx));
    const Matrix dp = matmul_nt(dctx, vh);
    Matrix ds(n, n);
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += dp(r, j) * p(r, j);
      for (std::size_t j = 0; j < n; ++j) ds(r, j) = p(r, j) * (dp(r, j) - dot) * scale;
    }
    dq.set_cols(c0, matmul(ds, kh));
    dk.set_cols(c0, matmul_tn(ds, qh));
  }
  add_inplace(g.wq, matmul_tn(c.qkv_input, dq));
  accumulate_bias(g.bq, dq);
  add_inplace(g.wk, matmul_tn(c.qkv_input, dk));
  accumulate_bias(g.bk, dk);
  add_inplace(g.wv, matmul_tn(c.qkv_input, dv));
  accumulate_bias(g.bv, dv);

  Matrix da = matmul_nt(dq, bw.wq);
  add_inplace(da, matmul_nt(dk, bw.wk));
  add_inplace(da, matmul_nt(dv, bw.wv));
  Matrix dx = dr1;
  if (pre) {
    add_inplace(dx, layer_norm_backward(da, c.ln1, bw.ln1_gamma, g.ln1_gamma, g.ln1_beta));
  } else {
    add_inplace(dx, da);
  }
  return dx;
}

/// Runs block backward over `caches` in reverse; cache i belongs to slot first_slot + i.
Matrix blocks_backward(const std::vector<BlockCache>& caches, std::size_t first_slot, const EncoderWeights& w,
                       Matrix d, EncoderWeights& grads) {
  for (std::size_t i = caches.size(); i-- > 0;) {
    d = block_backward(caches[i], w.block(first_slot + i), w.config, d, grads.block(first_slot + i));
  }
  return d;
}

void embed_backward(const EmbedCache& cache, const EncoderWeights& w, const Matrix& dout, EncoderWeights& grads) {
  const Matrix dsum =
      layer_norm_backward(dout, cache.ln, w.embedding_ln_gamma, grads.embedding_ln_gamma, grads.embedding_ln_beta);
  for (std::size_t r = 0; r < dsum.rows(); ++r) {
    const auto src = dsum.row(r);
    auto tok = grads.token_embedding.row(std::size_t(cache.ids[r]));
    auto pos = grads.position_embedding.row(cache.positions[r]);
    auto seg = grads.segment_embedding.row(cache.segments[r]);
    for (std::size_t c = 0; c < src.size(); ++c) {
      tok[c] += src[c];
      pos[c] += src[c];
      seg[c] += src[c];
    }
  }
}

}  // namespace

void backward(const ForwardTape& tape, const EncoderWeights& w, const Matrix& dlogits, EncoderWeights& grads) {
  require(dlogits.rows() == tape.final_hidden.rows() && dlogits.cols() == 2, "backward: dlogits shape mismatch");
  add_inplace(grads.qa_weight, matmul_tn(tape.final_hidden, dlogits));
  accumulate_bias(grads.qa_bias, dlogits);
  Matrix d = matmul_nt(dlogits, w.qa_weight);

  if (tape.mode == ForwardMode::kUnsplit) {
    d = blocks_backward(tape.joint_blocks, 0, w, std::move(d), grads);
    embed_backward(tape.joint_embed, w, d, grads);
    return;
  }
  const std::size_t k = w.config.non_interaction_blocks;
  d = blocks_backward(tape.joint_blocks, k, w, std::move(d), grads);
  // Split the joint gradient at the concatenation boundary.
  Matrix dq = d.slice_rows(0, tape.n_q);
  Matrix dp = d.slice_rows(tape.n_q, d.rows());
  dq = blocks_backward(tape.question_blocks, 0, w, std::move(dq), grads);
  dp = blocks_backward(tape.paragraph_blocks, 0, w, std::move(dp), grads);
  embed_backward(tape.question_embed, w, dq, grads);
  embed_backward(tape.paragraph_embed, w, dp, grads);
}

LossAndGradient loss_and_gradient(const EncoderWeights& w, const LabeledInput& example, ForwardMode mode) {
  const ForwardTape tape = forward_with_tape(example.input, w, mode);
  Matrix dlogits;
  const SpanLoss loss = span_loss(tape.logits, example.gold_start, example.gold_end,
                                  paragraph_valid_mask(example.input), &dlogits);
  LossAndGradient out{loss.loss, w.zeros_like()};
  backward(tape, w, dlogits, out.gradient);
  return out;
}

double loss_only(const EncoderWeights& w, const LabeledInput& example, ForwardMode mode) {
  SpanLogits logits;
  if (mode == ForwardMode::kDelayed) {
    logits = dil_forward(encode_question(example.input.question, w), encode_paragraph(example.input.paragraph, w), w);
  } else {
    logits = baseline_forward(example.input, w);
  }
  return span_loss(logits, example.gold_start, example.gold_end, paragraph_valid_mask(example.input)).loss;
}

AdamState::AdamState(const EncoderWeights& like, double learning_rate)
    : lr(learning_rate), m(like.zeros_like()), v(like.zeros_like()) {}

void AdamState::apply(EncoderWeights& w, const EncoderWeights& grad) {
  ++step;
  const double c1 = 1.0 - std::pow(beta1, double(step));
  const double c2 = 1.0 - std::pow(beta2, double(step));
  std::vector<Matrix*> ms, vs, gs;
  m.visit([&ms](const std::string&, Matrix& x) { ms.push_back(&x); });
  v.visit([&vs](const std::string&, Matrix& x) { vs.push_back(&x); });
  const_cast<EncoderWeights&>(grad).visit([&gs](const std::string&, Matrix& x) { gs.push_back(&x); });
  std::size_t idx = 0;
  w.visit([&](const std::string&, Matrix& p) {
    auto& mv = ms[idx]->values();
    auto& vv = vs[idx]->values();
    const auto& gv = gs[idx]->values();
    auto& pv = p.values();
    for (std::size_t i = 0; i < pv.size(); ++i) {
      mv[i] = beta1 * mv[i] + (1.0 - beta1) * gv[i];
      vv[i] = beta2 * vv[i] + (1.0 - beta2) * gv[i] * gv[i];
      pv[i] -= lr * (mv[i] / c1) / (std::sqrt(vv[i] / c2) + eps);
    }
    ++idx;
  });
}

LabeledInput label_example(const text::QaExample& ex, const text::Vocab& vocab, const ModelConfig& config) {
  require(!ex.answers.empty() && ex.answers.front().answer_start >= 0, "label_example: example needs a located answer");
  const auto qtok = text::tokenize(ex.question);
  const auto ptok = text::tokenize(ex.context);
  require(ptok.size() + 1 <= config.p_max, "label_example: context exceeds p_max - 1 tokens");
  LabeledInput out;
  out.input.question = make_question_segment(qtok, vocab, config);
  out.input.paragraph = make_paragraph_segment(vocab.encode(ptok), config);
  out.input.paragraph.offsets = ptok.offsets;
  const auto& gold = ex.answers.front();
  const std::size_t b = std::size_t(gold.answer_start);
  const std::size_t e = b + gold.text.size();
  std::optional<std::size_t> start, end;
  for (std::size_t i = 0; i < ptok.size(); ++i) {
    if (!start && ptok.offsets[i].end > b) start = i;
    if (ptok.offsets[i].begin < e) end = i;
  }
  require(start && end && *start <= *end, "label_example: answer does not align with tokens");
  out.gold_start = out.input.question.size() + *start;
  out.gold_end = out.input.question.size() + *end;
  return out;
}

EvalMetrics evaluate_reader(const EncoderWeights& w, const text::Vocab& vocab, const text::QaDataset& data) {
  EvalMetrics m;
  if (data.empty()) return m;
  for (const auto& ex : data) {
    const SpanPrediction pred = read(ex.question, ex.context, w, vocab);
    std::vector<std::string> golds;
    for (const auto& a : ex.answers) golds.push_back(a.text);
    const auto [em, f1] = compute_em_f1(pred.answer, golds);
    m.em += em;
    m.f1 += f1;
  }
  m.em *= 100.0 / double(data.size());
  m.f1 *= 100.0 / double(data.size());
  return m;
}

ModelConfig toy_model_config(std::size_t k) {
  ModelConfig c;
  c.layers = 6;
  c.non_interaction_blocks = k;
  c.d_model = 64;
  c.n_heads = 4;
  c.d_ff = 128;
  c.q_max = 16;
  c.p_max = 48;
  c.pre_norm = true;
  c.init_std = 0.07;
  c.embedding_init_std = 1.0;
  return c;
}

TrainResult train_toy(const ModelConfig& config, const SyntheticTask& task, const TrainOptions& options) {
  require(options.batch >= 1, "train_toy: batch must be positive");
  const text::Vocab vocab = task.vocabulary();
  ModelConfig cfg = config;
  cfg.vocab_size = std::max(cfg.vocab_size, vocab.size());
  TrainResult result{init_weights(cfg), {}, {}};
  EncoderWeights& w = result.weights;

  const text::QaDataset train = task.train_split(options.train_examples);
  std::vector<LabeledInput> examples;
  examples.reserve(train.size());
  for (const auto& ex : train) examples.push_back(label_example(ex, vocab, cfg));

  AdamState adam(w, options.lr);
  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(examples.size());
  std::size_t step = 0;
  double smoothed = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b0 = 0; b0 < order.size(); b0 += options.batch) {
      const std::size_t b1 = std::min(order.size(), b0 + options.batch);
      EncoderWeights grad = w.zeros_like();
      double loss = 0.0;
      try {
        for (std::size_t i = b0; i < b1; ++i) {
          const ForwardTape tape = forward_with_tape(examples[order[i]].input, w, options.mode);
          Matrix dlogits;
          loss += span_loss(tape.logits, examples[order[i]].gold_start, examples[order[i]].gold_end,
                            paragraph_valid_mask(examples[order[i]].input), &dlogits)
                      .loss;
          backward(tape, w, dlogits, grad);
        }
      } catch (const ContractError& e) {
        throw std::runtime_error("training diverged at step " + std::to_string(step) + ": " + e.what());
      }
      loss /= double(b1 - b0);
      if (!std::isfinite(loss)) {
        throw std::runtime_error("training diverged at step " + std::to_string(step) + ": loss is " +
                                 std::to_string(loss));
      }
      const double inv = 1.0 / double(b1 - b0);
      grad.visit([inv](const std::string&, Matrix& m) { scale_inplace(m, inv); });
      adam.apply(w, grad);
      result.loss_history.push_back(loss);
      smoothed = std::isnan(smoothed) ? loss : 0.95 * smoothed + 0.05 * loss;
      ++step;
      if (options.on_log && options.log_every > 0 && step % options.log_every == 0) options.on_log(step, smoothed);
    }
  }
  result.metrics = evaluate_reader(w, vocab, task.eval_split(options.eval_examples));
  return result;
}

std::vector<SweepRow> k_sweep(const ModelConfig& config, const SyntheticTask& task, const TrainOptions& options,
                              const std::function<void(const SweepRow&)>& on_row) {
  std::vector<SweepRow> rows;
  for (std::size_t k = 0; k <= config.layers; ++k) {
    ModelConfig cfg = config;
    cfg.non_interaction_blocks = k;
    const TrainResult r = train_toy(cfg, task, options);
    rows.push_back({k, r.metrics.em, r.metrics.f1});
    if (on_row) on_row(rows.back());
  }
  return rows;
}

void write_sweep_tsv(std::ostream& out, const std::vector<SweepRow>& rows) {
  out << "k\tem\tf1\n";
  for (const auto& r : rows) out << r.k << '\t' << r.em << '\t' << r.f1 << '\n';
}

}  // namespace dil
