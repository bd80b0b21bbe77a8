// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "dil/error.hpp"
#include "dil/train.hpp"
#include "support/oracles.hpp"

using namespace dil;

namespace {

ModelConfig grad_config(std::size_t k, bool share) {
  ModelConfig c;
  c.layers = 3;
  c.non_interaction_blocks = k;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 24;
  c.vocab_size = 30;
  c.q_max = 6;
  c.p_max = 10;
  c.share_blocks = share;
  c.seed = 17 + k + (share ? 100 : 0);
  return c;
}

LabeledInput grad_example(const ModelConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  LabeledInput ex;
  ex.input = oracle::random_input(rng, c, 5, 8);
  ex.gold_start = ex.input.question.size() + 2;
  ex.gold_end = ex.input.question.size() + 4;
  return ex;
}

std::vector<std::pair<std::string, Matrix*>> params(EncoderWeights& w) {
  std::vector<std::pair<std::string, Matrix*>> out;
  w.visit([&](const std::string& n, Matrix& m) { out.emplace_back(n, &m); });
  return out;
}

SyntheticTask tiny_task() {
  SyntheticTask t;
  t.num_keys = 6;
  t.values_per_key = 2;
  t.num_fillers = 2;
  t.records_per_paragraph = 3;
  t.num_topics = 8;
  return t;
}

ModelConfig tiny_model(std::size_t k) {
  ModelConfig c;
  c.layers = 2;
  c.non_interaction_blocks = k;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 16;
  c.q_max = 10;
  c.p_max = 24;
  c.vocab_size = 40;
  return c;
}

}  // namespace

TEST_CASE("span loss values") {
  const std::size_t n = 14;
  std::vector<bool> valid(n, false);
  for (std::size_t i = 3; i < 13; ++i) valid[i] = true;
  SpanLogits uniform{std::vector<double>(n, 0.25), std::vector<double>(n, 0.25)};
  uniform.start[0] = 50.0;  // invalid positions do not count
  CHECK(std::abs(span_loss(uniform, 4, 6, valid).loss - std::log(10.0)) <= 1e-12);

  SpanLogits sharp{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)};
  sharp.start[5] = 60.0;
  sharp.end[7] = 60.0;
  CHECK(span_loss(sharp, 5, 7, valid).loss < 1e-20);

  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0, 2);
  for (int trial = 0; trial < 20; ++trial) {
    SpanLogits l{std::vector<double>(n), std::vector<double>(n)};
    for (std::size_t i = 0; i < n; ++i) l.start[i] = g(rng), l.end[i] = g(rng);
    auto ce = [&](const std::vector<double>& x, std::size_t gold) {
      double z = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        if (valid[i]) z += std::exp(x[i]);
      return -std::log(std::exp(x[gold]) / z);
    };
    const double want = 0.5 * (ce(l.start, 4) + ce(l.end, 9));
    Matrix dl;
    const auto got = span_loss(l, 4, 9, valid, &dl);
    CHECK(got.loss >= 0.0);
    CHECK(std::abs(got.loss - want) <= 1e-12);
    for (std::size_t i = 0; i < n; ++i)
      for (int col = 0; col < 2; ++col) {
        SpanLogits p = l, m = l;
        auto& pv = col == 0 ? p.start : p.end;
        auto& mv = col == 0 ? m.start : m.end;
        pv[i] += 1e-6;
        mv[i] -= 1e-6;
        const double fd = (span_loss(p, 4, 9, valid).loss - span_loss(m, 4, 9, valid).loss) / 2e-6;
        CHECK(std::abs(fd - dl(i, std::size_t(col))) <= 1e-8);
      }
  }
  CHECK_THROWS_AS(span_loss(uniform, 0, 6, valid), ContractError);
  CHECK_THROWS_AS(span_loss(uniform, 4, 13, valid), ContractError);
}

TEST_CASE("valid mask covers paragraph tokens without the final separator") {
  const ModelConfig c = grad_config(1, false);
  std::mt19937_64 rng(1);
  const auto in = oracle::random_input(rng, c, 4, 6);
  const auto v = paragraph_valid_mask(in);
  REQUIRE(v.size() == 10);
  for (std::size_t i = 0; i < 10; ++i) CHECK(v[i] == (i >= 4 && i < 9));
}

TEST_CASE("analytic gradients match central finite differences") {
  for (bool share : {false, true}) for (bool pre : {false, true}) {
    ModelConfig c = grad_config(1, share);
    c.pre_norm = pre;
    EncoderWeights w = oracle::random_weights(c);
    const LabeledInput ex = grad_example(c, 5);
    const auto lg = loss_and_gradient(w, ex);
    auto grads = params(const_cast<EncoderWeights&>(lg.gradient));
    auto ps = params(w);
    std::mt19937_64 rng(99);
    double worst = 0.0;
    std::string worst_name;
    for (std::size_t g = 0; g < ps.size(); ++g) {
      Matrix& m = *ps[g].second;
      std::uniform_int_distribution<std::size_t> pick(0, m.size() - 1);
      for (int s = 0; s < 50; ++s) {
        const std::size_t i = pick(rng);
        const double old = m.values()[i], h = 1e-4;
        m.values()[i] = old + h;
        const double lp = loss_only(w, ex);
        m.values()[i] = old - h;
        const double lm = loss_only(w, ex);
        m.values()[i] = old;
        const double fd = (lp - lm) / (2 * h), an = grads[g].second->values()[i];
        const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
        if (rel > worst) worst = rel, worst_name = ps[g].first;
      }
    }
    INFO("share=" << share << " pre_norm=" << pre << " worst group " << worst_name);
    CHECK(worst <= 1e-4);
  }
}

TEST_CASE("shared-block gradient equals the sum over an untied clone") {
  for (std::size_t k : {0u, 1u, 3u}) {
    const ModelConfig shared_cfg = grad_config(k, true);
    const EncoderWeights shared = oracle::random_weights(shared_cfg);
    ModelConfig untied_cfg = shared_cfg;
    untied_cfg.share_blocks = false;
    EncoderWeights untied = init_weights(untied_cfg);
    untied.token_embedding = shared.token_embedding;
    untied.position_embedding = shared.position_embedding;
    untied.segment_embedding = shared.segment_embedding;
    untied.embedding_ln_gamma = shared.embedding_ln_gamma;
    untied.embedding_ln_beta = shared.embedding_ln_beta;
    for (auto& b : untied.block_params) b = shared.block_params[0];
    untied.qa_weight = shared.qa_weight;
    untied.qa_bias = shared.qa_bias;

    const LabeledInput ex = grad_example(shared_cfg, 8);
    const auto gs = loss_and_gradient(shared, ex);
    const auto gu = loss_and_gradient(untied, ex);
    CHECK(gs.loss == gu.loss);

    BlockWeights sum = gu.gradient.block_params[0];
    std::vector<Matrix*> acc;
    sum.visit("", [&](const std::string&, Matrix& m) { acc.push_back(&m); });
    for (std::size_t b = 1; b < untied_cfg.layers; ++b) {
      std::size_t idx = 0;
      auto bw = gu.gradient.block_params[b];
      bw.visit("", [&](const std::string&, Matrix& m) { add_inplace(*acc[idx++], m); });
    }
    std::vector<const Matrix*> got;
    auto sb = gs.gradient.block_params[0];
    sb.visit("", [&](const std::string&, Matrix& m) { got.push_back(&m); });
    for (std::size_t i = 0; i < acc.size(); ++i) CHECK(oracle::max_abs_diff(*acc[i], *got[i]) <= 1e-12);
    CHECK(oracle::max_abs_diff(gs.gradient.token_embedding, gu.gradient.token_embedding) <= 1e-12);
  }
}

TEST_CASE("unreachable vocabulary rows get exactly zero gradient") {
  const ModelConfig c = grad_config(1, false);
  const EncoderWeights w = oracle::random_weights(c);
  const LabeledInput ex = grad_example(c, 4);
  const auto lg = loss_and_gradient(w, ex);
  const auto ids = ex.input.ids();
  for (std::size_t row = 0; row < c.vocab_size; ++row) {
    if (std::find(ids.begin(), ids.end(), text::TokenId(row)) != ids.end()) continue;
    for (double v : lg.gradient.token_embedding.row(row)) CHECK(v == 0.0);
  }
}

TEST_CASE("delayed and unsplit gradients coincide at k = 0") {
  const ModelConfig c = grad_config(0, false);
  const EncoderWeights w = oracle::random_weights(c);
  const LabeledInput ex = grad_example(c, 6);
  const auto a = loss_and_gradient(w, ex, ForwardMode::kDelayed);
  const auto b = loss_and_gradient(w, ex, ForwardMode::kUnsplit);
  CHECK(a.loss == b.loss);
  CHECK(a.gradient.checksum() == b.gradient.checksum());
}

TEST_CASE("adam moments mirror the parameters and steps increase") {
  const ModelConfig c = grad_config(1, false);
  EncoderWeights w = oracle::random_weights(c);
  AdamState adam(w, 1e-2);
  CHECK(adam.m.parameter_count() == w.parameter_count());
  const auto lg = loss_and_gradient(w, grad_example(c, 2));
  const double before = lg.loss;
  adam.apply(w, lg.gradient);
  CHECK(adam.step == 1);
  adam.apply(w, loss_and_gradient(w, grad_example(c, 2)).gradient);
  CHECK(adam.step == 2);
  CHECK(loss_only(w, grad_example(c, 2)) < before);
}

TEST_CASE("synthetic task") {
  const SyntheticTask t;
  const auto a = t.train_split(50), b = t.train_split(50), e = t.eval_split(50);
  CHECK(a.size() == 50);
  CHECK(a[7].context == b[7].context);
  CHECK(a[7].context != e[7].context);
  CHECK(t.chance_em() == doctest::Approx(100.0 / double(t.records_per_paragraph)));
  const auto vocab = t.vocabulary();
  for (const auto& ex : a) {
    const auto& gold = ex.answers.at(0);
    CHECK(ex.context.substr(std::size_t(gold.answer_start), gold.text.size()) == gold.text);
    // the question names a key that appears exactly once, right before the answer
    const auto q = text::tokenize(ex.question);
    const std::string key = q.tokens.at(2);
    const auto p = text::tokenize(ex.context);
    std::size_t hits = 0, at = 0;
    for (std::size_t i = 0; i < p.size(); ++i)
      if (p.tokens[i] == key) ++hits, at = i;
    CHECK(hits == 1);
    CHECK(p.offsets[at + 1].begin == std::size_t(gold.answer_start));
    for (const auto& tok : p.tokens) CHECK(vocab.id(tok) != text::kUnk);
    // every answer word belongs to the named key's value family
    const std::size_t key_index = std::stoul(key.substr(1));
    for (const auto& v : text::tokenize(gold.text).tokens) CHECK(std::stoul(v.substr(1)) / t.values_per_key == key_index);
  }
}

TEST_CASE("training is deterministic and matches the unsplit model at k = 0") {
  TrainOptions o;
  o.train_examples = 48;
  o.eval_examples = 16;
  o.batch = 8;
  const auto a = train_toy(tiny_model(0), tiny_task(), o);
  const auto b = train_toy(tiny_model(0), tiny_task(), o);
  CHECK(a.loss_history == b.loss_history);
  CHECK(a.weights.checksum() == b.weights.checksum());
  o.mode = ForwardMode::kUnsplit;
  const auto u = train_toy(tiny_model(0), tiny_task(), o);
  CHECK(u.loss_history == a.loss_history);
  CHECK(u.metrics.em == a.metrics.em);
}

TEST_CASE("loss decreases over the first 50 steps for every k below l") {
  ModelConfig post;
  post.layers = 6;
  post.d_model = 64;
  post.n_heads = 4;
  post.d_ff = 128;
  const SyntheticTask task;
  TrainOptions o;
  o.batch = 16;
  o.epochs = 1;
  o.train_examples = 50 * o.batch;
  o.eval_examples = 1;
  for (ModelConfig c : {post, toy_model_config()}) {
    for (std::size_t k = 0; k < c.layers; ++k) {
      c.non_interaction_blocks = k;
      const auto r = train_toy(c, task, o);
      REQUIRE(r.loss_history.size() == 50);
      double smoothed = r.loss_history[0];
      for (std::size_t s = 1; s < 50; ++s) smoothed = 0.9 * smoothed + 0.1 * r.loss_history[s];
      INFO("k=" << k << " pre_norm=" << c.pre_norm);
      CHECK(smoothed < r.loss_history[0]);
    }
  }
}

TEST_CASE("k sweep emits one row per k") {
  TrainOptions o;
  o.train_examples = 16;
  o.eval_examples = 8;
  o.batch = 8;
  std::size_t seen = 0;
  const auto rows = k_sweep(tiny_model(0), tiny_task(), o, [&](const SweepRow&) { ++seen; });
  REQUIRE(rows.size() == 3);
  CHECK(seen == 3);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    CHECK(rows[k].k == k);
    CHECK(rows[k].em >= 0.0);
    CHECK(rows[k].em <= rows[k].f1 + 1e-9);
  }
  std::ostringstream out;
  write_sweep_tsv(out, rows);
  CHECK(out.str().rfind("k\tem\tf1\n", 0) == 0);
}
