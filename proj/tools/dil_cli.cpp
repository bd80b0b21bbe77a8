// SPDX-License-Identifier: Apache-2.0
//
// dil: index a corpus, precompute paragraph states, answer questions,
// evaluate, benchmark, and train the toy reader.
//
// Exit codes: 0 success, 1 internal error, 2 usage or input error.
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dil/bench.hpp"
#include "dil/cache.hpp"
#include "dil/error.hpp"
#include "dil/pipeline.hpp"
#include "dil/synthetic.hpp"
#include "dil/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

#ifndef DIL_VERSION
#define DIL_VERSION "0.0.0"
#endif

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string index;
  std::string cache;
  std::string weights;
  std::string vocab;
  std::string out;
  std::size_t p = dil::kDefaultTopP;
  double mu = dil::kDefaultMu;
  std::string policy = "fused";
  std::string strategy = "window";
  std::optional<std::size_t> k;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string("missing --") + what);
  if (!fs::exists(path)) throw UsageError(std::string(what) + " not found: " + path);
}

/// One JSON line per run next to the output: resolved config plus version.
void write_manifest(const std::string& output, const std::string& command, json config,
                    const std::vector<std::string>& files) {
  const fs::path out(output);
  const fs::path manifest = fs::is_directory(out) ? out / "manifest.jsonl" : fs::path(output + ".manifest.jsonl");
  json line = {{"command", command}, {"version", DIL_VERSION}, {"config", std::move(config)}, {"outputs", files}};
  std::ofstream f(manifest);
  if (!f) throw std::runtime_error("cannot write " + manifest.string());
  f << line.dump() << '\n';
}

std::string index_store_path(const std::string& dir) { return (fs::path(dir) / "store.bin").string(); }
std::string index_postings_path(const std::string& dir) { return (fs::path(dir) / "index.bin").string(); }

json common_json(const Common& c) {
  return {{"index", c.index},     {"cache", c.cache},       {"weights", c.weights}, {"vocab", c.vocab},
          {"out", c.out},         {"p", c.p},               {"mu", c.mu},           {"policy", c.policy},
          {"strategy", c.strategy}, {"k", c.k ? json(*c.k) : json()}, {"seed", c.seed}, {"workers", c.workers}};
}

// Documents from a directory of text files (sorted by name) or a JSON-lines
// dump with "id" and "text" fields.
std::vector<std::pair<std::string, std::string>> read_corpus(const std::string& path) {
  std::vector<std::pair<std::string, std::string>> docs;
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(path))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      std::ifstream in(f, std::ios::binary);
      if (!in) throw UsageError("unreadable corpus file: " + f.string());
      std::ostringstream s;
      s << in.rdbuf();
      docs.emplace_back(f.filename().string(), s.str());
    }
  } else {
    std::ifstream in(path);
    if (!in) throw UsageError("unreadable corpus: " + path);
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        const json j = json::parse(line);
        docs.emplace_back(j.value("id", std::to_string(n)), j.at("text").get<std::string>());
      } catch (const json::exception& e) {
        throw UsageError(path + ":" + std::to_string(n) + ": " + e.what());
      }
    }
  }
  if (docs.empty()) throw UsageError("empty corpus: " + path);
  return docs;
}

struct Loaded {
  dil::ParagraphStore store;
  dil::InvertedIndex index;
  dil::EncoderWeights weights;
  dil::text::Vocab vocab;
  std::optional<dil::ParagraphCache> cache;
};

Loaded load_system(const Common& c, bool want_cache) {
  require_file(c.index, "index");
  require_file(index_store_path(c.index), "index");
  require_file(c.weights, "weights");
  require_file(c.vocab, "vocab");
  Loaded l;
  l.store = dil::ParagraphStore::load(index_store_path(c.index));
  l.index = dil::InvertedIndex::load(index_postings_path(c.index));
  l.weights = dil::load_weights(c.weights);
  if (c.k) {
    l.weights.config.non_interaction_blocks = *c.k;
    l.weights.config.validate();
  }
  l.vocab = dil::text::Vocab::load(c.vocab);
  if (want_cache && !c.cache.empty()) {
    require_file(c.cache, "cache");
    l.cache = dil::ParagraphCache::load(c.cache);
  }
  return l;
}

dil::AggregationPolicy policy_of(const Common& c) {
  if (c.policy == "reader_only") return dil::AggregationPolicy::reader_only();
  if (c.policy == "fused") return dil::AggregationPolicy::fused(c.mu);
  throw UsageError("--policy must be fused or reader_only");
}

void add_model_flags(CLI::App* cmd, Common& c) {
  cmd->add_option("--index", c.index, "index directory");
  cmd->add_option("--weights", c.weights, "weights file");
  cmd->add_option("--vocab", c.vocab, "vocabulary file");
  cmd->add_option("--k", c.k, "override the number of non-interaction blocks");
}

int cmd_index(const std::string& corpus, const Common& c) {
  if (c.out.empty()) throw UsageError("missing --out");
  const auto docs = read_corpus(corpus);
  dil::ParagraphStore store;
  store.strategy = dil::split_strategy_from_string(c.strategy);
  for (const auto& [id, text] : docs) store.add_document(id, text);
  if (store.size() == 0) throw UsageError("corpus yields no paragraphs: " + corpus);
  fs::create_directories(c.out);
  store.save(index_store_path(c.out));
  dil::build_index(store).save(index_postings_path(c.out));
  std::cout << "documents\t" << docs.size() << "\nparagraphs\t" << store.size() << '\n';
  json cfg = common_json(c);
  cfg["corpus"] = corpus;
  write_manifest(c.out, "index", cfg, {index_store_path(c.out), index_postings_path(c.out)});
  return 0;
}

int cmd_precompute(const Common& c, const std::string& precision) {
  if (c.out.empty()) throw UsageError("missing --out");
  const Loaded l = load_system(c, false);
  dil::CachePrecision prec;
  if (precision == "fp32") {
    prec = dil::CachePrecision::kFloat32;
  } else if (precision == "fp64") {
    prec = dil::CachePrecision::kFloat64;
  } else {
    throw UsageError("--precision must be fp32 or fp64");
  }
  const auto r = dil::precompute(l.store, l.weights, l.vocab, c.out, prec, c.workers);
  std::cout << "paragraphs\t" << r.paragraphs << "\nwindows\t" << r.windows << "\nmacs\t" << r.macs
            << "\nfingerprint\t" << std::hex << r.fingerprint << std::dec << '\n';
  json cfg = common_json(c);
  cfg["precision"] = precision;
  write_manifest(c.out, "precompute", cfg, {c.out});
  return 0;
}

int cmd_ask(const Common& c, const std::string& question) {
  const Loaded l = load_system(c, true);
  const dil::OdqaSystem sys(l.store, l.index, l.weights, l.vocab, l.cache ? &*l.cache : nullptr);
  const auto a = sys.ask(question, c.p, policy_of(c));
  if (!a.has_answer) {
    std::cout << "no answer\n";
    return 0;
  }
  std::cout << "answer\t" << a.answer << "\nparagraph\t" << a.paragraph << "\ndoc\t"
            << l.store.paragraphs[a.paragraph].doc_id << "\ns_r\t" << a.reader_score << "\ns_bm25\t" << a.bm25_score
            << "\nscore\t" << a.fused_score << '\n';
  return 0;
}

int cmd_eval(const Common& c, const std::string& data) {
  require_file(data, "data");
  const Loaded l = load_system(c, true);
  const auto dataset = dil::text::load_squad_json(data);
  const dil::OdqaSystem sys(l.store, l.index, l.weights, l.vocab, l.cache ? &*l.cache : nullptr);
  const auto r = dil::evaluate(dataset, sys, c.p, c.mu, c.workers);
  std::printf("questions %zu  p %zu  mu %.2f\n", r.fused.questions, c.p, c.mu);
  std::printf("reader only  EM %.2f  F1 %.2f\nfused        EM %.2f  F1 %.2f\nrecall       %.2f\n",
              r.reader_only.em, r.reader_only.f1, r.fused.em, r.fused.f1, r.fused.recall);
  if (!c.out.empty()) {
    std::ofstream f(c.out);
    if (!f) throw UsageError("cannot write " + c.out);
    dil::write_eval_tsv(f, r);
    json cfg = common_json(c);
    cfg["data"] = data;
    write_manifest(c.out, "eval", cfg, {c.out});
  }
  return 0;
}

struct BenchFlags {
  std::size_t layers = 12, d = 768, heads = 12, d_ff = 3072, q_max = 64, p_max = 448;
  std::uint64_t q = 100, p = 100, n_q = 16, n_p = 0;
  std::string mode = "all";
  bool tsv = false, normalize = false, estimate_only = false;
};

int cmd_bench(const Common& c, const BenchFlags& b) {
  dil::ModelConfig cfg;
  cfg.layers = b.layers;
  cfg.non_interaction_blocks = c.k.value_or(b.layers - 2);
  cfg.d_model = b.d;
  cfg.n_heads = b.heads;
  cfg.d_ff = b.d_ff;
  cfg.q_max = b.q_max;
  cfg.p_max = b.p_max;
  cfg.seed = c.seed;
  try {
    cfg.validate();
  } catch (const dil::ContractError& e) {
    throw UsageError(e.what());
  }
  if (b.n_q < 2 || b.n_q > cfg.q_max) throw UsageError("--n-q must lie in [2, q_max]");
  const std::uint64_t n_p = b.n_p ? b.n_p : cfg.p_max;
  if (n_p > cfg.p_max || n_p < 2) throw UsageError("--n-p must lie in [2, p_max]");
  const auto e = dil::estimate(cfg, b.q, b.p, b.n_q, n_p);
  std::ostringstream out;
  out << "estimate\tbaseline_macs " << e.baseline << "\tdil_macs " << (e.ni_q + e.ni_p + e.i_qp)
      << "\tspeedup " << e.speedup() << "\tinteractive_speedup " << e.interactive_speedup() << '\n';
  if (!b.estimate_only) {
    dil::BenchOptions o;
    o.q = b.q;
    o.p = b.p;
    o.n_q = b.n_q;
    o.n_p = n_p;
    o.workers = c.workers;
    o.seed = c.seed;
    std::vector<dil::BenchMode> modes;
    if (b.mode == "all") {
      modes = {dil::BenchMode::kBaseline, dil::BenchMode::kDil, dil::BenchMode::kDilWithPrebuiltCache};
    } else {
      modes = {dil::BenchMode::kBaseline, dil::bench_mode_from_string(b.mode)};
    }
    std::optional<dil::BenchReport> base;
    for (auto m : modes) {
      if (m == dil::BenchMode::kBaseline && base) continue;
      auto r = dil::run_benchmark(cfg, o, m);
      if (m == dil::BenchMode::kBaseline) {
        base = r;
      } else if (base) {
        dil::attach_baseline(r, *base);
      }
      if (m != dil::BenchMode::kBaseline || b.mode == "all" || b.mode == "baseline") dil::report(out, r, b.normalize, b.tsv);
      const bool macs_ok = m == dil::BenchMode::kBaseline
                               ? r.i_qp.macs == e.baseline
                               : r.ni_q.macs == e.ni_q && r.ni_p.macs == e.ni_p && r.i_qp.macs == e.i_qp;
      out << "mac_check\t" << dil::to_string(m) << '\t' << (macs_ok && r.head.macs == e.head ? "ok" : "MISMATCH")
          << '\n';
      if (!macs_ok) throw std::runtime_error("MAC counters disagree with the closed form");
    }
  }
  std::cout << out.str();
  if (!c.out.empty()) {
    std::ofstream f(c.out);
    if (!f) throw UsageError("cannot write " + c.out);
    f << out.str();
    json j = common_json(c);
    j["model"] = json::parse(dil::config_to_json(cfg));
    j["q"] = b.q, j["p_bench"] = b.p, j["n_q"] = b.n_q, j["n_p"] = n_p, j["mode"] = b.mode;
    write_manifest(c.out, "bench", j, {c.out});
  }
  return 0;
}

struct TrainFlags {
  std::size_t k = 0;
  std::size_t layers = 6;
  bool post_norm = false;
  std::optional<double> init_std, embedding_init_std;
  dil::TrainOptions options;
};

dil::ModelConfig train_config(const TrainFlags& t, std::uint64_t seed) {
  dil::ModelConfig cfg = dil::toy_model_config(t.k);
  cfg.layers = t.layers;
  if (t.post_norm) cfg.pre_norm = false;
  if (t.init_std) cfg.init_std = *t.init_std;
  if (t.embedding_init_std) cfg.embedding_init_std = *t.embedding_init_std;
  cfg.seed = seed;
  try {
    cfg.validate();
  } catch (const dil::ContractError& e) {
    throw UsageError(e.what());
  }
  return cfg;
}

json options_json(const dil::TrainOptions& o) {
  return {{"epochs", o.epochs}, {"batch", o.batch}, {"lr", o.lr}, {"train_examples", o.train_examples},
          {"eval_examples", o.eval_examples}};
}

void log_to_stderr(dil::TrainOptions& o) {
  if (o.log_every == 0) return;
  o.on_log = [](std::size_t step, double loss) { std::fprintf(stderr, "step %zu loss %.4f\n", step, loss); };
}

int cmd_train(const Common& c, TrainFlags t) {
  if (c.out.empty()) throw UsageError("missing --out");
  dil::SyntheticTask task;
  task.seed = c.seed;
  t.options.seed = c.seed;
  log_to_stderr(t.options);
  const dil::ModelConfig cfg = train_config(t, c.seed);
  const auto r = dil::train_toy(cfg, task, t.options);
  fs::create_directories(c.out);
  const std::string wpath = (fs::path(c.out) / "weights.bin").string();
  const std::string vpath = (fs::path(c.out) / "vocab.txt").string();
  const std::string mpath = (fs::path(c.out) / "metrics.json").string();
  dil::save_weights(r.weights, wpath);
  task.vocabulary().save(vpath);
  {
    std::ofstream f(mpath);
    f << json{{"em", r.metrics.em}, {"f1", r.metrics.f1}, {"chance_em", task.chance_em()},
              {"final_loss", r.loss_history.empty() ? 0.0 : r.loss_history.back()}}
             .dump(2)
      << '\n';
  }
  std::printf("EM %.2f  F1 %.2f  (chance %.1f)\n", r.metrics.em, r.metrics.f1, task.chance_em());
  json j = common_json(c);
  j["model"] = json::parse(dil::config_to_json(r.weights.config));
  j["train"] = options_json(t.options);
  write_manifest(c.out, "train", j, {wpath, vpath, mpath});
  return 0;
}

int cmd_ksweep(const Common& c, TrainFlags t) {
  if (c.out.empty()) throw UsageError("missing --out");
  dil::SyntheticTask task;
  task.seed = c.seed;
  t.options.seed = c.seed;
  log_to_stderr(t.options);
  const dil::ModelConfig cfg = train_config(t, c.seed);
  const auto rows = dil::k_sweep(cfg, task, t.options, [](const dil::SweepRow& r) {
    std::printf("k=%zu  EM %.2f  F1 %.2f\n", r.k, r.em, r.f1);
    std::fflush(stdout);
  });
  std::ofstream f(c.out);
  if (!f) throw UsageError("cannot write " + c.out);
  dil::write_sweep_tsv(f, rows);
  json j = common_json(c);
  j["model"] = json::parse(dil::config_to_json(cfg));
  j["train"] = options_json(t.options);
  j["chance_em"] = task.chance_em();
  write_manifest(c.out, "ksweep", j, {c.out});
  return 0;
}

// Synthetic retrieval corpus (JSON lines) plus SQuAD-format questions.
int cmd_synth(const Common& c, std::size_t docs, std::size_t questions) {
  if (c.out.empty()) throw UsageError("missing --out");
  dil::SyntheticTask task;
  task.seed = c.seed;
  const auto corpus = dil::make_synthetic_corpus(task, docs, questions, 1);
  fs::create_directories(c.out);
  const std::string cpath = (fs::path(c.out) / "corpus.jsonl").string();
  const std::string qpath = (fs::path(c.out) / "questions.json").string();
  {
    std::ofstream f(cpath);
    for (std::size_t d = 0; d < corpus.documents.size(); ++d)
      f << json{{"id", "doc" + std::to_string(d)}, {"text", corpus.documents[d]}}.dump() << '\n';
  }
  json paragraphs = json::array();
  for (const auto& ex : corpus.questions) {
    json answers = json::array();
    for (const auto& a : ex.answers) answers.push_back({{"text", a.text}, {"answer_start", a.answer_start}});
    paragraphs.push_back(
        {{"context", ex.context}, {"qas", json::array({{{"id", ex.id}, {"question", ex.question}, {"answers", answers}}})}});
  }
  std::ofstream(qpath) << json{{"version", "1.1"}, {"data", json::array({{{"title", "synthetic"}, {"paragraphs", paragraphs}}})}}.dump()
                       << '\n';
  std::cout << "documents\t" << corpus.documents.size() << "\nquestions\t" << corpus.questions.size() << '\n';
  json j = common_json(c);
  j["docs"] = docs, j["questions"] = questions;
  write_manifest(c.out, "synth", j, {cpath, qpath});
  return 0;
}

void add_train_flags(CLI::App* cmd, TrainFlags& t) {
  cmd->add_option("--layers", t.layers, "blocks l")->check(CLI::PositiveNumber);
  cmd->add_flag("--post-norm", t.post_norm, "post-layer-norm blocks instead of pre-norm");
  cmd->add_option("--init-std", t.init_std, "block and head init std");
  cmd->add_option("--embedding-init-std", t.embedding_init_std, "embedding table init std");
  cmd->add_option("--epochs", t.options.epochs);
  cmd->add_option("--batch", t.options.batch)->check(CLI::PositiveNumber);
  cmd->add_option("--lr", t.options.lr);
  cmd->add_option("--examples", t.options.train_examples, "training examples");
  cmd->add_option("--eval-examples", t.options.eval_examples);
  cmd->add_option("--log-every", t.options.log_every, "print smoothed loss every N steps");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Delayed-interaction reader and BM25 open-domain QA"};
  app.set_version_flag("--version", DIL_VERSION);
  app.require_subcommand(1);
  Common c;
  const auto common_flags = [&c](CLI::App* cmd) {
    cmd->add_option("--seed", c.seed, "seed for every random choice");
    cmd->add_option("--workers", c.workers, "worker threads")->check(CLI::PositiveNumber);
    cmd->add_option("--out", c.out, "output path");
  };

  std::string corpus;
  auto* index = app.add_subcommand("index", "split a corpus into paragraphs and build the BM25 index");
  index->add_option("--corpus", corpus, "directory of text files or JSON-lines dump")->required();
  index->add_option("--strategy", c.strategy, "window or newline")->check(CLI::IsMember({"window", "newline"}));
  common_flags(index);

  std::string precision = "fp32";
  auto* pre = app.add_subcommand("precompute", "encode every paragraph through the first k blocks");
  add_model_flags(pre, c);
  pre->add_option("--precision", precision, "fp32 or fp64");
  common_flags(pre);

  std::string question;
  auto* ask = app.add_subcommand("ask", "answer one question");
  add_model_flags(ask, c);
  ask->add_option("--cache", c.cache, "paragraph cache file");
  ask->add_option("--question", question)->required();
  ask->add_option("--p", c.p, "paragraphs to read")->check(CLI::PositiveNumber);
  ask->add_option("--mu", c.mu, "reader weight in the fused score")->check(CLI::Range(0.0, 1.0));
  ask->add_option("--policy", c.policy, "fused or reader_only")->check(CLI::IsMember({"fused", "reader_only"}));
  common_flags(ask);

  std::string data;
  auto* eval = app.add_subcommand("eval", "EM/F1/R over a SQuAD-format question file");
  add_model_flags(eval, c);
  eval->add_option("--cache", c.cache, "paragraph cache file");
  eval->add_option("--data", data, "SQuAD v1.1 JSON")->required();
  eval->add_option("--p", c.p)->check(CLI::PositiveNumber);
  eval->add_option("--mu", c.mu)->check(CLI::Range(0.0, 1.0));
  common_flags(eval);

  BenchFlags bf;
  auto* bench = app.add_subcommand("bench", "time and count MACs for baseline and delayed interaction");
  bench->add_option("--k", c.k, "non-interaction blocks (default l - 2)");
  bench->add_option("--layers", bf.layers)->check(CLI::PositiveNumber);
  bench->add_option("--d", bf.d)->check(CLI::PositiveNumber);
  bench->add_option("--heads", bf.heads)->check(CLI::PositiveNumber);
  bench->add_option("--d-ff", bf.d_ff)->check(CLI::PositiveNumber);
  bench->add_option("--q-max", bf.q_max)->check(CLI::PositiveNumber);
  bench->add_option("--p-max", bf.p_max)->check(CLI::PositiveNumber);
  bench->add_option("--questions", bf.q)->check(CLI::PositiveNumber);
  bench->add_option("--paragraphs", bf.p)->check(CLI::PositiveNumber);
  bench->add_option("--n-q", bf.n_q)->check(CLI::PositiveNumber);
  bench->add_option("--n-p", bf.n_p, "paragraph length (0 = p_max)");
  bench->add_option("--mode", bf.mode, "all, baseline, dil or dil_with_prebuilt_cache")
      ->check(CLI::IsMember({"all", "baseline", "dil", "dil_with_prebuilt_cache"}));
  bench->add_flag("--tsv", bf.tsv, "tab-separated report");
  bench->add_flag("--normalize", bf.normalize, "per block and input times");
  bench->add_flag("--estimate-only", bf.estimate_only, "closed-form MACs only");
  common_flags(bench);

  TrainFlags tf;
  auto* train = app.add_subcommand("train", "train the toy reader on the synthetic task");
  train->add_option("--k", tf.k, "non-interaction blocks");
  add_train_flags(train, tf);
  common_flags(train);

  TrainFlags sf;
  auto* sweep = app.add_subcommand("ksweep", "train once per k in [0, l] and report EM/F1");
  add_train_flags(sweep, sf);
  common_flags(sweep);

  std::size_t docs = 200, questions = 100;
  auto* synth = app.add_subcommand("synth", "write a synthetic corpus and question file");
  synth->add_option("--docs", docs)->check(CLI::PositiveNumber);
  synth->add_option("--questions", questions)->check(CLI::PositiveNumber);
  common_flags(synth);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*index) return cmd_index(corpus, c);
    if (*pre) return cmd_precompute(c, precision);
    if (*ask) return cmd_ask(c, question);
    if (*eval) return cmd_eval(c, data);
    if (*bench) return cmd_bench(c, bf);
    if (*train) return cmd_train(c, tf);
    if (*sweep) return cmd_ksweep(c, sf);
    if (*synth) return cmd_synth(c, docs, questions);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const dil::FormatError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return 2;
  } catch (const dil::StaleCacheError& e) {
    std::cerr << "stale cache: " << e.what() << '\n';
    return 2;
  } catch (const dil::NotFoundError& e) {
    std::cerr << "not found: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
