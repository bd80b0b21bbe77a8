// SPDX-License-Identifier: Apache-2.0
//
// Python bindings: model config and weights, the reader, BM25 index, paragraph
// cache, end-to-end ask/evaluate, metrics, cost model and toy training.
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dil/bench.hpp"
#include "dil/cache.hpp"
#include "dil/error.hpp"
#include "dil/pipeline.hpp"
#include "dil/synthetic.hpp"
#include "dil/train.hpp"

namespace py = pybind11;

namespace {

struct Index {
  dil::ParagraphStore store;
  dil::InvertedIndex index;
};

// Owns everything OdqaSystem borrows.
class System {
 public:
  System(std::shared_ptr<const Index> index, dil::EncoderWeights weights, dil::text::Vocab vocab,
         std::optional<std::string> cache_path)
      : index_(std::move(index)), weights_(std::move(weights)), vocab_(std::move(vocab)) {
    if (cache_path) cache_ = dil::ParagraphCache::load(*cache_path);
    system_ = std::make_unique<dil::OdqaSystem>(index_->store, index_->index, weights_, vocab_,
                                                cache_ ? &*cache_ : nullptr);
  }

  [[nodiscard]] const dil::OdqaSystem& get() const { return *system_; }
  [[nodiscard]] const Index& index() const { return *index_; }

 private:
  std::shared_ptr<const Index> index_;
  dil::EncoderWeights weights_;
  dil::text::Vocab vocab_;
  std::optional<dil::ParagraphCache> cache_;
  std::unique_ptr<dil::OdqaSystem> system_;
};

py::dict span_dict(const dil::SpanPrediction& s) {
  py::dict d;
  d["answer"] = s.answer;
  d["start"] = s.start;
  d["end"] = s.end;
  d["score"] = s.reader_score;
  d["window"] = s.window;
  return d;
}

py::dict answer_dict(const dil::OdqaAnswer& a) {
  py::dict d;
  d["has_answer"] = a.has_answer;
  d["answer"] = a.answer;
  d["paragraph"] = a.paragraph;
  d["reader_score"] = a.reader_score;
  d["bm25_score"] = a.bm25_score;
  d["score"] = a.fused_score;
  return d;
}

py::dict report_dict(const dil::EvalReport& r) {
  py::dict d;
  d["em"] = r.em;
  d["f1"] = r.f1;
  d["recall"] = r.recall;
  d["questions"] = r.questions;
  return d;
}

dil::text::QaDataset dataset_from(const py::list& items) {
  dil::text::QaDataset out;
  for (const auto& item : items) {
    const auto d = item.cast<py::dict>();
    dil::text::QaExample ex;
    ex.id = d["id"].cast<std::string>();
    ex.question = d["question"].cast<std::string>();
    if (d.contains("context")) ex.context = d["context"].cast<std::string>();
    for (const auto& a : d["answers"]) ex.answers.push_back({a.cast<std::string>(), -1});
    out.push_back(std::move(ex));
  }
  return out;
}

py::list dataset_to(const dil::text::QaDataset& data) {
  py::list out;
  for (const auto& ex : data) {
    py::dict d;
    d["id"] = ex.id;
    d["question"] = ex.question;
    d["context"] = ex.context;
    py::list answers;
    for (const auto& a : ex.answers) answers.append(a.text);
    d["answers"] = answers;
    out.append(d);
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Delayed-interaction reader and BM25 open-domain QA";

  py::register_exception<dil::ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<dil::FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<dil::StaleCacheError>(m, "StaleCacheError", PyExc_RuntimeError);
  py::register_exception<dil::NotFoundError>(m, "NotFoundError", PyExc_KeyError);

  py::class_<dil::ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("layers", &dil::ModelConfig::layers)
      .def_readwrite("k", &dil::ModelConfig::non_interaction_blocks)
      .def_readwrite("d_model", &dil::ModelConfig::d_model)
      .def_readwrite("n_heads", &dil::ModelConfig::n_heads)
      .def_readwrite("d_ff", &dil::ModelConfig::d_ff)
      .def_readwrite("vocab_size", &dil::ModelConfig::vocab_size)
      .def_readwrite("q_max", &dil::ModelConfig::q_max)
      .def_readwrite("p_max", &dil::ModelConfig::p_max)
      .def_readwrite("share_blocks", &dil::ModelConfig::share_blocks)
      .def_readwrite("pre_norm", &dil::ModelConfig::pre_norm)
      .def_readwrite("init_std", &dil::ModelConfig::init_std)
      .def_readwrite("embedding_init_std", &dil::ModelConfig::embedding_init_std)
      .def_readwrite("seed", &dil::ModelConfig::seed)
      .def("validate", &dil::ModelConfig::validate)
      .def("to_json", [](const dil::ModelConfig& c) { return dil::config_to_json(c); })
      .def_static("from_json", &dil::config_from_json)
      .def(py::self == py::self)
      .def("__repr__", [](const dil::ModelConfig& c) { return "ModelConfig(" + dil::config_to_json(c) + ")"; });

  m.def("toy_model_config", &dil::toy_model_config, py::arg("k") = 0);

  py::class_<dil::EncoderWeights>(m, "Weights")
      .def_readonly("config", &dil::EncoderWeights::config)
      .def("with_k",
           [](const dil::EncoderWeights& w, std::size_t k) {
             dil::EncoderWeights out = w;
             out.config.non_interaction_blocks = k;
             out.config.validate();
             return out;
           },
           "Same parameters, different interaction split.")
      .def_property_readonly("parameter_count", &dil::EncoderWeights::parameter_count)
      .def("checksum", &dil::EncoderWeights::checksum)
      .def("save", [](const dil::EncoderWeights& w, const std::string& path) { dil::save_weights(w, path); });
  m.def("init_weights", &dil::init_weights);
  m.def("load_weights", &dil::load_weights);

  py::class_<dil::text::Vocab>(m, "Vocab")
      .def(py::init<const std::vector<std::string>&>())
      .def("__len__", &dil::text::Vocab::size)
      .def("id", [](const dil::text::Vocab& v, const std::string& t) { return v.id(t); })
      .def("save", &dil::text::Vocab::save)
      .def_static("load", &dil::text::Vocab::load);

  m.def("normalize_answer", [](const std::string& s) { return dil::text::normalize_answer(s); });
  m.def("em_f1", [](const std::string& pred, const std::vector<std::string>& golds) {
    return dil::compute_em_f1(pred, golds);
  });

  m.def(
      "read",
      [](const std::string& q, const std::string& p, const dil::EncoderWeights& w, const dil::text::Vocab& v) {
        return span_dict(dil::read(q, p, w, v));
      },
      py::arg("question"), py::arg("paragraph"), py::arg("weights"), py::arg("vocab"));
  m.def(
      "read_baseline",
      [](const std::string& q, const std::string& p, const dil::EncoderWeights& w, const dil::text::Vocab& v) {
        return span_dict(dil::read_baseline(q, p, w, v));
      },
      py::arg("question"), py::arg("paragraph"), py::arg("weights"), py::arg("vocab"));

  py::class_<Index, std::shared_ptr<Index>>(m, "Index")
      .def_static(
          "build",
          [](const std::vector<std::pair<std::string, std::string>>& docs, const std::string& strategy) {
            auto ix = std::make_shared<Index>();
            ix->store.strategy = dil::split_strategy_from_string(strategy);
            for (const auto& [id, text] : docs) ix->store.add_document(id, text);
            ix->index = dil::build_index(ix->store);
            return ix;
          },
          py::arg("documents"), py::arg("strategy") = "window")
      .def_static("load",
                  [](const std::string& store_path, const std::string& index_path) {
                    auto ix = std::make_shared<Index>();
                    ix->store = dil::ParagraphStore::load(store_path);
                    ix->index = dil::InvertedIndex::load(index_path);
                    return ix;
                  })
      .def("save",
           [](const Index& ix, const std::string& store_path, const std::string& index_path) {
             ix.store.save(store_path);
             ix.index.save(index_path);
           })
      .def("__len__", [](const Index& ix) { return ix.store.size(); })
      .def("paragraph", [](const Index& ix, std::uint32_t id) {
        if (id >= ix.store.size()) throw py::index_error("paragraph id out of range");
        const auto& p = ix.store.paragraphs[id];
        return std::make_pair(p.doc_id, p.text);
      })
      .def(
          "search",
          [](const Index& ix, const std::string& q, std::size_t p) {
            std::vector<std::pair<std::uint32_t, double>> out;
            for (const auto& r : dil::search(q, ix.index, p)) out.emplace_back(r.paragraph, r.score);
            return out;
          },
          py::arg("question"), py::arg("p") = dil::kDefaultTopP);

  m.def(
      "precompute",
      [](const Index& ix, const dil::EncoderWeights& w, const dil::text::Vocab& v, const std::string& path,
         const std::string& precision, std::size_t workers) {
        const auto prec = precision == "fp64" ? dil::CachePrecision::kFloat64 : dil::CachePrecision::kFloat32;
        if (precision != "fp32" && precision != "fp64") throw dil::ContractError("precision must be fp32 or fp64");
        dil::PrecomputeReport r;
        {
          py::gil_scoped_release release;
          r = dil::precompute(ix.store, w, v, path, prec, workers);
        }
        py::dict d;
        d["paragraphs"] = r.paragraphs;
        d["windows"] = r.windows;
        d["macs"] = r.macs;
        d["fingerprint"] = r.fingerprint;
        return d;
      },
      py::arg("index"), py::arg("weights"), py::arg("vocab"), py::arg("path"), py::arg("precision") = "fp32",
      py::arg("workers") = 1);

  py::class_<System>(m, "System")
      .def(py::init<std::shared_ptr<const Index>, dil::EncoderWeights, dil::text::Vocab, std::optional<std::string>>(),
           py::arg("index"), py::arg("weights"), py::arg("vocab"), py::arg("cache") = py::none())
      .def(
          "ask",
          [](const System& s, const std::string& q, std::size_t p, double mu, const std::string& policy) {
            const auto pol = policy == "reader_only" ? dil::AggregationPolicy::reader_only()
                                                     : dil::AggregationPolicy::fused(mu);
            if (policy != "fused" && policy != "reader_only") throw dil::ContractError("unknown policy " + policy);
            return answer_dict(s.get().ask(q, p, pol));
          },
          py::arg("question"), py::arg("p") = dil::kDefaultTopP, py::arg("mu") = dil::kDefaultMu,
          py::arg("policy") = "fused")
      .def(
          "evaluate",
          [](const System& s, const py::list& questions, std::size_t p, double mu, std::size_t workers) {
            const auto data = dataset_from(questions);
            dil::EvalResult r;
            {
              py::gil_scoped_release release;
              r = dil::evaluate(data, s.get(), p, mu, workers);
            }
            py::dict d;
            d["reader_only"] = report_dict(r.reader_only);
            d["fused"] = report_dict(r.fused);
            return d;
          },
          py::arg("questions"), py::arg("p") = dil::kDefaultTopP, py::arg("mu") = dil::kDefaultMu,
          py::arg("workers") = 1);

  m.def(
      "estimate",
      [](const dil::ModelConfig& c, std::uint64_t q, std::uint64_t p, std::uint64_t n_q, std::uint64_t n_p) {
        const auto e = dil::estimate(c, q, p, n_q, n_p);
        py::dict d;
        d["ni_q"] = e.ni_q;
        d["ni_p"] = e.ni_p;
        d["i_qp"] = e.i_qp;
        d["baseline"] = e.baseline;
        d["head"] = e.head;
        d["speedup"] = e.speedup();
        d["interactive_speedup"] = e.interactive_speedup();
        return d;
      },
      py::arg("config"), py::arg("q"), py::arg("p"), py::arg("n_q"), py::arg("n_p"));

  m.def(
      "synthetic_corpus",
      [](std::size_t documents, std::size_t questions, std::uint64_t seed) {
        dil::SyntheticTask task;
        task.seed = seed;
        const auto c = dil::make_synthetic_corpus(task, documents, questions, 1);
        return py::make_tuple(c.documents, dataset_to(c.questions), task.vocabulary());
      },
      py::arg("documents"), py::arg("questions"), py::arg("seed") = 0,
      "Documents, questions (dicts with id/question/context/answers) and the task vocabulary.");

  m.def(
      "train_toy",
      [](std::size_t k, std::size_t examples, std::size_t epochs, std::uint64_t seed) {
        dil::SyntheticTask task;
        task.seed = seed;
        dil::TrainOptions o;
        o.train_examples = examples;
        o.epochs = epochs;
        o.seed = seed;
        dil::ModelConfig c = dil::toy_model_config(k);
        c.seed = seed;
        dil::TrainResult r;
        {
          py::gil_scoped_release release;
          r = dil::train_toy(c, task, o);
        }
        return py::make_tuple(std::move(r.weights), r.metrics.em, r.metrics.f1);
      },
      py::arg("k") = 0, py::arg("examples") = 20000, py::arg("epochs") = 2, py::arg("seed") = 0,
      "Trains the toy reader on the synthetic task; returns (weights, em, f1).");
}
