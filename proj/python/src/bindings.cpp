#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "qcfuse/bench.hpp"
#include "qcfuse/config.hpp"
#include "qcfuse/fusion.hpp"
#include "qcfuse/json_io.hpp"
#include "qcfuse/kv_store.hpp"
#include "qcfuse/pipeline.hpp"

namespace py = pybind11;
using namespace qcfuse;

namespace {

// Structured results cross the boundary as JSON text; the Python side decodes them.
class PyStore {
 public:
  PyStore(const std::string& dir, const std::string& config_text)
      : settings_(parse_settings(config_text)),
        store_(std::make_shared<const ModelWeights>(init_weights(settings_.model)), dir, settings_.store) {}

  std::string precompute(const std::string& text, const std::string& name) {
    py::gil_scoped_release release;
    const auto s = precompute_text(store_, name, text, settings_.chunk_tokens);
    return Json{{"chunks", s.chunks},
                {"new_chunks", s.new_chunks},
                {"cache_hits", s.cache_hits},
                {"chunk_ids", s.chunk_ids},
                {"warnings", s.warnings}}
        .dump();
  }

  std::string query(const std::string& text, const std::string& policy, double ratio, int top_k, bool with_oracle) {
    const Policy p = policy_from_string(policy);
    py::gil_scoped_release release;
    return to_json(cmd_query(store_, text, p, ratio, top_k, settings_.fusion, with_oracle)).dump();
  }

  std::string run_on(const std::vector<std::string>& chunk_ids, const std::string& text, const std::string& policy,
                     double ratio, bool with_oracle) {
    const Policy p = policy_from_string(policy);
    py::gil_scoped_release release;
    return to_json(run(p, ratio, chunk_ids, text, store_, settings_.fusion, with_oracle)).dump();
  }

  std::string bench_suite(uint64_t seed, int n_cases, const std::vector<std::string>& policies,
                          const std::vector<double>& ratios, int64_t timestamp) {
    std::vector<Policy> ps;
    for (const auto& name : policies) ps.push_back(policy_from_string(name));
    py::gil_scoped_release release;
    const auto suite = generate_cases(seed, n_cases);
    precompute_suite(store_, suite, settings_.chunk_tokens);
    return to_json(cmd_bench(store_, suite.cases, ps, ratios, settings_, timestamp)).dump();
  }

  std::vector<std::string> chunk_ids() const { return store_.chunk_ids(); }
  std::string counters() const { return to_json(store_.counters()).dump(); }
  uint64_t store_bytes() const { return store_.store_bytes(); }
  std::string fingerprint() const { return store_.fingerprint(); }
  std::string config() const { return settings_.render(); }

 private:
  Settings settings_;
  ChunkStore store_;
};

}  // namespace

PYBIND11_MODULE(_qcfuse, m) {
  m.doc() = "Query-centric KV cache fusion on a toy decoder";

  py::register_exception<NotFound>(m, "NotFound", PyExc_KeyError);
  py::register_exception<FingerprintMismatch>(m, "FingerprintMismatch", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);

  m.def("chunk_hash", [](const Tokens& t) { return chunk_hash(t); });
  m.def("tokenize", [](const std::string& s) { return tokenize_body(s); });
  m.def("detokenize", [](const Tokens& t) { return py::bytes(detokenize(t)); });
  m.def("policies", [] {
    std::vector<std::string> out;
    for (Policy p : kAllPolicies) out.emplace_back(to_string(p));
    return out;
  });
  m.def(
      "schedule",
      [](const std::vector<double>& fetch, const std::vector<double>& compute, double pre_phase, bool pipelined) {
        const auto s = pipelined ? schedule_pipelined(fetch, compute, pre_phase)
                                 : schedule_sequential(fetch, compute, pre_phase);
        return to_json(s).dump();
      },
      py::arg("fetch"), py::arg("compute"), py::arg("pre_phase") = 0.0, py::arg("pipelined") = true);

  py::class_<PyStore>(m, "_Store")
      .def(py::init<const std::string&, const std::string&>(), py::arg("dir") = "", py::arg("config") = "")
      .def("precompute", &PyStore::precompute, py::arg("text"), py::arg("name") = "")
      .def("query", &PyStore::query)
      .def("run", &PyStore::run_on)
      .def("bench_suite", &PyStore::bench_suite)
      .def("chunk_ids", &PyStore::chunk_ids)
      .def("counters", &PyStore::counters)
      .def("store_bytes", &PyStore::store_bytes)
      .def_property_readonly("fingerprint", &PyStore::fingerprint)
      .def_property_readonly("config", &PyStore::config);
}
