#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>
#include <vector>

#include "prism/app.hpp"
#include "prism/errors.hpp"
#include "prism/labeling.hpp"
#include "prism/prm.hpp"
#include "prism/search.hpp"
#include "prism/tasks.hpp"

namespace py = pybind11;
using namespace prism;

// Structured values cross the boundary as JSON text; the Python package
// decodes them.
namespace {

nlohmann::ordered_json problem_json(const Problem& p) {
  nlohmann::ordered_json j;
  j["problem_id"] = p.problem_id;
  j["statement"] = p.statement;
  j["answer"] = p.answer;
  j["family"] = family_name(p.family);
  j["depth"] = p.params.depth;
  j["distractors"] = p.params.distractors;
  j["seed"] = p.params.seed;
  return j;
}

std::string generate_problem(const std::string& family, int depth, int distractors,
                             std::uint64_t seed) {
  return problem_json(tasks::generate(parse_family(family), {depth, distractors, 0}, seed)).dump();
}

std::string search(const std::string& family, int depth, int distractors, std::uint64_t problem_seed,
                   const std::string& config_json, const std::string& prm, double noise) {
  const Problem p = tasks::generate(parse_family(family), {depth, distractors, 0}, problem_seed);
  SearchConfig cfg = SearchConfig::from_json(nlohmann::json::parse(config_json));
  tasks::SyntheticPolicy policy;
  tasks::OraclePrm oracle;
  tasks::NoisyOraclePrm noisy(noise, cfg.seed);
  PrmBackend* backend = &noisy;
  if (prm == "oracle") {
    backend = &oracle;
  } else if (prm != "noisy") {
    throw DomainError("prm must be 'oracle' or 'noisy'");
  }
  SearchResult r;
  {
    py::gil_scoped_release release;
    r = run_search(p, cfg, policy, *backend);
  }
  mark_correctness(r.tree, p.answer);
  nlohmann::ordered_json j;
  j["problem"] = problem_json(p);
  j["answer"] = r.answer ? nlohmann::ordered_json(*r.answer) : nlohmann::ordered_json();
  j["success"] = r.answer.has_value() && *r.answer == p.answer;
  j["trajectories"] = r.trajectories;
  j["depth"] = r.depth;
  j["tree"] = r.tree.to_json();
  j["memory"] = r.memory_dump;
  auto& errs = j["errors"] = nlohmann::ordered_json::array();
  for (const auto& e : r.errors) errs.push_back({{"rollout", e.rollout}, {"message", e.message}});
  return j.dump();
}

std::string label(const std::string& tree_json) {
  const SearchTree t = SearchTree::from_json(nlohmann::json::parse(tree_json));
  const auto labels = label_tree(t);
  nlohmann::ordered_json out;
  auto& steps = out["steps"] = nlohmann::ordered_json::array();
  for (const auto& l : labels) {
    nlohmann::ordered_json s;
    s["node_id"] = l.node_id;
    s["path"] = l.path_prefix;
    s["value"] = l.value;
    s["weight"] = l.weight;
    s["distance"] = l.distance ? nlohmann::ordered_json(*l.distance) : nlohmann::ordered_json();
    s["error"] = l.error_flag;
    s["class"] = class_name(l.cls);
    steps.push_back(std::move(s));
  }
  auto& pairs = out["pairs"] = nlohmann::ordered_json::array();
  for (const auto& p : extract_preference_pairs(labels)) pairs.push_back(to_json(p));
  return out.dump();
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "prism");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  py::gil_scoped_release release;
  return app::run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Process-reward-guided MCTS with heuristics and fallacies memory";

  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<SchemaError>(m, "SchemaError", PyExc_ValueError);
  py::register_exception<BackendError>(m, "BackendError", PyExc_RuntimeError);

  m.def("version", &app::version);
  m.def("class_of_value", [](double v) { return std::string(class_name(class_of_value(v))); });
  m.def("value_of_class", [](const std::string& name) {
    auto c = class_from_name(name);
    if (!c) throw DomainError("unknown class: " + name);
    return value_of_class(*c);
  });
  m.def("step_weight", &step_weight, py::arg("v_prev"), py::arg("m"), py::arg("r"));
  m.def("next_value", &next_value, py::arg("v_prev"), py::arg("weight"));
  m.def(
      "uct_score",
      [](double value, int visits, int parent_visits, double epsilon, bool times_two) {
        SearchNode n;
        n.value = value;
        n.visit_count = visits;
        return uct_score(n, parent_visits, epsilon, times_two);
      },
      py::arg("value"), py::arg("visits"), py::arg("parent_visits"), py::arg("epsilon") = 1.0,
      py::arg("times_two") = false);
  m.def("generate_problem_json", &generate_problem);
  m.def("search_json", &search);
  m.def("label_json", &label);
  m.def("run_cli", &cli);
}
