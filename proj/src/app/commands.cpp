#include "prism/app.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <ctime>
#include <functional>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "prism/errors.hpp"
#include "prism/hash.hpp"
#include "prism/labeling.hpp"
#include "prism/tasks.hpp"

#ifndef PRISM_VERSION
#define PRISM_VERSION "0.0.0"
#endif

namespace prism::app {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

const char* version() noexcept { return PRISM_VERSION; }

// ---------------------------------------------------------------------------
// Manifest

nlohmann::ordered_json SuiteSpec::to_json() const {
  ojson j;
  j["family"] = family_name(family);
  j["depth"] = params.depth;
  j["distractors"] = params.distractors;
  j["count"] = count;
  j["base_seed"] = base_seed;
  j["manifest_path"] = manifest_path;
  j["problems_path"] = problems_path;
  return j;
}

SuiteSpec SuiteSpec::from_json(const nlohmann::json& j, SuiteSpec s) {
  if (j.contains("family")) s.family = parse_family(j.at("family").get<std::string>());
  s.params.depth = j.value("depth", s.params.depth);
  s.params.distractors = j.value("distractors", s.params.distractors);
  s.count = j.value("count", s.count);
  s.base_seed = j.value("base_seed", s.base_seed);
  s.manifest_path = j.value("manifest_path", s.manifest_path);
  s.problems_path = j.value("problems_path", s.problems_path);
  return s;
}

const char* prm_name(PrmKind k) {
  switch (k) {
    case PrmKind::oracle: return "oracle";
    case PrmKind::noisy: return "noisy";
    case PrmKind::reference: return "reference";
    case PrmKind::remote: return "remote";
  }
  return "noisy";
}

PrmKind parse_prm(const std::string& name) {
  for (PrmKind k : {PrmKind::oracle, PrmKind::noisy, PrmKind::reference, PrmKind::remote}) {
    if (name == prm_name(k)) return k;
  }
  throw DomainError("unknown prm backend: " + name);
}

void RunManifest::validate() const {
  config.validate();
  if (backend != "synthetic" && backend != "remote") {
    throw DomainError("backend must be 'synthetic' or 'remote', got '" + backend + "'");
  }
  if (backend == "remote") {
    endpoint.validate();
    if (suite.problems_path.empty()) throw DomainError("remote backend needs a problems file");
  } else {
    if (prm == PrmKind::remote) throw DomainError("prm 'remote' requires backend 'remote'");
    if (suite.problems_path.empty() && suite.manifest_path.empty() && suite.count < 1) {
      throw DomainError("suite count must be >= 1");
    }
  }
  if (prm == PrmKind::reference && checkpoint.empty()) {
    throw DomainError("prm 'reference' needs a checkpoint");
  }
  if (!(noise >= 0.0 && noise <= 1.0)) throw DomainError("noise must lie in [0,1]");
  if (jobs < 1) throw DomainError("jobs must be >= 1");
}

nlohmann::ordered_json RunManifest::hashed_json() const {
  ojson j;
  j["version"] = version();
  j["search"] = config.to_json();
  j["backend"] = backend;
  j["prm"] = prm_name(prm);
  j["noise"] = noise;
  j["checkpoint"] = checkpoint;
  j["suite"] = suite.to_json();
  if (backend == "remote") j["endpoint"] = endpoint.to_json();
  return j;
}

nlohmann::ordered_json RunManifest::to_json() const {
  ojson j = hashed_json();
  j["jobs"] = jobs;
  j["output_dir"] = output_dir.string();
  j["timestamp"] = timestamp;
  return j;
}

std::string RunManifest::hash() const { return hex64(fnv1a64(hashed_json().dump())); }

RunManifest RunManifest::from_json(const nlohmann::json& j, RunManifest m) {
  if (!j.is_object()) throw DomainError("run config must be a JSON object");
  if (j.contains("search")) m.config = SearchConfig::from_json(j.at("search"), m.config);
  m.backend = j.value("backend", m.backend);
  if (j.contains("prm")) m.prm = parse_prm(j.at("prm").get<std::string>());
  m.noise = j.value("noise", m.noise);
  m.checkpoint = j.value("checkpoint", m.checkpoint);
  if (j.contains("suite")) m.suite = SuiteSpec::from_json(j.at("suite"), m.suite);
  if (j.contains("endpoint")) m.endpoint = llm::EndpointConfig::from_json(j.at("endpoint"));
  m.jobs = j.value("jobs", m.jobs);
  if (j.contains("output_dir")) m.output_dir = j.at("output_dir").get<std::string>();
  return m;
}

RunManifest RunManifest::from_json(const nlohmann::json& j) { return from_json(j, RunManifest{}); }

namespace {

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(path.string() + ": " + e.what(), 1);
  }
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string utc_now() {
  std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return ss.str();
}

// Problem ids become directory names.
std::string safe_dir_name(const std::string& id) {
  std::string out = id;
  for (char& c : out) {
    const bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.';
    if (!ok) c = '_';
  }
  if (out.empty() || out == "." || out == "..") out = "_" + out;
  return out;
}

std::string csv_header(const std::string& manifest_hash) {
  return "# manifest_hash: " + manifest_hash + "\n";
}

std::string fmt_double(double v) {
  std::ostringstream ss;
  ss << std::setprecision(17) << v;
  return ss.str();
}

}  // namespace

std::vector<Problem> load_problems(const RunManifest& m) {
  if (!m.suite.problems_path.empty()) {
    const auto j = read_json_file(m.suite.problems_path);
    if (!j.is_array()) throw SchemaError(m.suite.problems_path + ": expected a JSON array", 1);
    std::vector<Problem> out;
    for (const auto& o : j) {
      Problem p;
      p.problem_id = o.at("problem_id").get<std::string>();
      p.statement = o.at("statement").get<std::string>();
      p.answer = o.at("answer").get<std::string>();
      p.family = TaskFamily::external;
      out.push_back(std::move(p));
    }
    return out;
  }
  if (!m.suite.manifest_path.empty()) {
    return tasks::load_suite(read_json_file(m.suite.manifest_path)).problems;
  }
  return tasks::generate_suite(m.suite.family, m.suite.params, m.suite.count, m.suite.base_seed)
      .problems;
}

// ---------------------------------------------------------------------------
// Running a suite

namespace {

// Backends for one problem. Remote clients are shared across problems.
struct Backends {
  std::unique_ptr<PolicyBackend> policy;
  std::unique_ptr<PrmBackend> prm;
};

class BackendFactory {
 public:
  explicit BackendFactory(const RunManifest& m) : m_(m) {
    if (m.prm == PrmKind::reference) ref_params_ = refprm::load_checkpoint(m.checkpoint);
    if (m.backend == "remote") {
      templates_ = llm::PromptTemplates::load_default();
      client_ = std::make_shared<llm::ChatClient>(m.endpoint, nullptr);
    }
  }

  Backends make() const {
    Backends b;
    if (m_.backend == "remote") {
      b.policy = std::make_unique<llm::RemotePolicy>(client_, *templates_);
    } else {
      b.policy = std::make_unique<tasks::SyntheticPolicy>();
    }
    switch (m_.prm) {
      case PrmKind::oracle: b.prm = std::make_unique<tasks::OraclePrm>(); break;
      case PrmKind::noisy:
        b.prm = std::make_unique<tasks::NoisyOraclePrm>(m_.noise, m_.config.seed);
        break;
      case PrmKind::reference:
        b.prm = std::make_unique<refprm::ReferencePrmBackend>(*ref_params_);
        break;
      case PrmKind::remote:
        b.prm = std::make_unique<llm::RemotePrm>(client_, *templates_);
        break;
    }
    return b;
  }

 private:
  const RunManifest& m_;
  std::optional<refprm::RefModelParams> ref_params_;
  std::optional<llm::PromptTemplates> templates_;
  std::shared_ptr<llm::ChatClient> client_;
};

ProblemRun solve(const Problem& p, const RunManifest& m, const BackendFactory& factory) {
  Backends b = factory.make();
  ProblemRun run{p, run_search(p, m.config, *b.policy, *b.prm), false};
  mark_correctness(run.result.tree, p.answer);
  run.success = run.result.answer.has_value() && *run.result.answer == p.answer;
  return run;
}

}  // namespace

std::vector<ProblemRun> run_suite(const RunManifest& m, const std::vector<Problem>& problems) {
  m.validate();
  BackendFactory factory(m);
  std::vector<std::optional<ProblemRun>> slots(problems.size());
  const int jobs = std::min<int>(m.jobs, static_cast<int>(std::max<std::size_t>(problems.size(), 1)));
  if (jobs <= 1) {
    for (std::size_t i = 0; i < problems.size(); ++i) slots[i] = solve(problems[i], m, factory);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex err_mu;
    std::vector<std::thread> pool;
    for (int w = 0; w < jobs; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < problems.size(); i = next++) {
          try {
            slots[i] = solve(problems[i], m, factory);
          } catch (...) {
            std::lock_guard lock(err_mu);
            if (!first_error) first_error = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
  }
  std::vector<ProblemRun> out;
  out.reserve(slots.size());
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

Aggregate aggregate(const std::vector<ProblemRun>& runs) {
  Aggregate a;
  a.problems = static_cast<int>(runs.size());
  if (runs.empty()) return a;
  double succ = 0, traj = 0, depth = 0;
  for (const auto& r : runs) {
    succ += r.success ? 1.0 : 0.0;
    traj += r.result.trajectories;
    depth += r.result.depth;
    if (r.result.failed()) ++a.failed;
  }
  a.success_rate = succ / a.problems;
  a.mean_trajectories = traj / a.problems;
  a.mean_depth = depth / a.problems;
  return a;
}

nlohmann::ordered_json aggregate_to_json(const Aggregate& a) {
  ojson j;
  j["problems"] = a.problems;
  j["failed_problems"] = a.failed;
  j["success_rate"] = a.success_rate;
  j["mean_trajectories"] = a.mean_trajectories;
  j["mean_depth"] = a.mean_depth;
  return j;
}

nlohmann::ordered_json problem_metrics(const ProblemRun& run, const RunManifest& m,
                                       const std::string& manifest_hash) {
  ojson j;
  j["manifest_hash"] = manifest_hash;
  j["problem_id"] = run.problem.problem_id;
  j["memory_mode"] = mode_name(m.config.memory_mode);
  j["em_or_success"] = run.success;
  j["trajectories"] = run.result.trajectories;
  j["depth"] = run.result.depth;
  j["answer"] = run.result.answer ? ojson(*run.result.answer) : ojson();
  j["rollouts"] = m.config.num_rollouts;
  auto& errs = j["errors"] = ojson::array();
  for (const auto& e : run.result.errors) errs.push_back({{"rollout", e.rollout}, {"message", e.message}});
  return j;
}

void write_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

void write_search_outputs(const RunManifest& m, const std::vector<ProblemRun>& runs,
                          const fs::path& dir) {
  const std::string h = m.hash();
  ojson items = ojson::array();
  for (const auto& run : runs) {
    const std::string sub = safe_dir_name(run.problem.problem_id);
    const fs::path pdir = dir / "problems" / sub;

    ojson tree;
    tree["manifest_hash"] = h;
    const ojson tree_json = run.result.tree.to_json();
    for (auto& [k, v] : tree_json.items()) tree[k] = v;
    write_atomic(pdir / "tree.json", tree.dump(1) + "\n");

    const std::string header = ojson{{"manifest_hash", h}}.dump() + "\n";
    write_atomic(pdir / "events.jsonl", header + events_to_jsonl(run.result.per_rollout_log));

    ojson mem;
    mem["manifest_hash"] = h;
    for (auto& [k, v] : run.result.memory_dump.items()) mem[k] = v;
    write_atomic(pdir / "memory.json", mem.dump(1) + "\n");

    ojson metrics = problem_metrics(run, m, h);
    write_atomic(pdir / "metrics.json", metrics.dump(1) + "\n");
    metrics["dir"] = "problems/" + sub;
    items.push_back(std::move(metrics));
  }
  ojson agg;
  agg["manifest_hash"] = h;
  agg["memory_mode"] = mode_name(m.config.memory_mode);
  agg["aggregate"] = aggregate_to_json(aggregate(runs));
  agg["problems"] = std::move(items);
  write_atomic(dir / "metrics.json", agg.dump(1) + "\n");

  ojson man = m.to_json();
  man["manifest_hash"] = h;
  write_atomic(dir / "manifest.json", man.dump(1) + "\n");
}

int cmd_search(const RunManifest& m) {
  auto problems = load_problems(m);
  auto runs = run_suite(m, problems);
  write_search_outputs(m, runs, m.output_dir);
  const Aggregate a = aggregate(runs);
  std::cout << "problems=" << a.problems << " success_rate=" << a.success_rate
            << " mean_trajectories=" << a.mean_trajectories << " mean_depth=" << a.mean_depth
            << " failed=" << a.failed << "\n";
  for (const auto& r : runs) {
    for (const auto& e : r.result.errors) {
      std::cerr << r.problem.problem_id << ": rollout " << e.rollout << ": " << e.message << "\n";
    }
  }
  return a.failed > 0 ? kExitProblemFailed : kExitOk;
}

// ---------------------------------------------------------------------------
// Ablation

void audit_run(const SearchResult& result, const SearchConfig& config, AblationAudit& audit) {
  const bool prune = fallacies_enabled(config.memory_mode);
  for (const auto& e : result.per_rollout_log) {
    if (e.phase == EventPhase::expand) {
      ++audit.expansions_checked;
      const auto r = static_cast<std::size_t>(e.rollout);
      if (prune && r < result.digests.size() &&
          is_blocked(result.digests[r], result.tree.node(e.node_id).step_content)) {
        ++audit.blocked_attachments;
      }
    } else if (e.phase == EventPhase::memory) {
      const bool heur = e.memory_action.rfind("heuristic:", 0) == 0;
      const bool fall = e.memory_action.rfind("fallacy:", 0) == 0;
      if ((heur && (!(e.value >= config.tau_pos) || !heuristics_enabled(config.memory_mode))) ||
          (fall && (!(e.value <= config.tau_neg) || !fallacies_enabled(config.memory_mode))) ||
          (!heur && !fall)) {
        ++audit.threshold_violations;
      }
    }
  }
}

std::vector<AblationRow> run_ablation(const RunManifest& base, std::span<const std::uint64_t> seeds,
                                      std::span<const MemoryMode> modes, AblationAudit* audit) {
  if (seeds.empty() || modes.empty()) throw DomainError("ablation needs at least one seed and mode");
  const auto problems = load_problems(base);
  std::vector<AblationRow> rows;
  for (MemoryMode mode : modes) {
    for (std::uint64_t seed : seeds) {
      RunManifest m = base;
      m.config.memory_mode = mode;
      m.config.seed = seed;
      auto runs = run_suite(m, problems);
      if (audit) {
        for (const auto& r : runs) audit_run(r.result, m.config, *audit);
      }
      rows.push_back({mode, seed, aggregate(runs)});
    }
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows, const std::string& manifest_hash) {
  std::string out = csv_header(manifest_hash);
  out += "mode,seed,success_rate,mean_trajectories,mean_depth\n";
  for (const auto& r : rows) {
    out += std::string(mode_name(r.mode)) + "," + std::to_string(r.seed) + "," +
           fmt_double(r.stats.success_rate) + "," + fmt_double(r.stats.mean_trajectories) + "," +
           fmt_double(r.stats.mean_depth) + "\n";
  }
  return out;
}

int cmd_ablate(const RunManifest& base, std::span<const std::uint64_t> seeds,
               std::span<const MemoryMode> modes) {
  AblationAudit audit;
  auto rows = run_ablation(base, seeds, modes, &audit);

  ojson hj = base.hashed_json();
  hj["ablation"] = {{"seeds", std::vector<std::uint64_t>(seeds.begin(), seeds.end())}};
  auto& mj = hj["ablation"]["modes"] = ojson::array();
  for (MemoryMode mode : modes) mj.push_back(mode_name(mode));
  const std::string h = hex64(fnv1a64(hj.dump()));

  write_atomic(base.output_dir / "ablation.csv", ablation_csv(rows, h));
  ojson summary;
  summary["manifest_hash"] = h;
  auto& arr = summary["rows"] = ojson::array();
  int failed = 0;
  for (const auto& r : rows) {
    ojson o = aggregate_to_json(r.stats);
    o["mode"] = mode_name(r.mode);
    o["seed"] = r.seed;
    arr.push_back(std::move(o));
    failed += r.stats.failed;
  }
  summary["audit"] = {{"expansions_checked", audit.expansions_checked},
                      {"blocked_attachments", audit.blocked_attachments},
                      {"threshold_violations", audit.threshold_violations}};
  write_atomic(base.output_dir / "ablation.json", summary.dump(1) + "\n");
  ojson man = base.to_json();
  man["manifest_hash"] = h;
  man["ablation"] = hj["ablation"];
  write_atomic(base.output_dir / "manifest.json", man.dump(1) + "\n");

  std::cout << ablation_csv(rows, h);
  return failed > 0 ? kExitProblemFailed : kExitOk;
}

// ---------------------------------------------------------------------------
// Labeling, training, reports

int cmd_label(const fs::path& runs_dir, const fs::path& out_dir) {
  const auto summary = read_json_file(runs_dir / "metrics.json");
  const std::string h = summary.at("manifest_hash").get<std::string>();
  std::vector<PreferencePair> pairs;
  std::vector<ClassExample> examples;
  for (const auto& item : summary.at("problems")) {
    const fs::path tree_path = runs_dir / item.at("dir").get<std::string>() / "tree.json";
    SearchTree tree;
    try {
      tree = SearchTree::from_json(read_json_file(tree_path));
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(tree_path.string() + ": " + e.what(), 1);
    }
    const auto labels = label_tree(tree);
    auto p = extract_preference_pairs(labels);
    auto c = extract_class_examples(labels);
    pairs.insert(pairs.end(), p.begin(), p.end());
    examples.insert(examples.end(), c.begin(), c.end());
  }
  fs::create_directories(out_dir);
  // export_jsonl writes in place; stage through temporaries for atomicity.
  const fs::path pairs_tmp = out_dir / "pairs.jsonl.tmp";
  const fs::path classes_tmp = out_dir / "classes.jsonl.tmp";
  export_jsonl(pairs, pairs_tmp, h);
  export_jsonl(examples, classes_tmp, h);
  fs::rename(pairs_tmp, out_dir / "pairs.jsonl");
  fs::rename(classes_tmp, out_dir / "classes.jsonl");
  std::cout << "pairs=" << pairs.size() << " class_examples=" << examples.size() << "\n";
  return kExitOk;
}

namespace {

ojson schedule_to_json(const refprm::TrainSchedule& s) {
  ojson j;
  j["sdpo_epochs"] = s.sdpo_epochs;
  j["cls_epochs"] = s.cls_epochs;
  j["sdpo_lr"] = s.sdpo_lr;
  j["cls_lr"] = s.cls_lr;
  j["beta"] = s.beta;
  j["init_scale"] = s.init_scale;
  j["seed"] = s.seed;
  return j;
}

}  // namespace

int cmd_train_ref(const fs::path& pairs_path, const fs::path& classes_path, const fs::path& out_dir,
                  const refprm::TrainSchedule& schedule) {
  const auto pairs = import_pairs_jsonl(pairs_path);
  const auto examples = import_class_jsonl(classes_path);
  if (pairs.empty() || examples.empty()) {
    throw DomainError("train-ref needs non-empty pair and class datasets (got " +
                      std::to_string(pairs.size()) + " pairs, " + std::to_string(examples.size()) +
                      " class examples)");
  }
  ojson hj;
  hj["version"] = version();
  hj["pairs_digest"] = hex64(fnv1a64(read_text(pairs_path)));
  hj["classes_digest"] = hex64(fnv1a64(read_text(classes_path)));
  hj["schedule"] = schedule_to_json(schedule);
  const std::string h = hex64(fnv1a64(hj.dump()));

  const auto pf = refprm::featurize_pairs(pairs);
  const auto cf = refprm::featurize_examples(examples);
  refprm::TrainResult res;
  try {
    res = refprm::train(pf, cf, schedule);
  } catch (const refprm::TrainingDiverged& e) {
    write_atomic(out_dir / "loss_curve.csv", csv_header(h) + refprm::curve_to_csv(e.curve()));
    std::cerr << "training diverged: " << e.what() << "\n";
    return kExitProblemFailed;
  }

  ojson ckpt = res.params.to_json();
  ckpt["manifest_hash"] = h;
  write_atomic(out_dir / "checkpoint.json", ckpt.dump() + "\n");
  write_atomic(out_dir / "loss_curve.csv", csv_header(h) + refprm::curve_to_csv(res.curve));

  double s1 = 0.0, s2 = 0.0;
  for (const auto& p : res.curve) (p.stage == 1 ? s1 : s2) = p.loss;
  ojson report;
  report["manifest_hash"] = h;
  report["pairs"] = pairs.size();
  report["class_examples"] = examples.size();
  report["schedule"] = schedule_to_json(schedule);
  report["stage1_final_loss"] = s1;
  report["stage2_final_loss"] = s2;
  report["final_accuracy"] = res.final_accuracy;
  write_atomic(out_dir / "train_report.json", report.dump(1) + "\n");
  std::cout << "final_accuracy=" << res.final_accuracy << " stage1_loss=" << s1
            << " stage2_loss=" << s2 << "\n";
  return kExitOk;
}

int cmd_report(const fs::path& runs_dir, const fs::path& out_dir) {
  const auto manifest = read_json_file(runs_dir / "manifest.json");
  const auto summary = read_json_file(runs_dir / "metrics.json");
  const SearchConfig cfg = SearchConfig::from_json(manifest.at("search"));
  const std::string h = summary.at("manifest_hash").get<std::string>();

  bool consistent = true;
  long threshold_violations = 0;
  Aggregate recomputed;
  std::string csv = csv_header(h) + "problem_id,success,trajectories,depth,recorded_match\n";
  double succ = 0, traj = 0, depth = 0;
  for (const auto& item : summary.at("problems")) {
    const fs::path pdir = runs_dir / item.at("dir").get<std::string>();
    const SearchTree tree = SearchTree::from_json(read_json_file(pdir / "tree.json"));
    const StructuralMetrics sm = structural_metrics(tree);
    bool success = false;
    if (sm.trajectories > 0) {
      const std::string ans = answer_of(tree);
      for (NodeId t : tree.terminals()) {
        const auto& n = tree.node(t);
        if (n.answer == ans && n.correct.value_or(false)) success = true;
      }
    }
    std::ifstream ev(pdir / "events.jsonl");
    if (!ev) throw IoError("cannot read " + (pdir / "events.jsonl").string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(ev, line)) {
      ++lineno;
      if (line.empty()) continue;
      nlohmann::json e;
      try {
        e = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& ex) {
        throw SchemaError((pdir / "events.jsonl").string() + ": " + ex.what(), lineno);
      }
      if (e.value("phase", "") != "memory") continue;
      const std::string action = e.at("memory_action").get<std::string>();
      const double v = e.at("value").get<double>();
      if (action.rfind("heuristic:", 0) == 0 && !(v >= cfg.tau_pos)) ++threshold_violations;
      if (action.rfind("fallacy:", 0) == 0 && !(v <= cfg.tau_neg)) ++threshold_violations;
    }
    const bool match = item.at("trajectories").get<int>() == sm.trajectories &&
                       item.at("depth").get<double>() == sm.mean_depth &&
                       item.at("em_or_success").get<bool>() == success;
    consistent = consistent && match;
    ++recomputed.problems;
    if (!item.at("errors").empty()) ++recomputed.failed;
    succ += success ? 1.0 : 0.0;
    traj += sm.trajectories;
    depth += sm.mean_depth;
    csv += item.at("problem_id").get<std::string>() + "," + (success ? "1" : "0") + "," +
           std::to_string(sm.trajectories) + "," + fmt_double(sm.mean_depth) + "," +
           (match ? "1" : "0") + "\n";
  }
  if (recomputed.problems > 0) {
    recomputed.success_rate = succ / recomputed.problems;
    recomputed.mean_trajectories = traj / recomputed.problems;
    recomputed.mean_depth = depth / recomputed.problems;
  }
  const ojson recorded = summary.at("aggregate");
  const ojson again = aggregate_to_json(recomputed);
  consistent = consistent && nlohmann::json(recorded) == nlohmann::json(again);

  ojson report;
  report["manifest_hash"] = h;
  report["memory_mode"] = summary.value("memory_mode", "");
  report["recorded"] = recorded;
  report["recomputed"] = again;
  report["consistent"] = consistent;
  report["threshold_violations"] = threshold_violations;
  write_atomic(out_dir / "report.json", report.dump(1) + "\n");
  write_atomic(out_dir / "report.csv", csv);
  std::cout << "consistent=" << (consistent ? "true" : "false")
            << " threshold_violations=" << threshold_violations << "\n";
  return consistent && threshold_violations == 0 ? kExitOk : kExitProblemFailed;
}

// ---------------------------------------------------------------------------
// Command line

namespace {

// Search flags; unset options leave the config file's value alone.
struct SearchFlags {
  std::string config_path;
  std::optional<std::string> family, suite_path, problems_path, mode, prm, backend, checkpoint,
      base_url, model, api_key_env, out;
  std::optional<int> depth, distractors, count, rollouts, max_depth, max_children, workers, jobs,
      max_hints;
  std::optional<std::uint64_t> suite_seed, seed;
  std::optional<double> epsilon, tau_pos, tau_neg, noise;
  bool uct_times_two = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON run config; flags override it");
    cmd->add_option("--family", family, "arithmetic_chain | token_path | distractor_tree");
    cmd->add_option("--depth", depth, "Task depth");
    cmd->add_option("--distractors", distractors, "Distractors per state");
    cmd->add_option("--count", count, "Number of generated problems");
    cmd->add_option("--suite-seed", suite_seed, "Base seed of the generated suite");
    cmd->add_option("--suite", suite_path, "Suite manifest JSON");
    cmd->add_option("--problems", problems_path, "Problems JSON for the remote backend");
    cmd->add_option("--rollouts", rollouts, "Rollouts per problem (M)");
    cmd->add_option("--epsilon", epsilon, "UCT exploration weight");
    cmd->add_option("--tau-pos", tau_pos, "Heuristics threshold");
    cmd->add_option("--tau-neg", tau_neg, "Fallacies threshold");
    cmd->add_option("--max-depth", max_depth, "Forced terminal depth");
    cmd->add_option("--max-children", max_children, "Children per expansion");
    cmd->add_option("--max-hints", max_hints, "Heuristic hints per digest");
    cmd->add_option("--seed", seed, "Search and PRM-noise seed");
    cmd->add_option("--mode", mode, "full | no_heuristics | no_fallacies | none");
    cmd->add_flag("--uct-times-two", uct_times_two, "Use 2 ln N(p) in the exploration term");
    cmd->add_option("--workers", workers, "Rollout workers per problem");
    cmd->add_option("--jobs", jobs, "Problems solved in parallel");
    cmd->add_option("--prm", prm, "oracle | noisy | reference | remote");
    cmd->add_option("--noise", noise, "Noise amplitude of the noisy oracle PRM");
    cmd->add_option("--checkpoint", checkpoint, "Reference PRM checkpoint");
    cmd->add_option("--backend", backend, "synthetic | remote");
    cmd->add_option("--base-url", base_url, "Chat-completions base URL");
    cmd->add_option("--model", model, "Remote model name");
    cmd->add_option("--api-key-env", api_key_env, "Environment variable holding the API key");
    cmd->add_option("--out", out, "Output directory");
  }

  RunManifest build() const {
    RunManifest m;
    if (!config_path.empty()) m = RunManifest::from_json(read_json_file(config_path));
    auto& c = m.config;
    if (family) m.suite.family = parse_family(*family);
    if (depth) m.suite.params.depth = *depth;
    if (distractors) m.suite.params.distractors = *distractors;
    if (count) m.suite.count = *count;
    if (suite_seed) m.suite.base_seed = *suite_seed;
    if (suite_path) m.suite.manifest_path = *suite_path;
    if (problems_path) m.suite.problems_path = *problems_path;
    if (rollouts) c.num_rollouts = *rollouts;
    if (epsilon) c.exploration_weight = *epsilon;
    if (tau_pos) c.tau_pos = *tau_pos;
    if (tau_neg) c.tau_neg = *tau_neg;
    if (max_depth) c.max_depth = *max_depth;
    if (max_children) c.max_children = *max_children;
    if (max_hints) c.max_hints = static_cast<std::size_t>(*max_hints);
    if (seed) c.seed = *seed;
    if (mode) c.memory_mode = parse_mode(*mode);
    if (uct_times_two) c.uct_times_two = true;
    if (workers) c.workers = *workers;
    if (jobs) m.jobs = *jobs;
    if (prm) m.prm = parse_prm(*prm);
    if (noise) m.noise = *noise;
    if (checkpoint) m.checkpoint = *checkpoint;
    if (backend) m.backend = *backend;
    if (base_url) m.endpoint.base_url = *base_url;
    if (model) m.endpoint.model_name = *model;
    if (api_key_env) m.endpoint.api_key_env = *api_key_env;
    if (out) m.output_dir = *out;
    if (m.backend == "remote" && !prm) m.prm = PrmKind::remote;
    m.timestamp = utc_now();
    m.validate();
    return m;
  }
};

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tok.size()) throw DomainError("bad seed: " + tok);
    out.push_back(v);
  }
  if (out.empty()) throw DomainError("no seeds given");
  return out;
}

std::vector<MemoryMode> parse_modes(const std::string& text) {
  std::vector<MemoryMode> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) out.push_back(parse_mode(tok));
  }
  if (out.empty()) throw DomainError("no memory modes given");
  return out;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Process-reward-guided MCTS with heuristics/fallacies memory"};
  app.set_version_flag("--version", std::string(version()));
  app.require_subcommand(1);

  SearchFlags search_flags;
  auto* search = app.add_subcommand("search", "Run the search on one problem or a suite");
  search_flags.attach(search);

  SearchFlags ablate_flags;
  std::string seeds_text = "0";
  std::string modes_text = "full,no_heuristics,no_fallacies,none";
  auto* ablate = app.add_subcommand("ablate", "Compare memory modes over paired seeds");
  ablate_flags.attach(ablate);
  ablate->add_option("--seeds", seeds_text, "Comma-separated seeds")->capture_default_str();
  ablate->add_option("--modes", modes_text, "Comma-separated memory modes")->capture_default_str();

  std::string label_runs, label_out;
  auto* label = app.add_subcommand("label", "Build PRM datasets from search trees");
  label->add_option("--runs", label_runs, "Output directory of `search`")->required();
  label->add_option("--out", label_out, "Dataset directory")->required();

  std::string pairs_path, classes_path, train_out;
  refprm::TrainSchedule schedule;
  auto* train = app.add_subcommand("train-ref", "Train the reference PRM");
  train->add_option("--pairs", pairs_path, "Preference pairs JSONL")->required();
  train->add_option("--classes", classes_path, "Class examples JSONL")->required();
  train->add_option("--out", train_out, "Checkpoint directory")->required();
  train->add_option("--seed", schedule.seed, "Initialisation seed");
  train->add_option("--sdpo-epochs", schedule.sdpo_epochs, "Stage 1 epochs")->capture_default_str();
  train->add_option("--cls-epochs", schedule.cls_epochs, "Stage 2 epochs")->capture_default_str();
  train->add_option("--sdpo-lr", schedule.sdpo_lr, "Stage 1 step size")->capture_default_str();
  train->add_option("--cls-lr", schedule.cls_lr, "Stage 2 step size")->capture_default_str();
  train->add_option("--beta", schedule.beta, "Preference temperature")->capture_default_str();

  std::string report_runs, report_out;
  auto* report = app.add_subcommand("report", "Recompute and check metrics of a search run");
  report->add_option("--runs", report_runs, "Output directory of `search`")->required();
  report->add_option("--out", report_out, "Report directory (defaults to --runs)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfigError;
  }

  // Configuration problems exit with 2; anything raised while running exits 1.
  std::function<int()> action;
  try {
    if (*search) {
      RunManifest m = search_flags.build();
      action = [m] { return cmd_search(m); };
    } else if (*ablate) {
      RunManifest m = ablate_flags.build();
      auto seeds = parse_seeds(seeds_text);
      auto modes = parse_modes(modes_text);
      action = [m, seeds, modes] { return cmd_ablate(m, seeds, modes); };
    } else if (*label) {
      action = [&] { return cmd_label(label_runs, label_out); };
    } else if (*train) {
      if (schedule.sdpo_epochs < 0 || schedule.cls_epochs < 0 || !(schedule.sdpo_lr > 0) ||
          !(schedule.cls_lr > 0) || !(schedule.beta > 0)) {
        throw DomainError("epochs must be >= 0 and step sizes and beta positive");
      }
      action = [&] { return cmd_train_ref(pairs_path, classes_path, train_out, schedule); };
    } else if (*report) {
      action = [&] { return cmd_report(report_runs, report_out.empty() ? report_runs : report_out); };
    }
  } catch (const std::exception& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kExitConfigError;
  }

  try {
    return action();
  } catch (const SchemaError& e) {
    std::cerr << "schema error (line " << e.line() << "): " << e.what() << "\n";
    return kExitConfigError;
  } catch (const DomainError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitProblemFailed;
  }
}

}  // namespace prism::app
