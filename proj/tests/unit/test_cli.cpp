#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "prism/app.hpp"
#include "prism/errors.hpp"
#include "prism/labeling.hpp"

using namespace prism;
using namespace prism::app;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / "prism_cli_test" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

RunManifest small_manifest(const fs::path& out, int depth = 2, int count = 10) {
  RunManifest m;
  m.suite.family = TaskFamily::distractor_tree;
  m.suite.params = {depth, 2, 0};
  m.suite.count = count;
  m.suite.base_seed = 5;
  m.config.num_rollouts = 8;
  m.config.max_depth = depth;
  m.output_dir = out;
  return m;
}

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "prism");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace

TEST_CASE("manifest hash covers outputs-determining fields only") {
  RunManifest a;
  RunManifest b = a;
  b.output_dir = "elsewhere";
  b.timestamp = "2020-01-01T00:00:00Z";
  b.jobs = 4;
  CHECK(a.hash() == b.hash());
  b.config.seed = 1;
  CHECK(a.hash() != b.hash());
  CHECK(a.hash().size() == 16);

  auto back = RunManifest::from_json(nlohmann::json::parse(a.to_json().dump()));
  CHECK(back.hash() == a.hash());

  RunManifest bad;
  bad.config.num_rollouts = 0;
  CHECK_THROWS_AS(bad.validate(), DomainError);
  bad = RunManifest{};
  bad.prm = PrmKind::reference;
  CHECK_THROWS_AS(bad.validate(), DomainError);
  bad = RunManifest{};
  bad.backend = "other";
  CHECK_THROWS_AS(bad.validate(), DomainError);
  CHECK_THROWS_AS(RunManifest::from_json(nlohmann::json::array()), DomainError);
}

TEST_CASE("search outputs and aggregate consistency") {
  auto out = fresh_dir("search");
  auto m = small_manifest(out);
  REQUIRE(cmd_search(m) == kExitOk);
  auto summary = read_json(out / "metrics.json");
  CHECK(summary["manifest_hash"] == m.hash());
  REQUIRE(summary["problems"].size() == 10);

  double succ = 0, traj = 0, depth = 0;
  for (const auto& item : summary["problems"]) {
    const fs::path dir = out / item["dir"].get<std::string>();
    for (const char* f : {"tree.json", "events.jsonl", "memory.json", "metrics.json"}) {
      CHECK(fs::exists(dir / f));
    }
    auto pm = read_json(dir / "metrics.json");
    CHECK(pm["manifest_hash"] == m.hash());
    CHECK(pm["trajectories"] == item["trajectories"]);
    succ += item["em_or_success"].get<bool>() ? 1 : 0;
    traj += item["trajectories"].get<double>();
    depth += item["depth"].get<double>();
    auto tree = SearchTree::from_json(read_json(dir / "tree.json"));
    auto sm = structural_metrics(tree);
    CHECK(sm.trajectories == item["trajectories"].get<int>());
    // First events line is the hash header.
    std::ifstream ev(dir / "events.jsonl");
    std::string first;
    std::getline(ev, first);
    CHECK(nlohmann::json::parse(first)["manifest_hash"] == m.hash());
  }
  const auto& agg = summary["aggregate"];
  CHECK(agg["problems"] == 10);
  CHECK(agg["success_rate"].get<double>() == doctest::Approx(succ / 10));
  CHECK(agg["mean_trajectories"].get<double>() == doctest::Approx(traj / 10));
  CHECK(agg["mean_depth"].get<double>() == doctest::Approx(depth / 10));

  auto report_dir = fresh_dir("report");
  CHECK(cmd_report(out, report_dir) == kExitOk);
  CHECK(read_json(report_dir / "report.json")["consistent"] == true);

  // Tampering with recorded metrics is detected.
  auto tampered = read_json(out / "metrics.json");
  tampered["aggregate"]["mean_trajectories"] = 999.0;
  std::ofstream(out / "metrics.json") << tampered.dump();
  CHECK(cmd_report(out, report_dir) == kExitProblemFailed);
}

TEST_CASE("parallel jobs give identical outputs") {
  auto a = fresh_dir("jobs1");
  auto b = fresh_dir("jobs4");
  auto ma = small_manifest(a, 3, 6);
  auto mb = small_manifest(b, 3, 6);
  mb.jobs = 4;
  REQUIRE(cmd_search(ma) == kExitOk);
  REQUIRE(cmd_search(mb) == kExitOk);
  CHECK(slurp(a / "metrics.json") == slurp(b / "metrics.json"));
  auto summary = read_json(a / "metrics.json");
  for (const auto& item : summary["problems"]) {
    const auto dir = item["dir"].get<std::string>();
    for (const char* f : {"tree.json", "events.jsonl", "memory.json", "metrics.json"}) {
      CHECK(slurp(a / dir / f) == slurp(b / dir / f));
    }
  }
}

TEST_CASE("ablation rows and CSV") {
  auto m = small_manifest(fresh_dir("ablate"), 3, 4);
  std::vector<std::uint64_t> seeds{1, 2};
  std::vector<MemoryMode> modes{MemoryMode::full, MemoryMode::no_heuristics, MemoryMode::no_fallacies,
                                MemoryMode::none};
  AblationAudit audit;
  auto rows = run_ablation(m, seeds, modes, &audit);
  REQUIRE(rows.size() == 8);
  CHECK(audit.expansions_checked > 0);
  CHECK(audit.blocked_attachments == 0);
  CHECK(audit.threshold_violations == 0);
  for (const auto& r : rows) CHECK(r.stats.problems == 4);

  const auto csv = ablation_csv(rows, m.hash());
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "# manifest_hash: " + m.hash());
  std::getline(in, line);
  CHECK(line == "mode,seed,success_rate,mean_trajectories,mean_depth");
  int n = 0;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    REQUIRE(cells.size() == 5);
    const auto& r = rows[static_cast<std::size_t>(n)];
    CHECK(cells[0] == mode_name(r.mode));
    CHECK(std::stoull(cells[1]) == r.seed);
    CHECK(std::stod(cells[2]) == doctest::Approx(r.stats.success_rate));
    CHECK(std::stod(cells[3]) == doctest::Approx(r.stats.mean_trajectories));
    ++n;
  }
  CHECK(n == 8);

  // Same seed, different modes share the suite; same mode and seed repeat exactly.
  auto again = run_ablation(m, seeds, modes);
  CHECK(ablation_csv(again, m.hash()) == csv);
}

TEST_CASE("label and train-ref on a depth-2 run") {
  auto runs = fresh_dir("label-runs");
  auto m = small_manifest(runs, 2, 10);
  REQUIRE(cmd_search(m) == kExitOk);
  auto labels = fresh_dir("label-out");
  REQUIRE(cmd_label(runs, labels) == kExitOk);
  auto pairs = import_pairs_jsonl(labels / "pairs.jsonl");
  auto classes = import_class_jsonl(labels / "classes.jsonl");
  CHECK_FALSE(pairs.empty());
  CHECK_FALSE(classes.empty());
  std::ifstream pf(labels / "pairs.jsonl");
  std::string header;
  std::getline(pf, header);
  CHECK(nlohmann::json::parse(header)["manifest_hash"] == m.hash());
  for (const auto& p : pairs) {
    CHECK(p.v_pos >= 0.8);
    CHECK(p.v_neg <= 0.2);
  }

  refprm::TrainSchedule s;
  s.sdpo_epochs = 30;
  s.cls_epochs = 30;
  auto model = fresh_dir("model");
  REQUIRE(cmd_train_ref(labels / "pairs.jsonl", labels / "classes.jsonl", model, s) == kExitOk);
  CHECK(fs::exists(model / "checkpoint.json"));
  CHECK(fs::exists(model / "loss_curve.csv"));
  CHECK(fs::exists(model / "train_report.json"));
  CHECK_NOTHROW(refprm::load_checkpoint(model / "checkpoint.json"));

  // The checkpoint drives a search through the reference PRM.
  auto ref_runs = fresh_dir("ref-runs");
  auto rm = small_manifest(ref_runs, 2, 3);
  rm.prm = PrmKind::reference;
  rm.checkpoint = (model / "checkpoint.json").string();
  CHECK(cmd_search(rm) == kExitOk);
}

TEST_CASE("a run whose trees hold no correct terminal yields no pairs") {
  auto runs = fresh_dir("no-pairs");
  SearchTree t("p0", "root");
  for (int i = 0; i < 3; ++i) {
    NodeId c = t.add_child(0, "wrong " + std::to_string(i), 0.1);
    t.node(c).terminal = true;
    t.node(c).answer = "x";
    t.node(c).correct = false;
  }
  fs::create_directories(runs / "problems" / "p0");
  std::ofstream(runs / "problems" / "p0" / "tree.json") << t.to_json().dump();
  nlohmann::json summary;
  summary["manifest_hash"] = "0123456789abcdef";
  summary["problems"] = nlohmann::json::array({{{"dir", "problems/p0"}}});
  std::ofstream(runs / "metrics.json") << summary.dump();
  auto out = fresh_dir("no-pairs-out");
  REQUIRE(cmd_label(runs, out) == kExitOk);
  CHECK(import_pairs_jsonl(out / "pairs.jsonl").empty());
  CHECK(import_class_jsonl(out / "classes.jsonl").size() == 3);

  // Training on an empty pair set is a domain error.
  refprm::TrainSchedule s;
  CHECK_THROWS_AS(cmd_train_ref(out / "pairs.jsonl", out / "classes.jsonl", fresh_dir("no-model"), s),
                  DomainError);
}

TEST_CASE("command line exit codes") {
  auto out = fresh_dir("cli");
  CHECK(run({"--help"}) == 0);
  CHECK(run({"--version"}) == 0);
  CHECK(run({"search", "--rollouts", "0", "--out", out.string()}) == kExitConfigError);
  CHECK(run({"search", "--mode", "bogus", "--out", out.string()}) == kExitConfigError);
  CHECK(run({"search", "--config", (out / "missing.json").string()}) == kExitConfigError);
  CHECK(run({"nonsense"}) == kExitConfigError);
  CHECK(run({"label", "--runs", (out / "missing").string(), "--out", out.string()}) == kExitConfigError);
  CHECK(run({"search", "--family", "token_path", "--depth", "2", "--count", "2", "--rollouts", "4",
             "--max-depth", "2", "--out", (out / "ok").string()}) == kExitOk);
  CHECK(fs::exists(out / "ok" / "metrics.json"));

  // A config file is read and flags override it.
  nlohmann::json cfg = {{"search", {{"num_rollouts", 3}, {"max_depth", 2}}},
                        {"suite", {{"family", "arithmetic_chain"}, {"depth", 2}, {"count", 2}}}};
  std::ofstream(out / "cfg.json") << cfg.dump();
  CHECK(run({"search", "--config", (out / "cfg.json").string(), "--rollouts", "5", "--out",
             (out / "cfg-run").string()}) == kExitOk);
  auto man = read_json(out / "cfg-run" / "manifest.json");
  CHECK(man["search"]["num_rollouts"] == 5);
  CHECK(man["suite"]["family"] == "arithmetic_chain");
}
