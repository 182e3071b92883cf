#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "prism/llm_backend.hpp"
#include "prism/problem.hpp"
#include "prism/reference_prm.hpp"
#include "prism/search.hpp"

// Command implementations behind the `prism` executable. Every command is
// also callable in-process so tests and the Python module share one code path.
namespace prism::app {

inline constexpr int kExitOk = 0;
inline constexpr int kExitProblemFailed = 1;
inline constexpr int kExitConfigError = 2;

const char* version() noexcept;

// Where the problems of a run come from. Exactly one source is used: a suite
// manifest file, a problems file (remote backend), or generator parameters.
struct SuiteSpec {
  TaskFamily family = TaskFamily::distractor_tree;
  TaskParams params{4, 2, 0};
  int count = 10;
  std::uint64_t base_seed = 0;
  std::string manifest_path;  // suite manifest JSON
  std::string problems_path;  // JSON array of {problem_id, statement, answer}

  nlohmann::ordered_json to_json() const;
  static SuiteSpec from_json(const nlohmann::json& j, SuiteSpec base);
};

enum class PrmKind { oracle, noisy, reference, remote };
const char* prm_name(PrmKind k);
PrmKind parse_prm(const std::string& name);

struct RunManifest {
  SearchConfig config;
  std::string backend = "synthetic";  // synthetic | remote
  PrmKind prm = PrmKind::noisy;
  double noise = 0.15;  // amplitude of the noisy oracle PRM
  std::string checkpoint;  // reference PRM checkpoint
  SuiteSpec suite;
  llm::EndpointConfig endpoint;
  int jobs = 1;  // problems solved in parallel
  std::filesystem::path output_dir = "prism-out";
  std::string timestamp;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  // Everything that determines the outputs: excludes timestamp, output_dir
  // and jobs.
  nlohmann::ordered_json hashed_json() const;
  std::string hash() const;

  // Keys missing from `j` keep the value from `base`. Recognised top-level
  // keys: search, backend, prm, noise, checkpoint, suite, endpoint, jobs,
  // output_dir.
  static RunManifest from_json(const nlohmann::json& j, RunManifest base);
  static RunManifest from_json(const nlohmann::json& j);
};

std::vector<Problem> load_problems(const RunManifest& manifest);

struct ProblemRun {
  Problem problem;
  SearchResult result;
  bool success = false;
};

struct Aggregate {
  int problems = 0;
  int failed = 0;  // problems with at least one rollout error
  double success_rate = 0.0;
  double mean_trajectories = 0.0;
  double mean_depth = 0.0;
};

// Solves every problem with `jobs` problems in flight; results keep problem
// order. Correctness marks are applied to each tree.
std::vector<ProblemRun> run_suite(const RunManifest& manifest, const std::vector<Problem>& problems);
Aggregate aggregate(const std::vector<ProblemRun>& runs);

nlohmann::ordered_json problem_metrics(const ProblemRun& run, const RunManifest& manifest,
                                       const std::string& manifest_hash);
nlohmann::ordered_json aggregate_to_json(const Aggregate& a);

// Writes `content` to `path` via a temporary file and rename.
void write_atomic(const std::filesystem::path& path, const std::string& content);

// Per-problem tree.json, events.jsonl, memory.json and metrics.json under
// <dir>/problems/<problem_id>/, then <dir>/metrics.json and <dir>/manifest.json.
void write_search_outputs(const RunManifest& manifest, const std::vector<ProblemRun>& runs,
                          const std::filesystem::path& dir);

int cmd_search(const RunManifest& manifest);

struct AblationRow {
  MemoryMode mode = MemoryMode::full;
  std::uint64_t seed = 0;
  Aggregate stats;
};

struct AblationAudit {
  long expansions_checked = 0;
  long blocked_attachments = 0;  // children attached despite being blocked
  long threshold_violations = 0;
};

// Runs modes x seeds over the same problems; the seed drives both the search
// and the noisy PRM, so runs with the same seed are paired.
std::vector<AblationRow> run_ablation(const RunManifest& base, std::span<const std::uint64_t> seeds,
                                      std::span<const MemoryMode> modes, AblationAudit* audit = nullptr);

// Threshold and pruning audit of one finished search.
void audit_run(const SearchResult& result, const SearchConfig& config, AblationAudit& audit);

std::string ablation_csv(const std::vector<AblationRow>& rows, const std::string& manifest_hash);

int cmd_ablate(const RunManifest& base, std::span<const std::uint64_t> seeds,
               std::span<const MemoryMode> modes);

// Reads the trees of a search output directory and writes pairs.jsonl and
// classes.jsonl into out_dir.
int cmd_label(const std::filesystem::path& runs_dir, const std::filesystem::path& out_dir);

int cmd_train_ref(const std::filesystem::path& pairs_path, const std::filesystem::path& classes_path,
                  const std::filesystem::path& out_dir, const refprm::TrainSchedule& schedule);

// Recomputes metrics from the stored trees and event logs of a search output
// directory and checks them against the recorded metrics.
int cmd_report(const std::filesystem::path& runs_dir, const std::filesystem::path& out_dir);

int run_cli(int argc, char** argv);

}  // namespace prism::app
