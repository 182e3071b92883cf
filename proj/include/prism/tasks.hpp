#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "prism/labeling.hpp"
#include "prism/problem.hpp"
#include "prism/prm.hpp"
#include "prism/search.hpp"

// Synthetic reasoning environments with an exact value oracle.
//
// Every family is a finite DAG of integer states reached in exactly `depth`
// steps; a terminal is correct iff its state equals the hidden answer.
//
//  arithmetic_chain  one correct operation per step among `distractors`
//                    alternative operations; a single correct path.
//  token_path        add one of `distractors + 1` tokens per step to reach a
//                    target sum; many correct orderings.
//  distractor_tree   the arithmetic chain plus prefix-independent "lure" steps
//                    whose text repeats at every level. A lure derails the
//                    state for good, so the same mistake can recur across
//                    rollouts and fallacy memory has something to prune.
namespace prism::tasks {

struct OracleVerdict {
  double value = 0.0;
  bool on_correct_path = false;
  Distance remaining_steps;
};

// Deterministic in (family, params, seed); params.seed is overwritten by seed.
// Throws DomainError for invalid params.
Problem generate(TaskFamily family, TaskParams params, std::uint64_t seed);

// Continuations of a legal prefix in a fixed order; empty iff the prefix is
// complete. Throws DomainError for an illegal prefix.
std::vector<std::string> legal_steps(const Problem& problem, std::span<const std::string> prefix);

// Ground-truth value of prefix + candidate under the labeling recurrence.
OracleVerdict oracle(const Problem& problem, std::span<const std::string> prefix,
                     const std::string& candidate);

bool is_complete(const Problem& problem, std::span<const std::string> path);
// Running state of the path rendered as an answer string.
std::string answer_for(const Problem& problem, std::span<const std::string> path);

// Policy that offers every legal continuation. Steps matching a heuristic hint
// are moved to the front; the rest keep their task order.
class SyntheticPolicy final : public PolicyBackend {
 public:
  Proposal propose(const ExpansionRequest& request) override;
  bool is_terminal(const Problem& problem, std::span<const std::string> path) override;
  std::string extract_answer(const Problem& problem, std::span<const std::string> path) override;
};

class OraclePrm final : public PrmBackend {
 public:
  PrmScore score(const Problem& problem, std::span<const std::string> prefix,
                 const std::string& candidate) override;
};

inline constexpr double kDefaultNoise = 0.15;

// Oracle value plus seeded uniform noise in [-amplitude, amplitude], clamped to
// [0,1]. The noise is a pure function of (seed, problem, prefix, candidate).
class NoisyOraclePrm final : public PrmBackend {
 public:
  explicit NoisyOraclePrm(double amplitude = kDefaultNoise, std::uint64_t seed = 0);
  PrmScore score(const Problem& problem, std::span<const std::string> prefix,
                 const std::string& candidate) override;

 private:
  double amplitude_;
  std::uint64_t seed_;
};

struct Suite {
  std::string name;
  std::vector<Problem> problems;
};

Suite generate_suite(TaskFamily family, TaskParams params, int count, std::uint64_t base_seed);

// {name, problems: [{problem_id, family, params: {depth, distractors, seed}, answer_hash}]}
nlohmann::ordered_json suite_manifest(const Suite& suite);
// Regenerates every problem and checks its answer hash.
Suite load_suite(const nlohmann::json& manifest);

std::string answer_hash(const std::string& answer);

}  // namespace prism::tasks
