#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "prism/memory.hpp"
#include "prism/problem.hpp"
#include "prism/prm.hpp"

namespace prism {

using NodeId = int;
inline constexpr NodeId kNoNode = -1;

struct SearchNode {
  NodeId id = kNoNode;
  std::string step_content;  // the root holds the problem statement
  NodeId parent = kNoNode;
  std::vector<NodeId> children;
  int visit_count = 0;
  double value = 0.0;      // running mean of back-propagated outcomes
  double prm_value = 0.0;  // PRM score at attachment
  int depth = 0;
  bool terminal = false;
  bool fully_expanded = false;
  std::string answer;           // extracted answer, terminals only
  std::optional<bool> correct;  // set by mark_correctness

  bool is_leaf() const noexcept { return children.empty(); }
};

// Node storage indexed by id; ids are assigned in creation order.
class SearchTree {
 public:
  SearchTree() = default;
  SearchTree(std::string problem_id, std::string root_content);

  NodeId add_child(NodeId parent, std::string step_content, double prm_value);

  const SearchNode& node(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  SearchNode& node(NodeId id) { return nodes_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool empty() const noexcept { return nodes_.empty(); }
  NodeId root() const noexcept { return nodes_.empty() ? kNoNode : 0; }
  const std::vector<SearchNode>& nodes() const noexcept { return nodes_; }
  const std::string& problem_id() const noexcept { return problem_id_; }

  // Step contents from the first step below the root down to `id`.
  std::vector<std::string> path_steps(NodeId id) const;
  // Node ids from the root down to `id` inclusive.
  std::vector<NodeId> path_nodes(NodeId id) const;
  std::vector<NodeId> terminals() const;

  // Throws DomainError describing the first violated structural invariant.
  void check_well_formed() const;

  nlohmann::ordered_json to_json() const;
  static SearchTree from_json(const nlohmann::json& j);

 private:
  std::string problem_id_;
  std::vector<SearchNode> nodes_;
};

struct SearchConfig {
  int num_rollouts = 16;
  double exploration_weight = 1.0;
  double tau_pos = 0.8;
  double tau_neg = 0.2;
  int max_depth = 8;
  int max_children = 3;
  std::uint64_t seed = 0;
  MemoryMode memory_mode = MemoryMode::full;
  // Use sqrt(2 ln N(p) / N(n)) for the exploration term instead of
  // sqrt(ln N(p) / N(n)).
  bool uct_times_two = false;
  std::size_t max_hints = kDefaultMaxHints;
  std::size_t memory_capacity = kDefaultCapacityPerKind;
  int workers = 1;

  // Throws DomainError on an invalid combination.
  void validate() const;

  nlohmann::ordered_json to_json() const;
  // Keys missing from `j` keep the value from `base`.
  static SearchConfig from_json(const nlohmann::json& j, SearchConfig base);
  static SearchConfig from_json(const nlohmann::json& j);
};

// What the policy is asked for when a node is expanded.
struct ExpansionRequest {
  const Problem& problem;
  std::span<const std::string> prefix;   // steps below the root
  const MemoryDigest& digest;
  int max_candidates = 0;
  std::span<const std::string> existing;  // contents of already attached children
};

struct Proposal {
  std::vector<std::string> steps;
  bool exhausted = true;  // no further continuations exist beyond `steps` + existing
};

class PolicyBackend {
 public:
  virtual ~PolicyBackend() = default;
  virtual Proposal propose(const ExpansionRequest& request) = 0;
  // True once the path contains a final answer or admits no continuation.
  virtual bool is_terminal(const Problem& problem, std::span<const std::string> path) = 0;
  virtual std::string extract_answer(const Problem& problem,
                                     std::span<const std::string> path) = 0;
};

// V(n) + eps * sqrt(ln N(p) / N(n)); +inf when N(n) == 0.
// Throws DomainError if parent_visits < 1.
double uct_score(const SearchNode& node, int parent_visits, double epsilon,
                 bool times_two = false);

// Descends from the root by UCT argmax (lowest index on ties) until a leaf or
// a node that is not fully expanded.
NodeId select_leaf(const SearchTree& tree, double epsilon, bool times_two = false);

enum class EventPhase { select, expand, prune, memory, simulate, backprop, error };
const char* phase_name(EventPhase p);

struct SearchEvent {
  int rollout = 0;
  EventPhase phase = EventPhase::select;
  NodeId node_id = kNoNode;
  double value = 0.0;
  std::string memory_action = "none";

  nlohmann::ordered_json to_json() const;
};

using EventLog = std::vector<SearchEvent>;

// Serializes tree access between rollout workers; see search.cpp.
struct TreeSync;

// Shared state of one search: tree, memory and the rollout log. Phase
// operations below act on it. `sync` is null in single-worker use.
struct SearchContext {
  const Problem& problem;
  const SearchConfig& config;
  PolicyBackend& policy;
  PrmBackend& prm;
  MemoryStore& memory;
  SearchTree& tree;
  EventLog* log = nullptr;
  int rollout = 0;
  TreeSync* sync = nullptr;
};

// Attaches scored children to `node`. Candidates blocked by the digest are
// dropped when fallacy memory is enabled. A node that ends up with no
// children is marked terminal. Returns the ids of attached children.
std::vector<NodeId> expand(SearchContext& ctx, NodeId node, const MemoryDigest& digest);

// Greedy expanding descent by prm_value with threshold-gated memory writes.
NodeId simulate(SearchContext& ctx, NodeId start, const MemoryDigest& digest);

// Visit increments and running-mean value updates along root..terminal.
void backpropagate(SearchTree& tree, NodeId terminal, double outcome_value);

struct StructuralMetrics {
  int trajectories = 0;
  double mean_depth = 0.0;
};

StructuralMetrics structural_metrics(const SearchTree& tree);

// Answer of the terminal group with maximal summed V*N; ties go to the group
// whose first terminal was created earliest. Throws DomainError when the tree
// has no terminal.
std::string answer_of(const SearchTree& tree);

struct RolloutError {
  int rollout = 0;
  std::string message;
};

struct SearchResult {
  SearchTree tree;
  std::optional<std::string> answer;
  int trajectories = 0;
  double depth = 0.0;
  EventLog per_rollout_log;
  std::vector<MemoryDigest> digests;  // snapshot used by each rollout
  nlohmann::ordered_json memory_dump;
  std::vector<RolloutError> errors;

  bool failed() const noexcept { return !errors.empty(); }
};

// Runs config.num_rollouts rollouts. When `memory` is null a fresh store is
// used; a per_problem store passed in is cleared first.
SearchResult run_search(const Problem& problem, const SearchConfig& config, PolicyBackend& policy,
                        PrmBackend& prm, MemoryStore* memory = nullptr);

// Sets `correct` on every terminal: answer equals the problem's answer.
void mark_correctness(SearchTree& tree, const std::string& expected_answer);

std::string events_to_jsonl(const EventLog& log);

}  // namespace prism
