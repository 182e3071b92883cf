#include "prism/search.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <map>
#include <mutex>
#include <thread>
#include <unordered_set>

#include "prism/errors.hpp"

namespace prism {

struct TreeSync {
  std::mutex mu;
  std::condition_variable expanded;
  std::unordered_set<NodeId> expanding;
};

namespace {

std::unique_lock<std::mutex> lock_tree(const SearchContext& ctx) {
  return ctx.sync ? std::unique_lock(ctx.sync->mu) : std::unique_lock<std::mutex>();
}

// Caller holds the tree lock (or runs single-worker).
void log_event(SearchContext& ctx, EventPhase phase, NodeId node, double value,
               std::string action = "none") {
  if (ctx.log) ctx.log->push_back({ctx.rollout, phase, node, value, std::move(action)});
}

void mark_terminal(SearchContext& ctx, SearchNode& n, std::span<const std::string> path) {
  n.terminal = true;
  n.fully_expanded = true;
  n.answer = ctx.policy.extract_answer(ctx.problem, path);
}

}  // namespace

// ---------------------------------------------------------------------------
// SearchTree

SearchTree::SearchTree(std::string problem_id, std::string root_content)
    : problem_id_(std::move(problem_id)) {
  SearchNode root;
  root.id = 0;
  root.step_content = std::move(root_content);
  nodes_.push_back(std::move(root));
}

NodeId SearchTree::add_child(NodeId parent, std::string step_content, double prm_value) {
  SearchNode& p = node(parent);
  SearchNode child;
  child.id = static_cast<NodeId>(nodes_.size());
  child.parent = parent;
  child.step_content = std::move(step_content);
  child.prm_value = prm_value;
  child.depth = p.depth + 1;
  p.children.push_back(child.id);
  nodes_.push_back(std::move(child));
  return nodes_.back().id;
}

std::vector<NodeId> SearchTree::path_nodes(NodeId id) const {
  std::vector<NodeId> path;
  for (NodeId cur = id; cur != kNoNode; cur = node(cur).parent) path.push_back(cur);
  std::reverse(path.begin(), path.end());
  return path;
}

std::vector<std::string> SearchTree::path_steps(NodeId id) const {
  std::vector<std::string> steps;
  for (NodeId n : path_nodes(id)) {
    if (n != root()) steps.push_back(node(n).step_content);
  }
  return steps;
}

std::vector<NodeId> SearchTree::terminals() const {
  std::vector<NodeId> out;
  for (const auto& n : nodes_) {
    if (n.terminal) out.push_back(n.id);
  }
  return out;
}

void SearchTree::check_well_formed() const {
  auto fail = [](NodeId id, const std::string& what) {
    throw DomainError("node " + std::to_string(id) + ": " + what);
  };
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const SearchNode& n = nodes_[i];
    if (n.id != static_cast<NodeId>(i)) fail(n.id, "id does not match position");
    if (i == 0) {
      if (n.parent != kNoNode) fail(n.id, "root has a parent");
      if (n.depth != 0) fail(n.id, "root depth is not 0");
    } else {
      // Parents are created before children, which rules out cycles.
      if (n.parent < 0 || n.parent >= n.id) fail(n.id, "parent is not an earlier node");
      const SearchNode& p = nodes_[static_cast<std::size_t>(n.parent)];
      if (std::count(p.children.begin(), p.children.end(), n.id) != 1) {
        fail(n.id, "parent does not list this node exactly once");
      }
      if (n.depth != p.depth + 1) fail(n.id, "depth is not parent depth + 1");
    }
    if (n.visit_count < 0) fail(n.id, "negative visit count");
    if (!(n.value >= 0.0 && n.value <= 1.0)) fail(n.id, "value outside [0,1]");
    if (!(n.prm_value >= 0.0 && n.prm_value <= 1.0)) fail(n.id, "prm_value outside [0,1]");
    if (n.terminal && !n.children.empty()) fail(n.id, "terminal node has children");
    long child_visits = 0;
    for (NodeId c : n.children) {
      if (c <= n.id || c >= static_cast<NodeId>(nodes_.size())) fail(n.id, "bad child id");
      if (nodes_[static_cast<std::size_t>(c)].parent != n.id) fail(n.id, "child has another parent");
      child_visits += nodes_[static_cast<std::size_t>(c)].visit_count;
    }
    if (child_visits > n.visit_count) fail(n.id, "children visits exceed parent visits");
  }
}

nlohmann::ordered_json SearchTree::to_json() const {
  nlohmann::ordered_json j;
  j["problem_id"] = problem_id_;
  auto& arr = j["nodes"] = nlohmann::ordered_json::array();
  for (const auto& n : nodes_) {
    nlohmann::ordered_json o;
    o["id"] = n.id;
    o["parent"] = n.parent;
    o["step_content"] = n.step_content;
    o["children"] = n.children;
    o["visit_count"] = n.visit_count;
    o["value"] = n.value;
    o["prm_value"] = n.prm_value;
    o["depth"] = n.depth;
    o["terminal"] = n.terminal;
    o["fully_expanded"] = n.fully_expanded;
    o["answer"] = n.answer;
    o["correct"] = n.correct ? nlohmann::ordered_json(*n.correct) : nlohmann::ordered_json();
    arr.push_back(std::move(o));
  }
  return j;
}

SearchTree SearchTree::from_json(const nlohmann::json& j) {
  SearchTree t;
  t.problem_id_ = j.at("problem_id").get<std::string>();
  for (const auto& o : j.at("nodes")) {
    SearchNode n;
    n.id = o.at("id").get<NodeId>();
    n.parent = o.at("parent").get<NodeId>();
    n.step_content = o.at("step_content").get<std::string>();
    n.children = o.at("children").get<std::vector<NodeId>>();
    n.visit_count = o.at("visit_count").get<int>();
    n.value = o.at("value").get<double>();
    n.prm_value = o.at("prm_value").get<double>();
    n.depth = o.at("depth").get<int>();
    n.terminal = o.at("terminal").get<bool>();
    n.fully_expanded = o.at("fully_expanded").get<bool>();
    n.answer = o.value("answer", std::string());
    if (o.contains("correct") && !o.at("correct").is_null()) n.correct = o.at("correct").get<bool>();
    t.nodes_.push_back(std::move(n));
  }
  t.check_well_formed();
  return t;
}

// ---------------------------------------------------------------------------
// SearchConfig

void SearchConfig::validate() const {
  if (num_rollouts < 1) throw DomainError("num_rollouts must be >= 1");
  if (!(exploration_weight >= 0.0)) throw DomainError("exploration_weight must be >= 0");
  if (!(tau_pos > 0.0 && tau_pos <= 1.0)) throw DomainError("tau_pos must lie in (0,1]");
  if (!(tau_neg >= 0.0 && tau_neg < 1.0)) throw DomainError("tau_neg must lie in [0,1)");
  if (!(tau_neg < tau_pos)) throw DomainError("tau_neg must be < tau_pos");
  if (max_depth < 1) throw DomainError("max_depth must be >= 1");
  if (max_children < 1) throw DomainError("max_children must be >= 1");
  if (max_hints < 1) throw DomainError("max_hints must be >= 1");
  if (memory_capacity < 1) throw DomainError("memory_capacity must be >= 1");
  if (workers < 1) throw DomainError("workers must be >= 1");
}

nlohmann::ordered_json SearchConfig::to_json() const {
  nlohmann::ordered_json j;
  j["num_rollouts"] = num_rollouts;
  j["exploration_weight"] = exploration_weight;
  j["tau_pos"] = tau_pos;
  j["tau_neg"] = tau_neg;
  j["max_depth"] = max_depth;
  j["max_children"] = max_children;
  j["seed"] = seed;
  j["memory_mode"] = mode_name(memory_mode);
  j["uct_times_two"] = uct_times_two;
  j["max_hints"] = max_hints;
  j["memory_capacity"] = memory_capacity;
  j["workers"] = workers;
  return j;
}

SearchConfig SearchConfig::from_json(const nlohmann::json& j, SearchConfig c) {
  c.num_rollouts = j.value("num_rollouts", c.num_rollouts);
  c.exploration_weight = j.value("exploration_weight", c.exploration_weight);
  c.tau_pos = j.value("tau_pos", c.tau_pos);
  c.tau_neg = j.value("tau_neg", c.tau_neg);
  c.max_depth = j.value("max_depth", c.max_depth);
  c.max_children = j.value("max_children", c.max_children);
  c.seed = j.value("seed", c.seed);
  if (j.contains("memory_mode")) c.memory_mode = parse_mode(j.at("memory_mode").get<std::string>());
  c.uct_times_two = j.value("uct_times_two", c.uct_times_two);
  c.max_hints = j.value("max_hints", c.max_hints);
  c.memory_capacity = j.value("memory_capacity", c.memory_capacity);
  c.workers = j.value("workers", c.workers);
  c.validate();
  return c;
}

SearchConfig SearchConfig::from_json(const nlohmann::json& j) { return from_json(j, SearchConfig{}); }

// ---------------------------------------------------------------------------
// Selection

double uct_score(const SearchNode& node, int parent_visits, double epsilon, bool times_two) {
  if (parent_visits < 1) throw DomainError("uct_score: parent_visits must be >= 1");
  if (node.visit_count <= 0) return std::numeric_limits<double>::infinity();
  double log_term = std::log(static_cast<double>(parent_visits));
  if (times_two) log_term *= 2.0;
  return node.value + epsilon * std::sqrt(log_term / node.visit_count);
}

namespace {

NodeId best_uct_child(const SearchTree& tree, const SearchNode& n, double epsilon, bool times_two) {
  const int parent_visits = std::max(n.visit_count, 1);
  NodeId best = n.children.front();
  double best_score = -std::numeric_limits<double>::infinity();
  for (NodeId c : n.children) {
    double s = uct_score(tree.node(c), parent_visits, epsilon, times_two);
    if (s > best_score) {
      best = c;
      best_score = s;
    }
  }
  return best;
}

}  // namespace

NodeId select_leaf(const SearchTree& tree, double epsilon, bool times_two) {
  NodeId cur = tree.root();
  while (true) {
    const SearchNode& n = tree.node(cur);
    if (n.is_leaf() || !n.fully_expanded) return cur;
    cur = best_uct_child(tree, n, epsilon, times_two);
  }
}

// ---------------------------------------------------------------------------
// Expansion

std::vector<NodeId> expand(SearchContext& ctx, NodeId node_id, const MemoryDigest& digest) {
  std::vector<std::string> prefix;
  std::vector<std::string> existing;
  int remaining = 0;
  {
    auto lock = lock_tree(ctx);
    if (ctx.sync) {
      ctx.sync->expanded.wait(lock, [&] { return !ctx.sync->expanding.contains(node_id); });
    }
    const SearchNode& n = ctx.tree.node(node_id);
    if (n.terminal || n.fully_expanded) {
      // Another worker finished this node while we waited.
      if (ctx.sync) return {};
      throw DomainError("expand: node " + std::to_string(node_id) +
                        " is terminal or fully expanded");
    }
    prefix = ctx.tree.path_steps(node_id);
    for (NodeId c : n.children) existing.push_back(ctx.tree.node(c).step_content);
    remaining = ctx.config.max_children - static_cast<int>(n.children.size());
    if (ctx.sync) ctx.sync->expanding.insert(node_id);
  }

  auto release = [&] {
    if (!ctx.sync) return;
    ctx.sync->expanding.erase(node_id);
    ctx.sync->expanded.notify_all();
  };

  struct Scored {
    std::string content;
    PrmScore score;
    bool terminal = false;
    std::string answer;
  };
  std::vector<Scored> accepted;
  std::vector<std::string> pruned;
  bool exhausted = true;

  try {
    if (remaining > 0) {
      const bool prune = fallacies_enabled(ctx.config.memory_mode);
      ExpansionRequest req{ctx.problem, prefix, digest, remaining, existing};
      Proposal proposal;
      try {
        proposal = ctx.policy.propose(req);
      } catch (const std::exception& e) {
        throw BackendError(std::string("policy failed: ") + e.what(), ctx.rollout);
      }
      exhausted = proposal.exhausted;

      std::unordered_set<std::string> seen;
      for (const auto& s : existing) seen.insert(normalize_key(s));
      for (auto& cand : proposal.steps) {
        if (static_cast<int>(accepted.size()) >= remaining) break;
        std::string key = normalize_key(cand);
        if (key.empty() || !seen.insert(key).second) continue;
        if (prune && digest.fallacy_blocklist.contains(key)) {
          pruned.push_back(std::move(cand));
          continue;
        }
        Scored s;
        try {
          s.score = score_step(ctx.problem, prefix, cand, ctx.prm);
        } catch (const BackendError& e) {
          throw BackendError(e.what(), ctx.rollout);
        }
        std::vector<std::string> path = prefix;
        path.push_back(cand);
        const int depth = static_cast<int>(path.size());
        s.terminal = depth >= ctx.config.max_depth || ctx.policy.is_terminal(ctx.problem, path);
        if (s.terminal) s.answer = ctx.policy.extract_answer(ctx.problem, path);
        s.content = std::move(cand);
        accepted.push_back(std::move(s));
      }
    }
  } catch (...) {
    auto lock = lock_tree(ctx);
    release();
    throw;
  }

  std::vector<NodeId> attached;
  auto lock = lock_tree(ctx);
  for (std::size_t i = 0; i < pruned.size(); ++i) {
    log_event(ctx, EventPhase::prune, node_id, 0.0, "blocked");
  }
  for (auto& s : accepted) {
    NodeId id = ctx.tree.add_child(node_id, std::move(s.content), s.score.value);
    SearchNode& child = ctx.tree.node(id);
    if (s.terminal) {
      child.terminal = true;
      child.fully_expanded = true;
      child.answer = std::move(s.answer);
    }
    attached.push_back(id);
    log_event(ctx, EventPhase::expand, id, child.prm_value);
  }
  SearchNode& n = ctx.tree.node(node_id);
  if (exhausted || static_cast<int>(n.children.size()) >= ctx.config.max_children) {
    n.fully_expanded = true;
  }
  if (n.children.empty()) {
    try {
      mark_terminal(ctx, n, prefix);
    } catch (...) {
      release();
      throw;
    }
  }
  release();
  return attached;
}

// ---------------------------------------------------------------------------
// Simulation

NodeId simulate(SearchContext& ctx, NodeId start, const MemoryDigest&digest) {
  const bool write_h = heuristics_enabled(ctx.config.memory_mode);
  const bool write_f = fallacies_enabled(ctx.config.memory_mode);
  const double tau_pos = ctx.config.tau_pos;
  const double tau_neg = ctx.config.tau_neg;

  NodeId cur = start;
  while (true) {
    bool needs_expand = false;
    {
      auto lock = lock_tree(ctx);
      SearchNode& n = ctx.tree.node(cur);
      if (n.terminal) return cur;
      if (n.depth >= ctx.config.max_depth) {
        mark_terminal(ctx, n, ctx.tree.path_steps(cur));
        return cur;
      }
      needs_expand = !n.fully_expanded;
    }
    if (needs_expand) expand(ctx, cur, digest);

    struct ChildView {
      NodeId id;
      std::string content;
      double prm_value;
    };
    std::vector<ChildView> kids;
    {
      auto lock = lock_tree(ctx);
      SearchNode& n = ctx.tree.node(cur);
      if (n.terminal) return cur;
      if (n.children.empty()) {
        mark_terminal(ctx, n, ctx.tree.path_steps(cur));
        return cur;
      }
      for (NodeId c : n.children) {
        const SearchNode& k = ctx.tree.node(c);
        kids.push_back({c, k.step_content, k.prm_value});
      }
    }

    std::vector<std::pair<NodeId, std::string>> writes;
    for (const auto& k : kids) {
      if (write_h && k.prm_value >= tau_pos) {
        auto a = ctx.memory.store(make_entry(ctx.problem.problem_id, k.content, k.prm_value,
                                             MemoryKind::heuristic, {ctx.rollout, k.id}));
        writes.emplace_back(k.id, std::string("heuristic:") + action_name(a));
      }
      if (write_f && k.prm_value <= tau_neg) {
        auto a = ctx.memory.store(make_entry(ctx.problem.problem_id, k.content, k.prm_value,
                                             MemoryKind::fallacy, {ctx.rollout, k.id}));
        writes.emplace_back(k.id, std::string("fallacy:") + action_name(a));
      }
    }

    // Highest prm_value, lowest index on ties.
    const ChildView* best = &kids.front();
    for (const auto& k : kids) {
      if (k.prm_value > best->prm_value) best = &k;
    }

    auto lock = lock_tree(ctx);
    for (auto& [id, action] : writes) {
      log_event(ctx, EventPhase::memory, id, ctx.tree.node(id).prm_value, std::move(action));
    }
    log_event(ctx, EventPhase::simulate, best->id, best->prm_value);
    cur = best->id;
  }
}

// ---------------------------------------------------------------------------
// Backpropagation and metrics

void backpropagate(SearchTree& tree, NodeId terminal, double outcome_value) {
  if (!(outcome_value >= 0.0 && outcome_value <= 1.0)) {
    throw DomainError("backpropagate: outcome outside [0,1]");
  }
  for (NodeId id : tree.path_nodes(terminal)) {
    SearchNode& n = tree.node(id);
    n.visit_count += 1;
    n.value += (outcome_value - n.value) / n.visit_count;
    n.value = std::clamp(n.value, 0.0, 1.0);
  }
}

StructuralMetrics structural_metrics(const SearchTree& tree) {
  StructuralMetrics m;
  long depth_sum = 0;
  for (const auto& n : tree.nodes()) {
    if (!n.terminal) continue;
    ++m.trajectories;
    depth_sum += n.depth;
  }
  if (m.trajectories > 0) m.mean_depth = static_cast<double>(depth_sum) / m.trajectories;
  return m;
}

std::string answer_of(const SearchTree& tree) {
  struct Group {
    double weight = 0.0;
    NodeId first = kNoNode;
  };
  std::map<std::string, Group> groups;
  for (const auto& n : tree.nodes()) {
    if (!n.terminal) continue;
    Group& g = groups[n.answer];
    if (g.first == kNoNode) g.first = n.id;
    g.weight += n.value * n.visit_count;
  }
  if (groups.empty()) throw DomainError("answer_of: tree has no terminal node");
  const std::string* best = nullptr;
  const Group* best_group = nullptr;
  for (const auto& [answer, g] : groups) {
    if (!best_group || g.weight > best_group->weight ||
        (g.weight == best_group->weight && g.first < best_group->first)) {
      best = &answer;
      best_group = &g;
    }
  }
  return *best;
}

void mark_correctness(SearchTree& tree, const std::string& expected_answer) {
  for (NodeId id : tree.terminals()) {
    SearchNode& n = tree.node(id);
    n.correct = n.answer == expected_answer;
  }
}

// ---------------------------------------------------------------------------
// Events

const char* phase_name(EventPhase p) {
  switch (p) {
    case EventPhase::select: return "select";
    case EventPhase::expand: return "expand";
    case EventPhase::prune: return "prune";
    case EventPhase::memory: return "memory";
    case EventPhase::simulate: return "simulate";
    case EventPhase::backprop: return "backprop";
    case EventPhase::error: return "error";
  }
  return "error";
}

nlohmann::ordered_json SearchEvent::to_json() const {
  nlohmann::ordered_json j;
  j["rollout"] = rollout;
  j["phase"] = phase_name(phase);
  j["node_id"] = node_id;
  j["value"] = value;
  j["memory_action"] = memory_action;
  return j;
}

std::string events_to_jsonl(const EventLog& log) {
  std::string out;
  for (const auto& e : log) {
    out += e.to_json().dump();
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Outer loop

namespace {

MemoryDigest masked_snapshot(const MemoryStore& store, const Problem& problem,
                             const SearchConfig& config) {
  MemoryDigest d = store.snapshot(problem.problem_id, config.max_hints);
  if (!heuristics_enabled(config.memory_mode)) d.heuristic_hints.clear();
  if (!fallacies_enabled(config.memory_mode)) d.fallacy_blocklist.clear();
  return d;
}

void run_rollout(SearchContext& ctx, const MemoryDigest& digest) {
  NodeId leaf;
  {
    auto lock = lock_tree(ctx);
    leaf = select_leaf(ctx.tree, ctx.config.exploration_weight, ctx.config.uct_times_two);
    log_event(ctx, EventPhase::select, leaf, ctx.tree.node(leaf).value);
  }
  bool needs_expand;
  {
    auto lock = lock_tree(ctx);
    const SearchNode& n = ctx.tree.node(leaf);
    needs_expand = !n.terminal && !n.fully_expanded;
  }
  if (needs_expand) expand(ctx, leaf, digest);
  NodeId terminal = simulate(ctx, leaf, digest);

  auto lock = lock_tree(ctx);
  const double outcome = ctx.tree.node(terminal).prm_value;
  backpropagate(ctx.tree, terminal, outcome);
  log_event(ctx, EventPhase::backprop, terminal, outcome);
}

}  // namespace

SearchResult run_search(const Problem& problem, const SearchConfig& config, PolicyBackend& policy,
                        PrmBackend& prm, MemoryStore* memory) {
  config.validate();
  std::unique_ptr<MemoryStore> local;
  if (!memory) {
    local = std::make_unique<MemoryStore>(MemoryThresholds{config.tau_pos, config.tau_neg},
                                          config.memory_capacity);
    memory = local.get();
  } else if (memory->scope() == MemoryScope::per_problem) {
    memory->clear();
  }

  SearchResult result;
  result.tree = SearchTree(problem.problem_id, problem.statement);
  if (policy.is_terminal(problem, {})) {
    SearchNode& root = result.tree.node(0);
    root.terminal = true;
    root.fully_expanded = true;
    root.answer = policy.extract_answer(problem, {});
  }
  result.digests.resize(static_cast<std::size_t>(config.num_rollouts));

  auto one = [&](int j, TreeSync* sync, EventLog& log) {
    SearchContext ctx{problem, config, policy, prm, *memory, result.tree, &log, j, sync};
    MemoryDigest digest = masked_snapshot(*memory, problem, config);
    try {
      run_rollout(ctx, digest);
    } catch (const std::exception& e) {
      auto lock = lock_tree(ctx);
      result.errors.push_back({j, e.what()});
      log_event(ctx, EventPhase::error, kNoNode, 0.0);
    }
    auto lock = lock_tree(ctx);
    result.digests[static_cast<std::size_t>(j)] = std::move(digest);
  };

  if (config.workers <= 1) {
    for (int j = 0; j < config.num_rollouts; ++j) one(j, nullptr, result.per_rollout_log);
  } else {
    TreeSync sync;
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < config.workers; ++w) {
      pool.emplace_back([&] {
        for (int j = next++; j < config.num_rollouts; j = next++) {
          one(j, &sync, result.per_rollout_log);
        }
      });
    }
    for (auto& t : pool) t.join();
    std::sort(result.errors.begin(), result.errors.end(),
              [](const RolloutError& a, const RolloutError& b) { return a.rollout < b.rollout; });
  }

  StructuralMetrics m = structural_metrics(result.tree);
  result.trajectories = m.trajectories;
  result.depth = m.mean_depth;
  if (m.trajectories > 0) result.answer = answer_of(result.tree);
  result.memory_dump = memory->dump();
  return result;
}

}  // namespace prism
