#pragma once

// Reference computations used by the tests. Each one is written from the
// defining formula with a different traversal than the library uses.

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "prism/prm.hpp"
#include "prism/search.hpp"

namespace oracle {

using prism::NodeId;
using prism::SearchTree;

// Random tree with correctness-marked terminals. Every leaf is terminal; a
// leaf is correct with probability p_correct.
inline SearchTree random_marked_tree(std::mt19937_64& rng, int max_depth = 4, int max_branching = 3,
                                     double p_correct = 0.35, const std::string& pid = "rt") {
  SearchTree t(pid, "root");
  std::uniform_int_distribution<int> branch(0, max_branching);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::function<void(NodeId)> grow = [&](NodeId id) {
    const int d = t.node(id).depth;
    int k = d >= max_depth ? 0 : branch(rng);
    if (id == t.root() && k == 0) k = 1;
    for (int i = 0; i < k; ++i) {
      NodeId c = t.add_child(id, "s" + std::to_string(t.size()), u(rng));
      grow(c);
    }
    if (t.node(id).children.empty()) {
      auto& n = t.node(id);
      n.terminal = true;
      n.fully_expanded = true;
      n.correct = u(rng) < p_correct;
      n.answer = *n.correct ? "right" : "wrong";
    }
  };
  grow(t.root());
  return t;
}

// Random tree with exactly n nodes: node i attaches to a uniformly chosen
// earlier node. Leaves become terminal.
inline SearchTree random_tree_n(std::mt19937_64& rng, int n) {
  SearchTree t("rn", "root");
  for (int i = 1; i < n; ++i) {
    std::uniform_int_distribution<int> pick(0, i - 1);
    t.add_child(pick(rng), "s" + std::to_string(i), 0.5);
  }
  for (int i = 0; i < n; ++i) {
    if (t.node(i).children.empty()) t.node(i).terminal = true;
  }
  return t;
}

// Breadth-first search from `node` for the nearest correct terminal.
inline std::optional<int> bfs_distance(const SearchTree& t, NodeId node) {
  std::deque<std::pair<NodeId, int>> q{{node, 0}};
  while (!q.empty()) {
    auto [id, d] = q.front();
    q.pop_front();
    const auto& n = t.node(id);
    if (n.terminal && n.correct.value_or(false)) return d;
    for (NodeId c : n.children) q.emplace_back(c, d + 1);
  }
  return std::nullopt;
}

struct Label {
  double v = 0.0;
  double w = 0.0;
  std::optional<int> m;
  int r = 0;
};

// Top-down recursion over the labeling recurrence with v_0 = 0. Distances
// come from a separate post-order recursion.
inline std::map<NodeId, Label> recursive_labels(const SearchTree& t) {
  std::map<NodeId, std::optional<int>> dist;
  std::function<std::optional<int>(NodeId)> down = [&](NodeId id) -> std::optional<int> {
    const auto& n = t.node(id);
    std::optional<int> best;
    if (n.terminal && n.correct.value_or(false)) best = 0;
    for (NodeId c : n.children) {
      auto dc = down(c);
      if (dc && (!best || *dc + 1 < *best)) best = *dc + 1;
    }
    dist[id] = best;
    return best;
  };
  std::map<NodeId, Label> out;
  if (t.empty()) return out;
  down(t.root());
  std::function<void(NodeId, double)> walk = [&](NodeId id, double v_prev) {
    for (NodeId c : t.node(id).children) {
      Label l;
      l.m = dist[c];
      l.r = l.m ? 0 : 1;
      if (l.m) {
        l.w = (1.0 - v_prev) / (*l.m + 1) * (1 - 2 * l.r);
      } else {
        l.w = -(1.0 - v_prev);
      }
      l.v = v_prev + l.w;
      if (l.v < 0.0) l.v = 0.0;
      out[c] = l;
      walk(c, l.v);
    }
  };
  walk(t.root(), 0.0);
  return out;
}

// Number of (y+, y-) sibling pairs by direct enumeration over parents.
inline std::size_t brute_force_pair_count(const SearchTree& t, const std::map<NodeId, Label>& labels) {
  std::size_t count = 0;
  for (const auto& n : t.nodes()) {
    for (NodeId a : n.children) {
      for (NodeId b : n.children) {
        if (labels.at(a).v >= 0.8 && labels.at(b).v <= 0.2) ++count;
      }
    }
  }
  return count;
}

// Root-to-terminal paths by explicit depth-first enumeration.
inline std::pair<int, double> dfs_metrics(const SearchTree& t) {
  int paths = 0;
  long depth_sum = 0;
  std::function<void(NodeId, int)> go = [&](NodeId id, int d) {
    const auto& n = t.node(id);
    if (n.terminal) {
      ++paths;
      depth_sum += d;
    }
    for (NodeId c : n.children) go(c, d + 1);
  };
  if (!t.empty()) go(t.root(), 0);
  return {paths, paths ? static_cast<double>(depth_sum) / paths : 0.0};
}

// Linear scan over the five bins; the top bin is closed at 1.
inline prism::ValueClass interval_scan(double v) {
  struct Bin {
    double lo, hi;
    prism::ValueClass c;
  };
  static const Bin bins[] = {{0.0, 0.2, prism::ValueClass::Bad},
                             {0.2, 0.4, prism::ValueClass::Poor},
                             {0.4, 0.6, prism::ValueClass::Fair},
                             {0.6, 0.8, prism::ValueClass::Good},
                             {0.8, 1.0, prism::ValueClass::Perfect}};
  for (const auto& b : bins) {
    if (v >= b.lo && (v < b.hi || (b.hi == 1.0 && v <= 1.0))) return b.c;
  }
  throw std::domain_error("value outside [0,1]");
}

// UCT in extended precision.
inline long double uct_hp(long double v, long double n, long double parent, long double eps,
                          bool times_two = false) {
  long double lg = std::log(parent);
  if (times_two) lg *= 2.0L;
  return v + eps * std::sqrt(lg / n);
}

}  // namespace oracle
