#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>
#include <set>

#include "prism/errors.hpp"
#include "prism/labeling.hpp"
#include "prism/tasks.hpp"

using namespace prism;

namespace {

constexpr TaskFamily kFamilies[] = {TaskFamily::arithmetic_chain, TaskFamily::token_path,
                                    TaskFamily::distractor_tree};

// Every complete path, by exhaustive enumeration.
std::vector<std::vector<std::string>> all_paths(const Problem& p) {
  std::vector<std::vector<std::string>> out;
  std::vector<std::string> path;
  std::function<void()> go = [&] {
    if (tasks::is_complete(p, path)) {
      out.push_back(path);
      return;
    }
    for (const auto& s : tasks::legal_steps(p, path)) {
      path.push_back(s);
      go();
      path.pop_back();
    }
  };
  go();
  return out;
}

// Whether some completion of `prefix` ends at the answer, by enumeration.
bool reachable(const Problem& p, std::vector<std::string>& prefix) {
  if (tasks::is_complete(p, prefix)) return tasks::answer_for(p, prefix) == p.answer;
  for (const auto& s : tasks::legal_steps(p, prefix)) {
    prefix.push_back(s);
    const bool ok = reachable(p, prefix);
    prefix.pop_back();
    if (ok) return true;
  }
  return false;
}

}  // namespace

TEST_CASE("generation is deterministic in the seed") {
  for (TaskFamily f : kFamilies) {
    auto a = tasks::generate(f, {3, 2, 0}, 42);
    auto b = tasks::generate(f, {3, 2, 0}, 42);
    CHECK(a == b);
    CHECK(a.family == f);
    CHECK(a.params.seed == 42);
    CHECK_FALSE(a.statement.empty());
    int differs = 0;
    for (std::uint64_t s = 1; s <= 10; ++s) differs += tasks::generate(f, {3, 2, 0}, s).statement != a.statement;
    CHECK(differs >= 9);
  }
}

TEST_CASE("invalid parameters are rejected") {
  CHECK_THROWS_AS(tasks::generate(TaskFamily::arithmetic_chain, {0, 2, 0}, 1), DomainError);
  CHECK_THROWS_AS(tasks::generate(TaskFamily::token_path, {3, -1, 0}, 1), DomainError);
  CHECK_THROWS_AS(tasks::generate(TaskFamily::external, {3, 2, 0}, 1), DomainError);
}

TEST_CASE("branching and leaf counts") {
  for (TaskFamily f : kFamilies) {
    auto p = tasks::generate(f, {3, 2, 0}, 9);
    CHECK(tasks::legal_steps(p, {}).size() == 3);
    CHECK(all_paths(p).size() == 27);
    auto one = tasks::generate(f, {2, 0, 0}, 9);
    CHECK(all_paths(one).size() == 1);
  }
}

TEST_CASE("legal_steps edge cases") {
  auto p = tasks::generate(TaskFamily::arithmetic_chain, {2, 2, 0}, 3);
  auto paths = all_paths(p);
  CHECK(tasks::legal_steps(p, paths.front()).empty());
  std::vector<std::string> bogus{"not a step"};
  CHECK_THROWS_AS(tasks::legal_steps(p, bogus), DomainError);
}

TEST_CASE("every problem has a correct path whose steps score 1 at the end") {
  std::mt19937_64 rng(100);
  for (TaskFamily f : kFamilies) {
    for (int i = 0; i < 100; ++i) {
      auto p = tasks::generate(f, {3, 2, 0}, rng());
      std::vector<std::string> path;
      bool found = false;
      for (const auto& full : all_paths(p)) {
        if (tasks::answer_for(p, full) == p.answer) {
          path = full;
          found = true;
          break;
        }
      }
      REQUIRE(found);
      std::vector<std::string> prefix(path.begin(), path.end() - 1);
      auto v = tasks::oracle(p, prefix, path.back());
      CHECK(v.value == 1.0);
      CHECK(v.on_correct_path);
      CHECK(v.remaining_steps == 0);
    }
  }
}

TEST_CASE("arithmetic chains have a single correct path") {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 50; ++i) {
    auto p = tasks::generate(TaskFamily::arithmetic_chain, {3, 2, 0}, rng());
    int correct = 0;
    for (const auto& path : all_paths(p)) correct += tasks::answer_for(p, path) == p.answer;
    CHECK(correct == 1);
  }
}

TEST_CASE("lures recur with identical text at every level") {
  auto p = tasks::generate(TaskFamily::distractor_tree, {3, 2, 0}, 11);
  std::vector<std::string> prefix;
  std::set<std::string> lures_at_root;
  for (const auto& s : tasks::legal_steps(p, prefix)) {
    if (!tasks::oracle(p, prefix, s).on_correct_path) lures_at_root.insert(s);
  }
  CHECK(lures_at_root.size() == 2);
  // Follow the correct step and check the same lure text is offered again.
  for (const auto& s : tasks::legal_steps(p, prefix)) {
    if (tasks::oracle(p, prefix, s).on_correct_path) {
      prefix.push_back(s);
      break;
    }
  }
  REQUIRE(prefix.size() == 1);
  std::set<std::string> next;
  for (const auto& s : tasks::legal_steps(p, prefix)) {
    if (!tasks::oracle(p, prefix, s).on_correct_path) next.insert(s);
  }
  CHECK(next == lures_at_root);
}

TEST_CASE("oracle verdicts agree with brute-force reachability") {
  std::mt19937_64 rng(21);
  for (TaskFamily f : kFamilies) {
    for (int i = 0; i < 20; ++i) {
      auto p = tasks::generate(f, {3, 2, 0}, rng());
      std::function<void(std::vector<std::string>&)> walk = [&](std::vector<std::string>& prefix) {
        for (const auto& s : tasks::legal_steps(p, prefix)) {
          auto v = tasks::oracle(p, prefix, s);
          prefix.push_back(s);
          const bool ok = reachable(p, prefix);
          CHECK(v.on_correct_path == ok);
          if (ok) CHECK(v.remaining_steps == 3 - static_cast<int>(prefix.size()));
          CHECK(v.value >= 0.0);
          CHECK(v.value <= 1.0);
          walk(prefix);
          prefix.pop_back();
        }
      };
      std::vector<std::string> root;
      walk(root);
    }
  }
}

TEST_CASE("oracle values equal labels of the fully enumerated tree") {
  std::mt19937_64 rng(3);
  for (TaskFamily f : kFamilies) {
    for (int i = 0; i < 10; ++i) {
      auto p = tasks::generate(f, {3, 2, 0}, rng());
      SearchTree t(p.problem_id, p.statement);
      std::function<void(NodeId)> grow = [&](NodeId id) {
        auto prefix = t.path_steps(id);
        if (tasks::is_complete(p, prefix)) {
          t.node(id).terminal = true;
          t.node(id).answer = tasks::answer_for(p, prefix);
          return;
        }
        for (const auto& s : tasks::legal_steps(p, prefix)) grow(t.add_child(id, s, 0.0));
      };
      grow(0);
      mark_correctness(t, p.answer);
      for (const auto& l : label_tree(t)) {
        auto prefix = l.context();
        CHECK(tasks::oracle(p, prefix, l.path_prefix.back()).value == l.value);
      }
    }
  }
}

TEST_CASE("noisy oracle is bounded and reproducible") {
  auto p = tasks::generate(TaskFamily::distractor_tree, {3, 2, 0}, 5);
  tasks::NoisyOraclePrm a(0.15, 7), b(0.15, 7), c(0.15, 8);
  int differs = 0;
  for (const auto& path : all_paths(p)) {
    std::vector<std::string> prefix(path.begin(), path.end() - 1);
    const double exact = tasks::oracle(p, prefix, path.back()).value;
    const double na = a.score(p, prefix, path.back()).value;
    CHECK(na == b.score(p, prefix, path.back()).value);
    CHECK(std::abs(na - exact) <= 0.15 + 1e-12);
    differs += na != c.score(p, prefix, path.back()).value;
  }
  CHECK(differs > 0);
  CHECK_THROWS_AS(tasks::NoisyOraclePrm(1.5, 0), DomainError);
}

TEST_CASE("synthetic policy moves hinted steps to the front") {
  auto p = tasks::generate(TaskFamily::token_path, {3, 2, 0}, 5);
  auto steps = tasks::legal_steps(p, {});
  MemoryDigest d;
  d.heuristic_hints = {steps.back()};
  tasks::SyntheticPolicy policy;
  auto prop = policy.propose({p, {}, d, 3, {}});
  REQUIRE(prop.steps.size() == 3);
  CHECK(prop.steps.front() == steps.back());
  CHECK(prop.exhausted);
  auto partial = policy.propose({p, {}, MemoryDigest{}, 2, {}});
  CHECK(partial.steps.size() == 2);
  CHECK_FALSE(partial.exhausted);
  std::vector<std::string> existing{steps[0]};
  auto rest = policy.propose({p, {}, MemoryDigest{}, 3, existing});
  CHECK(rest.steps == std::vector<std::string>(steps.begin() + 1, steps.end()));
}

TEST_CASE("suite manifest round trip") {
  auto suite = tasks::generate_suite(TaskFamily::distractor_tree, {4, 2, 0}, 12, 2024);
  REQUIRE(suite.problems.size() == 12);
  CHECK(suite.problems[3].problem_id == "distractor_tree-0003");
  auto j = tasks::suite_manifest(suite);
  auto back = tasks::load_suite(nlohmann::json::parse(j.dump()));
  CHECK(back.name == suite.name);
  CHECK(back.problems == suite.problems);

  auto tampered = nlohmann::json::parse(j.dump());
  tampered["problems"][0]["answer_hash"] = "0000000000000000";
  CHECK_THROWS_AS(tasks::load_suite(tampered), DomainError);
}
