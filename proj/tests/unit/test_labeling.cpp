#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "oracles.hpp"
#include "prism/errors.hpp"
#include "prism/labeling.hpp"

using namespace prism;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  auto dir = fs::temp_directory_path() / "prism_labeling_test";
  fs::create_directories(dir);
  return dir / name;
}

LabeledStep step(const std::string& context, const std::string& content, double v) {
  LabeledStep s;
  s.problem_id = "p";
  s.path_prefix = {context, content};
  s.step_index = 2;
  s.value = v;
  s.cls = class_of_value(v);
  return s;
}

}  // namespace

TEST_CASE("two-step chain to a correct terminal") {
  SearchTree t("p", "root");
  NodeId a = t.add_child(0, "a", 0);
  NodeId b = t.add_child(a, "b", 0);
  t.node(b).terminal = true;
  t.node(b).correct = true;
  auto labels = label_tree(t);
  REQUIRE(labels.size() == 2);
  CHECK(labels[0].distance == 1);
  CHECK(labels[0].weight == 0.5);
  CHECK(labels[0].value == 0.5);
  CHECK(labels[1].distance == 0);
  CHECK(labels[1].weight == 0.5);
  CHECK(labels[1].value == 1.0);
  CHECK(labels[1].cls == ValueClass::Perfect);
}

TEST_CASE("step_weight examples and domain") {
  CHECK(step_weight(0.0, 0, 0) == 1.0);
  CHECK(step_weight(0.5, 1, 0) == 0.25);
  CHECK(step_weight(0.5, 1, 1) == -0.25);
  CHECK(step_weight(0.4, std::nullopt, 1) == doctest::Approx(-0.6));
  CHECK(next_value(0.4, -0.6) == doctest::Approx(0.0));
  CHECK(next_value(0.1, -0.5) == 0.0);
  CHECK_THROWS_AS(step_weight(0.4, std::nullopt, 0), DomainError);
  CHECK_THROWS_AS(step_weight(1.5, 0, 0), DomainError);
  CHECK_THROWS_AS(step_weight(0.5, 0, 2), DomainError);
}

TEST_CASE("wrong sibling of a correct terminal") {
  SearchTree t("p", "root");
  NodeId good = t.add_child(0, "good", 0);
  NodeId bad = t.add_child(0, "bad", 0);
  t.node(good).terminal = true;
  t.node(good).correct = true;
  t.node(bad).terminal = true;
  t.node(bad).correct = false;
  auto labels = label_tree(t);
  CHECK(labels[0].value == 1.0);
  CHECK(labels[1].value == 0.0);
  CHECK(labels[1].error_flag == 1);
  auto pairs = extract_preference_pairs(labels);
  REQUIRE(pairs.size() == 1);
  CHECK(pairs[0].preferred == "good");
  CHECK(pairs[0].dispreferred == "bad");
  CHECK(pairs[0].context.empty());
}

TEST_CASE("distances match breadth-first search on random trees") {
  std::mt19937_64 rng(40);
  for (int trial = 0; trial < 40; ++trial) {
    SearchTree t = oracle::random_tree_n(rng, 40);
    std::bernoulli_distribution coin(0.3);
    for (NodeId id : t.terminals()) t.node(id).correct = coin(rng);
    auto dist = reasoning_distances(t);
    for (std::size_t i = 0; i < t.size(); ++i) {
      CHECK(dist[i] == oracle::bfs_distance(t, static_cast<NodeId>(i)));
    }
  }
}

TEST_CASE("labels match the recursive oracle on random trees") {
  std::mt19937_64 rng(123);
  for (int trial = 0; trial < 200; ++trial) {
    SearchTree t = oracle::random_marked_tree(rng);
    auto labels = label_tree(t);
    auto expected = oracle::recursive_labels(t);
    REQUIRE(labels.size() == t.size() - 1);
    for (const auto& l : labels) {
      const auto& e = expected.at(l.node_id);
      CHECK(l.value == e.v);
      CHECK(l.weight == e.w);
      CHECK(l.distance == e.m);
      CHECK(l.error_flag == e.r);
      CHECK(l.value >= 0.0);
      CHECK(l.value <= 1.0);
      CHECK(l.cls == oracle::interval_scan(l.value));
    }
    CHECK(extract_preference_pairs(labels).size() == oracle::brute_force_pair_count(t, expected));
    CHECK(extract_class_examples(labels).size() == labels.size());
  }
}

TEST_CASE("pair extraction examples") {
  CHECK(extract_preference_pairs({step("c", "a", 0.9), step("c", "b", 0.1)}).size() == 1);
  CHECK(extract_preference_pairs(
            {step("c", "a", 0.9), step("c", "b", 0.85), step("c", "x", 0.1), step("c", "y", 0.15)})
            .size() == 4);
  CHECK(extract_preference_pairs({step("c", "a", 0.5), step("c", "b", 0.6)}).empty());
  // Siblings only: same values under different contexts do not pair.
  CHECK(extract_preference_pairs({step("c1", "a", 0.9), step("c2", "b", 0.1)}).empty());
  // Boundaries are inclusive.
  CHECK(extract_preference_pairs({step("c", "a", 0.8), step("c", "b", 0.2)}).size() == 1);
}

TEST_CASE("an all-wrong tree yields no pairs") {
  SearchTree t("p", "root");
  for (int i = 0; i < 3; ++i) {
    NodeId c = t.add_child(0, "c" + std::to_string(i), 0);
    t.node(c).terminal = true;
    t.node(c).correct = false;
  }
  auto labels = label_tree(t);
  CHECK(extract_preference_pairs(labels).empty());
  for (const auto& l : labels) CHECK(l.value == 0.0);
}

TEST_CASE("JSONL round trip") {
  std::mt19937_64 rng(500);
  std::uniform_real_distribution<double> hi(0.8, 1.0), lo(0.0, 0.2), any(0.0, 1.0);
  std::vector<PreferencePair> pairs;
  std::vector<ClassExample> classes;
  for (int i = 0; i < 500; ++i) {
    std::vector<std::string> ctx;
    for (int k = 0; k < i % 4; ++k) ctx.push_back("step \"" + std::to_string(k) + "\"\tä");
    pairs.push_back({"p" + std::to_string(i), ctx, "yes " + std::to_string(i), "no", hi(rng), lo(rng)});
    const double v = any(rng);
    classes.push_back({"p" + std::to_string(i), ctx, "s\n" + std::to_string(i), class_of_value(v), v});
  }
  auto pp = temp_file("pairs.jsonl");
  auto cp = temp_file("classes.jsonl");
  export_jsonl(pairs, pp, "abc123");
  export_jsonl(classes, cp);
  CHECK(import_pairs_jsonl(pp) == pairs);
  CHECK(import_class_jsonl(cp) == classes);

  // One record per line, newline-terminated.
  std::ifstream in(cp, std::ios::binary);
  std::string content((std::istreambuf_iterator<char>(in)), {});
  CHECK(std::count(content.begin(), content.end(), '\n') == 500);
  CHECK(content.back() == '\n');
}

TEST_CASE("JSONL schema errors carry the line number") {
  auto path = temp_file("bad.jsonl");
  {
    std::ofstream out(path);
    out << R"({"problem_id":"p","context":[],"chosen":"a","rejected":"b","v_pos":0.9,"v_neg":0.1})" << '\n';
    out << R"({"problem_id":"p","context":[],"chosen":"a"})" << '\n';
  }
  try {
    import_pairs_jsonl(path);
    FAIL("expected SchemaError");
  } catch (const SchemaError& e) {
    CHECK(e.line() == 2);
  }
  {
    std::ofstream out(path);
    out << R"({"problem_id":"p","context":[],"step":"a","label":"Good","value":0.1})" << '\n';
  }
  CHECK_THROWS_AS(import_class_jsonl(path), SchemaError);
  {
    std::ofstream out(path);
    out << "not json\n";
  }
  CHECK_THROWS_AS(import_class_jsonl(path), SchemaError);
  {
    std::ofstream out(path);
  }
  CHECK(import_pairs_jsonl(path).empty());
  CHECK_THROWS_AS(import_pairs_jsonl(temp_file("missing.jsonl")), IoError);
}
