#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "prism/prm.hpp"
#include "prism/search.hpp"

namespace prism {

// Edge count to the nearest correct terminal; nullopt means unreachable.
using Distance = std::optional<int>;

struct LabeledStep {
  std::string problem_id;
  std::vector<std::string> path_prefix;  // s_1..s_k
  int step_index = 0;                    // k
  double value = 0.0;                    // v_k
  double weight = 0.0;                   // w_{s_k}
  Distance distance;                     // m_k
  int error_flag = 0;                    // r_{s_k}
  ValueClass cls = ValueClass::Bad;
  NodeId node_id = kNoNode;
  NodeId parent_id = kNoNode;

  // Steps shared with siblings: path_prefix without its last element.
  std::vector<std::string> context() const;
};

struct PreferencePair {
  std::string problem_id;
  std::vector<std::string> context;
  std::string preferred;
  std::string dispreferred;
  double v_pos = 0.0;
  double v_neg = 0.0;

  bool operator==(const PreferencePair&) const = default;
};

struct ClassExample {
  std::string problem_id;
  std::vector<std::string> context;
  std::string step;
  ValueClass label = ValueClass::Bad;
  double value = 0.0;

  bool operator==(const ClassExample&) const = default;
};

inline constexpr double kPreferredMin = 0.8;
inline constexpr double kDispreferredMax = 0.2;

// (1 - v_prev) / (m + 1) * (1 - 2r). An unreachable step (m = nullopt) must
// have r = 1 and receives the maximal penalty -(1 - v_prev).
double step_weight(double v_prev, Distance m, int r);

// max(v_prev + w, 0).
double next_value(double v_prev, double weight) noexcept;

Distance reasoning_distance(const SearchTree& tree, NodeId node);
// Distances for every node, indexed by id.
std::vector<Distance> reasoning_distances(const SearchTree& tree);

// One LabeledStep per non-root node, in node-id order. Terminals without a
// correctness mark count as incorrect.
std::vector<LabeledStep> label_tree(const SearchTree& tree);

std::vector<PreferencePair> extract_preference_pairs(const std::vector<LabeledStep>& labels);
std::vector<ClassExample> extract_class_examples(const std::vector<LabeledStep>& labels);

nlohmann::ordered_json to_json(const PreferencePair& p);
nlohmann::ordered_json to_json(const ClassExample& c);
PreferencePair pair_from_json(const nlohmann::json& j);
ClassExample class_example_from_json(const nlohmann::json& j);

// One object per line, newline-terminated. A non-empty `header_tag` writes a
// leading {"manifest_hash": ...} record that the readers skip.
void export_jsonl(const std::vector<PreferencePair>& records, const std::filesystem::path& path,
                  const std::string& header_tag = {});
void export_jsonl(const std::vector<ClassExample>& records, const std::filesystem::path& path,
                  const std::string& header_tag = {});

// Throw SchemaError carrying the 1-based line number of the bad record.
std::vector<PreferencePair> import_pairs_jsonl(const std::filesystem::path& path);
std::vector<ClassExample> import_class_jsonl(const std::filesystem::path& path);

}  // namespace prism
