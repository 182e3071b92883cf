#pragma once

#include <cstdint>
#include <string>

namespace prism {

enum class TaskFamily { arithmetic_chain, token_path, distractor_tree, external };

struct TaskParams {
  int depth = 3;
  // Number of distractor (or alternative) steps offered next to the nominal
  // one at every non-terminal state; branching = distractors + 1.
  int distractors = 2;
  std::uint64_t seed = 0;

  bool operator==(const TaskParams&) const = default;
};

// A reasoning problem. Synthetic families carry their generator parameters;
// `external` problems (remote backends) carry only statement and answer.
struct Problem {
  std::string problem_id;
  std::string statement;
  std::string answer;
  TaskFamily family = TaskFamily::external;
  TaskParams params;

  bool operator==(const Problem&) const = default;
};

const char* family_name(TaskFamily f);
TaskFamily parse_family(const std::string& name);

}  // namespace prism
