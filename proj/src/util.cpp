#include <cstdio>
#include <string>

#include "prism/errors.hpp"
#include "prism/hash.hpp"
#include "prism/problem.hpp"

namespace prism {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

const char* family_name(TaskFamily f) {
  switch (f) {
    case TaskFamily::arithmetic_chain: return "arithmetic_chain";
    case TaskFamily::token_path: return "token_path";
    case TaskFamily::distractor_tree: return "distractor_tree";
    case TaskFamily::external: return "external";
  }
  return "external";
}

TaskFamily parse_family(const std::string& name) {
  if (name == "arithmetic_chain") return TaskFamily::arithmetic_chain;
  if (name == "token_path") return TaskFamily::token_path;
  if (name == "distractor_tree") return TaskFamily::distractor_tree;
  if (name == "external") return TaskFamily::external;
  throw DomainError("unknown task family: " + name);
}

}  // namespace prism
