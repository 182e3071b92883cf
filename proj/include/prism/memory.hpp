#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace prism {

enum class MemoryKind { heuristic, fallacy };

enum class StoreAction { stored, deduplicated, evicted };

// Whether each store participates in a search. Maps onto the ablation
// configurations: full, without heuristics, without fallacies, without both.
enum class MemoryMode { full, no_heuristics, no_fallacies, none };

enum class MemoryScope { per_problem, persistent };

const char* kind_name(MemoryKind k);
const char* action_name(StoreAction a);
const char* mode_name(MemoryMode m);
MemoryMode parse_mode(std::string_view name);
bool heuristics_enabled(MemoryMode m) noexcept;
bool fallacies_enabled(MemoryMode m) noexcept;

// Whitespace-collapsed, trimmed, ASCII case-folded form of a step.
std::string normalize_key(std::string_view step_content);

struct MemorySource {
  int rollout = -1;
  int node_id = -1;
};

struct MemoryEntry {
  std::string problem_id;
  std::string step_content;
  std::string normalized_key;
  double value = 0.0;
  MemoryKind kind = MemoryKind::heuristic;
  MemorySource source;
  std::uint64_t created_seq = 0;  // assigned by the store
};

// Builds an entry with its normalized key filled in.
MemoryEntry make_entry(std::string problem_id, std::string step_content, double value,
                       MemoryKind kind, MemorySource source = {});

// Immutable view of one problem's memory at a point in time.
struct MemoryDigest {
  std::vector<std::string> heuristic_hints;  // value descending, ties by created_seq
  std::set<std::string> fallacy_blocklist;   // normalized keys
  std::uint64_t digest_seq = 0;  // store version (last created_seq) at snapshot time

  bool empty() const noexcept { return heuristic_hints.empty() && fallacy_blocklist.empty(); }
};

bool is_blocked(const MemoryDigest& digest, std::string_view candidate);

struct MemoryThresholds {
  double tau_pos = 0.8;
  double tau_neg = 0.2;
};

inline constexpr std::size_t kDefaultCapacityPerKind = 64;
inline constexpr std::size_t kDefaultMaxHints = 5;

// Dual heuristics/fallacies store with the manager rules applied on every
// write: normalized-key dedup keeping the more extreme value, and capacity
// eviction of the least extreme entry (oldest first on ties). Capacity is
// enforced per kind and per problem. All operations are thread-safe.
class MemoryStore {
 public:
  explicit MemoryStore(MemoryThresholds thresholds = {},
                       std::size_t capacity_per_kind = kDefaultCapacityPerKind,
                       MemoryScope scope = MemoryScope::per_problem);

  MemoryStore(const MemoryStore&) = delete;
  MemoryStore& operator=(const MemoryStore&) = delete;

  // Throws DomainError if the entry violates its kind's threshold.
  StoreAction store(MemoryEntry entry);

  MemoryDigest snapshot(const std::string& problem_id,
                        std::size_t max_hints = kDefaultMaxHints) const;

  // Entries of one kind across all problems, sorted by created_seq.
  std::vector<MemoryEntry> entries(MemoryKind kind) const;
  std::size_t size(MemoryKind kind, const std::string& problem_id) const;

  // Drops all entries; per_problem searches call this before starting.
  void clear();

  const MemoryThresholds& thresholds() const noexcept { return thresholds_; }
  std::size_t capacity_per_kind() const noexcept { return capacity_; }
  MemoryScope scope() const noexcept { return scope_; }

  // {"heuristics": [...], "fallacies": [...]} sorted by created_seq.
  nlohmann::ordered_json dump() const;

 private:
  using Bucket = std::map<std::string, MemoryEntry>;  // normalized_key -> entry
  Bucket& bucket(MemoryKind kind, const std::string& problem_id);

  MemoryThresholds thresholds_;
  std::size_t capacity_;
  MemoryScope scope_;

  mutable std::mutex mu_;
  std::map<std::string, Bucket> heuristics_;  // by problem_id
  std::map<std::string, Bucket> fallacies_;
  std::uint64_t next_seq_ = 1;
};

nlohmann::ordered_json entry_to_json(const MemoryEntry& e);

}  // namespace prism
