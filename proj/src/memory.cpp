#include "prism/memory.hpp"

#include <algorithm>
#include <cctype>

#include "prism/errors.hpp"

namespace prism {

const char* kind_name(MemoryKind k) { return k == MemoryKind::heuristic ? "heuristic" : "fallacy"; }

const char* action_name(StoreAction a) {
  switch (a) {
    case StoreAction::stored: return "stored";
    case StoreAction::deduplicated: return "deduplicated";
    case StoreAction::evicted: return "evicted";
  }
  return "stored";
}

const char* mode_name(MemoryMode m) {
  switch (m) {
    case MemoryMode::full: return "full";
    case MemoryMode::no_heuristics: return "no_heuristics";
    case MemoryMode::no_fallacies: return "no_fallacies";
    case MemoryMode::none: return "none";
  }
  return "full";
}

MemoryMode parse_mode(std::string_view name) {
  if (name == "full") return MemoryMode::full;
  if (name == "no_heuristics") return MemoryMode::no_heuristics;
  if (name == "no_fallacies") return MemoryMode::no_fallacies;
  if (name == "none") return MemoryMode::none;
  throw DomainError("unknown memory mode: " + std::string(name));
}

bool heuristics_enabled(MemoryMode m) noexcept {
  return m == MemoryMode::full || m == MemoryMode::no_fallacies;
}

bool fallacies_enabled(MemoryMode m) noexcept {
  return m == MemoryMode::full || m == MemoryMode::no_heuristics;
}

std::string normalize_key(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  bool pending_space = false;
  for (unsigned char c : s) {
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

MemoryEntry make_entry(std::string problem_id, std::string step_content, double value,
                       MemoryKind kind, MemorySource source) {
  MemoryEntry e;
  e.problem_id = std::move(problem_id);
  e.normalized_key = normalize_key(step_content);
  e.step_content = std::move(step_content);
  e.value = value;
  e.kind = kind;
  e.source = source;
  return e;
}

bool is_blocked(const MemoryDigest& digest, std::string_view candidate) {
  return digest.fallacy_blocklist.contains(normalize_key(candidate));
}

namespace {

// How strongly an entry represents its kind: high values for heuristics,
// low values for fallacies.
double extremity(const MemoryEntry& e) {
  return e.kind == MemoryKind::heuristic ? e.value : -e.value;
}

}  // namespace

MemoryStore::MemoryStore(MemoryThresholds thresholds, std::size_t capacity_per_kind,
                         MemoryScope scope)
    : thresholds_(thresholds), capacity_(capacity_per_kind), scope_(scope) {
  if (capacity_ == 0) throw DomainError("memory capacity must be positive");
  if (!(thresholds_.tau_neg < thresholds_.tau_pos)) {
    throw DomainError("memory thresholds require tau_neg < tau_pos");
  }
}

MemoryStore::Bucket& MemoryStore::bucket(MemoryKind kind, const std::string& problem_id) {
  return kind == MemoryKind::heuristic ? heuristics_[problem_id] : fallacies_[problem_id];
}

StoreAction MemoryStore::store(MemoryEntry entry) {
  if (entry.kind == MemoryKind::heuristic && !(entry.value >= thresholds_.tau_pos)) {
    throw DomainError("heuristic entry below tau_pos");
  }
  if (entry.kind == MemoryKind::fallacy && !(entry.value <= thresholds_.tau_neg)) {
    throw DomainError("fallacy entry above tau_neg");
  }
  if (entry.normalized_key.empty()) entry.normalized_key = normalize_key(entry.step_content);

  std::lock_guard lock(mu_);
  Bucket& b = bucket(entry.kind, entry.problem_id);

  if (auto it = b.find(entry.normalized_key); it != b.end()) {
    if (extremity(entry) > extremity(it->second)) {
      // The surviving entry keeps its original sequence number.
      entry.created_seq = it->second.created_seq;
      it->second = std::move(entry);
    }
    return StoreAction::deduplicated;
  }

  entry.created_seq = next_seq_++;
  const std::string key = entry.normalized_key;
  b.emplace(key, std::move(entry));
  if (b.size() <= capacity_) return StoreAction::stored;

  auto victim = std::min_element(b.begin(), b.end(), [](const auto& x, const auto& y) {
    double ex = extremity(x.second), ey = extremity(y.second);
    if (ex != ey) return ex < ey;
    return x.second.created_seq < y.second.created_seq;
  });
  b.erase(victim);
  return StoreAction::evicted;
}

MemoryDigest MemoryStore::snapshot(const std::string& problem_id, std::size_t max_hints) const {
  std::lock_guard lock(mu_);
  MemoryDigest d;
  d.digest_seq = next_seq_ - 1;

  if (auto it = heuristics_.find(problem_id); it != heuristics_.end()) {
    std::vector<const MemoryEntry*> hs;
    hs.reserve(it->second.size());
    for (const auto& [key, e] : it->second) hs.push_back(&e);
    std::sort(hs.begin(), hs.end(), [](const MemoryEntry* a, const MemoryEntry* b) {
      if (a->value != b->value) return a->value > b->value;
      return a->created_seq < b->created_seq;
    });
    for (std::size_t i = 0; i < hs.size() && i < max_hints; ++i) {
      d.heuristic_hints.push_back(hs[i]->step_content);
    }
  }
  if (auto it = fallacies_.find(problem_id); it != fallacies_.end()) {
    for (const auto& [key, e] : it->second) d.fallacy_blocklist.insert(key);
  }
  return d;
}

std::vector<MemoryEntry> MemoryStore::entries(MemoryKind kind) const {
  std::lock_guard lock(mu_);
  const auto& by_problem = kind == MemoryKind::heuristic ? heuristics_ : fallacies_;
  std::vector<MemoryEntry> out;
  for (const auto& [pid, b] : by_problem) {
    for (const auto& [key, e] : b) out.push_back(e);
  }
  std::sort(out.begin(), out.end(),
            [](const MemoryEntry& a, const MemoryEntry& b) { return a.created_seq < b.created_seq; });
  return out;
}

std::size_t MemoryStore::size(MemoryKind kind, const std::string& problem_id) const {
  std::lock_guard lock(mu_);
  const auto& by_problem = kind == MemoryKind::heuristic ? heuristics_ : fallacies_;
  auto it = by_problem.find(problem_id);
  return it == by_problem.end() ? 0 : it->second.size();
}

void MemoryStore::clear() {
  std::lock_guard lock(mu_);
  heuristics_.clear();
  fallacies_.clear();
}

nlohmann::ordered_json entry_to_json(const MemoryEntry& e) {
  nlohmann::ordered_json j;
  j["problem_id"] = e.problem_id;
  j["step_content"] = e.step_content;
  j["normalized_key"] = e.normalized_key;
  j["value"] = e.value;
  j["kind"] = kind_name(e.kind);
  j["source"] = {{"rollout", e.source.rollout}, {"node_id", e.source.node_id}};
  j["created_seq"] = e.created_seq;
  return j;
}

nlohmann::ordered_json MemoryStore::dump() const {
  nlohmann::ordered_json j;
  j["heuristics"] = nlohmann::ordered_json::array();
  j["fallacies"] = nlohmann::ordered_json::array();
  for (const auto& e : entries(MemoryKind::heuristic)) j["heuristics"].push_back(entry_to_json(e));
  for (const auto& e : entries(MemoryKind::fallacy)) j["fallacies"].push_back(entry_to_json(e));
  return j;
}

}  // namespace prism
