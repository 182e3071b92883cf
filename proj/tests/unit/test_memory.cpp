#include <doctest.h>

#include <algorithm>
#include <random>
#include <set>
#include <thread>

#include "prism/errors.hpp"
#include "prism/memory.hpp"

using namespace prism;

TEST_CASE("normalize_key collapses whitespace and case") {
  CHECK(normalize_key("  Step 1:   X  + 2 ") == "step 1: x + 2");
  CHECK(normalize_key("\tA\nB") == "a b");
  CHECK(normalize_key("") == "");
}

TEST_CASE("store actions") {
  MemoryStore s({0.8, 0.2}, 2);
  CHECK(s.store(make_entry("p", "a", 0.85, MemoryKind::heuristic)) == StoreAction::stored);
  CHECK(s.store(make_entry("p", "  A ", 0.95, MemoryKind::heuristic)) == StoreAction::deduplicated);
  auto d = s.snapshot("p");
  REQUIRE(d.heuristic_hints.size() == 1);
  auto entries = s.entries(MemoryKind::heuristic);
  CHECK(entries.front().value == 0.95);
  // A less extreme duplicate leaves the stored value alone.
  CHECK(s.store(make_entry("p", "a", 0.81, MemoryKind::heuristic)) == StoreAction::deduplicated);
  CHECK(s.entries(MemoryKind::heuristic).front().value == 0.95);

  CHECK_THROWS_AS(s.store(make_entry("p", "b", 0.5, MemoryKind::heuristic)), DomainError);
  CHECK_THROWS_AS(s.store(make_entry("p", "b", 0.5, MemoryKind::fallacy)), DomainError);
}

TEST_CASE("fallacy dedup keeps the lower value") {
  MemoryStore s;
  s.store(make_entry("p", "x", 0.15, MemoryKind::fallacy));
  s.store(make_entry("p", "X", 0.05, MemoryKind::fallacy));
  s.store(make_entry("p", "x", 0.19, MemoryKind::fallacy));
  CHECK(s.entries(MemoryKind::fallacy).front().value == 0.05);
}

TEST_CASE("capacity eviction removes the least extreme entry") {
  // Values {0.9, 0.85, 0.95} with capacity 2: 0.85 is least extreme.
  MemoryStore s({0.8, 0.2}, 2);
  CHECK(s.store(make_entry("p", "a", 0.9, MemoryKind::heuristic)) == StoreAction::stored);
  CHECK(s.store(make_entry("p", "b", 0.85, MemoryKind::heuristic)) == StoreAction::stored);
  CHECK(s.store(make_entry("p", "c", 0.95, MemoryKind::heuristic)) == StoreAction::evicted);
  auto hints = s.snapshot("p").heuristic_hints;
  CHECK(hints == std::vector<std::string>{"c", "a"});
  CHECK(s.size(MemoryKind::heuristic, "p") == 2);

  // Ties evict the oldest entry.
  MemoryStore t({0.8, 0.2}, 2);
  t.store(make_entry("p", "old", 0.1, MemoryKind::fallacy));
  t.store(make_entry("p", "mid", 0.1, MemoryKind::fallacy));
  t.store(make_entry("p", "new", 0.1, MemoryKind::fallacy));
  auto bl = t.snapshot("p").fallacy_blocklist;
  CHECK(bl == std::set<std::string>{"mid", "new"});
}

TEST_CASE("capacity applies per problem") {
  MemoryStore s({0.8, 0.2}, 1);
  s.store(make_entry("p", "a", 0.9, MemoryKind::heuristic));
  CHECK(s.store(make_entry("q", "a", 0.9, MemoryKind::heuristic)) == StoreAction::stored);
  CHECK(s.snapshot("p").heuristic_hints.size() == 1);
  CHECK(s.snapshot("q").heuristic_hints.size() == 1);
}

TEST_CASE("snapshot ordering, cap and isolation") {
  MemoryStore s;
  CHECK(s.snapshot("p").empty());
  s.store(make_entry("p", "a", 0.9, MemoryKind::heuristic));
  s.store(make_entry("p", "b", 0.85, MemoryKind::heuristic));
  s.store(make_entry("p", "c", 0.95, MemoryKind::heuristic));
  s.store(make_entry("p", "tie", 0.9, MemoryKind::heuristic));
  auto d = s.snapshot("p", 2);
  CHECK(d.heuristic_hints == std::vector<std::string>{"c", "a"});
  CHECK(s.snapshot("p", 3).heuristic_hints == std::vector<std::string>{"c", "a", "tie"});

  const auto before = d;
  std::thread writer([&] {
    for (int i = 0; i < 50; ++i) {
      s.store(make_entry("p", "w" + std::to_string(i), 0.99, MemoryKind::heuristic));
      s.store(make_entry("p", "f" + std::to_string(i), 0.01, MemoryKind::fallacy));
    }
  });
  writer.join();
  CHECK(d.heuristic_hints == before.heuristic_hints);
  CHECK(d.fallacy_blocklist == before.fallacy_blocklist);
  CHECK(d.digest_seq == before.digest_seq);
  CHECK(s.snapshot("p").digest_seq > d.digest_seq);
}

TEST_CASE("blocklist keys exist in the fallacy store") {
  MemoryStore s;
  s.store(make_entry("p", "Bad  Step", 0.1, MemoryKind::fallacy));
  auto d = s.snapshot("p");
  auto all = s.entries(MemoryKind::fallacy);
  for (const auto& k : d.fallacy_blocklist) {
    CHECK(std::any_of(all.begin(), all.end(), [&](const MemoryEntry& e) { return e.normalized_key == k; }));
  }
  CHECK(is_blocked(d, "bad step"));
  CHECK(is_blocked(d, "  BAD\tSTEP "));
  CHECK_FALSE(is_blocked(d, "good step"));
}

TEST_CASE("is_blocked agrees with a linear scan") {
  std::mt19937_64 rng(3);
  auto word = [&] {
    std::string w;
    const int n = 1 + static_cast<int>(rng() % 3);
    for (int i = 0; i < n; ++i) w.push_back(static_cast<char>('a' + rng() % 4));
    return w;
  };
  MemoryStore s({0.8, 0.2}, 1000);
  std::vector<std::string> stored;
  while (s.size(MemoryKind::fallacy, "p") < 100) {
    std::string w = word() + " " + word();
    s.store(make_entry("p", w, 0.1, MemoryKind::fallacy));
    stored.push_back(w);
  }
  auto d = s.snapshot("p");
  for (int i = 0; i < 1000; ++i) {
    std::string cand = word() + (rng() % 2 ? "  " : " ") + word();
    if (rng() % 2) std::transform(cand.begin(), cand.end(), cand.begin(), ::toupper);
    bool linear = false;
    for (const auto& w : stored) linear = linear || normalize_key(w) == normalize_key(cand);
    CHECK(is_blocked(d, cand) == linear);
  }
}

TEST_CASE("concurrent writers respect parsimony") {
  MemoryStore s({0.8, 0.2}, 8);
  std::vector<std::thread> pool;
  for (int t = 0; t < 4; ++t) {
    pool.emplace_back([&, t] {
      for (int i = 0; i < 200; ++i) {
        s.store(make_entry("p", "k" + std::to_string((i * 7 + t) % 23), 0.8 + 0.001 * (i % 50),
                           MemoryKind::heuristic));
      }
    });
  }
  for (auto& th : pool) th.join();
  CHECK(s.size(MemoryKind::heuristic, "p") == 8);
  std::set<std::string> keys;
  for (const auto& e : s.entries(MemoryKind::heuristic)) CHECK(keys.insert(e.normalized_key).second);
}

TEST_CASE("modes") {
  CHECK(parse_mode("no_heuristics") == MemoryMode::no_heuristics);
  CHECK_THROWS_AS(parse_mode("bogus"), DomainError);
  CHECK(heuristics_enabled(MemoryMode::no_fallacies));
  CHECK_FALSE(fallacies_enabled(MemoryMode::no_fallacies));
  CHECK_FALSE(heuristics_enabled(MemoryMode::none));
}
