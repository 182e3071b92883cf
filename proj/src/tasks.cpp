#include "prism/tasks.hpp"

#include <algorithm>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <tuple>

#include "prism/errors.hpp"
#include "prism/hash.hpp"

namespace prism::tasks {

namespace {

struct Op {
  char sym = '+';
  int operand = 2;

  long long apply(long long x) const {
    switch (sym) {
      case '+': return x + operand;
      case '-': return x - operand;
      default: return x * operand;
    }
  }
  bool operator==(const Op&) const = default;
};

constexpr std::array<const char*, 12> kLurePhrases = {
    "cancel the common factor early",  "assume the remainder is zero",
    "drop the negative sign",          "reuse the previous total",
    "double-count the carry",          "swap the operands",
    "round to the nearest ten",        "ignore the last operation",
    "add the step index",              "square the running value",
    "treat the subtraction as addition", "skip the verification"};

constexpr long long kLureOffset = 97;
constexpr double kMaxStates = 1e6;

struct TaskSpec {
  TaskFamily family = TaskFamily::arithmetic_chain;
  int depth = 0;
  int k = 0;
  std::uint64_t seed = 0;
  long long start = 0;
  std::vector<Op> nominal;                    // per step
  std::vector<std::vector<Op>> alternatives;  // arithmetic_chain, per step
  std::vector<int> tokens;                    // token_path
  std::vector<std::string> lures;             // distractor_tree
  long long answer = 0;
};

struct State {
  int t = 0;
  long long x = 0;
  bool derailed = false;

  auto key() const { return std::make_tuple(t, x, derailed); }
};

using Transition = std::pair<std::string, State>;

// Draws in [lo, hi] from the raw engine output; std distributions are not
// reproducible across standard libraries.
int draw(std::mt19937_64& rng, int lo, int hi) {
  return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

Op draw_op(std::mt19937_64& rng) {
  static constexpr char syms[] = {'+', '-', '*'};
  return Op{syms[draw(rng, 0, 2)], draw(rng, 2, 9)};
}

std::string render_op(int t, long long x, const Op& op, long long y) {
  return "step " + std::to_string(t + 1) + ": " + std::to_string(x) + " " + op.sym + " " +
         std::to_string(op.operand) + " = " + std::to_string(y);
}

std::vector<Transition> continuations(const TaskSpec& spec, const State& s) {
  std::vector<Transition> out;
  if (s.t >= spec.depth) return out;
  const auto t = static_cast<std::size_t>(s.t);
  switch (spec.family) {
    case TaskFamily::arithmetic_chain: {
      std::vector<Op> ops{spec.nominal[t]};
      ops.insert(ops.end(), spec.alternatives[t].begin(), spec.alternatives[t].end());
      for (const Op& op : ops) {
        long long y = op.apply(s.x);
        out.emplace_back(render_op(s.t, s.x, op, y), State{s.t + 1, y, false});
      }
      break;
    }
    case TaskFamily::token_path:
      for (int a : spec.tokens) {
        long long y = s.x + a;
        out.emplace_back(render_op(s.t, s.x, Op{'+', a}, y), State{s.t + 1, y, false});
      }
      break;
    case TaskFamily::distractor_tree: {
      const Op& op = spec.nominal[t];
      long long y = op.apply(s.x);
      out.emplace_back(render_op(s.t, s.x, op, y), State{s.t + 1, y, s.derailed});
      for (std::size_t j = 0; j < spec.lures.size(); ++j) {
        out.emplace_back(spec.lures[j],
                         State{s.t + 1, s.x + kLureOffset * static_cast<long long>(j + 1), true});
      }
      break;
    }
    case TaskFamily::external:
      break;
  }
  // Seeded per-state shuffle so the correct step has no fixed position.
  std::uint64_t h = splitmix64(spec.seed ^ 0x5eedULL);
  h = splitmix64(h ^ static_cast<std::uint64_t>(s.t));
  h = splitmix64(h ^ static_cast<std::uint64_t>(s.x));
  h = splitmix64(h ^ static_cast<std::uint64_t>(s.derailed));
  for (std::size_t i = out.size(); i > 1; --i) {
    h = splitmix64(h);
    std::swap(out[i - 1], out[h % i]);
  }
  return out;
}

bool is_correct_terminal(const TaskSpec& spec, const State& s) {
  if (s.t != spec.depth) return false;
  if (spec.family == TaskFamily::distractor_tree) return !s.derailed;
  return s.x == spec.answer;
}

int count_correct_leaves(const TaskSpec& spec, const State& s) {
  if (s.t == spec.depth) return is_correct_terminal(spec, s) ? 1 : 0;
  int n = 0;
  for (const auto& [content, next] : continuations(spec, s)) n += count_correct_leaves(spec, next);
  return n;
}

void validate_params(TaskFamily family, const TaskParams& p) {
  if (family == TaskFamily::external) throw DomainError("cannot generate an external problem");
  if (p.depth < 1 || p.depth > 12) throw DomainError("task depth must lie in [1,12]");
  if (p.distractors < 0) throw DomainError("distractors must be >= 0");
  if (family == TaskFamily::arithmetic_chain && p.distractors > 23) {
    throw DomainError("arithmetic_chain supports at most 23 alternatives");
  }
  if (family == TaskFamily::token_path && p.distractors > 8) {
    throw DomainError("token_path supports at most 9 tokens");
  }
  if (family == TaskFamily::distractor_tree &&
      p.distractors > static_cast<int>(kLurePhrases.size())) {
    throw DomainError("distractor_tree supports at most 12 lures");
  }
  double states = 1.0;
  for (int i = 0; i < p.depth; ++i) states *= p.distractors + 1;
  if (states > kMaxStates) throw DomainError("task state space too large");
}

TaskSpec build_spec(TaskFamily family, const TaskParams& p) {
  validate_params(family, p);
  for (std::uint64_t attempt = 0;; ++attempt) {
    TaskSpec spec;
    spec.family = family;
    spec.depth = p.depth;
    spec.k = p.distractors;
    spec.seed = p.seed;
    std::mt19937_64 rng(splitmix64(p.seed) ^ splitmix64(attempt + 0x9e37ULL * (1 + static_cast<int>(family))));
    spec.start = draw(rng, 2, 9);

    if (family == TaskFamily::token_path) {
      std::vector<int> pool{1, 2, 3, 4, 5, 6, 7, 8, 9};
      for (std::size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[rng() % i]);
      spec.tokens.assign(pool.begin(), pool.begin() + p.distractors + 1);
      std::sort(spec.tokens.begin(), spec.tokens.end());
      spec.start = 0;
      long long target = 0;
      for (int t = 0; t < p.depth; ++t) target += spec.tokens[rng() % spec.tokens.size()];
      spec.answer = target;
      return spec;
    }

    long long x = spec.start;
    for (int t = 0; t < p.depth; ++t) {
      spec.nominal.push_back(draw_op(rng));
      x = spec.nominal.back().apply(x);
    }
    spec.answer = x;

    if (family == TaskFamily::distractor_tree) {
      std::vector<std::string> pool(kLurePhrases.begin(), kLurePhrases.end());
      for (std::size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[rng() % i]);
      spec.lures.assign(pool.begin(), pool.begin() + p.distractors);
      // Every nominal op is strictly increasing in x and lures add a positive
      // offset, so a derailed state never returns to the correct chain.
      return spec;
    }

    spec.alternatives.resize(static_cast<std::size_t>(p.depth));
    for (int t = 0; t < p.depth; ++t) {
      auto& alts = spec.alternatives[static_cast<std::size_t>(t)];
      while (static_cast<int>(alts.size()) < p.distractors) {
        Op op = draw_op(rng);
        if (op == spec.nominal[static_cast<std::size_t>(t)]) continue;
        if (std::find(alts.begin(), alts.end(), op) != alts.end()) continue;
        alts.push_back(op);
      }
    }
    // Alternative operations may land back on the answer; resample until the
    // chain has a single correct path.
    if (count_correct_leaves(spec, State{0, spec.start, false}) == 1 || attempt >= 255) return spec;
  }
}

std::shared_ptr<const TaskSpec> spec_for(const Problem& problem) {
  static std::mutex mu;
  static std::map<std::tuple<int, int, int, std::uint64_t>, std::shared_ptr<const TaskSpec>> cache;
  if (problem.family == TaskFamily::external) {
    throw DomainError("problem " + problem.problem_id + " is not a synthetic task");
  }
  auto key = std::make_tuple(static_cast<int>(problem.family), problem.params.depth,
                             problem.params.distractors, problem.params.seed);
  {
    std::lock_guard lock(mu);
    if (auto it = cache.find(key); it != cache.end()) return it->second;
  }
  auto spec = std::make_shared<const TaskSpec>(build_spec(problem.family, problem.params));
  std::lock_guard lock(mu);
  return cache.emplace(key, std::move(spec)).first->second;
}

State advance(const TaskSpec& spec, const State& s, const std::string& step) {
  for (const auto& [content, next] : continuations(spec, s)) {
    if (content == step) return next;
  }
  throw DomainError("illegal step at depth " + std::to_string(s.t) + ": '" + step + "'");
}

State replay(const TaskSpec& spec, std::span<const std::string> path) {
  State s{0, spec.start, false};
  for (const auto& step : path) s = advance(spec, s, step);
  return s;
}

class DistanceOracle {
 public:
  explicit DistanceOracle(const TaskSpec& spec) : spec_(spec) {}

  Distance remaining(const State& s) {
    if (s.t == spec_.depth) return is_correct_terminal(spec_, s) ? Distance(0) : std::nullopt;
    if (auto it = memo_.find(s.key()); it != memo_.end()) return it->second;
    Distance best;
    for (const auto& [content, next] : continuations(spec_, s)) {
      Distance d = remaining(next);
      if (d && (!best || *d + 1 < *best)) best = *d + 1;
    }
    memo_.emplace(s.key(), best);
    return best;
  }

 private:
  const TaskSpec& spec_;
  std::map<std::tuple<int, long long, bool>, Distance> memo_;
};

}  // namespace

Problem generate(TaskFamily family, TaskParams params, std::uint64_t seed) {
  params.seed = seed;
  TaskSpec spec = build_spec(family, params);
  Problem p;
  p.family = family;
  p.params = params;
  p.problem_id = std::string(family_name(family)) + "-" + hex64(seed).substr(8);
  p.answer = std::to_string(spec.answer);
  const std::string d = std::to_string(params.depth);
  switch (family) {
    case TaskFamily::token_path: {
      std::string toks;
      for (int a : spec.tokens) toks += (toks.empty() ? "" : ", ") + std::to_string(a);
      p.statement = "Reach " + p.answer + " from 0 in " + d + " additions using tokens {" + toks + "}.";
      break;
    }
    case TaskFamily::distractor_tree:
      p.statement = "Start from " + std::to_string(spec.start) + " and apply " + d +
                    " operations without shortcuts.";
      break;
    default:
      p.statement = "Start from " + std::to_string(spec.start) + " and apply " + d + " operations.";
      break;
  }
  return p;
}

std::vector<std::string> legal_steps(const Problem& problem, std::span<const std::string> prefix) {
  auto spec = spec_for(problem);
  std::vector<std::string> out;
  for (auto& [content, next] : continuations(*spec, replay(*spec, prefix))) {
    out.push_back(std::move(content));
  }
  return out;
}

OracleVerdict oracle(const Problem& problem, std::span<const std::string> prefix,
                     const std::string& candidate) {
  auto spec = spec_for(problem);
  DistanceOracle dist(*spec);
  State s{0, spec->start, false};
  double v = 0.0;
  Distance m;
  auto step = [&](const std::string& content) {
    s = advance(*spec, s, content);
    m = dist.remaining(s);
    const int r = m ? 0 : 1;
    v = next_value(v, step_weight(v, m, r));
  };
  for (const auto& p : prefix) step(p);
  step(candidate);
  return {v, m.has_value(), m};
}

bool is_complete(const Problem& problem, std::span<const std::string> path) {
  auto spec = spec_for(problem);
  return replay(*spec, path).t >= spec->depth;
}

std::string answer_for(const Problem& problem, std::span<const std::string> path) {
  auto spec = spec_for(problem);
  return std::to_string(replay(*spec, path).x);
}

Proposal SyntheticPolicy::propose(const ExpansionRequest& req) {
  std::vector<std::string> all = legal_steps(req.problem, req.prefix);
  std::vector<std::string> existing_keys;
  for (const auto& e : req.existing) existing_keys.push_back(normalize_key(e));
  std::erase_if(all, [&](const std::string& s) {
    return std::find(existing_keys.begin(), existing_keys.end(), normalize_key(s)) !=
           existing_keys.end();
  });

  std::vector<std::string> hint_keys;
  for (const auto& h : req.digest.heuristic_hints) hint_keys.push_back(normalize_key(h));
  std::stable_partition(all.begin(), all.end(), [&](const std::string& s) {
    return std::find(hint_keys.begin(), hint_keys.end(), normalize_key(s)) != hint_keys.end();
  });

  Proposal p;
  const auto n = std::min(all.size(), static_cast<std::size_t>(std::max(req.max_candidates, 0)));
  p.steps.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n));
  p.exhausted = n == all.size();
  return p;
}

bool SyntheticPolicy::is_terminal(const Problem& problem, std::span<const std::string> path) {
  return is_complete(problem, path);
}

std::string SyntheticPolicy::extract_answer(const Problem& problem,
                                            std::span<const std::string> path) {
  return answer_for(problem, path);
}

PrmScore OraclePrm::score(const Problem& problem, std::span<const std::string> prefix,
                          const std::string& candidate) {
  return PrmScore::from_value(oracle(problem, prefix, candidate).value);
}

NoisyOraclePrm::NoisyOraclePrm(double amplitude, std::uint64_t seed)
    : amplitude_(amplitude), seed_(seed) {
  if (!(amplitude >= 0.0 && amplitude <= 1.0)) throw DomainError("noise amplitude outside [0,1]");
}

PrmScore NoisyOraclePrm::score(const Problem& problem, std::span<const std::string> prefix,
                               const std::string& candidate) {
  const double v = oracle(problem, prefix, candidate).value;
  std::uint64_t h = hash_combine(splitmix64(seed_), problem.problem_id);
  for (const auto& p : prefix) h = hash_combine(h, p);
  h = hash_combine(h, candidate);
  const double unit = static_cast<double>(h >> 11) * 0x1.0p-53;  // [0,1)
  const double noisy = v + amplitude_ * (2.0 * unit - 1.0);
  return PrmScore::from_value(std::clamp(noisy, 0.0, 1.0));
}

std::string answer_hash(const std::string& answer) { return hex64(fnv1a64(answer)); }

Suite generate_suite(TaskFamily family, TaskParams params, int count, std::uint64_t base_seed) {
  if (count < 0) throw DomainError("suite size must be >= 0");
  Suite s;
  s.name = std::string(family_name(family)) + "-d" + std::to_string(params.depth) + "-k" +
           std::to_string(params.distractors) + "-n" + std::to_string(count) + "-s" +
           std::to_string(base_seed);
  for (int i = 0; i < count; ++i) {
    Problem p = generate(family, params, splitmix64(base_seed + static_cast<std::uint64_t>(i)));
    std::string idx = std::to_string(i);
    p.problem_id = std::string(family_name(family)) + "-" + std::string(idx.size() < 4 ? 4 - idx.size() : 0, '0') + idx;
    s.problems.push_back(std::move(p));
  }
  return s;
}

nlohmann::ordered_json suite_manifest(const Suite& suite) {
  nlohmann::ordered_json j;
  j["name"] = suite.name;
  auto& arr = j["problems"] = nlohmann::ordered_json::array();
  for (const auto& p : suite.problems) {
    nlohmann::ordered_json o;
    o["problem_id"] = p.problem_id;
    o["family"] = family_name(p.family);
    o["params"] = {{"depth", p.params.depth},
                   {"distractors", p.params.distractors},
                   {"seed", p.params.seed}};
    o["answer_hash"] = answer_hash(p.answer);
    arr.push_back(std::move(o));
  }
  return j;
}

Suite load_suite(const nlohmann::json& manifest) {
  Suite s;
  s.name = manifest.value("name", std::string("suite"));
  for (const auto& o : manifest.at("problems")) {
    TaskParams params;
    params.depth = o.at("params").at("depth").get<int>();
    params.distractors = o.at("params").at("distractors").get<int>();
    const auto seed = o.at("params").at("seed").get<std::uint64_t>();
    Problem p = generate(parse_family(o.at("family").get<std::string>()), params, seed);
    if (o.contains("problem_id")) p.problem_id = o.at("problem_id").get<std::string>();
    if (o.contains("answer_hash") && o.at("answer_hash").get<std::string>() != answer_hash(p.answer)) {
      throw DomainError("answer hash mismatch for problem " + p.problem_id);
    }
    s.problems.push_back(std::move(p));
  }
  return s;
}

}  // namespace prism::tasks
