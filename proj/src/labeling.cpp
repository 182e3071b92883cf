#include "prism/labeling.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include "prism/errors.hpp"

namespace prism {

std::vector<std::string> LabeledStep::context() const {
  if (path_prefix.empty()) return {};
  return {path_prefix.begin(), path_prefix.end() - 1};
}

double step_weight(double v_prev, Distance m, int r) {
  if (!(v_prev >= 0.0 && v_prev <= 1.0)) throw DomainError("step_weight: v_prev outside [0,1]");
  if (r != 0 && r != 1) throw DomainError("step_weight: r must be 0 or 1");
  if (!m) {
    if (r != 1) throw DomainError("step_weight: unreachable step must have r = 1");
    return -(1.0 - v_prev);
  }
  if (*m < 0) throw DomainError("step_weight: negative distance");
  return (1.0 - v_prev) / (*m + 1) * (1 - 2 * r);
}

double next_value(double v_prev, double weight) noexcept { return std::max(v_prev + weight, 0.0); }

std::vector<Distance> reasoning_distances(const SearchTree& tree) {
  std::vector<Distance> dist(tree.size());
  // Children always carry larger ids than their parent.
  for (std::size_t i = tree.size(); i-- > 0;) {
    const SearchNode& n = tree.nodes()[i];
    if (n.terminal && n.correct.value_or(false)) {
      dist[i] = 0;
      continue;
    }
    for (NodeId c : n.children) {
      const Distance& dc = dist[static_cast<std::size_t>(c)];
      if (dc && (!dist[i] || *dc + 1 < *dist[i])) dist[i] = *dc + 1;
    }
  }
  return dist;
}

Distance reasoning_distance(const SearchTree& tree, NodeId node) {
  return reasoning_distances(tree).at(static_cast<std::size_t>(node));
}

std::vector<LabeledStep> label_tree(const SearchTree& tree) {
  std::vector<LabeledStep> out;
  if (tree.empty()) return out;
  const auto dist = reasoning_distances(tree);
  std::vector<double> value(tree.size(), 0.0);

  for (const SearchNode& n : tree.nodes()) {
    if (n.id == tree.root()) continue;
    const auto idx = static_cast<std::size_t>(n.id);
    const double v_prev = value[static_cast<std::size_t>(n.parent)];
    LabeledStep s;
    s.problem_id = tree.problem_id();
    s.path_prefix = tree.path_steps(n.id);
    s.step_index = n.depth;
    s.distance = dist[idx];
    s.error_flag = dist[idx] ? 0 : 1;
    s.weight = step_weight(v_prev, s.distance, s.error_flag);
    s.value = next_value(v_prev, s.weight);
    s.cls = class_of_value(s.value);
    s.node_id = n.id;
    s.parent_id = n.parent;
    value[idx] = s.value;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<PreferencePair> extract_preference_pairs(const std::vector<LabeledStep>& labels) {
  // Sibling groups keyed by (problem, context), in order of first appearance.
  std::map<std::pair<std::string, std::vector<std::string>>, std::size_t> index;
  std::vector<std::vector<const LabeledStep*>> groups;
  for (const auto& l : labels) {
    auto key = std::make_pair(l.problem_id, l.context());
    auto [it, inserted] = index.try_emplace(std::move(key), groups.size());
    if (inserted) groups.emplace_back();
    groups[it->second].push_back(&l);
  }

  std::vector<PreferencePair> pairs;
  for (const auto& g : groups) {
    for (const LabeledStep* pos : g) {
      if (!(pos->value >= kPreferredMin)) continue;
      for (const LabeledStep* neg : g) {
        if (!(neg->value <= kDispreferredMax)) continue;
        PreferencePair p;
        p.problem_id = pos->problem_id;
        p.context = pos->context();
        p.preferred = pos->path_prefix.back();
        p.dispreferred = neg->path_prefix.back();
        p.v_pos = pos->value;
        p.v_neg = neg->value;
        pairs.push_back(std::move(p));
      }
    }
  }
  return pairs;
}

std::vector<ClassExample> extract_class_examples(const std::vector<LabeledStep>& labels) {
  std::vector<ClassExample> out;
  out.reserve(labels.size());
  for (const auto& l : labels) {
    out.push_back({l.problem_id, l.context(), l.path_prefix.empty() ? "" : l.path_prefix.back(),
                   class_of_value(l.value), l.value});
  }
  return out;
}

nlohmann::ordered_json to_json(const PreferencePair& p) {
  nlohmann::ordered_json j;
  j["problem_id"] = p.problem_id;
  j["context"] = p.context;
  j["chosen"] = p.preferred;
  j["rejected"] = p.dispreferred;
  j["v_pos"] = p.v_pos;
  j["v_neg"] = p.v_neg;
  return j;
}

nlohmann::ordered_json to_json(const ClassExample& c) {
  nlohmann::ordered_json j;
  j["problem_id"] = c.problem_id;
  j["context"] = c.context;
  j["step"] = c.step;
  j["label"] = class_name(c.label);
  j["value"] = c.value;
  return j;
}

PreferencePair pair_from_json(const nlohmann::json& j) {
  PreferencePair p;
  p.problem_id = j.at("problem_id").get<std::string>();
  p.context = j.at("context").get<std::vector<std::string>>();
  p.preferred = j.at("chosen").get<std::string>();
  p.dispreferred = j.at("rejected").get<std::string>();
  p.v_pos = j.at("v_pos").get<double>();
  p.v_neg = j.at("v_neg").get<double>();
  if (!(p.v_pos >= kPreferredMin) || !(p.v_neg <= kDispreferredMax)) {
    throw DomainError("preference pair violates value thresholds");
  }
  return p;
}

ClassExample class_example_from_json(const nlohmann::json& j) {
  ClassExample c;
  c.problem_id = j.at("problem_id").get<std::string>();
  c.context = j.at("context").get<std::vector<std::string>>();
  c.step = j.at("step").get<std::string>();
  auto label = class_from_name(j.at("label").get<std::string>());
  if (!label) throw DomainError("unknown class label");
  c.label = *label;
  c.value = j.at("value").get<double>();
  if (class_of_value(c.value) != c.label) throw DomainError("label does not match value");
  return c;
}

namespace {

template <typename T>
void write_jsonl(const std::vector<T>& records, const std::filesystem::path& path,
                 const std::string& header_tag) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  if (!header_tag.empty()) {
    nlohmann::ordered_json h;
    h["manifest_hash"] = header_tag;
    out << h.dump() << '\n';
  }
  for (const auto& r : records) out << to_json(r).dump() << '\n';
  out.flush();
  if (!out) throw IoError("write failed: " + path.string());
}

template <typename T, typename Parse>
std::vector<T> read_jsonl(const std::filesystem::path& path, Parse parse) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  std::vector<T> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      if (j.is_object() && j.size() == 1 && j.contains("manifest_hash")) continue;
      out.push_back(parse(j));
    } catch (const std::exception& e) {
      throw SchemaError(path.string() + ":" + std::to_string(lineno) + ": " + e.what(), lineno);
    }
  }
  return out;
}

}  // namespace

void export_jsonl(const std::vector<PreferencePair>& records, const std::filesystem::path& path,
                  const std::string& header_tag) {
  write_jsonl(records, path, header_tag);
}

void export_jsonl(const std::vector<ClassExample>& records, const std::filesystem::path& path,
                  const std::string& header_tag) {
  write_jsonl(records, path, header_tag);
}

std::vector<PreferencePair> import_pairs_jsonl(const std::filesystem::path& path) {
  return read_jsonl<PreferencePair>(path, pair_from_json);
}

std::vector<ClassExample> import_class_jsonl(const std::filesystem::path& path) {
  return read_jsonl<ClassExample>(path, class_example_from_json);
}

}  // namespace prism
