#include "prism/reference_prm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "prism/errors.hpp"
#include "prism/hash.hpp"
#include "prism/memory.hpp"

namespace prism::refprm {

namespace {

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void check_dim(std::size_t expected, std::size_t got, const char* what) {
  if (expected != got) {
    throw DomainError(std::string(what) + ": feature dimension " + std::to_string(got) +
                      " does not match model dimension " + std::to_string(expected));
  }
}

std::array<double, kNumClasses> logits(const RefModelParams& p, std::span<const double> phi) {
  std::array<double, kNumClasses> z{};
  for (int c = 0; c < kNumClasses; ++c) {
    double s = p.bias[static_cast<std::size_t>(c)];
    for (std::size_t j = 0; j < p.dim; ++j) s += p.theta_at(c, j) * phi[j];
    z[static_cast<std::size_t>(c)] = s;
  }
  return z;
}

double log_sum_exp(const std::array<double, kNumClasses>& z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s);
}

std::vector<std::string> tokens_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(normalize_key(text));
  for (std::string t; in >> t;) out.push_back(std::move(t));
  return out;
}

}  // namespace

Vec featurize(std::span<const std::string> context, const std::string& step) {
  Vec phi(kFeatureDim, 0.0);
  auto add = [&](const std::string& role, const std::string& text) {
    for (const auto& tok : tokens_of(text)) {
      phi[hash_combine(fnv1a64(role), tok) % kHashBuckets] += 1.0;
    }
  };
  for (const auto& c : context) add("ctx", c);
  add("step", step);
  double norm = std::sqrt(dot(std::span(phi).first(kHashBuckets), std::span(phi).first(kHashBuckets)));
  if (norm > 0.0) {
    for (std::size_t i = 0; i < kHashBuckets; ++i) phi[i] /= norm;
  }

  const auto step_tokens = static_cast<double>(tokens_of(step).size());
  std::size_t digits = 0, printable = 0;
  for (unsigned char ch : step) {
    if (std::isspace(ch)) continue;
    ++printable;
    if (std::isdigit(ch)) ++digits;
  }
  phi[kHashBuckets + 0] = std::min(step_tokens / 16.0, 1.0);
  phi[kHashBuckets + 1] = std::min(static_cast<double>(context.size()) / 8.0, 1.0);
  phi[kHashBuckets + 2] = printable ? static_cast<double>(digits) / printable : 0.0;
  phi[kHashBuckets + 3] = step.find('=') != std::string::npos ? 1.0 : 0.0;
  return phi;
}

RefModelParams RefModelParams::zeros(std::size_t dim, double beta) {
  RefModelParams p;
  p.dim = dim;
  p.theta.assign(static_cast<std::size_t>(kNumClasses) * dim, 0.0);
  p.bias.assign(kNumClasses, 0.0);
  p.pref_w.assign(dim, 0.0);
  p.ref_w.assign(dim, 0.0);
  p.beta = beta;
  return p;
}

void RefModelParams::check() const {
  if (dim == 0) throw DomainError("model dimension must be positive");
  if (theta.size() != static_cast<std::size_t>(kNumClasses) * dim || bias.size() != kNumClasses ||
      pref_w.size() != dim || ref_w.size() != dim) {
    throw DomainError("model parameter shapes are inconsistent");
  }
  if (!(beta > 0.0)) throw DomainError("beta must be positive");
}

nlohmann::ordered_json RefModelParams::to_json() const {
  nlohmann::ordered_json j;
  j["F"] = dim;
  auto& rows = j["theta"] = nlohmann::ordered_json::array();
  for (int c = 0; c < kNumClasses; ++c) {
    auto first = theta.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(c) * dim);
    rows.push_back(Vec(first, first + static_cast<std::ptrdiff_t>(dim)));
  }
  j["bias"] = bias;
  j["pref_w"] = pref_w;
  j["ref_w"] = ref_w;
  j["beta"] = beta;
  return j;
}

RefModelParams RefModelParams::from_json(const nlohmann::json& j) {
  RefModelParams p;
  p.dim = j.at("F").get<std::size_t>();
  const auto& rows = j.at("theta");
  if (!rows.is_array() || rows.size() != kNumClasses) throw DomainError("theta must have 5 rows");
  for (const auto& r : rows) {
    auto row = r.get<Vec>();
    if (row.size() != p.dim) throw DomainError("theta row has wrong length");
    p.theta.insert(p.theta.end(), row.begin(), row.end());
  }
  p.bias = j.at("bias").get<Vec>();
  p.pref_w = j.at("pref_w").get<Vec>();
  p.ref_w = j.at("ref_w").get<Vec>();
  p.beta = j.at("beta").get<double>();
  p.check();
  return p;
}

double sdpo_margin(const RefModelParams& params, const PairFeatures& pair) {
  check_dim(params.dim, pair.preferred.size(), "sdpo");
  check_dim(params.dim, pair.dispreferred.size(), "sdpo");
  double delta_pos = 0.0, delta_neg = 0.0;
  for (std::size_t j = 0; j < params.dim; ++j) {
    const double w = params.pref_w[j] - params.ref_w[j];
    delta_pos += w * pair.preferred[j];
    delta_neg += w * pair.dispreferred[j];
  }
  return params.beta * (delta_pos - delta_neg);
}

double sdpo_loss(const RefModelParams& params, std::span<const PairFeatures> batch) {
  if (batch.empty()) throw DomainError("sdpo_loss: empty batch");
  double total = 0.0;
  for (const auto& pair : batch) total += softplus(-sdpo_margin(params, pair));
  return total / static_cast<double>(batch.size());
}

Vec sdpo_grad(const RefModelParams& params, std::span<const PairFeatures> batch) {
  if (batch.empty()) throw DomainError("sdpo_grad: empty batch");
  Vec g(params.dim, 0.0);
  const double n = static_cast<double>(batch.size());
  for (const auto& pair : batch) {
    // d/dw softplus(-m) = -sigmoid(-m) * beta * (phi+ - phi-)
    const double coef = -params.beta * sigmoid(-sdpo_margin(params, pair)) / n;
    for (std::size_t j = 0; j < params.dim; ++j) {
      g[j] += coef * (pair.preferred[j] - pair.dispreferred[j]);
    }
  }
  return g;
}

ClassProbs class_probs(const RefModelParams& params, std::span<const double> phi) {
  check_dim(params.dim, phi.size(), "class_probs");
  auto z = logits(params, phi);
  const double lse = log_sum_exp(z);
  ClassProbs p{};
  for (std::size_t c = 0; c < kNumClasses; ++c) p[c] = std::exp(z[c] - lse);
  return p;
}

double cls_loss(const RefModelParams& params, std::span<const ClassFeatures> batch) {
  if (batch.empty()) throw DomainError("cls_loss: empty batch");
  double total = 0.0;
  for (const auto& ex : batch) {
    check_dim(params.dim, ex.phi.size(), "cls_loss");
    auto z = logits(params, ex.phi);
    total += log_sum_exp(z) - z[static_cast<std::size_t>(ordinal(ex.label))];
  }
  return total / static_cast<double>(batch.size());
}

ClsGrad cls_grad(const RefModelParams& params, std::span<const ClassFeatures> batch) {
  if (batch.empty()) throw DomainError("cls_grad: empty batch");
  ClsGrad g{Vec(params.theta.size(), 0.0), Vec(kNumClasses, 0.0)};
  const double n = static_cast<double>(batch.size());
  for (const auto& ex : batch) {
    ClassProbs p = class_probs(params, ex.phi);
    for (int c = 0; c < kNumClasses; ++c) {
      const double r = (p[static_cast<std::size_t>(c)] - (c == ordinal(ex.label) ? 1.0 : 0.0)) / n;
      g.bias[static_cast<std::size_t>(c)] += r;
      for (std::size_t j = 0; j < params.dim; ++j) {
        g.theta[static_cast<std::size_t>(c) * params.dim + j] += r * ex.phi[j];
      }
    }
  }
  return g;
}

ValueClass predict(const RefModelParams& params, std::span<const double> phi) {
  check_dim(params.dim, phi.size(), "predict");
  auto z = logits(params, phi);
  return static_cast<ValueClass>(std::max_element(z.begin(), z.end()) - z.begin());
}

double accuracy(const RefModelParams& params, std::span<const ClassFeatures> batch) {
  if (batch.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& ex : batch) hits += predict(params, ex.phi) == ex.label ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(batch.size());
}

namespace {

class DivergenceGuard {
 public:
  DivergenceGuard(const TrainSchedule& s, int stage) : schedule_(s), stage_(stage) {}

  void observe(double prev, double cur, const std::vector<LossPoint>& curve) {
    if (!std::isfinite(cur)) throw TrainingDiverged(message("non-finite loss"), curve);
    if (cur > prev + schedule_.increase_tolerance * std::max(1.0, std::abs(prev))) {
      if (++rises_ >= schedule_.divergence_patience) {
        throw TrainingDiverged(message("loss increased for " + std::to_string(rises_) +
                                       " consecutive epochs"),
                               curve);
      }
    } else {
      rises_ = 0;
    }
  }

 private:
  std::string message(const std::string& why) const {
    return "stage " + std::to_string(stage_) + " diverged: " + why;
  }
  const TrainSchedule& schedule_;
  int stage_;
  int rises_ = 0;
};

}  // namespace

TrainResult train(std::span<const PairFeatures> pairs, std::span<const ClassFeatures> examples,
                  const TrainSchedule& schedule) {
  if (pairs.empty() || examples.empty()) throw DomainError("train: both datasets must be non-empty");
  const std::size_t dim = pairs.front().preferred.size();
  if (dim == 0) throw DomainError("train: zero-dimensional features");

  TrainResult out;
  RefModelParams& p = out.params;
  p = RefModelParams::zeros(dim, schedule.beta);
  std::mt19937_64 rng(splitmix64(schedule.seed));
  auto init = [&] {
    const double unit = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return schedule.init_scale * (2.0 * unit - 1.0);
  };
  for (double& w : p.pref_w) w = init();
  p.ref_w = p.pref_w;
  for (double& w : p.theta) w = init();
  for (double& b : p.bias) b = init();
  p.check();

  double loss = sdpo_loss(p, pairs);
  out.curve.push_back({0, 1, loss});
  DivergenceGuard guard1(schedule, 1);
  for (int e = 1; e <= schedule.sdpo_epochs; ++e) {
    Vec g = sdpo_grad(p, pairs);
    for (std::size_t j = 0; j < dim; ++j) p.pref_w[j] -= schedule.sdpo_lr * g[j];
    double next = sdpo_loss(p, pairs);
    out.curve.push_back({e, 1, next});
    guard1.observe(loss, next, out.curve);
    loss = next;
  }

  loss = cls_loss(p, examples);
  out.curve.push_back({0, 2, loss});
  DivergenceGuard guard2(schedule, 2);
  for (int e = 1; e <= schedule.cls_epochs; ++e) {
    ClsGrad g = cls_grad(p, examples);
    for (std::size_t i = 0; i < p.theta.size(); ++i) p.theta[i] -= schedule.cls_lr * g.theta[i];
    for (std::size_t c = 0; c < kNumClasses; ++c) p.bias[c] -= schedule.cls_lr * g.bias[c];
    double next = cls_loss(p, examples);
    out.curve.push_back({e, 2, next});
    guard2.observe(loss, next, out.curve);
    loss = next;
  }

  out.final_accuracy = accuracy(p, examples);
  return out;
}

std::vector<PairFeatures> featurize_pairs(const std::vector<PreferencePair>& pairs) {
  std::vector<PairFeatures> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    out.push_back({featurize(p.context, p.preferred), featurize(p.context, p.dispreferred)});
  }
  return out;
}

std::vector<ClassFeatures> featurize_examples(const std::vector<ClassExample>& examples) {
  std::vector<ClassFeatures> out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back({featurize(e.context, e.step), e.label});
  return out;
}

std::string curve_to_csv(const std::vector<LossPoint>& curve) {
  std::string out = "epoch,stage,loss\n";
  for (const auto& pt : curve) {
    // JSON number formatting gives the shortest round-trip representation.
    out += std::to_string(pt.epoch) + "," + std::to_string(pt.stage) + "," +
           nlohmann::json(pt.loss).dump() + "\n";
  }
  return out;
}

void save_checkpoint(const RefModelParams& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << params.to_json().dump() << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

RefModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  try {
    return RefModelParams::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(path.string() + ": " + e.what(), 1);
  }
}

ReferencePrmBackend::ReferencePrmBackend(RefModelParams params) : params_(std::move(params)) {
  params_.check();
  check_dim(kFeatureDim, params_.dim, "ReferencePrmBackend");
}

PrmScore ReferencePrmBackend::score(const Problem& /*problem*/, std::span<const std::string> prefix,
                                    const std::string& candidate) {
  return PrmScore::from_probs(class_probs(params_, featurize(prefix, candidate)));
}

}  // namespace prism::refprm
