#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "prism/labeling.hpp"
#include "prism/prm.hpp"

// Desk-scale differentiable process reward model.
//
// Stage 1 trains a linear scoring head with the step-level DPO objective
//   L = mean_i -log sigmoid(beta * [(w - w_ref).phi(y+) - (w - w_ref).phi(y-)])
// against a frozen reference head w_ref. Stage 2 trains a 5-way softmax
// classifier over the value classes with cross-entropy. The two heads are
// independent. Gradients are analytic; tests check them against central
// differences.
namespace prism::refprm {

using Vec = std::vector<double>;

inline constexpr std::size_t kHashBuckets = 256;
inline constexpr std::size_t kNumericFeatures = 4;
inline constexpr std::size_t kFeatureDim = kHashBuckets + kNumericFeatures;

// Hashed bag of tokens over context + step (L2-normalised) followed by four
// numeric features: step length, depth, digit fraction of the step, and
// whether the step states an equation.
Vec featurize(std::span<const std::string> context, const std::string& step);

struct PairFeatures {
  Vec preferred;
  Vec dispreferred;
};

struct ClassFeatures {
  Vec phi;
  ValueClass label = ValueClass::Bad;
};

struct RefModelParams {
  std::size_t dim = 0;
  Vec theta;   // kNumClasses x dim, row-major
  Vec bias;    // kNumClasses
  Vec pref_w;  // dim
  Vec ref_w;   // dim, frozen during stage 1
  double beta = 1.0;

  static RefModelParams zeros(std::size_t dim, double beta = 1.0);
  void check() const;

  double& theta_at(int cls, std::size_t j) { return theta[static_cast<std::size_t>(cls) * dim + j]; }
  double theta_at(int cls, std::size_t j) const {
    return theta[static_cast<std::size_t>(cls) * dim + j];
  }

  nlohmann::ordered_json to_json() const;
  static RefModelParams from_json(const nlohmann::json& j);
};

// beta * [(w - w_ref).phi+ - (w - w_ref).phi-] for one pair.
double sdpo_margin(const RefModelParams& params, const PairFeatures& pair);

double sdpo_loss(const RefModelParams& params, std::span<const PairFeatures> batch);
// Gradient with respect to pref_w.
Vec sdpo_grad(const RefModelParams& params, std::span<const PairFeatures> batch);

ClassProbs class_probs(const RefModelParams& params, std::span<const double> phi);
double cls_loss(const RefModelParams& params, std::span<const ClassFeatures> batch);

struct ClsGrad {
  Vec theta;
  Vec bias;
};
ClsGrad cls_grad(const RefModelParams& params, std::span<const ClassFeatures> batch);

ValueClass predict(const RefModelParams& params, std::span<const double> phi);
double accuracy(const RefModelParams& params, std::span<const ClassFeatures> batch);

struct TrainSchedule {
  int sdpo_epochs = 200;
  int cls_epochs = 200;
  double sdpo_lr = 0.1;
  double cls_lr = 0.1;
  double beta = 1.0;
  double init_scale = 0.01;
  std::uint64_t seed = 0;
  // A rise larger than this counts towards divergence.
  double increase_tolerance = 1e-12;
  int divergence_patience = 3;
};

struct LossPoint {
  int epoch = 0;
  int stage = 1;
  double loss = 0.0;
};

struct TrainResult {
  RefModelParams params;
  std::vector<LossPoint> curve;  // loss after `epoch` updates, both stages
  double final_accuracy = 0.0;   // stage-2 training accuracy
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, std::vector<LossPoint> curve)
      : std::runtime_error(what), curve_(std::move(curve)) {}
  const std::vector<LossPoint>& curve() const noexcept { return curve_; }

 private:
  std::vector<LossPoint> curve_;
};

// Full-batch gradient descent: stage 1 (SDPO on pref_w), then stage 2
// (cross-entropy on theta and bias). Both datasets must be non-empty.
TrainResult train(std::span<const PairFeatures> pairs, std::span<const ClassFeatures> examples,
                  const TrainSchedule& schedule);

std::vector<PairFeatures> featurize_pairs(const std::vector<PreferencePair>& pairs);
std::vector<ClassFeatures> featurize_examples(const std::vector<ClassExample>& examples);

std::string curve_to_csv(const std::vector<LossPoint>& curve);

void save_checkpoint(const RefModelParams& params, const std::filesystem::path& path);
RefModelParams load_checkpoint(const std::filesystem::path& path);

// Scores steps with the stage-2 classifier: value is the expected bin
// midpoint under the predicted class distribution.
class ReferencePrmBackend final : public PrmBackend {
 public:
  explicit ReferencePrmBackend(RefModelParams params);
  PrmScore score(const Problem& problem, std::span<const std::string> prefix,
                 const std::string& candidate) override;

 private:
  RefModelParams params_;
};

}  // namespace prism::refprm
