#include "prism/prm.hpp"

#include <algorithm>
#include <cmath>
#include <exception>

#include "prism/errors.hpp"

namespace prism {

ValueClass class_of_value(double v) {
  if (!(v >= 0.0 && v <= 1.0)) {
    throw DomainError("class_of_value: value outside [0,1]: " + std::to_string(v));
  }
  if (v < 0.2) return ValueClass::Bad;
  if (v < 0.4) return ValueClass::Poor;
  if (v < 0.6) return ValueClass::Fair;
  if (v < 0.8) return ValueClass::Good;
  return ValueClass::Perfect;
}

double value_of_class(ValueClass c) noexcept {
  switch (c) {
    case ValueClass::Bad: return 0.1;
    case ValueClass::Poor: return 0.3;
    case ValueClass::Fair: return 0.5;
    case ValueClass::Good: return 0.7;
    case ValueClass::Perfect: return 0.9;
  }
  return 0.5;
}

std::string_view class_name(ValueClass c) noexcept {
  switch (c) {
    case ValueClass::Bad: return "Bad";
    case ValueClass::Poor: return "Poor";
    case ValueClass::Fair: return "Fair";
    case ValueClass::Good: return "Good";
    case ValueClass::Perfect: return "Perfect";
  }
  return "Fair";
}

std::optional<ValueClass> class_from_name(std::string_view name) noexcept {
  for (ValueClass c : kAllClasses) {
    if (class_name(c) == name) return c;
  }
  return std::nullopt;
}

PrmScore PrmScore::from_value(double v) {
  return PrmScore{v, class_of_value(v), std::nullopt};
}

PrmScore PrmScore::from_probs(const ClassProbs& probs) {
  double v = 0.0;
  for (ValueClass c : kAllClasses) v += probs[ordinal(c)] * value_of_class(c);
  // Rounding can push the expectation a hair outside the midpoint hull.
  v = std::clamp(v, 0.0, 1.0);
  return PrmScore{v, class_of_value(v), probs};
}

void validate(const PrmScore& s) {
  if (!(s.value >= 0.0 && s.value <= 1.0)) {
    throw DomainError("PRM value outside [0,1]: " + std::to_string(s.value));
  }
  if (s.cls != class_of_value(s.value)) {
    throw DomainError("PRM class inconsistent with value");
  }
  if (s.class_probs) {
    double total = 0.0;
    for (double p : *s.class_probs) {
      if (!(p >= 0.0)) throw DomainError("negative class probability");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw DomainError("class probabilities do not sum to 1");
  }
}

PrmScore score_step(const Problem& problem, std::span<const std::string> prefix,
                    const std::string& candidate, PrmBackend& backend) {
  PrmScore s;
  try {
    s = backend.score(problem, prefix, candidate);
  } catch (const BackendError&) {
    throw;
  } catch (const std::exception& e) {
    throw BackendError("PRM failed on candidate '" + candidate + "': " + e.what());
  }
  try {
    validate(s);
  } catch (const DomainError& e) {
    throw BackendError("malformed PRM output for candidate '" + candidate + "': " + e.what());
  }
  return s;
}

}  // namespace prism
