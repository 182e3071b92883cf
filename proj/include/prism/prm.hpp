#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "prism/problem.hpp"

namespace prism {

// Five-way step quality scale; the enumerator value is the ordinal.
enum class ValueClass : int { Bad = 0, Poor = 1, Fair = 2, Good = 3, Perfect = 4 };

inline constexpr int kNumClasses = 5;
inline constexpr std::array<ValueClass, kNumClasses> kAllClasses = {
    ValueClass::Bad, ValueClass::Poor, ValueClass::Fair, ValueClass::Good, ValueClass::Perfect};

// Bins [0,0.2) Bad, [0.2,0.4) Poor, [0.4,0.6) Fair, [0.6,0.8) Good,
// [0.8,1.0] Perfect. Throws DomainError outside [0,1] (and for NaN).
ValueClass class_of_value(double v);

// Bin midpoint: Bad 0.1 ... Perfect 0.9.
double value_of_class(ValueClass c) noexcept;

constexpr int ordinal(ValueClass c) noexcept { return static_cast<int>(c); }

std::string_view class_name(ValueClass c) noexcept;
// Exact, case-sensitive inverse of class_name.
std::optional<ValueClass> class_from_name(std::string_view name) noexcept;

using ClassProbs = std::array<double, kNumClasses>;

struct PrmScore {
  double value = 0.0;
  ValueClass cls = ValueClass::Bad;
  std::optional<ClassProbs> class_probs;

  // Score carrying a scalar only; class derived from the value.
  static PrmScore from_value(double v);
  // Score derived from a class distribution: value is the expectation of the
  // bin midpoints, class follows from that value.
  static PrmScore from_probs(const ClassProbs& probs);
  static PrmScore from_class(ValueClass c) { return from_value(value_of_class(c)); }
};

// Throws DomainError unless the score satisfies the PrmScore invariants.
void validate(const PrmScore& s);

class PrmBackend {
 public:
  virtual ~PrmBackend() = default;
  virtual PrmScore score(const Problem& problem, std::span<const std::string> prefix,
                         const std::string& candidate) = 0;
};

// Delegates to the backend and rejects malformed output. Backend failures are
// rethrown as BackendError with the candidate in the message.
PrmScore score_step(const Problem& problem, std::span<const std::string> prefix,
                    const std::string& candidate, PrmBackend& backend);

}  // namespace prism
