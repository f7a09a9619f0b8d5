#pragma once

#include <span>
#include <vector>

namespace lumipower {

// Correctly rounded floating-point summation.
//
// Keeps the running total as a list of non-overlapping partials so that the
// exact real-valued sum of every added term is represented without error.
// round() returns that sum rounded once to the nearest double, which makes the
// result independent of the order in which terms were added. Two accumulators
// can be merged without loss, so per-region sums combine into the same total
// as a single pass over all terms.
class ExactSum {
 public:
  ExactSum() = default;

  void add(double x);
  void merge(const ExactSum& other);
  double round() const;

  bool finite() const { return special_ == 0.0; }

 private:
  std::vector<double> partials_;
  // Accumulates inf/nan terms; once non-zero the exact path is abandoned.
  double special_ = 0.0;
};

double exact_sum(std::span<const double> values);

}  // namespace lumipower
