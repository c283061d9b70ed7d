#pragma once

#include <string>

#include "circuitlab/autodiff.hpp"

namespace circuitlab {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_input;
  std::size_t worst_index = 0;
  double worst_numeric = 0.0;
  double worst_analytic = 0.0;
  std::size_t checked = 0;
};

/// Compares reverse-mode gradients of a scalar program output against
/// central finite differences, perturbing every element of every input.
/// Relative error per element is |fd - bp| / max(|fd|, |bp|, floor) with
/// floor = max(1e-6, 1e-5 |f|), f the output at the unperturbed point.
/// The program must produce exactly one output holding a single element.
GradCheckReport finite_difference_check(const Program& program, const NamedTensors& point, double step);

}  // namespace circuitlab
