#include "circuitlab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace circuitlab {
namespace {

// Central differences carry rounding noise of about eps * |f| / step, so
// gradients below floor(f) are compared in absolute terms.
double gradient_floor(double f) { return std::max(1e-6, 1e-5 * std::abs(f)); }

double scalar_output(const Program& program, const NamedTensors& point) {
  ForwardResult r = forward(program, point);
  if (r.outputs.size() != 1) throw std::invalid_argument("gradient check needs a single-output program");
  return r.outputs.begin()->second.item();
}

}  // namespace

GradCheckReport finite_difference_check(const Program& program, const NamedTensors& point, double step) {
  if (!(step > 0.0) || !std::isfinite(step)) throw std::invalid_argument("invalid step: must be a positive finite number");
  ForwardResult base = forward(program, point);
  if (base.outputs.size() != 1) throw std::invalid_argument("gradient check needs a single-output program");
  const auto& [out_name, out_value] = *base.outputs.begin();
  if (out_value.numel() != 1) throw std::invalid_argument("gradient check needs a scalar output");
  const NamedTensors analytic = backward(base, out_name, Tensor::full(out_value.shape(), 1.0));

  const double floor = gradient_floor(out_value.item());
  GradCheckReport report;
  NamedTensors probe = point;
  for (auto& [name, tensor] : probe) {
    const Tensor& grad = analytic.at(name);
    for (std::size_t i = 0; i < tensor.numel(); ++i) {
      const double original = tensor[i];
      tensor[i] = original + step;
      const double up = scalar_output(program, probe);
      tensor[i] = original - step;
      const double down = scalar_output(program, probe);
      tensor[i] = original;
      const double fd = (up - down) / (2.0 * step);
      if (!std::isfinite(fd)) throw NonFiniteError("non-finite finite-difference estimate for " + name);
      const double rel = std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), floor});
      ++report.checked;
      if (rel > report.max_relative_error) {
        report.max_relative_error = rel;
        report.worst_input = name;
        report.worst_index = i;
        report.worst_numeric = fd;
        report.worst_analytic = grad[i];
      }
    }
  }
  return report;
}

}  // namespace circuitlab
