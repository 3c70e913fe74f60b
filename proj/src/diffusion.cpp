// SPDX-License-Identifier: Apache-2.0
#include "texforce/diffusion.hpp"

#include <algorithm>

namespace texforce {

NoiseSchedule build_schedule(int steps, double beta_min, double beta_max) {
  if (steps < 2) throw Error("noise schedule needs at least 2 steps");
  if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0))
    throw Error("noise schedule needs 0 < beta_min <= beta_max < 1");
  NoiseSchedule s;
  s.steps = steps;
  double bar = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double beta = beta_min + (beta_max - beta_min) * i / (steps - 1);
    s.betas.push_back(beta);
    s.alphas.push_back(1.0 - beta);
    bar *= 1.0 - beta;
    s.alpha_bars.push_back(bar);
  }
  std::vector<double> var(static_cast<std::size_t>(steps));
  double smallest = 1.0;
  for (int t = 2; t <= steps; ++t) {
    var[static_cast<std::size_t>(t - 1)] = s.beta(t) * (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t));
    smallest = std::min(smallest, var[static_cast<std::size_t>(t - 1)]);
  }
  var[0] = 0.5 * smallest;
  for (double v : var) s.sigmas.push_back(std::sqrt(v));
  return s;
}

}  // namespace texforce
