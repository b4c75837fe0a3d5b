#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "rayfusion/rng.hpp"
#include "rayfusion/tensor.hpp"

namespace rftest {

using rayfusion::Rng;
using rayfusion::Tensor;

inline Tensor random_tensor(rayfusion::Shape shape, Rng& rng, bool grad = false, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(rayfusion::detail::numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

/// |a - n| / max(|a|, |n|, floor). The floor keeps parameters whose true
/// gradient is zero (e.g. key biases under softmax shift invariance) from
/// turning rounding noise into a large ratio.
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  return std::fabs(analytic - numeric) / std::max({std::fabs(analytic), std::fabs(numeric), floor});
}

struct GradCheck {
  double max_rel = 0.0;
  std::size_t checked = 0;
};

/// Central differences on `samples` random coordinates of `x`, whose
/// analytic gradient must already be populated. `f` re-evaluates the loss.
inline GradCheck check_coordinates(Tensor& x, const std::function<double()>& f, std::size_t samples, Rng& rng,
                                   double h = 1e-5) {
  GradCheck r;
  const auto g = x.grad();
  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t i = rng.index(x.numel());
    double& xi = x.mutable_data()[i];
    const double x0 = xi;
    double fp, fm;
    {
      rayfusion::NoGradGuard ng;
      xi = x0 + h;
      fp = f();
      xi = x0 - h;
      fm = f();
    }
    xi = x0;
    r.max_rel = std::max(r.max_rel, rel_error(g[i], (fp - fm) / (2.0 * h)));
    ++r.checked;
  }
  return r;
}

/// Weighted-sum probe: sum(y * w) with a fixed random w, so every output
/// entry contributes a distinct weight to the gradient.
inline Tensor probe(const Tensor& y, const Tensor& w) { return rayfusion::sum(rayfusion::mul(y, w)); }

}  // namespace rftest
