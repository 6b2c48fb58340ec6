#include "vitscope/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace vitscope {

double finite_diff_check(const ScalarFn& f, const Tensor& x, double h) {
  if (!(h >= 1e-7 && h <= 1e-3)) {
    throw std::invalid_argument("finite_diff_check: h must lie in [1e-7, 1e-3]");
  }

  Tensor probe = x.clone();
  probe.set_requires_grad(true);
  std::vector<double> analytic(probe.numel(), 0.0);
  {
    Tape tape;
    Tensor loss = f(tape, probe);
    if (!std::isfinite(loss.item())) {
      throw NonFiniteError("finite_diff_check: f(x) is not finite");
    }
    tape.backward(loss);
    if (probe.has_grad()) {
      const auto g = probe.grad();
      std::copy(g.begin(), g.end(), analytic.begin());
    }
  }

  auto eval = [&](const Tensor& at) {
    Tape tape(Tape::Mode::inference);
    const double v = f(tape, at).item();
    if (!std::isfinite(v)) {
      throw NonFiniteError("finite_diff_check: f is not finite at a probe point");
    }
    return v;
  };

  Tensor shifted = x.clone();
  shifted.set_requires_grad(false);
  auto values = shifted.mutable_data();
  double worst = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double orig = values[i];
    values[i] = orig + h;
    const double up = eval(shifted);
    values[i] = orig - h;
    const double down = eval(shifted);
    values[i] = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double err =
        std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace vitscope
