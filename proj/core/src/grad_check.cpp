#include "csformer/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "csformer/ops.hpp"

namespace csformer {
namespace {

std::vector<std::size_t> probe_coordinates(std::size_t n, int max_coords, std::mt19937_64& rng) {
  std::vector<std::size_t> coords(n);
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (static_cast<std::size_t>(max_coords) < n) {
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(static_cast<std::size_t>(max_coords));
    std::sort(coords.begin(), coords.end());
  }
  return coords;
}

void fold(GradCheckReport& report, double analytic, double numeric, const GradCheckOptions& options) {
  const double rel = relative_error(analytic, numeric, options.denom_floor);
  report.max_rel_err = std::max(report.max_rel_err, rel);
  report.max_abs_err = std::max(report.max_abs_err, std::abs(analytic - numeric));
  ++report.coords_checked;
  if (!(rel <= options.tol)) report.pass = false;
}

// Five-point central difference, exact for polynomials up to degree four.
template <typename Eval>
double central_difference(Eval&& eval_at_offset, double eps) {
  const double near = eval_at_offset(eps) - eval_at_offset(-eps);
  const double far = eval_at_offset(2.0 * eps) - eval_at_offset(-2.0 * eps);
  return (8.0 * near - far) / (12.0 * eps);
}

}  // namespace

double relative_error(double analytic, double numeric, double denom_floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), denom_floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const std::function<Tensor64(const Tensor64&)>& f, const Tensor64& x,
                           const GradCheckOptions& options) {
  std::mt19937_64 rng(options.seed);
  Tensor64 input = Tensor64::parameter(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));

  Tensor64 projection;
  std::vector<double> analytic;
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor64 y = f(input);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> r(static_cast<std::size_t>(y.numel()));
    for (double& v : r) v = normal(rng);
    projection = Tensor64(y.shape(), std::move(r));
    Tensor64 loss = sum(mul(y, projection));
    if (loss.tape_id()) tape.backward(loss);
    analytic = input.has_grad() ? std::vector<double>(input.grad().begin(), input.grad().end())
                                : std::vector<double>(static_cast<std::size_t>(input.numel()), 0.0);
  }

  auto projected = [&](const Tensor64& at) {
    Tensor64 y = f(at);
    double acc = 0.0;
    auto ys = y.data();
    auto rs = projection.data();
    for (std::size_t i = 0; i < ys.size(); ++i) acc += ys[i] * rs[i];
    return acc;
  };

  GradCheckReport report;
  Tensor64 probe = x.detach();
  for (std::size_t i : probe_coordinates(analytic.size(), options.max_coords, rng)) {
    const double original = probe.data()[i];
    const double numeric = central_difference(
        [&](double offset) {
          probe.mutable_data()[i] = original + offset;
          return projected(probe);
        },
        options.eps);
    probe.mutable_data()[i] = original;
    fold(report, analytic[i], numeric, options);
  }
  return report;
}

GradCheckReport grad_check_params(const std::function<Tensor64()>& loss, std::span<Tensor64> params,
                                  const GradCheckOptions& options) {
  std::mt19937_64 rng(options.seed);
  for (Tensor64& p : params) {
    p.set_requires_grad(true);
    p.clear_grad();
  }
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor64 value = loss();
    if (value.tape_id()) tape.backward(value);
  }

  GradCheckReport report;
  for (Tensor64& p : params) {
    const std::vector<double> analytic =
        p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                     : std::vector<double>(static_cast<std::size_t>(p.numel()), 0.0);
    for (std::size_t i : probe_coordinates(analytic.size(), options.max_coords, rng)) {
      const double original = p.data()[i];
      const double numeric = central_difference(
          [&](double offset) {
            p.mutable_data()[i] = original + offset;
            return loss().item();
          },
          options.eps);
      p.mutable_data()[i] = original;
      fold(report, analytic[i], numeric, options);
    }
  }
  return report;
}

}  // namespace csformer
