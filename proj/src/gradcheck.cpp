#include "lgm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "lgm/finite_diff.hpp"

namespace lgm {

GradCheckResult grad_check(const GradCheckFn& f, const ParamSet<double>& params,
                           const std::vector<Tensor<double>>& inputs, bool train_norm, std::uint64_t seed, double h) {
  // Output shape first, to draw the projection r.
  Tensor<double> r;
  {
    Tape<double> tape(false);
    ParamSet<double> scratch = params;
    Context<double> ctx(tape, params, ForwardMode{train_norm, false}, &scratch);
    std::vector<Var<double>> xs;
    for (const auto& x : inputs) xs.push_back(tape.leaf(x));
    r = Tensor<double>(f(ctx, xs).shape());
    std::mt19937_64 rng(seed);
    for (auto& v : r.storage()) v = static_cast<double>(rng() >> 11) * 0x1.0p-53 * 2.0 - 1.0;
  }

  auto evaluate = [&](const ParamSet<double>& ps, const std::vector<Tensor<double>>& in) {
    Tape<double> tape(false);
    ParamSet<double> scratch = ps;
    Context<double> ctx(tape, ps, ForwardMode{train_norm, false}, &scratch);
    std::vector<Var<double>> xs;
    for (const auto& x : in) xs.push_back(tape.leaf(x));
    const Tensor<double>& y = f(ctx, xs).value();
    double s = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) s += y[i] * r[i];
    return s;
  };

  // Analytic gradients.
  Tape<double> tape;
  ParamSet<double> scratch = params;
  Context<double> ctx(tape, params, ForwardMode{train_norm, true}, &scratch);
  std::vector<Var<double>> xs;
  for (const auto& x : inputs) xs.push_back(tape.leaf(x, true));
  for (std::size_t i = 0; i < params.size(); ++i) ctx.param(i);
  Var<double> y = f(ctx, xs);
  Var<double> loss = sum(mul(y, tape.leaf(r)));
  GradResult<double> g = tape.backward(loss);

  struct Entry {
    std::string name;
    const Tensor<double>* analytic;
    SmoothDiff<double> fd;
  };
  std::vector<Entry> entries;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::vector<Tensor<double>> in = inputs;
    entries.push_back({"input" + std::to_string(k), g.find(xs[k]),
                       smooth_diff_grad<double>(
                           [&](const Tensor<double>& probe) {
                             in[k] = probe;
                             return evaluate(params, in);
                           },
                           inputs[k], h)});
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params.trainable(i)) continue;
    ParamSet<double> ps = params;
    entries.push_back({params.name(i), g.find(*ctx.bound(i)),
                       smooth_diff_grad<double>(
                           [&](const Tensor<double>& probe) {
                             ps[i] = probe;
                             return evaluate(ps, inputs);
                           },
                           params[i], h)});
  }

  double global = 0;
  for (const auto& e : entries)
    for (std::size_t i = 0; i < e.fd.grad.numel(); ++i) global = std::max(global, std::fabs(e.fd.grad[i]));

  GradCheckResult res;
  const double kink_tol = 1e-8 * std::max(1.0, std::fabs(loss.value()[0]));
  for (const auto& e : entries) {
    double diff = 0, scale = 0;
    for (std::size_t i = 0; i < e.fd.grad.numel(); ++i) {
      const double a = e.analytic ? (*e.analytic)[i] : 0.0;
      diff = std::max(diff, std::fabs(a - e.fd.grad[i]));
      scale = std::max(scale, std::fabs(e.fd.grad[i]));
      if (e.fd.gap[i] > kink_tol) ++res.nonsmooth;
    }
    const double err = diff / std::max({scale, 1e-3 * global, 1e-6});
    res.checked += e.fd.grad.numel();
    if (err >= res.max_rel_err) {
      res.max_rel_err = err;
      res.worst = e.name;
    }
  }
  return res;
}

}  // namespace lgm
