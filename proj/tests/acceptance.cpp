// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "lgm/bench.hpp"
#include "lgm/blocks.hpp"
#include "lgm/gradcheck.hpp"
#include "lgm/heatmap.hpp"
#include "lgm/kernels.hpp"
#include "lgm/model.hpp"
#include "lgm/npt.hpp"
#include "lgm/parallel.hpp"
#include "lgm/selftest.hpp"
#include "lgm/toy.hpp"
#include "support/cost_oracle.hpp"
#include "support/oracles.hpp"

using namespace lgm;
namespace k = lgm::kernels;
using oracle::rand_int;
using oracle::random_tensor;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    notes.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
  }
  void info(const std::string& what) { notes.push_back("info " + what); }
};

template <typename... Args>
std::string fmt(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---- 1 -----------------------------------------------------------------------

Outcome npt_bijection() {
  Outcome o;
  std::mt19937_64 rng(1001);
  int bad = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    const auto h = rand_int(rng, 1, 4), w = rand_int(rng, 1, 4);
    const auto H = h * rand_int(rng, 1, 6), W = w * rand_int(rng, 1, 6), d = rand_int(rng, 1, 5);
    const auto dims = npt::PatchDims::make(H, W, d, h, w);
    const auto x = random_tensor<float>({d, H, W}, rng);
    const auto u = npt::npt_op1(x, dims);
    if (!bitwise_equal(u, oracle::unfold(x, h, w))) ++bad;
    if (!bitwise_equal(npt::npt_op3(npt::npt_op2(u), dims), x)) ++bad;
  }
  o.require(bad == 0, fmt("1000 random (H, W, d, h, w): chain is bitwise identity, op1 matches coordinate map (%d mismatches)", bad));

  int perm_bad = 0, shapes = 0;
  for (std::int64_t h : {1, 2, 4})
    for (std::int64_t w : {1, 2, 4}) {
      const auto dims = npt::PatchDims::make(4, 4, 2, h, w);
      const std::int64_t n = 32;
      std::vector<std::vector<double>> m1(n, std::vector<double>(n)), chain(n, std::vector<double>(n));
      for (std::int64_t j = 0; j < n; ++j) {
        Tensor<double> e({2, 4, 4});
        e[j] = 1;
        const auto u = npt::npt_op1(e, dims);
        const auto y = npt::npt_op3(npt::npt_op2(u), dims);
        for (std::int64_t i = 0; i < n; ++i) {
          m1[i][j] = u[i];
          chain[i][j] = y[i];
        }
      }
      for (std::int64_t i = 0; i < n; ++i) {
        double row = 0;
        for (std::int64_t j = 0; j < n; ++j) {
          row += m1[i][j];
          if (chain[i][j] != (i == j ? 1.0 : 0.0)) ++perm_bad;
        }
        if (row != 1.0) ++perm_bad;
      }
      ++shapes;
    }
  o.require(perm_bad == 0, fmt("H=W=4, d=2, %d patch shapes: op1 is a permutation matrix, op3*op2*op1 == I", shapes));
  return o;
}

// ---- 2 -----------------------------------------------------------------------

Outcome kernel_oracles() {
  Outcome o;
  std::mt19937_64 rng(2002);
  double e_conv = 0, e_dec = 0, e_lin = 0, e_ln = 0, e_bn = 0, e_adj_c = 0, e_adj_d = 0;
  std::set<int> groups_seen;
  for (int rep = 0; rep < 200; ++rep) {
    {
      const int g = static_cast<int>(rand_int(rng, 1, 4));
      groups_seen.insert(g);
      const auto ci = g * rand_int(rng, 1, 3);
      const auto co = rep % 5 == 0 ? ci : g * rand_int(rng, 1, 3);  // includes depthwise when ci == g
      const auto kk = rand_int(rng, 1, 3);
      const int s = static_cast<int>(rand_int(rng, 1, 2)), p = static_cast<int>(rand_int(rng, 0, kk / 2 + 1));
      auto x = random_tensor<float>({rand_int(rng, 1, 2), ci, rand_int(rng, kk, 8), rand_int(rng, kk, 8)}, rng);
      auto w = random_tensor<float>({co, ci / g, kk, kk}, rng);
      auto b = random_tensor<float>({co}, rng);
      const Tensor<float>* bp = rep % 2 ? &b : nullptr;
      e_conv = std::max(e_conv, max_abs_diff(k::conv2d(x, w, bp, {s, p, g}), oracle::conv2d(x, w, bp, s, p, g)));
    }
    {
      const auto ci = rand_int(rng, 1, 4), co = rand_int(rng, 1, 4), kk = rand_int(rng, 1, 4);
      const int s = static_cast<int>(rand_int(rng, 1, 3)), p = static_cast<int>(rand_int(rng, 0, (kk - 1) / 2));
      auto x = random_tensor<float>({rand_int(rng, 1, 2), ci, rand_int(rng, 1, 5), rand_int(rng, 1, 5)}, rng);
      auto w = random_tensor<float>({ci, co, kk, kk}, rng);
      auto b = random_tensor<float>({co}, rng);
      const Tensor<float>* bp = rep % 2 ? &b : nullptr;
      e_dec = std::max(e_dec, max_abs_diff(k::conv_transpose2d(x, w, bp, s, p), oracle::conv_transpose2d(x, w, bp, s, p)));
    }
    {
      const auto fi = rand_int(rng, 1, 24), fo = rand_int(rng, 1, 24);
      auto x = random_tensor<float>({rand_int(rng, 1, 3), rand_int(rng, 1, 4), fi}, rng);
      auto w = random_tensor<float>({fo, fi}, rng);
      auto b = random_tensor<float>({fo}, rng);
      e_lin = std::max(e_lin, max_abs_diff(k::linear(x, w, &b), oracle::linear(x, w, &b)));
    }
    {
      const auto L = rand_int(rng, 2, 24);
      auto x = random_tensor<float>({rand_int(rng, 1, 3), rand_int(rng, 1, 4), L}, rng, -2, 2);
      auto g = random_tensor<float>({L}, rng), b = random_tensor<float>({L}, rng);
      e_ln = std::max(e_ln, max_abs_diff(k::layer_norm(x, g, b, 1e-5).output, oracle::layer_norm(x, g, b, 1e-5)));
    }
    {
      const auto C = rand_int(rng, 1, 4);
      auto x = random_tensor<float>({rand_int(rng, 1, 3), C, rand_int(rng, 1, 4), rand_int(rng, 2, 4)}, rng, -2, 2);
      auto g = random_tensor<float>({C}, rng), b = random_tensor<float>({C}, rng);
      auto rm = random_tensor<float>({C}, rng), rv = random_tensor<float>({C}, rng, 0.5, 2);
      std::vector<double> orm(rm.storage().begin(), rm.storage().end()), orv(rv.storage().begin(), rv.storage().end());
      const bool train = rep % 2 == 0;
      const auto y = k::batch_norm2d(x, g, b, rm, rv, 1e-5, 0.1, train).output;
      const auto want = oracle::batch_norm(x, g, b, orm, orv, 1e-5, 0.1, train);
      e_bn = std::max(e_bn, max_abs_diff(y, want));
      for (std::int64_t c = 0; c < C; ++c) {
        e_bn = std::max({e_bn, std::abs(rm[c] - orm[c]), std::abs(rv[c] - orv[c])});
      }
    }
    {
      // <conv(x), y> == <x, conv^T(y)>, and the transposed convolution is
      // the adjoint of the correlation with the same weights.
      const int g = static_cast<int>(rand_int(rng, 1, 2));
      const k::ConvOptions opt{static_cast<int>(rand_int(rng, 1, 2)), static_cast<int>(rand_int(rng, 0, 1)), g};
      const auto ci = g * rand_int(rng, 1, 3), co = g * rand_int(rng, 1, 3);
      auto x = random_tensor<double>({1, ci, rand_int(rng, 3, 7), rand_int(rng, 3, 7)}, rng);
      auto w = random_tensor<double>({co, ci / g, 3, 3}, rng);
      const auto cx = k::conv2d(x, w, static_cast<const Tensor<double>*>(nullptr), opt);
      auto y = random_tensor<double>(cx.shape(), rng);
      e_adj_c = std::max(e_adj_c, std::abs(oracle::inner(cx, y) - oracle::inner(x, k::conv2d_backward_input(y, w, x.shape(), opt))));

      const int s = static_cast<int>(rand_int(rng, 1, 2));
      auto xd = random_tensor<double>({1, 2, rand_int(rng, 1, 4), rand_int(rng, 1, 4)}, rng);
      auto wd = random_tensor<double>({2, 3, 4, 4}, rng);
      const auto dx = k::conv_transpose2d(xd, wd, static_cast<const Tensor<double>*>(nullptr), s, 1);
      auto yd = random_tensor<double>(dx.shape(), rng);
      const auto back = k::conv2d(yd, wd, static_cast<const Tensor<double>*>(nullptr), {s, 1, 1});
      e_adj_d = std::max(e_adj_d, std::abs(oracle::inner(dx, yd) - oracle::inner(xd, back)));
    }
  }
  const double tol = 1e-5;
  o.require(e_conv < tol && groups_seen.size() == 4, fmt("conv2d, groups 1..4 incl. depthwise: max err %.2e", e_conv));
  o.require(e_dec < tol, fmt("conv_transpose2d: max err %.2e", e_dec));
  o.require(e_lin < tol, fmt("linear: max err %.2e", e_lin));
  o.require(e_ln < tol, fmt("layer_norm: max err %.2e", e_ln));
  o.require(e_bn < tol, fmt("batch_norm (train and eval, running stats): max err %.2e", e_bn));
  o.require(e_adj_c < tol && e_adj_d < tol, fmt("adjoint identity conv %.2e, deconv %.2e", e_adj_c, e_adj_d));
  o.info("200 f32 instances per kernel, adjoint in f64");
  return o;
}

// ---- 3 -----------------------------------------------------------------------

struct GradCase {
  GradCheckFn f;
  ParamSet<double> ps;
  std::vector<Tensor<double>> in;
  bool train = false;
};

using CaseMaker = std::function<GradCase(std::mt19937_64&)>;

// Owns blocks built inside a case so the closure can reference them.
template <typename B>
GradCheckFn unary(std::shared_ptr<B> b) {
  return [b](Context<double>& c, const std::vector<Var<double>>& x) { return b->forward(c, x[0]); };
}

void randomize(ParamSet<double>& ps, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.7, 0.7);
  for (std::size_t i = 0; i < ps.size(); ++i)
    if (ps.trainable(i))
      for (auto& v : ps[i].storage()) v = u(rng);
}

std::vector<std::pair<std::string, CaseMaker>> grad_targets() {
  std::vector<std::pair<std::string, CaseMaker>> t;
  auto shape4 = [](std::mt19937_64& r, std::int64_t c) {
    return Shape{rand_int(r, 1, 2), c, rand_int(r, 2, 4), rand_int(r, 2, 4)};
  };
  t.push_back({"conv2d", [=](std::mt19937_64& r) {
                 GradCase g;
                 const int grp = static_cast<int>(rand_int(r, 1, 2));
                 const auto ci = grp * rand_int(r, 1, 2), co = grp * rand_int(r, 1, 2);
                 const k::ConvOptions opt{static_cast<int>(rand_int(r, 1, 2)), 1, grp};
                 g.ps.add("w", random_tensor<double>({co, ci / grp, 3, 3}, r));
                 g.ps.add("b", random_tensor<double>({co}, r));
                 g.f = [opt](Context<double>& c, const std::vector<Var<double>>& x) {
                   return conv2d<double>(x[0], c.param(0), c.param(1), opt);
                 };
                 g.in = {random_tensor<double>(shape4(r, ci), r)};
                 return g;
               }});
  t.push_back({"conv_transpose2d", [=](std::mt19937_64& r) {
                 GradCase g;
                 const auto ci = rand_int(r, 1, 3), co = rand_int(r, 1, 3);
                 g.ps.add("w", random_tensor<double>({ci, co, 4, 4}, r));
                 g.ps.add("b", random_tensor<double>({co}, r));
                 g.f = [](Context<double>& c, const std::vector<Var<double>>& x) {
                   return conv_transpose2d<double>(x[0], c.param(0), c.param(1), 2, 1);
                 };
                 g.in = {random_tensor<double>(shape4(r, ci), r)};
                 return g;
               }});
  t.push_back({"linear", [=](std::mt19937_64& r) {
                 GradCase g;
                 const auto fi = rand_int(r, 1, 6), fo = rand_int(r, 1, 6);
                 g.ps.add("w", random_tensor<double>({fo, fi}, r));
                 g.ps.add("b", random_tensor<double>({fo}, r));
                 g.f = [](Context<double>& c, const std::vector<Var<double>>& x) {
                   return linear<double>(x[0], c.param(0), c.param(1));
                 };
                 g.in = {random_tensor<double>({rand_int(r, 1, 3), rand_int(r, 1, 3), fi}, r)};
                 return g;
               }});
  t.push_back({"layer_norm", [=](std::mt19937_64& r) {
                 GradCase g;
                 const auto L = rand_int(r, 2, 6);
                 g.ps.add("g", random_tensor<double>({L}, r));
                 g.ps.add("b", random_tensor<double>({L}, r));
                 g.f = [](Context<double>& c, const std::vector<Var<double>>& x) {
                   return layer_norm(x[0], c.param(0), c.param(1), 1e-5);
                 };
                 g.in = {random_tensor<double>({rand_int(r, 1, 3), L}, r)};
                 return g;
               }});
  for (bool train : {true, false}) {
    t.push_back({train ? "batch_norm2d (batch stats)" : "batch_norm2d (running stats)", [=](std::mt19937_64& r) {
                   GradCase g;
                   const auto C = rand_int(r, 1, 3);
                   g.ps.add("g", random_tensor<double>({C}, r));
                   g.ps.add("b", random_tensor<double>({C}, r));
                   g.ps.add("rm", random_tensor<double>({C}, r), false);
                   g.ps.add("rv", random_tensor<double>({C}, r, 0.5, 2), false);
                   g.f = [](Context<double>& c, const std::vector<Var<double>>& x) {
                     if (c.mode().train_norm) {
                       auto& st = *c.state();
                       return batch_norm2d(x[0], c.param(0), c.param(1), st[2], st[3], 1e-5, 0.1, true);
                     }
                     Tensor<double> rm = c.params()[2], rv = c.params()[3];
                     return batch_norm2d(x[0], c.param(0), c.param(1), rm, rv, 1e-5, 0.1, false);
                   };
                   Shape s = shape4(r, C);
                   s[0] = 2;
                   g.in = {random_tensor<double>(s, r)};
                   g.train = train;
                   return g;
                 }});
  }
  for (auto act : {k::Activation::gelu, k::Activation::relu6}) {
    t.push_back({act == k::Activation::gelu ? "gelu" : "relu6", [=](std::mt19937_64& r) {
                   GradCase g;
                   g.f = [act](Context<double>&, const std::vector<Var<double>>& x) { return activation(x[0], act); };
                   g.in = {random_tensor<double>(shape4(r, 2), r, -3, 8)};
                   return g;
                 }});
  }
  t.push_back({"add, mul, scale, concat, reshape", [=](std::mt19937_64& r) {
                 GradCase g;
                 g.f = [](Context<double>&, const std::vector<Var<double>>& x) {
                   auto c = concat_channels(mul(x[0], x[1]), scale(add(x[0], x[1]), -1.5));
                   return reshape(c, {static_cast<std::int64_t>(c.value().numel())});
                 };
                 const auto s = shape4(r, rand_int(r, 1, 3));
                 g.in = {random_tensor<double>(s, r), random_tensor<double>(s, r)};
                 return g;
               }});
  t.push_back({"sum, mean, gather", [=](std::mt19937_64& r) {
                 GradCase g;
                 const auto n = rand_int(r, 2, 10);
                 auto idx = std::make_shared<std::vector<std::int64_t>>();
                 for (int i = 0; i < 12; ++i) idx->push_back(rand_int(r, -1, n - 1));
                 std::shared_ptr<const std::vector<std::int64_t>> cidx = idx;
                 g.f = [cidx](Context<double>&, const std::vector<Var<double>>& x) {
                   auto gg = gather(x[0], cidx, {12});
                   auto sq = mul(gg, gg);
                   return add(reshape(sum(sq), {1}), reshape(mean(x[0]), {1}));
                 };
                 g.in = {random_tensor<double>({n}, r)};
                 return g;
               }});
  t.push_back({"masked_mse", [=](std::mt19937_64& r) {
                 GradCase g;
                 const auto s = shape4(r, 3);
                 auto target = random_tensor<double>(s, r);
                 Tensor<double> mask(s);
                 for (auto& v : mask.storage()) v = rand_int(r, 0, 1);
                 g.f = [target, mask](Context<double>&, const std::vector<Var<double>>& x) {
                   return masked_mse(x[0], target, mask);
                 };
                 g.in = {random_tensor<double>(s, r)};
                 return g;
               }});
  t.push_back({"npt ops", [=](std::mt19937_64& r) {
                 GradCase g;
                 const auto d = rand_int(r, 1, 3), h = rand_int(r, 1, 3), w = rand_int(r, 1, 3);
                 const auto H = rand_int(r, 1, 5), W = rand_int(r, 1, 5);
                 const auto dims = npt::PatchDims::make(H, W, d, h, w, true);
                 g.f = [dims](Context<double>&, const std::vector<Var<double>>& x) {
                   auto u = npt::npt_op1(x[0], dims);
                   return npt::npt_op3(npt::npt_op2(mul(u, u)), dims);
                 };
                 g.in = {random_tensor<double>({1, d, H, W}, r)};
                 return g;
               }});
  t.push_back({"channel_shuffle", [=](std::mt19937_64& r) {
                 GradCase g;
                 const auto n = rand_int(r, 1, 3), per = rand_int(r, 1, 3);
                 g.f = [n](Context<double>&, const std::vector<Var<double>>& x) {
                   auto s = channel_shuffle(x[0], n);
                   return mul(s, s);
                 };
                 g.in = {random_tensor<double>(shape4(r, n * per), r)};
                 return g;
               }});
  t.push_back({"mlp_block", [=](std::mt19937_64& r) {
                 GradCase g;
                 InitPlan plan;
                 const auto L = rand_int(r, 2, 5);
                 auto b = std::make_shared<MlpBlock>(MlpBlock::create(g.ps, plan, "m", L, 2));
                 g.f = unary(b);
                 g.in = {random_tensor<double>({rand_int(r, 1, 2), rand_int(r, 1, 3), L}, r)};
                 return g;
               }});
  t.push_back({"larm_forward", [=](std::mt19937_64& r) {
                 GradCase g;
                 InitPlan plan;
                 const auto d = rand_int(r, 1, 2), H = rand_int(r, 2, 4), W = rand_int(r, 2, 4);
                 const auto dims = npt::PatchDims::make(H, W, d, rand_int(r, 1, 2), rand_int(r, 1, 2), true);
                 auto b = std::make_shared<Larm>(Larm::create(g.ps, plan, "l", dims, 2));
                 g.f = unary(b);
                 g.in = {random_tensor<double>({1, d, H, W}, r)};
                 return g;
               }});
  t.push_back({"mobilevim_forward", [=](std::mt19937_64& r) {
                 GradCase g;
                 InitPlan plan;
                 const auto C = rand_int(r, 1, 2), d = rand_int(r, 1, 2), H = rand_int(r, 2, 4), W = rand_int(r, 2, 3);
                 const auto dims = npt::PatchDims::make(H, W, d, 2, 2, true);
                 auto b = std::make_shared<MobileVim>(MobileVim::create(g.ps, plan, "v", C, d, dims, 2));
                 g.f = unary(b);
                 g.in = {random_tensor<double>({1, C, H, W}, r)};
                 return g;
               }});
  t.push_back({"inverted_residual", [=](std::mt19937_64& r) {
                 GradCase g;
                 InitPlan plan;
                 const auto ci = rand_int(r, 1, 3), co = rand_int(r, 1, 3);
                 const int s = static_cast<int>(rand_int(r, 1, 2));
                 auto b = std::make_shared<InvertedResidual>(
                     InvertedResidual::create(g.ps, plan, "ir", ci, co, s, rand_int(r, 1, 3), 1e-5, 0.1));
                 g.f = unary(b);
                 g.in = {random_tensor<double>({2, ci, rand_int(r, 2, 4), rand_int(r, 2, 4)}, r)};
                 g.train = true;
                 return g;
               }});
  t.push_back({"deconv stage", [=](std::mt19937_64& r) {
                 GradCase g;
                 InitPlan plan;
                 const auto ci = rand_int(r, 1, 3), co = rand_int(r, 1, 3);
                 auto b = std::make_shared<DeconvStage>(DeconvStage::create(g.ps, plan, "up", ci, co, 1e-5, 0.1));
                 g.f = unary(b);
                 g.in = {random_tensor<double>({2, ci, rand_int(r, 1, 3), rand_int(r, 1, 3)}, r)};
                 g.train = true;
                 return g;
               }});
  for (auto kind : {FusionKind::none, FusionKind::conv3x3, FusionKind::dw_separable, FusionKind::sfusion}) {
    t.push_back({std::string("sfusion_forward ") + to_string(kind), [=](std::mt19937_64& r) {
                   GradCase g;
                   InitPlan plan;
                   const auto n = rand_int(r, 1, 2), kk = rand_int(r, 1, 2);
                   const auto up = n * kk * rand_int(r, 1, 2), skip = n * kk * rand_int(r, 1, 2);
                   const auto out = kind == FusionKind::none ? up : kk * rand_int(r, 1, 2);
                   auto f = std::make_shared<Fusion>(Fusion::create(g.ps, plan, "f", FusionMode{kind, n, kk}, up, skip, out));
                   g.f = [f](Context<double>& c, const std::vector<Var<double>>& x) { return f->forward(c, x[0], x[1]); };
                   const auto H = rand_int(r, 2, 4), W = rand_int(r, 2, 4);
                   g.in = {random_tensor<double>({1, up, H, W}, r), random_tensor<double>({1, skip, H, W}, r)};
                   return g;
                 }});
  }
  return t;
}

Outcome gradient_suite() {
  Outcome o;
  std::mt19937_64 rng(3003);
  std::size_t checked = 0, redrawn = 0;
  for (const auto& [name, make] : grad_targets()) {
    double worst = 0;
    std::string where;
    for (int rep = 0; rep < 50; ++rep) {
      GradCheckResult r;
      // An instance with a relu6 clip inside the difference stencil is not
      // differentiable there; draw another one.
      for (int attempt = 0;; ++attempt) {
        GradCase g = make(rng);
        randomize(g.ps, rng);
        r = grad_check(g.f, g.ps, g.in, g.train, rng());
        if (r.nonsmooth == 0 || attempt == 20) break;
        ++redrawn;
      }
      checked += r.checked;
      if (r.max_rel_err >= worst) {
        worst = r.max_rel_err;
        where = r.worst;
      }
    }
    o.require(worst < 1e-4, fmt("%-32s 50 instances, max rel err %.2e (%s)", name.c_str(), worst, where.c_str()));
  }
  o.info(fmt("%zu gradient entries compared, fourth-order differences at h = 1e-5", checked));
  o.info(fmt("%zu instances redrawn because a relu6 clip fell inside the stencil", redrawn));
  return o;
}

// ---- 4 -----------------------------------------------------------------------

Outcome global_reach() {
  Outcome o;
  auto m = build_model<float>(ModelConfig::reference(64, 48));
  init_weights(m, 4004);
  std::mt19937_64 rng(4005);
  auto x = random_tensor<float>({3, 64, 48}, rng);
  const auto y0 = m.forward(x);
  for (auto [py, px] : {std::pair<std::int64_t, std::int64_t>{3, 4}, {60, 44}}) {
    auto xp = x;
    xp.at({1, py, px}) += 1.0f;
    const auto y1 = m.forward(xp);
    const auto H = y0.dim(1), W = y0.dim(2);
    double q[4] = {0, 0, 0, 0};
    for (std::int64_t c = 0; c < y0.dim(0); ++c)
      for (std::int64_t i = 0; i < H; ++i)
        for (std::int64_t j = 0; j < W; ++j)
          q[(i >= H / 2) * 2 + (j >= W / 2)] += std::abs(y1.at({c, i, j}) - y0.at({c, i, j}));
    const bool all = q[0] > 0 && q[1] > 0 && q[2] > 0 && q[3] > 0;
    o.require(all, fmt("pixel (%lld, %lld): |dy| per quadrant TL %.2e TR %.2e BL %.2e BR %.2e", static_cast<long long>(py),
                       static_cast<long long>(px), q[0], q[1], q[2], q[3]));
  }
  return o;
}

// ---- 5 -----------------------------------------------------------------------

Outcome cost_accounting() {
  Outcome o;
  int single_ok = 0, composite_ok = 0;
  auto single = [&](const std::string& what, std::int64_t params, std::int64_t want_params, std::int64_t macs,
                    std::int64_t want_macs) {
    const bool ok = params == want_params && macs == want_macs;
    single_ok += ok;
    if (!ok) o.require(false, fmt("%s: params %lld/%lld MACs %lld/%lld", what.c_str(), static_cast<long long>(params),
                                  static_cast<long long>(want_params), static_cast<long long>(macs),
                                  static_cast<long long>(want_macs)));
  };
  auto conv_case = [&](const std::string& what, ConvSpec spec, Shape in, std::int64_t want_p, std::int64_t want_m) {
    ParamSet<float> ps;
    InitPlan plan;
    const auto c = Conv2dLayer::create(ps, plan, "c", spec);
    CostLog log;
    c.cost(in, log);
    single(what, ps.trainable_count(), want_p, log.at(0).macs, want_m);
  };
  conv_case("conv 3x3 16->32 +bias @64x48", {16, 32, 3, 1, 1, 1, true}, {16, 64, 48}, 4640, 14155776);
  conv_case("conv 1x1 24->144 @64x48", {24, 144, 1, 1, 0, 1, false}, {24, 64, 48}, 3456, 10616832);
  conv_case("depthwise 3x3 s2 144 @64x48", {144, 144, 3, 2, 1, 144, false}, {144, 64, 48}, 1296, 995328);
  conv_case("grouped 3x3 k2 64->32 +bias @16x12", {64, 32, 3, 1, 1, 2, true}, {64, 16, 12}, 9248, 1769472);
  conv_case("stem 3x3 s2 3->16 @256x192", {3, 16, 3, 2, 1, 1, false}, {3, 256, 192}, 432, 5308416);
  {
    ParamSet<float> ps;
    InitPlan plan;
    LinearLayer::create(ps, plan, "l", 10, 20);
    single("linear 10->20 x6 rows", ps.trainable_count(), 220, linear_macs(6, 10, 20), 1200);
  }
  {
    ParamSet<float> ps;
    InitPlan plan;
    LinearLayer::create(ps, plan, "l", 192, 384);
    single("linear 192->384 x256 rows", ps.trainable_count(), 74112, linear_macs(256, 192, 384), 18874368);
  }
  {
    ParamSet<float> ps;
    InitPlan plan;
    const auto d = DeconvStage::create(ps, plan, "up", 96, 64, 1e-5, 0.1);
    CostLog log;
    d.cost({96, 8, 6}, log);
    single("deconv 4x4 s2 96->64 @8x6", ps.trainable_count(), 98432, log.at(0).macs, 4718592);
  }
  {
    ParamSet<float> ps;
    InitPlan plan;
    const auto m = MlpBlock::create(ps, plan, "m", 4, 2);
    single("mlp L=4 r=2 x16 rows", ps.trainable_count(), 84, m.macs(16), 1024);
  }
  {
    ParamSet<float> ps;
    InitPlan plan;
    const auto c = ConvBnAct::create(ps, plan, "cb", {16, 16, 1, 1, 0, 1, false}, true, 1e-5, 0.1);
    CostLog log;
    c.cost({16, 8, 8}, log);
    single("conv 1x1 16->16 + BN @8x8", ps.trainable_count(), 288, log.at(0).macs, 16384);
  }
  o.require(single_ok == 10, fmt("%d/10 single-layer configs match hand derivations exactly", single_ok));

  auto composite = [&](const std::string& what, std::int64_t params, std::int64_t want_p, std::int64_t macs,
                       std::int64_t want_m) {
    const bool ok = params == want_p && macs == want_m;
    composite_ok += ok;
    if (!ok) o.require(false, fmt("%s: params %lld/%lld MACs %lld/%lld", what.c_str(), static_cast<long long>(params),
                                  static_cast<long long>(want_p), static_cast<long long>(macs),
                                  static_cast<long long>(want_m)));
  };
  auto total = [](const CostLog& log) {
    std::int64_t s = 0;
    for (const auto& l : log) s += l.macs;
    return s;
  };
  {
    ParamSet<float> ps;
    InitPlan plan;
    const auto b = InvertedResidual::create(ps, plan, "ir", 16, 24, 2, 6, 1e-5, 0.1);
    CostLog log;
    b.cost({16, 64, 48}, log);
    composite("inverted residual 16->24 s2 t6 @64x48", ps.trainable_count(), 5136, total(log), 7151616);
  }
  {
    ParamSet<float> ps;
    InitPlan plan;
    const auto v = MobileVim::create(ps, plan, "v", 8, 4, npt::PatchDims::make(4, 4, 4, 2, 2), 2);
    CostLog log;
    v.cost({8, 4, 4}, log);
    composite("mobilevim C=8 d=4 @4x4", ps.trainable_count(), 1988, total(log), 30720);
  }
  {
    ParamSet<float> ps;
    InitPlan plan;
    const auto l = Larm::create(ps, plan, "l", npt::PatchDims::make(4, 6, 3, 2, 2), 2);
    CostLog log;
    l.cost(log);
    composite("larm d=3 P=4 N=6", ps.trainable_count(), 258, total(log), 2880);
  }
  {
    ParamSet<float> ps;
    InitPlan plan;
    const auto f = Fusion::create(ps, plan, "f", FusionMode{FusionKind::sfusion, 2, 2}, 8, 8, 8);
    CostLog log;
    f.cost({8, 4, 4}, log);
    composite("sfusion 8+8->8 n=k=2 @4x4", ps.trainable_count(), 584, total(log), 9216);
  }
  const auto ref = build_model<float>(ModelConfig::reference());
  const auto rep = count_flops(ref);
  const auto hand = oracle::hand_reference(256, 192);
  composite("reference model @256x192", count_params(ref), hand.params, rep.macs, hand.macs);
  o.require(composite_ok == 5, fmt("%d/5 composite configs match hand derivations exactly", composite_ok));

  const auto p = count_params(ref);
  o.require(p >= 900000 && p <= 1400000, fmt("reference params %lld in [0.9M, 1.4M] (published figure 1.1M)", static_cast<long long>(p)));
  o.info(fmt("reference @256x192: %.3f GMACs, %.3f G at 2 FLOPs/MAC", rep.macs / 1e9, rep.flops_2x() / 1e9));

  const auto lo = count_flops(ModelConfig::reference(), 256, 192);
  const auto hi = count_flops(ModelConfig::reference(), 512, 384);
  const double conv_ratio = static_cast<double>(hi.conv_macs) / static_cast<double>(lo.conv_macs);
  const double total_ratio = static_cast<double>(hi.macs) / static_cast<double>(lo.macs);
  o.require(hi.conv_macs == 4 * lo.conv_macs, fmt("convolution MACs 512x384 / 256x192 = %.6f (exactly 4)", conv_ratio));
  o.require(hi.macs == 4 * lo.macs,
            fmt("total FLOPs 512x384 / 256x192 = %.6f (criterion asks exactly 4; inter-patch mixing %lld -> %lld MACs "
                "is quadratic in the patch count)",
                total_ratio, static_cast<long long>(lo.token_mixing_macs), static_cast<long long>(hi.token_mixing_macs)));
  return o;
}

// ---- 6 -----------------------------------------------------------------------

Outcome fusion_modes() {
  Outcome o;
  auto count = [](FusionKind kind, std::int64_t up, std::int64_t skip, std::int64_t out) {
    ParamSet<float> ps;
    InitPlan plan;
    Fusion::create(ps, plan, "f", FusionMode{kind, 2, 2}, up, skip, out);
    return ps.trainable_count();
  };
  for (std::int64_t C : {16, 32, 48, 64}) {
    const auto c = count(FusionKind::conv3x3, C, C, C), s = count(FusionKind::sfusion, C, C, C),
               d = count(FusionKind::dw_separable, C, C, C), n = count(FusionKind::none, C, C, C);
    o.require(c > s && s >= d && d > n,
              fmt("C=%lld: conv3x3 %lld > sfusion %lld >= dw_separable %lld > none %lld", static_cast<long long>(C),
                  static_cast<long long>(c), static_cast<long long>(s), static_cast<long long>(d),
                  static_cast<long long>(n)));
  }
  std::int64_t totals[4];
  int i = 0;
  for (auto kind : {FusionKind::conv3x3, FusionKind::sfusion, FusionKind::dw_separable, FusionKind::none}) {
    auto cfg = ModelConfig::reference();
    cfg.fusion.kind = kind;
    totals[i++] = count_params(build_model<float>(cfg));
  }
  o.require(totals[0] > totals[1] && totals[1] >= totals[2] && totals[2] > totals[3],
            fmt("reference model: conv3x3 %lld > sfusion %lld >= dw_separable %lld > none %lld",
                static_cast<long long>(totals[0]), static_cast<long long>(totals[1]), static_cast<long long>(totals[2]),
                static_cast<long long>(totals[3])));

  std::mt19937_64 rng(6006);
  int equal = 0;
  for (int rep = 0; rep < 20; ++rep) {
    ParamSet<float> ps;
    InitPlan plan;
    const auto up = rand_int(rng, 1, 6), skip = rand_int(rng, 1, 6), out = rand_int(rng, 1, 6);
    const auto s = Fusion::create(ps, plan, "s", FusionMode{FusionKind::sfusion, 1, 1}, up, skip, out);
    const auto c = Fusion::create(ps, plan, "c", FusionMode{FusionKind::conv3x3, 1, 1}, up, skip, out);
    ps[s.conv->weight] = random_tensor<float>(ps[s.conv->weight].shape(), rng);
    ps[*s.conv->bias] = random_tensor<float>(ps[*s.conv->bias].shape(), rng);
    ps[c.conv->weight] = ps[s.conv->weight];
    ps[*c.conv->bias] = ps[*s.conv->bias];
    const auto H = rand_int(rng, 1, 6), W = rand_int(rng, 1, 6);
    const auto a = random_tensor<float>({1, up, H, W}, rng), b = random_tensor<float>({1, skip, H, W}, rng);
    auto run = [&](const Fusion& f) {
      Tape<float> tape(false);
      Context<float> ctx(tape, ps, ForwardMode{});
      return f.forward(ctx, tape.leaf(a), tape.leaf(b)).value();
    };
    equal += bitwise_equal(run(s), run(c));
  }
  o.require(equal == 20, fmt("sfusion n=k=1 bitwise equal to conv3x3 with shared weights: %d/20", equal));
  return o;
}

// ---- 7 -----------------------------------------------------------------------

KeypointSet kset(std::initializer_list<Keypoint> pts) {
  KeypointSet s;
  s.points = pts;
  return s;
}

Outcome heatmap_round_trip() {
  Outcome o;
  for (double sigma : {1.0, 2.0, 3.0}) {
    double worst = 0;
    for (int i = 0; i < 9; ++i)
      for (int j = 0; j < 9; ++j) {
        const double x = 20.0 + i / 9.0, y = 30.0 + j / 9.0;
        const auto t = gaussian_targets<float>(kset({{x, y, 1, true}}), 64, 48, sigma);
        const auto d = decode_heatmaps(t);
        worst = std::max({worst, std::abs(d[0].x - x), std::abs(d[0].y - y)});
      }
    o.require(worst <= 0.5, fmt("sigma %.0f: 81 sub-pixel offsets, max per-axis error %.4f cells", sigma, worst));
  }
  auto kp = [](double x, double y, bool v = true) { return Keypoint{x, y, 1.0, v}; };
  int exact = 0;
  // PCKh at alpha 0.5, head 10: threshold 5, inclusive.
  exact += pckh(kset({kp(0, 0), kp(3, 0), kp(5, 0), kp(6, 0)}), kset({kp(0, 0), kp(0, 0), kp(0, 0), kp(0, 0)}), 10) == 0.75;
  exact += pckh(kset({kp(3, 4), kp(9, 9), kp(1, 1)}), kset({kp(0, 0), kp(0, 0), kp(1, 1, false)}), 10) == 0.5;
  exact += pckh(kset({kp(2, 2)}), kset({kp(2, 2)}), 1.0) == 1.0;
  // OKS exp(-d^2 / (2 s^2 k^2)) averaged over visible ground truth.
  exact += oks(kset({kp(1, 1)}), kset({kp(0, 0)}), 1.0, {1.0}) == std::exp(-1.0);
  exact += oks(kset({kp(0, 0), kp(2, 2), kp(7, 7)}), kset({kp(0, 0), kp(0, 0), kp(0, 0, false)}), 4.0, {1.0, 2.0, 1.0}) ==
           (1.0 + std::exp(-0.25)) / 2.0;
  o.require(exact == 5, fmt("%d/5 hand-computed pckh/oks cases exact", exact));
  return o;
}

// ---- 8 and 9 ------------------------------------------------------------------

TrainResult toy_run() {
  const auto cfg = toy_config();
  const auto data = make_toy_dataset(cfg, 8, 7);
  TrainOptions opt;
  opt.steps = 200;
  opt.seed = 1;
  return train_toy(cfg, data, opt);
}

TrainResult first_toy_run;

Outcome toy_learnability() {
  Outcome o;
  first_toy_run = toy_run();
  const auto& r = first_toy_run;
  const double ratio = r.final_loss / r.initial_loss;
  o.require(ratio <= 0.1, fmt("final MSE %.3e / initial %.3e = %.2e (need <= 0.1)", r.final_loss, r.initial_loss, ratio));
  o.require(r.within_2_cells >= 0.9, fmt("decoded within 2 cells: %.1f%% of visible keypoints (need >= 90%%)", 100 * r.within_2_cells));
  bool finite = true;
  for (double l : r.losses) finite = finite && std::isfinite(l);
  o.require(finite, fmt("%zu finite training losses", r.losses.size()));
  int violations = 0;
  for (std::size_t i = 0; i + 50 < r.losses.size(); ++i) violations += r.losses[i + 50] > r.losses[i];
  o.require(violations == 0, fmt("loss never higher than 50 steps earlier (%d violations)", violations));
  o.info(fmt("train-set PCKh (head 2 cells) %.3f", r.pckh));
  return o;
}

Outcome determinism() {
  Outcome o;
  set_num_threads(1);
  const auto a = run_selftest(9), b = run_selftest(9);
  bool same = a.suites.size() == b.suites.size();
  for (std::size_t i = 0; same && i < a.suites.size(); ++i) {
    same = a.suites[i].passed == b.suites[i].passed && a.suites[i].failed == b.suites[i].failed &&
           a.suites[i].failures == b.suites[i].failures;
  }
  o.require(same && a.ok(), fmt("selftest twice: identical suite results (%d checks)", a.total_passed()));

  const auto cfg = toy_config();
  const auto x = bench_run(cfg, 64, 48, 1, 5, 1, 11), y = bench_run(cfg, 64, 48, 1, 5, 1, 11);
  o.require(x.output_digest == y.output_digest, fmt("bench twice: output digest %s == %s", x.output_digest.c_str(), y.output_digest.c_str()));
  o.require(x.consistent() && y.consistent() && BenchReport::from_json(x.to_json()).consistent(),
            "bench statistics recomputable from the embedded raw samples");

  const auto second = toy_run();
  const auto& first = first_toy_run;
  o.require(first.losses == second.losses && first.final_loss == second.final_loss,
            fmt("train_toy twice: %zu-step loss traces bit-identical", first.losses.size()));
  o.require(first.to_json().dump() == second.to_json().dump(), "train_toy reports identical, predictions included");
  return o;
}

// ---- 10 ----------------------------------------------------------------------

Outcome bench_trend() {
  Outcome o;
  const auto cfg = ModelConfig::reference();
  const auto small = bench_run(cfg, 256, 192, 1, 5, 1, 10);
  const auto large = bench_run(cfg, 384, 288, 1, 5, 1, 10);
  o.require(small.fps > large.fps, fmt("FPS 256x192 %.2f > FPS 384x288 %.2f (1 thread, 5 timed iterations)", small.fps, large.fps));
  o.info(fmt("mean latency %.1f ms vs %.1f ms, ratio %.2f", small.mean_ms, large.mean_ms, large.mean_ms / small.mean_ms));
  return o;
}

}  // namespace

int main() {
  set_num_threads(1);
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "NPT bijection", npt_bijection},
      {2, "kernel oracles", kernel_oracles},
      {3, "gradient suite", gradient_suite},
      {4, "global reach", global_reach},
      {5, "cost accounting", cost_accounting},
      {6, "fusion-mode ordering", fusion_modes},
      {7, "heatmap round trip", heatmap_round_trip},
      {8, "toy learnability", toy_learnability},
      {9, "determinism", determinism},
      {10, "benchmark trend", bench_trend},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s  criterion %2d  %-22s (%.1f s)\n", o.pass ? "PASS" : "FAIL", c.id, c.name, s);
    for (const auto& n : o.notes) std::printf("        %s\n", n.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
