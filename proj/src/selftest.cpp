#include "lgm/selftest.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>

#include "lgm/blocks.hpp"
#include "lgm/gradcheck.hpp"
#include "lgm/kernels.hpp"
#include "lgm/model.hpp"
#include "lgm/npt.hpp"

namespace lgm {
namespace {

using Rng = std::mt19937_64;

double uni(Rng& rng, double lo = -1, double hi = 1) {
  return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
}
std::int64_t pick(Rng& rng, std::int64_t lo, std::int64_t hi) {
  return lo + static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}
Tensor<double> random_tensor(Rng& rng, Shape s) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.storage()) v = uni(rng);
  return t;
}

class Suite {
 public:
  explicit Suite(std::string name) : start_(std::chrono::steady_clock::now()) { r_.name = std::move(name); }

  void check(bool ok, const std::string& what) {
    if (ok) {
      ++r_.passed;
      return;
    }
    ++r_.failed;
    if (r_.failures.size() < 5) r_.failures.push_back(what);
  }

  // Runs body, counting an exception as a failure.
  void guard(const std::string& what, const std::function<void()>& body) {
    try {
      body();
    } catch (const std::exception& e) {
      check(false, what + ": " + e.what());
    }
  }

  SuiteResult finish() {
    r_.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
    return r_;
  }

 private:
  SuiteResult r_;
  std::chrono::steady_clock::time_point start_;
};

// ---- naive references ----------------------------------------------------------

Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, int stride, int pad, int groups) {
  const std::int64_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t Co = w.dim(0), Cg = w.dim(1), K = w.dim(2), L = w.dim(3);
  const std::int64_t Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - L) / stride + 1;
  const std::int64_t per_out = Co / groups;
  Tensor<double> y({N, Co, Ho, Wo});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t o = 0; o < Co; ++o)
      for (std::int64_t i = 0; i < Ho; ++i)
        for (std::int64_t j = 0; j < Wo; ++j) {
          double s = 0;
          for (std::int64_t c = 0; c < Cg; ++c)
            for (std::int64_t a = 0; a < K; ++a)
              for (std::int64_t b = 0; b < L; ++b) {
                const std::int64_t yy = i * stride - pad + a, xx = j * stride - pad + b;
                if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                s += x.at({n, (o / per_out) * Cg + c, yy, xx}) * w.at({o, c, a, b});
              }
          y.at({n, o, i, j}) = s;
        }
  (void)Ci;
  return y;
}

Tensor<double> naive_deconv(const Tensor<double>& x, const Tensor<double>& w, int stride, int pad) {
  const std::int64_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t Co = w.dim(1), K = w.dim(2), L = w.dim(3);
  const std::int64_t Ho = (H - 1) * stride - 2 * pad + K, Wo = (W - 1) * stride - 2 * pad + L;
  Tensor<double> y({N, Co, Ho, Wo});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < Ci; ++c)
      for (std::int64_t i = 0; i < H; ++i)
        for (std::int64_t j = 0; j < W; ++j)
          for (std::int64_t o = 0; o < Co; ++o)
            for (std::int64_t a = 0; a < K; ++a)
              for (std::int64_t b = 0; b < L; ++b) {
                const std::int64_t yy = i * stride - pad + a, xx = j * stride - pad + b;
                if (yy < 0 || yy >= Ho || xx < 0 || xx >= Wo) continue;
                y.at({n, o, yy, xx}) += x.at({n, c, i, j}) * w.at({c, o, a, b});
              }
  return y;
}

// ---- suites --------------------------------------------------------------------

SuiteResult bijection_suite(std::uint64_t seed) {
  Suite s("bijection");
  Rng rng(seed + 1);
  for (int t = 0; t < 200; ++t) {
    const std::int64_t h = pick(rng, 1, 4), w = pick(rng, 1, 4), d = pick(rng, 1, 4);
    const std::int64_t H = h * pick(rng, 1, 4), W = w * pick(rng, 1, 4);
    s.guard("npt round trip", [&] {
      const auto dims = npt::PatchDims::make(H, W, d, h, w);
      const auto x = random_tensor(rng, {d, H, W});
      const auto back = npt::npt_op3(npt::npt_op2(npt::npt_op1(x, dims)), dims);
      s.check(bitwise_equal(back, x), "npt round trip " + shape_str({d, H, W}) + " patch " + std::to_string(h) +
                                          "x" + std::to_string(w));
    });
  }
  s.guard("padded npt round trip", [&] {
    for (int t = 0; t < 20; ++t) {
      const std::int64_t H = pick(rng, 1, 9), W = pick(rng, 1, 9), d = pick(rng, 1, 3);
      const auto dims = npt::PatchDims::make(H, W, d, 2, 2, true);
      const auto x = random_tensor(rng, {d, H, W});
      s.check(bitwise_equal(npt::npt_op3(npt::npt_op2(npt::npt_op1(x, dims)), dims), x),
              "padded npt round trip " + shape_str({d, H, W}));
    }
  });
  s.guard("permutation matrix", [&] {
    const auto dims = npt::PatchDims::make(4, 4, 2, 2, 2);
    bool identity = true;
    for (std::int64_t k = 0; k < 32; ++k) {
      Tensor<double> e({2, 4, 4});
      e[static_cast<std::size_t>(k)] = 1;
      const auto out = npt::npt_op3(npt::npt_op2(npt::npt_op1(e, dims)), dims);
      for (std::int64_t m = 0; m < 32; ++m) identity = identity && out[static_cast<std::size_t>(m)] == (m == k ? 1 : 0);
    }
    s.check(identity, "op3.op2.op1 permutation matrix is the identity on 2x4x4");
  });
  s.guard("channel shuffle", [&] {
    s.check(channel_shuffle_order(6, 2) == std::vector<std::int64_t>{0, 3, 1, 4, 2, 5}, "shuffle order C=6 n=2");
    for (std::int64_t C = 1; C <= 16; ++C) {
      for (std::int64_t n = 1; n <= C; ++n) {
        if (C % n) continue;
        auto order = channel_shuffle_order(C, n);
        std::vector<bool> seen(static_cast<std::size_t>(C));
        bool perm = true;
        for (auto v : order) {
          perm = perm && v >= 0 && v < C && !seen[static_cast<std::size_t>(v)];
          if (perm) seen[static_cast<std::size_t>(v)] = true;
        }
        s.check(perm, "shuffle C=" + std::to_string(C) + " n=" + std::to_string(n) + " is a permutation");
      }
    }
  });
  return s.finish();
}

SuiteResult oracle_suite(std::uint64_t seed) {
  Suite s("oracle");
  Rng rng(seed + 2);
  for (int t = 0; t < 30; ++t) {
    s.guard("conv2d oracle", [&] {
      const int groups = static_cast<int>(pick(rng, 1, 3));
      const std::int64_t ci = groups * pick(rng, 1, 3), co = groups * pick(rng, 1, 3), k = pick(rng, 1, 3);
      const int stride = static_cast<int>(pick(rng, 1, 2)), pad = static_cast<int>(pick(rng, 0, 1));
      const auto x = random_tensor(rng, {pick(rng, 1, 2), ci, pick(rng, k, 7), pick(rng, k, 7)});
      const auto w = random_tensor(rng, {co, ci / groups, k, k});
      const auto y = kernels::conv2d(x, w, static_cast<const Tensor<double>*>(nullptr), {stride, pad, groups});
      s.check(max_abs_diff(y, naive_conv(x, w, stride, pad, groups)) < 1e-10, "conv2d vs naive loops");
    });
  }
  for (int t = 0; t < 20; ++t) {
    s.guard("deconv oracle", [&] {
      const std::int64_t ci = pick(rng, 1, 3), co = pick(rng, 1, 3), k = pick(rng, 1, 4);
      const int stride = static_cast<int>(pick(rng, 1, 2)), pad = static_cast<int>(pick(rng, 0, (k - 1) / 2));
      const auto x = random_tensor(rng, {1, ci, pick(rng, 1, 5), pick(rng, 1, 5)});
      const auto w = random_tensor(rng, {ci, co, k, k});
      const auto y = kernels::conv_transpose2d(x, w, static_cast<const Tensor<double>*>(nullptr), stride, pad);
      s.check(max_abs_diff(y, naive_deconv(x, w, stride, pad)) < 1e-10, "conv_transpose2d vs scatter loops");
    });
  }
  for (int t = 0; t < 20; ++t) {
    s.guard("linear/layer_norm oracle", [&] {
      const std::int64_t rows = pick(rng, 1, 6), fin = pick(rng, 1, 6), fout = pick(rng, 1, 6);
      const auto x = random_tensor(rng, {rows, fin});
      const auto w = random_tensor(rng, {fout, fin});
      const auto b = random_tensor(rng, {fout});
      const auto y = kernels::linear(x, w, &b);
      double err = 0;
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t o = 0; o < fout; ++o) {
          double acc = b[static_cast<std::size_t>(o)];
          for (std::int64_t i = 0; i < fin; ++i) acc += x.at({r, i}) * w.at({o, i});
          err = std::max(err, std::fabs(acc - y.at({r, o})));
        }
      s.check(err < 1e-12, "linear vs loops");

      const Tensor<double> g = random_tensor(rng, {fin}), be = random_tensor(rng, {fin});
      const auto ln = kernels::layer_norm(x, g, be, 1e-5).output;
      double lerr = 0;
      for (std::int64_t r = 0; r < rows; ++r) {
        double mu = 0, var = 0;
        for (std::int64_t i = 0; i < fin; ++i) mu += x.at({r, i});
        mu /= static_cast<double>(fin);
        for (std::int64_t i = 0; i < fin; ++i) var += (x.at({r, i}) - mu) * (x.at({r, i}) - mu);
        var /= static_cast<double>(fin);
        for (std::int64_t i = 0; i < fin; ++i) {
          const double ref = g[static_cast<std::size_t>(i)] * (x.at({r, i}) - mu) / std::sqrt(var + 1e-5) +
                             be[static_cast<std::size_t>(i)];
          lerr = std::max(lerr, std::fabs(ref - ln.at({r, i})));
        }
      }
      s.check(lerr < 1e-10, "layer_norm vs formula");
    });
  }
  s.guard("batch_norm oracle", [&] {
    for (int t = 0; t < 10; ++t) {
      const std::int64_t C = pick(rng, 1, 3);
      const auto x = random_tensor(rng, {pick(rng, 2, 3), C, 3, 2});
      Tensor<double> g = random_tensor(rng, {C}), b = random_tensor(rng, {C});
      Tensor<double> rm({C}), rv({C}, 1.0);
      const auto y = kernels::batch_norm2d(x, g, b, rm, rv, 1e-5, 0.1, true).output;
      double err = 0;
      const std::int64_t cnt = x.dim(0) * 6;
      for (std::int64_t c = 0; c < C; ++c) {
        double mu = 0, var = 0;
        for (std::int64_t n = 0; n < x.dim(0); ++n)
          for (std::int64_t i = 0; i < 6; ++i) mu += x[static_cast<std::size_t>((n * C + c) * 6 + i)];
        mu /= static_cast<double>(cnt);
        for (std::int64_t n = 0; n < x.dim(0); ++n)
          for (std::int64_t i = 0; i < 6; ++i) {
            const double d = x[static_cast<std::size_t>((n * C + c) * 6 + i)] - mu;
            var += d * d;
          }
        var /= static_cast<double>(cnt);
        for (std::int64_t n = 0; n < x.dim(0); ++n)
          for (std::int64_t i = 0; i < 6; ++i) {
            const auto k = static_cast<std::size_t>((n * C + c) * 6 + i);
            const double ref = g[static_cast<std::size_t>(c)] * (x[k] - mu) / std::sqrt(var + 1e-5) + b[static_cast<std::size_t>(c)];
            err = std::max(err, std::fabs(ref - y[k]));
          }
        err = std::max(err, std::fabs(rm[static_cast<std::size_t>(c)] - 0.1 * mu));
      }
      s.check(err < 1e-10, "batch_norm2d training statistics vs formula");
    }
  });
  return s.finish();
}

SuiteResult gradient_suite(std::uint64_t seed) {
  Suite s("gradient");
  Rng rng(seed + 3);
  const double tol = 1e-4;
  auto run = [&](const std::string& name, const GradCheckFn& f, const ParamSet<double>& ps,
                 const std::vector<Tensor<double>>& in, bool train) {
    s.guard(name, [&] {
      const auto r = grad_check(f, ps, in, train, rng());
      std::ostringstream os;
      os << name << ": rel err " << r.max_rel_err << " at " << r.worst;
      s.check(r.max_rel_err < tol, os.str());
    });
  };
  auto fill = [&](ParamSet<double>& ps) {
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (ps.trainable(i)) {
        for (auto& v : ps[i].storage()) v = uni(rng, -0.7, 0.7);
      }
    }
  };
  for (int rep = 0; rep < 2; ++rep) {
    {
      ParamSet<double> ps;
      InitPlan plan;
      const auto conv = Conv2dLayer::create(ps, plan, "conv", {4, 4, 3, 2, 1, 2, true});
      fill(ps);
      run("conv2d", [&](Context<double>& c, const std::vector<Var<double>>& x) { return conv.forward(c, x[0]); }, ps,
          {random_tensor(rng, {1, 4, 5, 4})}, false);
    }
    {
      ParamSet<double> ps;
      InitPlan plan;
      const auto d = DeconvStage::create(ps, plan, "up", 2, 3, 1e-5, 0.1);
      fill(ps);
      run("deconv stage", [&](Context<double>& c, const std::vector<Var<double>>& x) { return d.forward(c, x[0]); },
          ps, {random_tensor(rng, {2, 2, 2, 3})}, true);
    }
    {
      ParamSet<double> ps;
      InitPlan plan;
      const auto m = MlpBlock::create(ps, plan, "mlp", 4, 2);
      fill(ps);
      run("mlp_block", [&](Context<double>& c, const std::vector<Var<double>>& x) { return m.forward(c, x[0]); }, ps,
          {random_tensor(rng, {2, 3, 4})}, false);
    }
    {
      ParamSet<double> ps;
      InitPlan plan;
      const auto dims = npt::PatchDims::make(4, 4, 2, 2, 2);
      const auto l = Larm::create(ps, plan, "larm", dims, 2);
      fill(ps);
      run("larm", [&](Context<double>& c, const std::vector<Var<double>>& x) { return l.forward(c, x[0]); }, ps,
          {random_tensor(rng, {1, 2, 4, 4})}, false);
    }
    {
      ParamSet<double> ps;
      InitPlan plan;
      const auto dims = npt::PatchDims::make(4, 4, 3, 2, 2);
      const auto m = MobileVim::create(ps, plan, "vim", 2, 3, dims, 2);
      fill(ps);
      run("mobilevim", [&](Context<double>& c, const std::vector<Var<double>>& x) { return m.forward(c, x[0]); }, ps,
          {random_tensor(rng, {1, 2, 4, 4})}, false);
    }
    {
      ParamSet<double> ps;
      InitPlan plan;
      const auto b = InvertedResidual::create(ps, plan, "ir", 2, 2, 1, 2, 1e-5, 0.1);
      fill(ps);
      run("inverted_residual", [&](Context<double>& c, const std::vector<Var<double>>& x) { return b.forward(c, x[0]); },
          ps, {random_tensor(rng, {2, 2, 3, 3})}, true);
    }
    for (auto kind : {FusionKind::conv3x3, FusionKind::dw_separable, FusionKind::sfusion}) {
      ParamSet<double> ps;
      InitPlan plan;
      const auto f = Fusion::create(ps, plan, "fuse", FusionMode{kind, 2, 2}, 2, 2, 2);
      fill(ps);
      run(std::string("fusion ") + to_string(kind),
          [&](Context<double>& c, const std::vector<Var<double>>& x) { return f.forward(c, x[0], x[1]); }, ps,
          {random_tensor(rng, {1, 2, 3, 3}), random_tensor(rng, {1, 2, 3, 3})}, false);
    }
  }
  return s.finish();
}

SuiteResult counting_suite() {
  Suite s("counting");
  s.guard("single layers", [&] {
    ParamSet<float> ps;
    InitPlan plan;
    const auto conv = Conv2dLayer::create(ps, plan, "c", {16, 32, 3, 1, 1, 1, true});
    CostLog log;
    conv.cost({16, 64, 48}, log);
    s.check(ps.trainable_count() == 4640 && conv.param_count() == 4640, "conv 3x3 16->32 has 4640 parameters");
    s.check(log.at(0).macs == 14155776, "conv 3x3 16->32 at 64x48 costs 14155776 MACs");
    const auto lin = LinearLayer::create(ps, plan, "l", 10, 20);
    s.check(ps.trainable_count() == 4640 + 220, "linear 10->20 has 220 parameters");
    s.check(linear_macs(6, 10, 20) == 1200, "linear 10->20 over 6 rows costs 1200 MACs");
    (void)lin;
  });
  s.guard("blocks", [&] {
    for (auto [C, d] : {std::pair<std::int64_t, std::int64_t>{8, 12}, {16, 24}}) {
      ParamSet<float> ps;
      InitPlan plan;
      const auto dims = npt::PatchDims::make(8, 6, d, 2, 2);
      MobileVim::create(ps, plan, "v", C, d, dims, 2);
      s.check(ps.trainable_count() == MobileVim::closed_form_params(C, d, dims.P(), dims.N(), 2),
              "mobilevim closed form C=" + std::to_string(C));
    }
    for (auto t : {1, 6}) {
      ParamSet<float> ps;
      InitPlan plan;
      InvertedResidual::create(ps, plan, "ir", 16, 24, 2, t, 1e-5, 0.1);
      s.check(ps.trainable_count() == InvertedResidual::closed_form_params(16, 24, t),
              "inverted residual closed form t=" + std::to_string(t));
    }
    std::int64_t counts[4];
    int i = 0;
    for (auto kind : {FusionKind::conv3x3, FusionKind::sfusion, FusionKind::dw_separable, FusionKind::none}) {
      ParamSet<float> ps;
      InitPlan plan;
      Fusion::create(ps, plan, "f", FusionMode{kind, 2, 2}, 32, 32, 32);
      counts[i] = ps.trainable_count();
      s.check(counts[i] == Fusion::closed_form_params(FusionMode{kind, 2, 2}, 32, 32, 32),
              std::string("fusion closed form ") + to_string(kind));
      ++i;
    }
    s.check(counts[0] > counts[1] && counts[1] >= counts[2] && counts[2] > counts[3],
            "fusion ordering conv3x3 > sfusion >= dw_separable > none");
  });
  s.guard("reference model", [&] {
    const auto m = build_model<float>(ModelConfig::reference());
    const auto n = count_params(m);
    s.check(n >= 900000 && n <= 1400000, "reference parameters " + std::to_string(n) + " in [0.9M, 1.4M]");
    s.check(count_flops(m).params == n, "per-layer parameter breakdown sums to the total");
    s.check(m.output_shape() == Shape{17, 64, 48}, "reference heatmaps are 17x64x48");
  });
  return s.finish();
}

}  // namespace

int SelftestReport::total_passed() const {
  int n = 0;
  for (const auto& s : suites) n += s.passed;
  return n;
}

int SelftestReport::total_failed() const {
  int n = 0;
  for (const auto& s : suites) n += s.failed;
  return n;
}

std::string SelftestReport::summary() const {
  std::ostringstream os;
  char line[128];
  for (const auto& s : suites) {
    std::snprintf(line, sizeof line, "%-10s %4d passed %4d failed %9.1f ms\n", s.name.c_str(), s.passed, s.failed, s.ms);
    os << line;
    for (const auto& f : s.failures) os << "    FAIL " << f << "\n";
  }
  std::snprintf(line, sizeof line, "%-10s %4d passed %4d failed\n", "total", total_passed(), total_failed());
  os << line;
  return os.str();
}

SelftestReport run_selftest(std::uint64_t seed) {
  SelftestReport r;
  r.suites.push_back(bijection_suite(seed));
  r.suites.push_back(gradient_suite(seed));
  r.suites.push_back(oracle_suite(seed));
  r.suites.push_back(counting_suite());
  return r;
}

}  // namespace lgm
