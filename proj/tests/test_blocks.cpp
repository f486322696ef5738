#include <gtest/gtest.h>

#include <random>

#include "lgm/blocks.hpp"
#include "lgm/gradcheck.hpp"
#include "lgm/model.hpp"
#include "support/oracles.hpp"

using namespace lgm;

namespace {

template <typename T>
void randomize(ParamSet<T>& ps, std::mt19937_64& rng, double scale = 0.7) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (ps.trainable(i)) {
      for (auto& v : ps[i].storage()) v = static_cast<T>(u(rng));
    }
  }
}

template <typename T>
Tensor<T> eval(const ParamSet<T>& ps, const std::function<Var<T>(Context<T>&, const Var<T>&)>& f, const Tensor<T>& x) {
  Tape<T> tape(false);
  Context<T> ctx(tape, ps, ForwardMode{});
  return f(ctx, tape.leaf(x)).value();
}

}  // namespace

// ---- parameter counts, hand-derived -----------------------------------------

TEST(BlockCounts, PrimitiveLayers) {
  ParamSet<float> ps;
  InitPlan plan;
  Conv2dLayer::create(ps, plan, "c", {3, 16, 3, 2, 1, 1, false});
  EXPECT_EQ(ps.trainable_count(), 3 * 16 * 9);
  Conv2dLayer::create(ps, plan, "g", {8, 8, 3, 1, 1, 4, true});
  EXPECT_EQ(ps.trainable_count(), 432 + 8 * 2 * 9 + 8);
  LinearLayer::create(ps, plan, "l", 10, 20);
  EXPECT_EQ(ps.trainable_count(), 432 + 152 + 220);
}

TEST(BlockCounts, Blocks) {
  {
    ParamSet<float> ps;
    InitPlan plan;
    MlpBlock::create(ps, plan, "m", 4, 2);
    EXPECT_EQ(ps.trainable_count(), 8 + 40 + 36);
  }
  {
    ParamSet<float> ps;
    InitPlan plan;
    Larm::create(ps, plan, "l", npt::PatchDims::make(4, 6, 3, 2, 2), 2);  // P=4, N=6
    // mlp(6): 12 + 6*12+12 + 12*6+6 = 174 ; mlp(4): 84
    EXPECT_EQ(ps.trainable_count(), 174 + 84);
  }
  {
    ParamSet<float> ps;
    InitPlan plan;
    MobileVim::create(ps, plan, "v", 8, 4, npt::PatchDims::make(4, 4, 4, 2, 2), 2);
    // local 584, project 36, larm 84+84, back 40, fuse 1160
    EXPECT_EQ(ps.trainable_count(), 1988);
  }
  {
    ParamSet<float> ps;
    InitPlan plan;
    InvertedResidual::create(ps, plan, "ir", 16, 24, 2, 6, 1e-5, 0.1);
    // expand 1536+192, depthwise 864+192, project 2304+48
    EXPECT_EQ(ps.trainable_count(), 5136);
  }
  {
    ParamSet<float> ps;
    InitPlan plan;
    InvertedResidual::create(ps, plan, "ir", 16, 16, 1, 1, 1e-5, 0.1);
    EXPECT_EQ(ps.trainable_count(), 144 + 32 + 256 + 32);
  }
  {
    ParamSet<float> ps;
    InitPlan plan;
    DeconvStage::create(ps, plan, "up", 96, 64, 1e-5, 0.1);
    EXPECT_EQ(ps.trainable_count(), 98304 + 128);
  }
}

TEST(BlockCounts, FusionModes) {
  auto count = [](FusionKind kind, std::int64_t n, std::int64_t k) {
    ParamSet<float> ps;
    InitPlan plan;
    Fusion::create(ps, plan, "f", FusionMode{kind, n, k}, 8, 8, 8);
    return ps.trainable_count();
  };
  EXPECT_EQ(count(FusionKind::conv3x3, 2, 2), 9 * 16 * 8 + 8);
  EXPECT_EQ(count(FusionKind::sfusion, 2, 2), 9 * 8 * 8 + 8);
  EXPECT_EQ(count(FusionKind::dw_separable, 2, 2), 9 * 16 + 8 * 8 + 8);
  EXPECT_EQ(count(FusionKind::none, 2, 2), 0);
  EXPECT_EQ(count(FusionKind::sfusion, 4, 4), 9 * 4 * 8 + 8);
}

TEST(BlockCounts, CostLogMacs) {
  ParamSet<float> ps;
  InitPlan plan;
  const auto v = MobileVim::create(ps, plan, "v", 8, 4, npt::PatchDims::make(4, 4, 4, 2, 2), 2);
  CostLog log;
  EXPECT_EQ(v.cost({8, 4, 4}, log), (Shape{8, 4, 4}));
  std::int64_t total = 0, mixing = 0;
  for (const auto& l : log) {
    total += l.macs;
    if (l.kind == "token_mixing") mixing += l.macs;
  }
  // local 9216, project 512, inter 1024, intra 1024, back 512, fuse 18432
  EXPECT_EQ(total, 30720);
  EXPECT_EQ(mixing, 2048);
}

// ---- shapes and behaviour ----------------------------------------------------

TEST(Blocks, InvertedResidualShapesAndSkip) {
  ParamSet<float> ps;
  InitPlan plan;
  const auto a = InvertedResidual::create(ps, plan, "a", 8, 8, 1, 6, 1e-5, 0.1);
  const auto b = InvertedResidual::create(ps, plan, "b", 8, 16, 2, 6, 1e-5, 0.1);
  EXPECT_TRUE(a.residual);
  EXPECT_FALSE(b.residual);
  EXPECT_FALSE(InvertedResidual::create(ps, plan, "c", 8, 8, 1, 1, 1e-5, 0.1).expand.has_value());
  EXPECT_THROW(InvertedResidual::create(ps, plan, "d", 8, 8, 3, 1, 1e-5, 0.1), ShapeError);
  CostLog log;
  EXPECT_EQ(b.cost({8, 9, 7}, log), (Shape{16, 5, 4}));
}

TEST(Blocks, MlpBlockIsResidualOverLastAxis) {
  std::mt19937_64 rng(31);
  ParamSet<double> ps;
  InitPlan plan;
  const auto m = MlpBlock::create(ps, plan, "m", 5, 2);
  randomize(ps, rng);
  // Zeroing fc2 leaves only the skip path.
  ps.at("m.fc2.weight") = Tensor<double>(ps.at("m.fc2.weight").shape());
  ps.at("m.fc2.bias") = Tensor<double>(ps.at("m.fc2.bias").shape());
  const auto x = oracle::random_tensor<double>({2, 3, 5}, rng);
  const auto y = eval<double>(ps, [&](Context<double>& c, const Var<double>& v) { return m.forward(c, v); }, x);
  EXPECT_TRUE(bitwise_equal(y, x));
}

TEST(Blocks, LarmMixesAcrossPatches) {
  // One input pixel influences outputs in every patch.
  std::mt19937_64 rng(32);
  ParamSet<double> ps;
  InitPlan plan;
  const auto dims = npt::PatchDims::make(4, 4, 2, 2, 2);
  const auto l = Larm::create(ps, plan, "l", dims, 2);
  randomize(ps, rng);
  auto x = oracle::random_tensor<double>({1, 2, 4, 4}, rng);
  auto f = [&](Context<double>& c, const Var<double>& v) { return l.forward(c, v); };
  const auto y0 = eval<double>(ps, f, x);
  x.at({0, 0, 0, 0}) += 0.5;
  const auto y1 = eval<double>(ps, f, x);
  for (std::int64_t py = 0; py < 2; ++py)
    for (std::int64_t px = 0; px < 2; ++px) {
      double diff = 0;
      for (std::int64_t c = 0; c < 2; ++c)
        for (std::int64_t y = 0; y < 2; ++y)
          for (std::int64_t xx = 0; xx < 2; ++xx) {
            const auto i = c * 16 + (py * 2 + y) * 4 + px * 2 + xx;
            diff += std::abs(y1[i] - y0[i]);
          }
      EXPECT_GT(diff, 1e-9) << "patch " << py << "," << px;
    }
}

TEST(Blocks, ChannelShuffleOrder) {
  EXPECT_EQ(channel_shuffle_order(6, 2), (std::vector<std::int64_t>{0, 3, 1, 4, 2, 5}));
  EXPECT_EQ(channel_shuffle_order(6, 3), (std::vector<std::int64_t>{0, 2, 4, 1, 3, 5}));
  EXPECT_EQ(channel_shuffle_order(4, 1), (std::vector<std::int64_t>{0, 1, 2, 3}));
  EXPECT_THROW(channel_shuffle_order(5, 2), ShapeError);
  Tensor<float> x({1, 4, 1, 1}, std::vector<float>{0, 1, 2, 3});
  EXPECT_EQ(channel_shuffle(x, 2).storage(), (std::vector<float>{0, 2, 1, 3}));
}

TEST(Blocks, SfusionWithOneGroupEqualsConv3x3) {
  std::mt19937_64 rng(33);
  ParamSet<float> ps;
  InitPlan plan;
  const auto s = Fusion::create(ps, plan, "s", FusionMode{FusionKind::sfusion, 1, 1}, 3, 5, 4);
  const auto c = Fusion::create(ps, plan, "c", FusionMode{FusionKind::conv3x3, 1, 1}, 3, 5, 4);
  randomize(ps, rng);
  ps[c.conv->weight] = ps[s.conv->weight];
  ps[*c.conv->bias] = ps[*s.conv->bias];
  const auto up = oracle::random_tensor<float>({2, 3, 5, 4}, rng);
  const auto skip = oracle::random_tensor<float>({2, 5, 5, 4}, rng);
  auto run = [&](const Fusion& f) {
    Tape<float> tape(false);
    Context<float> ctx(tape, ps, ForwardMode{});
    return f.forward(ctx, tape.leaf(up), tape.leaf(skip)).value();
  };
  EXPECT_TRUE(bitwise_equal(run(s), run(c)));
}

TEST(Blocks, FusionNoneIsIdentityOnUpPath) {
  ParamSet<float> ps;
  InitPlan plan;
  const auto f = Fusion::create(ps, plan, "n", FusionMode{FusionKind::none, 2, 2}, 4, 4, 4);
  std::mt19937_64 rng(34);
  const auto up = oracle::random_tensor<float>({1, 4, 2, 2}, rng);
  Tape<float> tape(false);
  Context<float> ctx(tape, ps, ForwardMode{});
  EXPECT_TRUE(bitwise_equal(f.forward(ctx, tape.leaf(up), tape.leaf(up)).value(), up));
}

TEST(Blocks, BatchNormTrainingUpdatesStateOnly) {
  ParamSet<float> ps;
  InitPlan plan;
  const auto bn = BatchNormLayer::create(ps, plan, "bn", 2, 1e-5, 0.1);
  ParamSet<float> state = ps;
  std::mt19937_64 rng(35);
  const auto x = oracle::random_tensor<float>({2, 2, 3, 3}, rng, 1, 3);
  Tape<float> tape(false);
  Context<float> ctx(tape, ps, ForwardMode{true, false}, &state);
  bn.forward(ctx, tape.leaf(x));
  EXPECT_EQ(ps[bn.running_mean][0], 0.0f);
  EXPECT_GT(state[bn.running_mean][0], 0.1f);
  EXPECT_FALSE(ps.trainable(bn.running_var));
}

// ---- gradients ---------------------------------------------------------------

class BlockGradients : public ::testing::TestWithParam<int> {};

TEST_P(BlockGradients, MatchFiniteDifferences) {
  std::mt19937_64 rng(100 + static_cast<std::uint64_t>(GetParam()));
  auto check = [&](const char* what, const GradCheckFn& f, ParamSet<double>& ps, std::vector<Tensor<double>> in,
                   bool train) {
    randomize(ps, rng);
    const auto r = grad_check(f, ps, in, train, rng());
    EXPECT_LT(r.max_rel_err, 1e-4) << what << " worst " << r.worst;
  };
  {
    ParamSet<double> ps;
    InitPlan plan;
    const auto m = MlpBlock::create(ps, plan, "m", 3, 2);
    check("mlp", [&](Context<double>& c, const std::vector<Var<double>>& x) { return m.forward(c, x[0]); }, ps,
          {oracle::random_tensor<double>({2, 2, 3}, rng)}, false);
  }
  {
    ParamSet<double> ps;
    InitPlan plan;
    const auto l = Larm::create(ps, plan, "l", npt::PatchDims::make(3, 4, 2, 1, 2, true), 2);
    check("larm", [&](Context<double>& c, const std::vector<Var<double>>& x) { return l.forward(c, x[0]); }, ps,
          {oracle::random_tensor<double>({1, 2, 3, 4}, rng)}, false);
  }
  {
    ParamSet<double> ps;
    InitPlan plan;
    const auto m = MobileVim::create(ps, plan, "v", 2, 2, npt::PatchDims::make(4, 2, 2, 2, 2), 2);
    check("mobilevim", [&](Context<double>& c, const std::vector<Var<double>>& x) { return m.forward(c, x[0]); }, ps,
          {oracle::random_tensor<double>({1, 2, 4, 2}, rng)}, false);
  }
  {
    ParamSet<double> ps;
    InitPlan plan;
    const auto b = InvertedResidual::create(ps, plan, "ir", 2, 3, 2, 2, 1e-5, 0.1);
    check("inverted residual", [&](Context<double>& c, const std::vector<Var<double>>& x) { return b.forward(c, x[0]); },
          ps, {oracle::random_tensor<double>({2, 2, 4, 3}, rng)}, true);
  }
  for (auto kind : {FusionKind::conv3x3, FusionKind::dw_separable, FusionKind::sfusion}) {
    ParamSet<double> ps;
    InitPlan plan;
    const auto f = Fusion::create(ps, plan, "f", FusionMode{kind, 2, 2}, 2, 2, 2);
    check(to_string(kind),
          [&](Context<double>& c, const std::vector<Var<double>>& x) { return f.forward(c, x[0], x[1]); }, ps,
          {oracle::random_tensor<double>({1, 2, 3, 2}, rng), oracle::random_tensor<double>({1, 2, 3, 2}, rng)}, false);
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, BlockGradients, ::testing::Range(0, 3));
