#include <gtest/gtest.h>

#include <random>
#include <set>

#include "lgm/gradcheck.hpp"
#include "lgm/npt.hpp"
#include "support/oracles.hpp"

using namespace lgm;
using npt::PatchDims;

namespace {

struct Instance {
  std::int64_t H, W, d, h, w;
};

Instance random_instance(std::mt19937_64& rng) {
  Instance s;
  s.h = oracle::rand_int(rng, 1, 4);
  s.w = oracle::rand_int(rng, 1, 4);
  s.H = s.h * oracle::rand_int(rng, 1, 5);
  s.W = s.w * oracle::rand_int(rng, 1, 5);
  s.d = oracle::rand_int(rng, 1, 4);
  return s;
}

}  // namespace

TEST(Npt, RoundTripIsBitwiseIdentity) {
  std::mt19937_64 rng(21);
  for (int rep = 0; rep < 300; ++rep) {
    const auto s = random_instance(rng);
    const auto dims = PatchDims::make(s.H, s.W, s.d, s.h, s.w);
    const auto x = oracle::random_tensor<float>({s.d, s.H, s.W}, rng);
    const auto u = npt::npt_op1(x, dims);
    ASSERT_EQ(u.shape(), (Shape{dims.P(), s.d, dims.N()}));
    const auto v = npt::npt_op2(u);
    ASSERT_EQ(v.shape(), (Shape{dims.N(), s.d, dims.P()}));
    EXPECT_TRUE(bitwise_equal(npt::npt_op3(v, dims), x));
  }
}

TEST(Npt, Op1MatchesCoordinateDefinition) {
  std::mt19937_64 rng(22);
  for (int rep = 0; rep < 50; ++rep) {
    const auto s = random_instance(rng);
    const auto x = oracle::random_tensor<double>({s.d, s.H, s.W}, rng);
    const auto dims = PatchDims::make(s.H, s.W, s.d, s.h, s.w);
    EXPECT_TRUE(bitwise_equal(npt::npt_op1(x, dims), oracle::unfold(x, s.h, s.w)));
  }
}

TEST(Npt, Op2SwapsOuterAxes) {
  Tensor<double> u({2, 1, 3}, std::vector<double>{0, 1, 2, 10, 11, 12});
  const auto v = npt::npt_op2(u);
  ASSERT_EQ(v.shape(), (Shape{3, 1, 2}));
  EXPECT_EQ(v.storage(), (std::vector<double>{0, 10, 1, 11, 2, 12}));
}

TEST(Npt, FourByFourPermutationMatrix) {
  // Push every basis vector through op1; the columns must form a permutation.
  const auto dims = PatchDims::make(4, 4, 2, 2, 2);
  const std::int64_t n = 2 * 4 * 4;
  std::set<std::int64_t> rows;
  for (std::int64_t j = 0; j < n; ++j) {
    Tensor<double> e({2, 4, 4});
    e[j] = 1;
    const auto u = npt::npt_op1(e, dims);
    std::int64_t hits = 0, where = -1;
    for (std::int64_t i = 0; i < n; ++i) {
      if (u[i] != 0) {
        ++hits;
        where = i;
      }
    }
    ASSERT_EQ(hits, 1);
    rows.insert(where);
    // Full chain maps the basis vector back onto itself.
    EXPECT_TRUE(bitwise_equal(npt::npt_op3(npt::npt_op2(u), dims), e));
  }
  EXPECT_EQ(static_cast<std::int64_t>(rows.size()), n);
}

TEST(Npt, BatchedFormsAgreeWithPerItem) {
  std::mt19937_64 rng(23);
  const auto dims = PatchDims::make(6, 4, 3, 3, 2);
  const auto xb = oracle::random_tensor<float>({2, 3, 6, 4}, rng);
  const auto ub = npt::npt_op1(xb, dims);
  ASSERT_EQ(ub.shape(), (Shape{2, 6, 3, 4}));
  for (std::int64_t b = 0; b < 2; ++b) {
    Tensor<float> x({3, 6, 4});
    std::copy_n(xb.storage().begin() + b * 72, 72, x.storage().begin());
    const auto u = npt::npt_op1(x, dims);
    EXPECT_TRUE(std::equal(u.storage().begin(), u.storage().end(), ub.storage().begin() + b * 72));
  }
}

TEST(Npt, RejectsNonDivisibleUnlessPadding) {
  EXPECT_THROW(PatchDims::make(5, 4, 2, 2, 2), ShapeError);
  const auto dims = PatchDims::make(5, 3, 2, 2, 2, true);
  EXPECT_EQ(dims.H, 6);
  EXPECT_EQ(dims.W, 4);
  EXPECT_EQ(dims.pad_top, 0);  // odd remainder goes to the bottom
  EXPECT_EQ(dims.pad_left, 0);
  EXPECT_TRUE(dims.padded());
  const auto d2 = PatchDims::make(2, 2, 1, 4, 4, true);
  EXPECT_EQ(d2.pad_top, 1);
  EXPECT_EQ(d2.pad_left, 1);
}

TEST(Npt, PaddedRoundTripRestoresSource) {
  std::mt19937_64 rng(24);
  for (int rep = 0; rep < 100; ++rep) {
    const auto h = oracle::rand_int(rng, 1, 4), w = oracle::rand_int(rng, 1, 4);
    const auto H = oracle::rand_int(rng, 1, 9), W = oracle::rand_int(rng, 1, 9), d = oracle::rand_int(rng, 1, 3);
    const auto dims = PatchDims::make(H, W, d, h, w, true);
    const auto x = oracle::random_tensor<float>({d, H, W}, rng);
    const auto u = npt::npt_op1(x, dims);
    double pad_sum = 0, in_sum = 0;
    for (float v : u.storage()) pad_sum += std::abs(v);
    for (float v : x.storage()) in_sum += std::abs(v);
    EXPECT_DOUBLE_EQ(pad_sum, in_sum);  // padding contributes zeros only
    EXPECT_TRUE(bitwise_equal(npt::npt_op3(npt::npt_op2(u), dims), x));
  }
}

TEST(Npt, ShapeErrors) {
  const auto dims = PatchDims::make(4, 4, 2, 2, 2);
  EXPECT_THROW(npt::npt_op1(Tensor<float>({3, 4, 4}), dims), ShapeError);
  EXPECT_THROW(npt::npt_op3(Tensor<float>({4, 2, 3}), dims), ShapeError);
  EXPECT_THROW(npt::npt_op2(Tensor<float>({4, 2})), ShapeError);
}

TEST(Npt, OpsAreDifferentiable) {
  std::mt19937_64 rng(25);
  const auto dims = PatchDims::make(5, 3, 2, 2, 2, true);
  ParamSet<double> ps;
  auto r = grad_check(
      [&](Context<double>&, const std::vector<Var<double>>& x) {
        auto u = npt::npt_op1(x[0], dims);
        auto v = npt::npt_op2(mul(u, u));
        return npt::npt_op3(v, dims);
      },
      ps, {oracle::random_tensor<double>({1, 2, 5, 3}, rng)}, false, 3);
  EXPECT_LT(r.max_rel_err, 1e-6) << r.worst;
}

TEST(Npt, CorruptionHookBreaksRoundTrip) {
  const auto dims = PatchDims::make(4, 4, 1, 2, 2);
  Tensor<float> x({1, 4, 4});
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(i);
  npt::testing::set_corrupt_index_map(true);
  const auto y = npt::npt_op3(npt::npt_op2(npt::npt_op1(x, dims)), dims);
  npt::testing::set_corrupt_index_map(false);
  EXPECT_FALSE(bitwise_equal(y, x));
  EXPECT_TRUE(bitwise_equal(npt::npt_op3(npt::npt_op2(npt::npt_op1(x, dims)), dims), x));
}
