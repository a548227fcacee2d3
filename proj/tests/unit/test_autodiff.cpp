#include "fmash/autodiff.hpp"
#include "fmash/errors.hpp"
#include "fmash/hgre.hpp"
#include "fmash/nn.hpp"
#include "support/testing.hpp"

#include <gtest/gtest.h>

using namespace fmash;
using ad::Var;
using fmash::testing::grad_check;

namespace {

constexpr double kTol = 1e-4;

Var param(Index r, Index c, Rng& rng, double s = 0.5) { return Var::parameter(random_normal(r, c, s, rng)); }

}  // namespace

TEST(Autodiff, ElementwiseAndReductions) {
  Rng rng(1);
  Var a = param(3, 4, rng), b = param(3, 4, rng);
  Matrix w = random_normal(3, 4, 1.0, rng);
  auto loss = [&] {
    Var y = ad::add(ad::mul(ad::tanh(a), ad::sigmoid(b)), ad::scale(ad::softplus(a), 0.3));
    y = ad::add(y, ad::square(ad::silu(b)));
    return ad::sum(ad::mul(y, Var::constant(w)));
  };
  auto r = grad_check(loss, {{"a", a}, {"b", b}});
  EXPECT_LT(r.max_rel_err, kTol) << r.worst;
}

TEST(Autodiff, MatmulRowOpsAndConcat) {
  Rng rng(2);
  Var a = param(4, 3, rng), b = param(3, 5, rng), row = param(1, 5, rng), col = param(4, 1, rng);
  Matrix w = random_normal(8, 5, 1.0, rng);
  auto loss = [&] {
    Var m = ad::add_row(ad::matmul(a, b), row);
    Var n = ad::mul_col(ad::matmul_nt(a, ad::transpose(b)), col);
    Var y = ad::vcat({m, n});
    return ad::sum(ad::mul(y, Var::constant(w)));
  };
  auto r = grad_check(loss, {{"a", a}, {"b", b}, {"row", row}, {"col", col}});
  EXPECT_LT(r.max_rel_err, kTol) << r.worst;
}

TEST(Autodiff, GatherSliceSegmentSoftmax) {
  Rng rng(3);
  Var a = param(5, 4, rng);
  std::vector<Index> idx{4, 0, 0, 2};
  std::vector<Index> offsets{0, 2, 5};
  Matrix w = random_normal(5, 1, 1.0, rng);
  auto loss = [&] {
    Var g = ad::gather_rows(a, idx);
    Var s = ad::slice_cols(ad::slice_rows(a, 0, 5), 1, 1);
    Var p = ad::segment_softmax(s, offsets);
    return ad::add(ad::sum(ad::mul(p, Var::constant(w))), ad::mean(ad::square(g)));
  };
  auto r = grad_check(loss, {{"a", a}});
  EXPECT_LT(r.max_rel_err, kTol) << r.worst;
}

TEST(Autodiff, LayerNormAndLosses) {
  Rng rng(4);
  Var x = param(3, 6, rng), g = param(1, 6, rng), b = param(1, 6, rng);
  Matrix targets = (random_normal(3, 6, 1.0, rng).array() > 0).cast<double>();
  std::vector<int> labels{2, 5, -1};
  auto loss = [&] {
    Var y = ad::layer_norm(x, g, b);
    Var l = ad::add(ad::bce_with_logits(y, targets), ad::cross_entropy(y, labels, -1));
    return ad::add(l, ad::mse(ad::softmax_rows(x), targets));
  };
  auto r = grad_check(loss, {{"x", x}, {"gamma", g}, {"beta", b}});
  EXPECT_LT(r.max_rel_err, kTol) << r.worst;
}

TEST(Autodiff, CrossEntropyIgnoresMaskedRows) {
  Rng rng(5);
  Var logits = param(3, 4, rng);
  std::vector<int> a{1, 2, 3}, b{1, 2, 9};
  Var both = ad::cross_entropy(ad::slice_rows(logits, 0, 2), std::span<const int>(a.data(), 2), 9);
  Var masked = ad::cross_entropy(logits, b, 9);
  EXPECT_DOUBLE_EQ(both.item(), masked.item());
}

TEST(Autodiff, SegmentedCausalAttention) {
  Rng rng(6);
  Var q = param(5, 8, rng), k = param(6, 8, rng), v = param(6, 8, rng);
  std::vector<ad::AttentionSegment> segs{{0, 2, 0, 3}, {2, 3, 3, 3}};
  Rng wr(7);
  Matrix w = random_normal(5, 8, 1.0, wr);
  for (bool causal : {false, true}) {
    auto loss = [&] { return ad::sum(ad::mul(ad::attention(q, k, v, segs, 2, causal), Var::constant(w))); };
    auto r = grad_check(loss, {{"q", q}, {"k", k}, {"v", v}});
    EXPECT_LT(r.max_rel_err, kTol) << r.worst << " causal=" << causal;
  }
}

TEST(Autodiff, SelectiveScanBothDiscretizations) {
  Rng rng(8);
  Var u = param(5, 3, rng);
  Var delta = Var::parameter((random_normal(5, 3, 0.3, rng).array().abs() + 0.1).matrix());
  Var a = Var::parameter(-(random_normal(3, 4, 0.5, rng).array().abs() + 0.2).matrix());
  Var b = param(5, 4, rng), c = param(5, 4, rng);
  Rng wr(9);
  Matrix w = random_normal(5, 3, 1.0, wr);
  for (auto disc : {hgre::Discretization::zoh, hgre::Discretization::euler}) {
    auto loss = [&] { return ad::sum(ad::mul(hgre::selective_scan(u, delta, a, b, c, disc), Var::constant(w))); };
    auto r = grad_check(loss, {{"u", u}, {"delta", delta}, {"a", a}, {"b", b}, {"c", c}});
    EXPECT_LT(r.max_rel_err, kTol) << r.worst;
  }
}

TEST(Autodiff, SpmmMatchesDense) {
  Rng rng(10);
  auto s = std::make_shared<SparseMatrix>(3, 3);
  s->insert(0, 1) = 0.5;
  s->insert(2, 0) = -1.5;
  s->insert(1, 1) = 2.0;
  s->makeCompressed();
  Var x = param(3, 2, rng);
  Matrix dense = Matrix(*s) * x.value();
  EXPECT_TRUE(ad::spmm(s, x).value().isApprox(dense));
  auto r = grad_check([&] { return ad::sum(ad::square(ad::spmm(s, x))); }, {{"x", x}});
  EXPECT_LT(r.max_rel_err, kTol);
}

TEST(Autodiff, FrozenInputsBuildNoGraph) {
  Var a = Var::constant(Matrix::Ones(2, 2));
  Var y = ad::sum(ad::square(a));
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.node()->parents.empty());
}

TEST(Autodiff, CheckFiniteThrowsNumericError) {
  Matrix m = Matrix::Zero(2, 2);
  m(1, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(ad::check_finite(m, "probe"), NumericError);
}

TEST(Nn, StageRngIsIndependentOfOtherStages) {
  Rng a = stage_rng(42, "phase1.hgre");
  Rng b = stage_rng(42, "phase1.hgre");
  Rng c = stage_rng(42, "phase1.mlfie");
  EXPECT_EQ(a(), b());
  EXPECT_NE(stage_rng(42, "phase1.hgre")(), c());
}

TEST(Nn, AdamReducesQuadratic) {
  Var x = Var::parameter(Matrix::Constant(1, 3, 4.0));
  nn::Adam opt({x}, {.lr = 0.1});
  for (int i = 0; i < 300; ++i) {
    opt.zero_grad();
    ad::backward(ad::sum(ad::square(x)));
    opt.step();
  }
  EXPECT_LT(x.value().norm(), 1e-2);
}

TEST(Nn, EncoderDecoderLayersGradients) {
  Rng rng(11);
  auto enc = nn::EncoderLayer::create(8, 2, 16, rng);
  auto dec = nn::DecoderLayer::create(8, 2, 16, rng);
  Var x = param(4, 8, rng), t = param(3, 8, rng);
  std::vector<ad::AttentionSegment> es{{0, 4, 0, 4}}, ss{{0, 3, 0, 3}}, cs{{0, 3, 0, 4}};
  Rng wr(12);
  Matrix w = random_normal(3, 8, 1.0, wr);
  ad::NamedParams named{{"x", x}, {"t", t}};
  enc.collect(named, "enc");
  dec.collect(named, "dec");
  auto loss = [&] { return ad::sum(ad::mul(dec(t, enc(x, es), ss, cs), Var::constant(w))); };
  auto r = grad_check(loss, named);
  EXPECT_LT(r.max_rel_err, kTol) << r.worst;
}

TEST(Nn, SmoothedIsTrailingMean) {
  auto s = nn::smoothed({1, 2, 3, 4}, 2);
  ASSERT_EQ(s.size(), 4u);
  EXPECT_DOUBLE_EQ(s[0], 1.0);
  EXPECT_DOUBLE_EQ(s[3], 3.5);
}
