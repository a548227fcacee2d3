#include "fmash/errors.hpp"
#include "fmash/mlfie.hpp"
#include "support/testing.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <set>

using namespace fmash;
using namespace fmash::mlfie;
using fmash::testing::grad_check;

namespace {

Var param(Index r, Index c, Rng& rng, double s = 0.5) { return Var::parameter(random_normal(r, c, s, rng)); }

GateParams constant_gate(Index d, double bias) {
  return {Var::constant(Matrix::Zero(d, d)), Var::constant(Matrix::Constant(1, d, bias)), GateMode::vector};
}

// Means of consecutive non-overlapping windows.
std::vector<double> window_means(const std::vector<double>& v, std::size_t w) {
  std::vector<double> out;
  for (std::size_t i = 0; i + w <= v.size(); i += w) {
    double s = 0;
    for (std::size_t j = i; j < i + w; ++j) s += v[j];
    out.push_back(s / static_cast<double>(w));
  }
  return out;
}

std::vector<CompletePair> fixture_pairs(int n, Rng& rng) {
  Matrix map = random_normal(6, 4, 0.5, rng);
  std::vector<CompletePair> out;
  for (int i = 0; i < n; ++i) {
    Vector p = random_normal(6, 1, 1.0, rng);
    out.push_back({p, (map.transpose() * p).array().tanh().matrix()});
  }
  return out;
}

}  // namespace

TEST(StubEncoder, DeterministicUnitNormDistinct) {
  Vector a = stub_encode_molecule("CCO", 32), b = stub_encode_molecule("CCO", 32);
  EXPECT_TRUE((a.array() == b.array()).all());
  for (const char* s : {"C", "CCO", "CCN", "c1ccccc1O", "CC(=O)Oc1ccccc1C(=O)O"}) {
    EXPECT_NEAR(stub_encode_molecule(s, 32).norm(), 1.0, 1e-6) << s;
  }
  EXPECT_FALSE(stub_encode_molecule("CCO", 32).isApprox(stub_encode_molecule("CCN", 32)));
  EXPECT_THROW(stub_encode_molecule("", 32), UsageError);
}

TEST(StubEncoder, NoCollisionsOverFixtureSet) {
  auto corpus = data::generate_synthetic({});
  std::set<std::string> names;
  for (const auto& h : corpus.herbs) names.insert(h.molecules.begin(), h.molecules.end());
  std::vector<Vector> vs;
  for (const auto& s : names) vs.push_back(stub_encode_molecule(s, 32));
  for (std::size_t i = 0; i < vs.size(); ++i)
    for (std::size_t j = i + 1; j < vs.size(); ++j) EXPECT_FALSE(vs[i].isApprox(vs[j], 1e-12));
}

TEST(Attention, SingleMoleculeTakesAllWeight) {
  Rng rng(1);
  auto p = AttentionParams::create(5, 4, 3, rng);
  Matrix e = random_normal(1, 4, 1.0, rng);
  auto r = aggregate_attention(Var::constant(e), Var::constant(random_normal(1, 5, 1.0, rng)), p);
  EXPECT_DOUBLE_EQ(r.weights.value()(0, 0), 1.0);
  EXPECT_TRUE(r.pooled.value().isApprox(e));
}

TEST(Attention, ZeroQueryGivesMean) {
  Rng rng(2);
  auto p = AttentionParams::create(5, 4, 3, rng);
  p.w_q.mutable_value().setZero();
  Matrix e = random_normal(3, 4, 1.0, rng);
  auto r = aggregate_attention(Var::constant(e), Var::constant(random_normal(1, 5, 1.0, rng)), p);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(r.weights.value()(k, 0), 1.0 / 3.0, 1e-15);
  EXPECT_TRUE(r.pooled.value().isApprox(e.colwise().mean(), 1e-14));
}

TEST(Attention, LogitsZeroAndLn2) {
  // d_k = 1, W_q = 1, W_k picks the first coordinate: logits are e[k,0] * p.
  AttentionParams p{Var::constant(Matrix::Ones(1, 1)), Var::constant((Matrix(2, 1) << 1, 0).finished())};
  Matrix e(2, 2);
  e << 0, 1, std::log(2.0), 0;
  auto r = aggregate_attention(Var::constant(e), Var::constant(Matrix::Ones(1, 1)), p);
  EXPECT_NEAR(r.weights.value()(0, 0), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(r.weights.value()(1, 0), 2.0 / 3.0, 1e-15);
}

TEST(Attention, SimplexHullAndOrderInvariance) {
  Rng rng(3);
  auto p = AttentionParams::create(6, 5, 4, rng);
  for (int trial = 0; trial < 200; ++trial) {
    int k = 1 + trial % 7;
    Matrix e = random_normal(k, 5, 2.0, rng);
    Matrix props = random_normal(1, 6, 2.0, rng);
    auto r = aggregate_attention(Var::constant(e), Var::constant(props), p);
    const Matrix& a = r.weights.value();
    EXPECT_TRUE((a.array() >= 0).all());
    EXPECT_NEAR(a.sum(), 1.0, 1e-9);
    const Matrix& v = r.pooled.value();
    for (Index j = 0; j < 5; ++j) {
      EXPECT_GE(v(0, j), e.col(j).minCoeff() - 1e-12);
      EXPECT_LE(v(0, j), e.col(j).maxCoeff() + 1e-12);
    }
    Matrix rev = e.colwise().reverse();
    auto rr = aggregate_attention(Var::constant(rev), Var::constant(props), p);
    EXPECT_TRUE(rr.pooled.value().isApprox(v, 1e-12));
  }
}

TEST(Attention, EmptyMoleculeListRejected) {
  Rng rng(4);
  auto p = AttentionParams::create(3, 4, 2, rng);
  std::vector<Index> offsets{0, 0};
  EXPECT_THROW(aggregate_attention_batch(Var::constant(Matrix(0, 4)), Var::constant(Matrix::Ones(1, 3)), offsets, p),
               DataError);
}

TEST(Gate, ZeroParamsAverage) {
  Matrix v(1, 2), h(1, 2);
  v << 1, 3;
  h << 5, -1;
  Matrix out = fuse_gate(Var::constant(v), Var::constant(h), constant_gate(2, 0.0)).value();
  EXPECT_TRUE(out.isApprox(0.5 * (v + h)));
}

TEST(Gate, SaturatedBiasPassesPooled) {
  Rng rng(5);
  Matrix v = random_normal(1, 4, 1.0, rng), h = random_normal(1, 4, 1.0, rng);
  Matrix out = fuse_gate(Var::constant(v), Var::constant(h), constant_gate(4, 50.0)).value();
  EXPECT_LT((out - v).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Gate, FixedLambdaElementwise) {
  double b = std::log(0.8 / 0.2);  // sigmoid(b) = 0.8
  Matrix v(1, 2), h(1, 2);
  v << 1, 0;
  h << 0, 1;
  Matrix out = fuse_gate(Var::constant(v), Var::constant(h), constant_gate(2, b)).value();
  EXPECT_NEAR(out(0, 0), 0.8, 1e-12);
  EXPECT_NEAR(out(0, 1), 0.2, 1e-12);
}

TEST(Gate, ConvexBoundsBothModes) {
  Rng rng(6);
  for (auto mode : {GateMode::vector, GateMode::scalar}) {
    auto g = GateParams::create(5, mode, rng);
    g.b_g.mutable_value() = random_normal(1, g.b_g.cols(), 2.0, rng);
    for (int trial = 0; trial < 1000; ++trial) {
      Matrix v = random_normal(1, 5, 3.0, rng), h = random_normal(1, 5, 3.0, rng);
      Matrix out = fuse_gate(Var::constant(v), Var::constant(h), g).value();
      for (Index j = 0; j < 5; ++j) {
        ASSERT_GE(out(0, j), std::min(v(0, j), h(0, j)) - 1e-12);
        ASSERT_LE(out(0, j), std::max(v(0, j), h(0, j)) + 1e-12);
      }
    }
  }
}

TEST(Vae, KlClosedForm) {
  EXPECT_EQ(gaussian_kl(Var::constant(Matrix::Zero(2, 4)), Var::constant(Matrix::Zero(2, 4))).item(), 0.0);
  EXPECT_DOUBLE_EQ(gaussian_kl(Var::constant(Matrix::Ones(1, 1)), Var::constant(Matrix::Zero(1, 1))).item(), 0.5);
  Rng rng(7);
  for (int i = 0; i < 500; ++i) {
    EXPECT_GE(gaussian_kl(Var::constant(random_normal(3, 4, 2.0, rng)), Var::constant(random_normal(3, 4, 2.0, rng)))
                  .item(),
              0.0);
  }
}

TEST(Vae, PerfectDecoderHasZeroRecon) {
  Rng rng(8);
  VaeConfig cfg;
  cfg.hidden = 8;
  cfg.d_z = 3;
  auto p = VaeParams::create(4, 5, cfg, rng);
  p.dec_out.weight.mutable_value().setZero();
  p.dec_out.bias.mutable_value() = random_normal(1, 5, 1.0, rng);
  Matrix target = p.dec_out.bias.value().replicate(2, 1);
  auto l = vae_loss(Var::constant(random_normal(2, 4, 1.0, rng)), target, p, random_normal(2, 3, 1.0, rng), 1.0);
  EXPECT_EQ(l.recon.item(), 0.0);
  EXPECT_DOUBLE_EQ(l.loss.item(), l.kl.item());
}

TEST(Vae, TrainingLossDecreasesAndIsDeterministic) {
  auto corpus = data::generate_synthetic({});
  MlfieConfig mc;
  Rng rng(9);
  auto params = MlfieParams::create(corpus.n_herb(), 23, mc, rng);
  auto mols = molecule_embeddings(corpus, nullptr, mc.mol_dim);
  pretrain_attention(params, corpus, mols, 50, 3e-3);
  auto pairs = complete_pairs(params, corpus, mols);
  ASSERT_EQ(pairs.size(), 48u);
  VaeConfig vc;
  vc.epochs = 200;
  auto a = train_vae(pairs, vc);
  // Minibatch and reparameterization noise leaves ~0.3% jitter on the plateau; allow 1%.
  auto w = window_means(a.losses, 10);
  for (std::size_t i = 1; i < w.size(); ++i) EXPECT_LE(w[i], w[i - 1] * 1.01) << "window " << i;
  EXPECT_LT(w.back(), 0.5 * w.front());
  auto b = train_vae(pairs, vc);
  ad::NamedParams na, nb;
  a.params.collect(na, "v");
  b.params.collect(nb, "v");
  for (std::size_t i = 0; i < na.size(); ++i) EXPECT_TRUE((na[i].second.value().array() == nb[i].second.value().array()).all());
}

TEST(Vae, ZeroEpochsReturnsInitialization) {
  Rng rng(10);
  auto pairs = fixture_pairs(10, rng);
  VaeConfig vc;
  vc.epochs = 0;
  auto trained = train_vae(pairs, vc);
  Rng init = stage_rng(vc.seed, "vae.init");
  auto fresh = VaeParams::create(6, 4, vc, init);
  ad::NamedParams a, b;
  trained.params.collect(a, "v");
  fresh.collect(b, "v");
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE((a[i].second.value().array() == b[i].second.value().array()).all());
  EXPECT_TRUE(trained.losses.empty());
}

TEST(Vae, TooFewPairs) {
  Rng rng(11);
  EXPECT_THROW(train_vae({}, {}), DataError);
  EXPECT_THROW(train_vae(fixture_pairs(7, rng), {}), DataError);
}

TEST(Vae, ImputeModesAndErrors) {
  Rng rng(12);
  auto pairs = fixture_pairs(16, rng);
  VaeConfig vc;
  vc.epochs = 20;
  auto r = train_vae(pairs, vc);
  Vector p = pairs[0].properties;
  EXPECT_TRUE((impute_missing(p, r.params).array() == impute_missing(p, r.params).array()).all());
  Rng s1(1), s2(1);
  EXPECT_TRUE(impute_missing(p, r.params, ImputeMode::sample, &s1).isApprox(impute_missing(p, r.params, ImputeMode::sample, &s2)));
  EXPECT_THROW(impute_missing(Vector::Zero(5), r.params), DataError);
  EXPECT_THROW(impute_missing(p, r.params, ImputeMode::sample, nullptr), UsageError);
}

TEST(Vae, HeldOutImputationWithinTwiceMedianTrainError) {
  Rng rng(13);
  auto pairs = fixture_pairs(60, rng);
  std::vector<CompletePair> train(pairs.begin(), pairs.begin() + 48), held(pairs.begin() + 48, pairs.end());
  VaeConfig vc;
  vc.epochs = 300;
  auto r = train_vae(train, vc);
  std::vector<double> tr;
  for (const auto& q : train) tr.push_back((impute_missing(q.properties, r.params) - q.target).squaredNorm());
  std::nth_element(tr.begin(), tr.begin() + tr.size() / 2, tr.end());
  double median = tr[tr.size() / 2];
  double held_err = 0;
  for (const auto& q : held) held_err += (impute_missing(q.properties, r.params) - q.target).squaredNorm();
  held_err /= static_cast<double>(held.size());
  EXPECT_LE(held_err, 2.0 * median);
}

TEST(HerbRepresentation, DispatchAndConvexity) {
  auto corpus = data::generate_synthetic({});
  MlfieConfig mc;
  mc.vae.epochs = 5;
  Rng rng(14);
  auto params = MlfieParams::create(corpus.n_herb(), 23, mc, rng);
  auto mols = molecule_embeddings(corpus, nullptr, mc.mol_dim);
  params.vae = train_vae(complete_pairs(params, corpus, mols), mc.vae).params;
  Matrix all = herb_representations(corpus, mols, params).value();
  int with = 0, without = 0;
  for (const auto& h : corpus.herbs) {
    Vector v = herb_representation(h, mols[h.id], params);
    ASSERT_EQ(v.size(), mc.mol_dim);
    EXPECT_TRUE(v.allFinite());
    EXPECT_TRUE(v.isApprox(all.row(h.id).transpose(), 1e-12));
    (mols[h.id].empty() ? without : with)++;
  }
  EXPECT_EQ(without, 12);
  EXPECT_EQ(with, 48);
}

TEST(MlfieGradients, AggregateAttention) {
  Rng rng(15);
  auto p = AttentionParams::create(4, 3, 2, rng);
  Var e = param(5, 3, rng), props = param(2, 4, rng);
  std::vector<Index> offsets{0, 2, 5};
  Matrix w = random_normal(2, 3, 1.0, rng);
  auto loss = [&] {
    return ad::sum(ad::mul(aggregate_attention_batch(e, props, offsets, p).pooled, Var::constant(w)));
  };
  auto r = grad_check(loss, {{"e", e}, {"props", props}, {"w_q", p.w_q}, {"w_k", p.w_k}});
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
}

TEST(MlfieGradients, FuseGate) {
  Rng rng(16);
  for (auto mode : {GateMode::vector, GateMode::scalar}) {
    auto g = GateParams::create(3, mode, rng);
    Var v = param(2, 3, rng), h = param(2, 3, rng);
    Matrix w = random_normal(2, 3, 1.0, rng);
    auto loss = [&] { return ad::sum(ad::mul(fuse_gate(v, h, g), Var::constant(w))); };
    auto r = grad_check(loss, {{"v", v}, {"h", h}, {"w_g", g.w_g}, {"b_g", g.b_g}});
    EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
  }
}

TEST(MlfieGradients, VaeLoss) {
  Rng rng(17);
  VaeConfig cfg;
  cfg.hidden = 5;
  cfg.d_z = 2;
  auto p = VaeParams::create(3, 4, cfg, rng);
  Var props = param(3, 3, rng);
  Matrix target = random_normal(3, 4, 1.0, rng), eps = random_normal(3, 2, 1.0, rng);
  ad::NamedParams named{{"props", props}};
  p.collect(named, "vae");
  auto loss = [&] { return vae_loss(props, target, p, eps, 1.0).loss; };
  auto r = grad_check(loss, named);
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
}
