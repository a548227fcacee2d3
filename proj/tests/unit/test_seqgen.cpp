#include "fmash/errors.hpp"
#include "fmash/seqgen.hpp"
#include "support/testing.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace fmash;
using namespace fmash::seqgen;
using fmash::testing::grad_check;

namespace {

SeqConfig tiny_config() {
  SeqConfig cfg;
  cfg.encoder_layers = 1;
  cfg.decoder_layers = 1;
  cfg.heads = 2;
  cfg.ffn_hidden = 12;
  cfg.max_positions = 16;
  return cfg;
}

struct Toy {
  Matrix sym, herb;
  Seq2SeqParams params;
};

Toy toy(std::uint64_t seed, int n_sym = 5, int n_herb = 7, Index d = 8) {
  Rng rng(seed);
  Matrix sym = random_normal(n_sym, d, 1.0, rng), herb = random_normal(n_herb, d, 1.0, rng);
  return {sym, herb, Seq2SeqParams::create(d, n_herb, tiny_config(), rng)};
}

std::vector<data::PrescriptionInstance> toy_rx() {
  return {{{0, 1}, {0, 2, 5}}, {{2}, {1, 3}}, {{1, 3}, {4, 0}}, {{0, 3}, {6}},
          {{2, 3}, {3, 4, 1}}, {{1}, {1}},    {{0, 2}, {0, 4}}, {{1, 2}, {2, 3, 6}}};
}

}  // namespace

TEST(SeqEncoder, ShapeAndCanonicalOrder) {
  auto t = toy(1);
  EXPECT_EQ(encode_symptoms({3}, t.sym, t.params).rows(), 1);
  EXPECT_EQ(encode_symptoms({3}, t.sym, t.params).cols(), 8);
  Matrix a = encode_symptoms({4, 0, 2}, t.sym, t.params);
  Matrix b = encode_symptoms({2, 4, 0, 0}, t.sym, t.params);
  EXPECT_EQ(a.rows(), 3);
  EXPECT_TRUE((a.array() == b.array()).all());
  EXPECT_TRUE((a.array() == encode_symptoms({0, 2, 4}, t.sym, t.params).array()).all());
}

TEST(Generate, ForcedEosGivesEmptyFormula) {
  auto t = toy(2);
  t.params.out_proj.weight.mutable_value().setZero();
  t.params.out_proj.bias.mutable_value().setZero();
  t.params.out_proj.bias.mutable_value()(0, t.params.vocab.eos()) = 10.0;
  EXPECT_TRUE(generate({0, 1}, t.sym, t.herb, t.params, {}).empty());
  GenerateOptions beam;
  beam.beam_width = 3;
  EXPECT_TRUE(generate({0, 1}, t.sym, t.herb, t.params, beam).empty());
}

TEST(Generate, SuppressedEosFillsMaxLenWithDistinctHerbs) {
  auto t = toy(3);
  // Make EOS the favourite so that suppression is what keeps decoding going.
  t.params.out_proj.bias.mutable_value()(0, t.params.vocab.eos()) = 10.0;
  GenerateOptions opts;
  opts.max_len = 3;
  opts.suppress_eos = true;
  auto f = generate({1, 2}, t.sym, t.herb, t.params, opts);
  ASSERT_EQ(f.size(), 3u);
  EXPECT_EQ(std::set<int>(f.begin(), f.end()).size(), 3u);
  for (int h : f) EXPECT_TRUE(t.params.vocab.is_herb(h));
  opts.max_len = 7;
  f = generate({1, 2}, t.sym, t.herb, t.params, opts);
  EXPECT_EQ(std::set<int>(f.begin(), f.end()).size(), 7u);
}

TEST(Generate, OutputsAreCleanAndDeterministic) {
  for (std::uint64_t seed = 10; seed < 30; ++seed) {
    auto t = toy(seed);
    for (int beam : {1, 2}) {
      GenerateOptions opts;
      opts.max_len = 5;
      opts.beam_width = beam;
      auto f = generate({static_cast<int>(seed % 5)}, t.sym, t.herb, t.params, opts);
      EXPECT_LE(f.size(), 5u);
      EXPECT_EQ(std::set<int>(f.begin(), f.end()).size(), f.size());
      for (int h : f) EXPECT_TRUE(t.params.vocab.is_herb(h));
      EXPECT_EQ(f, generate({static_cast<int>(seed % 5)}, t.sym, t.herb, t.params, opts));
    }
  }
}

TEST(Generate, RejectsBadArguments) {
  auto t = toy(4);
  GenerateOptions opts;
  opts.max_len = 0;
  EXPECT_THROW(generate({0}, t.sym, t.herb, t.params, opts), UsageError);
  EXPECT_THROW(generate({}, t.sym, t.herb, t.params, {}), UsageError);
}

TEST(TeacherForcing, FutureTokensDoNotLeak) {
  auto t = toy(5);
  const int bos = t.params.vocab.bos();
  std::vector<int> a{bos, 3, 1, 4, 0}, b{bos, 3, 1, 6, 2};
  Matrix la = teacher_forced_logits({0, 2}, a, t.sym, t.herb, t.params);
  Matrix lb = teacher_forced_logits({0, 2}, b, t.sym, t.herb, t.params);
  EXPECT_TRUE((la.topRows(3).array() == lb.topRows(3).array()).all());
  EXPECT_FALSE(la.row(3).isApprox(lb.row(3)));
  Matrix prefix = teacher_forced_logits({0, 2}, {bos, 3, 1}, t.sym, t.herb, t.params);
  // A shorter input changes matrix sizes and so the summation order; allow rounding.
  EXPECT_LT((la.topRows(3) - prefix).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(SeqLoss, PaddingDoesNotChangeLoss) {
  auto t = toy(6);
  SeqExample ex{{0, 3}, {2, 5, 1}}, other{{1}, {4}};
  std::vector<const SeqExample*> batch{&ex, &other};
  Var sym = Var::constant(t.sym), herb = Var::constant(t.herb);
  double base = seq_loss(batch, sym, herb, t.params).item();
  EXPECT_NEAR(seq_loss(batch, sym, herb, t.params, 9).item(), base, 1e-12);
  EXPECT_NEAR(seq_loss(batch, sym, herb, t.params, 14).item(), base, 1e-12);
}

TEST(TrainSeq, LossDropsAndDeterministic) {
  Rng rng(7);
  refine::UnifiedEmbeddings tables{random_normal(5, 8, 1.0, rng), random_normal(7, 8, 1.0, rng)};
  auto cfg = tiny_config();
  cfg.epochs = 80;
  cfg.batch = 4;
  auto a = train_seq(toy_rx(), 7, refine::table_source(tables, true), cfg);
  auto s = nn::smoothed(a.losses, 10);
  for (std::size_t i = 10; i < s.size(); i += 10) EXPECT_LE(s[i], s[i - 10] * 1.01) << "epoch " << i;
  EXPECT_LT(a.losses.back(), a.losses.front());
  auto b = train_seq(toy_rx(), 7, refine::table_source(tables, true), cfg);
  EXPECT_EQ(a.losses, b.losses);
}

TEST(TrainSeq, ZeroEpochsAndEmpty) {
  Rng rng(8);
  refine::UnifiedEmbeddings tables{random_normal(5, 8, 1.0, rng), random_normal(7, 8, 1.0, rng)};
  auto cfg = tiny_config();
  cfg.epochs = 0;
  auto m = train_seq(toy_rx(), 7, refine::table_source(tables, true), cfg);
  Rng init = stage_rng(cfg.seed, "seq.init");
  auto fresh = Seq2SeqParams::create(8, 7, cfg, init);
  ad::NamedParams a, b;
  m.params.collect(a, "seq");
  fresh.collect(b, "seq");
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE((a[i].second.value().array() == b[i].second.value().array()).all()) << a[i].first;
  }
  EXPECT_TRUE((m.herb_emb.array() == tables.herbs.array()).all());
  EXPECT_THROW(train_seq({}, 7, refine::table_source(tables, true), tiny_config()), DataError);
}

TEST(SeqGradients, FullLoss) {
  Rng rng(9);
  const Index d = 4;
  Var sym = Var::parameter(random_normal(4, d, 0.5, rng)), herb = Var::parameter(random_normal(5, d, 0.5, rng));
  auto params = Seq2SeqParams::create(d, 5, tiny_config(), rng);
  SeqExample a{{0, 2}, {3, 1}}, b{{1, 3}, {4}};
  std::vector<const SeqExample*> batch{&a, &b};
  ad::NamedParams named{{"sym", sym}, {"herb", herb}};
  params.collect(named, "seq");
  auto r = grad_check([&] { return seq_loss(batch, sym, herb, params, 4); }, named);
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
}
