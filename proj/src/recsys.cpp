#include "fmash/recsys.hpp"

#include "fmash/errors.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>

namespace fmash::recsys {

Vector base_probabilities(const Vector& s, const Matrix& herb_table, double temperature) {
  if (s.size() != herb_table.cols()) throw DataError("base_probabilities: dimension mismatch");
  Vector logits = herb_table * s / (std::sqrt(static_cast<double>(s.size())) * temperature);
  Vector p = (logits.array() - logits.maxCoeff()).exp();
  return p / p.sum();
}

Vector weighted_herb(const Matrix& herb_table, const Vector& p) {
  if (p.size() != herb_table.rows()) throw DataError("weighted_herb: dimension mismatch");
  if ((p.array() < 0.0).any()) throw UsageError("weighted_herb: negative probability");
  if (std::abs(p.sum() - 1.0) > 1e-6) throw UsageError("weighted_herb: probabilities do not sum to 1");
  return herb_table.transpose() * p;
}

GelramParams GelramParams::create(Index d, Index n_herb, const RsConfig& cfg, Rng& rng) {
  GelramParams p;
  p.in_proj = nn::Linear::create(2 * d, cfg.d_enc, rng);
  p.tok_proj = nn::Linear::create(d, cfg.d_enc, rng);
  for (int i = 0; i < cfg.layers; ++i) {
    p.layers.push_back(nn::EncoderLayer::create(cfg.d_enc, cfg.heads, cfg.ffn_hidden, rng));
  }
  p.final_norm = nn::LayerNorm::create(cfg.d_enc);
  p.head = nn::Linear::create(cfg.d_enc, n_herb, rng);
  p.ip_bias = Var::parameter(Matrix::Zero(1, n_herb));
  p.prior = Var::constant(Matrix::Constant(1, n_herb, 1.0 / static_cast<double>(n_herb)));
  return p;
}

void GelramParams::collect(ad::NamedParams& out, const std::string& prefix) const {
  in_proj.collect(out, prefix + ".in_proj");
  tok_proj.collect(out, prefix + ".tok_proj");
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(out, prefix + ".layer" + std::to_string(i));
  final_norm.collect(out, prefix + ".final_norm");
  head.collect(out, prefix + ".head");
  out.emplace_back(prefix + ".ip_bias", ip_bias);
  out.emplace_back(prefix + ".prior", prior);
}

Vector herb_frequencies(const std::vector<data::PrescriptionInstance>& rx, int n_herb) {
  Vector f = Vector::Zero(n_herb);
  for (const auto& inst : rx) {
    for (int h : inst.herbs) f(h) += 1.0;
  }
  double total = f.sum();
  if (total <= 0) return Vector::Constant(n_herb, 1.0 / n_herb);
  return f / total;
}

namespace {

/// Multi-hot rows selecting each query's symptoms.
std::shared_ptr<const SparseMatrix> aggregation_matrix(const std::vector<std::vector<int>>& sets, Index n_sym) {
  std::vector<Eigen::Triplet<double>> trips;
  for (std::size_t q = 0; q < sets.size(); ++q) {
    for (int s : sets[q]) trips.emplace_back(static_cast<Index>(q), s, 1.0);
  }
  auto m = std::make_shared<SparseMatrix>(static_cast<Index>(sets.size()), n_sym);
  m->setFromTriplets(trips.begin(), trips.end());
  return m;
}

}  // namespace

Var rs_logits(const std::vector<std::vector<int>>& symptom_sets, const Var& sym_emb, const Var& herb_emb,
              const GelramParams& params, const RsConfig& cfg) {
  const auto n_q = static_cast<Index>(symptom_sets.size());
  const double d = static_cast<double>(sym_emb.cols());
  Var s = ad::spmm(aggregation_matrix(symptom_sets, sym_emb.rows()), sym_emb);
  if (!cfg.gelram) return ad::add_row(ad::matmul_nt(s, herb_emb), params.ip_bias);

  Var p;
  if (cfg.frequency_prior) {
    p = Var::constant(params.prior.value().replicate(n_q, 1));
  } else {
    p = ad::softmax_rows(ad::scale(ad::matmul_nt(s, herb_emb), 1.0 / (std::sqrt(d) * cfg.temperature)));
  }
  Var h_w = ad::matmul(p, herb_emb);
  Var cls = params.in_proj(ad::hcat({h_w, s}));

  // Sequence layout: per query, its [CLS] row followed by its symptom tokens.
  std::vector<Index> flat;
  for (const auto& set : symptom_sets) flat.insert(flat.end(), set.begin(), set.end());
  Var tokens = params.tok_proj(ad::gather_rows(sym_emb, flat));
  std::vector<Index> order;
  std::vector<Index> cls_pos;
  std::vector<ad::AttentionSegment> segments;
  Index tok = n_q;
  for (Index q = 0; q < n_q; ++q) {
    const auto len = static_cast<Index>(symptom_sets[static_cast<std::size_t>(q)].size());
    const auto begin = static_cast<Index>(order.size());
    cls_pos.push_back(begin);
    order.push_back(q);
    for (Index i = 0; i < len; ++i) order.push_back(tok++);
    segments.push_back({begin, len + 1, begin, len + 1});
  }
  Var x = ad::gather_rows(ad::vcat({cls, tokens}), order);
  for (const auto& layer : params.layers) x = layer(x, segments);
  Var z = ad::gather_rows(params.final_norm(x), cls_pos);
  return params.head(z);
}

Var rs_loss(const std::vector<const data::PrescriptionInstance*>& batch, const Var& sym_emb,
            const Var& herb_emb, const GelramParams& params, const RsConfig& cfg) {
  std::vector<std::vector<int>> sets;
  Matrix target = Matrix::Zero(static_cast<Index>(batch.size()), herb_emb.rows());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    sets.push_back(batch[i]->symptoms);
    for (int h : batch[i]->herbs) target(static_cast<Index>(i), h) = 1.0;
  }
  return ad::bce_with_logits(rs_logits(sets, sym_emb, herb_emb, params, cfg), target);
}

std::vector<int> RecommendationResult::top(int k) const {
  return {ranking.begin(), ranking.begin() + std::min<std::ptrdiff_t>(k, static_cast<std::ptrdiff_t>(ranking.size()))};
}

std::vector<int> canonical_symptoms(std::vector<int> ids, int n_sym) {
  if (ids.empty()) throw UsageError("symptom set is empty");
  for (int s : ids) {
    if (s < 0 || s >= n_sym) throw DataError("unknown symptom id " + std::to_string(s));
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

std::vector<RecommendationResult> score_many(const std::vector<std::vector<int>>& symptom_sets,
                                             const Matrix& sym_emb, const Matrix& herb_emb,
                                             const GelramParams& params, const RsConfig& cfg) {
  std::vector<std::vector<int>> sets;
  sets.reserve(symptom_sets.size());
  for (const auto& s : symptom_sets) sets.push_back(canonical_symptoms(s, static_cast<int>(sym_emb.rows())));
  std::vector<RecommendationResult> out;
  if (sets.empty()) return out;
  Var sym = Var::constant(sym_emb);
  Var herb = Var::constant(herb_emb);
  // Chunked so attention scratch stays small on large test splits.
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < sets.size(); start += kChunk) {
    std::vector<std::vector<int>> chunk(sets.begin() + static_cast<std::ptrdiff_t>(start),
                                        sets.begin() + static_cast<std::ptrdiff_t>(std::min(sets.size(), start + kChunk)));
    Matrix logits = rs_logits(chunk, sym, herb, params, cfg).value();
    ad::check_finite(logits, "recommendation scores");
    for (Index q = 0; q < logits.rows(); ++q) {
      RecommendationResult r;
      r.scores = (1.0 / (1.0 + (-logits.row(q).array()).exp())).transpose();
      r.ranking.resize(static_cast<std::size_t>(r.scores.size()));
      std::iota(r.ranking.begin(), r.ranking.end(), 0);
      // Rank by logit: sigmoid saturates to equal doubles long before logits tie.
      Eigen::RowVectorXd row = logits.row(q);
      std::stable_sort(r.ranking.begin(), r.ranking.end(), [&](int a, int b) { return row(a) > row(b); });
      out.push_back(std::move(r));
    }
  }
  return out;
}

RecommendationResult gelram_score(const std::vector<int>& symptom_ids, const Matrix& sym_emb,
                                  const Matrix& herb_emb, const GelramParams& params, const RsConfig& cfg) {
  return score_many({symptom_ids}, sym_emb, herb_emb, params, cfg).front();
}

RsModel train_rs(const std::vector<data::PrescriptionInstance>& train, int n_herb,
                 const refine::EmbeddingSource& source, const RsConfig& cfg) {
  if (train.empty()) throw DataError("train_rs: training split is empty");
  refine::EmbeddingTables init_tables = source.provide();
  if (init_tables.herbs.rows() != n_herb) throw DataError("train_rs: herb table does not match vocabulary");
  Rng init = stage_rng(cfg.seed, "rs.init");
  RsModel model{GelramParams::create(init_tables.symptoms.cols(), n_herb, cfg, init), {}, {}, {}};
  model.params.prior.mutable_value() = herb_frequencies(train, n_herb).transpose();

  ad::NamedParams named;
  model.params.collect(named, "rs");
  std::vector<Var> vars;
  for (const auto& [name, v] : named) {
    if (v.requires_grad()) vars.push_back(v);
  }
  vars.insert(vars.end(), source.params.begin(), source.params.end());
  nn::Adam opt(vars, {.lr = cfg.lr, .clip_norm = cfg.clip_norm});

  Rng rng = stage_rng(cfg.seed, "rs.train");
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto batch = static_cast<std::size_t>(std::max(1, cfg.batch));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng() % (i + 1)]);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      std::vector<const data::PrescriptionInstance*> chunk;
      for (std::size_t i = start; i < std::min(order.size(), start + batch); ++i) chunk.push_back(&train[order[i]]);
      opt.zero_grad();
      refine::EmbeddingTables tables = source.provide();
      Var loss = rs_loss(chunk, tables.symptoms, tables.herbs, model.params, cfg);
      total += loss.item() * static_cast<double>(chunk.size());
      if (tables.aux_loss.defined()) loss = ad::add(loss, tables.aux_loss);
      ad::backward(loss);
      opt.step();
    }
    double mean_loss = total / static_cast<double>(train.size());
    if (!std::isfinite(mean_loss)) throw NumericError("train_rs: loss is not finite at epoch " + std::to_string(epoch));
    model.losses.push_back(mean_loss);
  }
  refine::EmbeddingTables final_tables = source.provide();
  model.sym_emb = final_tables.symptoms.value();
  model.herb_emb = final_tables.herbs.value();
  return model;
}

std::vector<ScoredHerb> recommend(const std::vector<int>& symptom_ids, int k, const RsModel& model,
                                  const RsConfig& cfg) {
  const int n_herb = static_cast<int>(model.herb_emb.rows());
  if (k < 1 || k > n_herb) {
    throw UsageError("k must be between 1 and " + std::to_string(n_herb) + ", got " + std::to_string(k));
  }
  RecommendationResult r = gelram_score(symptom_ids, model.sym_emb, model.herb_emb, model.params, cfg);
  std::vector<ScoredHerb> out;
  for (int i = 0; i < k; ++i) {
    int h = r.ranking[static_cast<std::size_t>(i)];
    out.push_back({h, r.scores(h)});
  }
  return out;
}

void write_rs_predictions(const std::filesystem::path& path, const std::vector<std::size_t>& instance_ids,
                          const std::vector<RecommendationResult>& results, int limit) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  char buf[64];
  for (std::size_t i = 0; i < results.size(); ++i) {
    out << instance_ids[i] << '\t';
    const auto& r = results[i];
    std::size_t n = limit < 0 ? r.ranking.size() : std::min(r.ranking.size(), static_cast<std::size_t>(limit));
    for (std::size_t j = 0; j < n; ++j) {
      int h = r.ranking[j];
      auto res = std::to_chars(buf, buf + sizeof(buf), r.scores(h));
      if (j) out << ',';
      out << h << ':' << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf));
    }
    out << '\n';
  }
}

}  // namespace fmash::recsys
