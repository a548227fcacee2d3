/**
 * Ranked top-K herb recommendation.
 *
 * A first-pass inner-product matcher gives per-herb probabilities, which weight
 * the herb table into one vector h_w. [h_w ; s] (s = summed symptom
 * embeddings) is projected into a [CLS] position placed ahead of the symptom
 * tokens, a transformer encoder runs over that sequence, and one sigmoid
 * score per herb is read off the [CLS] output.
 */
#pragma once

#include "fmash/autodiff.hpp"
#include "fmash/dataio.hpp"
#include "fmash/nn.hpp"
#include "fmash/refine.hpp"

#include <filesystem>
#include <vector>

namespace fmash::recsys {

using ad::Var;

/// softmax(herb_table * s / (sqrt(d) * temperature)); s is d x 1.
Vector base_probabilities(const Vector& s, const Matrix& herb_table, double temperature = 1.0);

/// sum_i p_i h_i. Throws UsageError on negative p or sum(p) off 1 by > 1e-6.
Vector weighted_herb(const Matrix& herb_table, const Vector& p);

struct RsConfig {
  Index d_enc = 64;
  int layers = 2;
  int heads = 4;
  Index ffn_hidden = 128;
  double temperature = 1.0;
  /// Off: plain inner-product scoring s . h_i + b_i.
  bool gelram = true;
  /// Weight herbs by training-set frequency instead of the per-query matcher.
  bool frequency_prior = false;
  int epochs = 300;
  int batch = 32;
  double lr = 2e-3;
  double clip_norm = 5.0;
  std::uint64_t seed = 42;
};

struct GelramParams {
  nn::Linear in_proj;   // 2d -> d_enc
  nn::Linear tok_proj;  // d -> d_enc
  std::vector<nn::EncoderLayer> layers;
  nn::LayerNorm final_norm;
  nn::Linear head;      // d_enc -> H, the transposed W_out with b_out
  Var ip_bias;          // 1 x H, inner-product mode only
  Var prior;            // 1 x H herb frequencies, constant

  static GelramParams create(Index d, Index n_herb, const RsConfig& cfg, Rng& rng);
  Index n_herb() const { return ip_bias.cols(); }
  void collect(ad::NamedParams& out, const std::string& prefix) const;
};

/// Training-set herb frequencies normalized to sum 1 (uniform if empty).
Vector herb_frequencies(const std::vector<data::PrescriptionInstance>& rx, int n_herb);

/// Logits (queries x H) for a batch of canonical symptom sets.
Var rs_logits(const std::vector<std::vector<int>>& symptom_sets, const Var& sym_emb, const Var& herb_emb,
              const GelramParams& params, const RsConfig& cfg);

/// Mean multi-label BCE of a batch against its multi-hot herb targets.
Var rs_loss(const std::vector<const data::PrescriptionInstance*>& batch, const Var& sym_emb,
            const Var& herb_emb, const GelramParams& params, const RsConfig& cfg);

struct RecommendationResult {
  Vector scores;             // H, in (0, 1)
  std::vector<int> ranking;  // descending score, ties by herb id

  std::vector<int> top(int k) const;
};

/// Sorted, deduplicated copy; throws on empty sets or ids outside [0, n_sym).
std::vector<int> canonical_symptoms(std::vector<int> ids, int n_sym);

RecommendationResult gelram_score(const std::vector<int>& symptom_ids, const Matrix& sym_emb,
                                  const Matrix& herb_emb, const GelramParams& params, const RsConfig& cfg);

/// Scores and rankings for many queries in one batched pass.
std::vector<RecommendationResult> score_many(const std::vector<std::vector<int>>& symptom_sets,
                                             const Matrix& sym_emb, const Matrix& herb_emb,
                                             const GelramParams& params, const RsConfig& cfg);

struct RsModel {
  GelramParams params;
  Matrix sym_emb;   // tables after fine-tuning
  Matrix herb_emb;
  std::vector<double> losses;  // per-epoch mean loss
};

/// Multi-label BCE training with Adam. Throws DataError on an empty split.
RsModel train_rs(const std::vector<data::PrescriptionInstance>& train, int n_herb,
                 const refine::EmbeddingSource& source, const RsConfig& cfg);

struct ScoredHerb {
  int herb = 0;
  double score = 0.0;
};

/// Top-k of the ranking; UsageError unless 1 <= k <= H.
std::vector<ScoredHerb> recommend(const std::vector<int>& symptom_ids, int k, const RsModel& model,
                                  const RsConfig& cfg);

/// `instance_id<TAB>herb:score,...` in descending score order, full ranking.
void write_rs_predictions(const std::filesystem::path& path, const std::vector<std::size_t>& instance_ids,
                          const std::vector<RecommendationResult>& results, int limit = -1);

}  // namespace fmash::recsys
