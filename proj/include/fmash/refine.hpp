/**
 * Per-node feature assembly and the 64-d refinement autoencoder.
 *
 * Herb rows are [graph embedding | molecular vector | property vector];
 * symptom rows are [graph embedding | text embedding]. One autoencoder per
 * node type compresses its rows to the unified 64-d embedding.
 */
#pragma once

#include "fmash/autodiff.hpp"
#include "fmash/nn.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace fmash::refine {

using ad::Var;

inline constexpr Index kUnifiedDim = 64;

struct FeatureLayout {
  Index graph_dim = 0;
  Index mol_dim = 0;  // 0 when molecular features are disabled
  Index prop_dim = 0;
  Index text_dim = 0;

  Index herb_width() const { return graph_dim + mol_dim + prop_dim; }
  Index symptom_width() const { return graph_dim + text_dim; }
  bool operator==(const FeatureLayout&) const = default;
};

nlohmann::json layout_to_json(const FeatureLayout& layout);
FeatureLayout layout_from_json(const nlohmann::json& j);
void save_layout(const std::filesystem::path& path, const FeatureLayout& layout);
FeatureLayout load_layout(const std::filesystem::path& path);

struct AssembledFeatures {
  Var symptoms;  // n_sym x symptom_width
  Var herbs;     // n_herb x herb_width
  FeatureLayout layout;
};

/// graph: (n_sym + n_herb) x d, symptoms first. mol may be undefined to leave
/// molecular features out. text: n_sym x d_text.
AssembledFeatures assemble_features(const Var& graph, const Var& mol, const Var& props, const Var& text,
                                    Index n_sym);

struct AutoencoderConfig {
  Index hidden = 128;
  int epochs = 200;
  int batch = 32;
  double lr = 2e-3;
  std::uint64_t seed = 42;
};

struct AutoencoderParams {
  nn::Linear enc1, enc2, dec1, dec2;

  static AutoencoderParams create(Index input_dim, Index hidden, Rng& rng);
  Index input_dim() const { return enc1.in_dim(); }
  void collect(ad::NamedParams& out, const std::string& prefix) const;
};

Var encode(const Var& rows, const AutoencoderParams& params);
Var decode(const Var& codes, const AutoencoderParams& params);

struct AutoencoderTrainResult {
  AutoencoderParams params;
  std::vector<double> losses;  // per-epoch mean MSE
  double initial_mse = 0.0;
  double final_mse = 0.0;
  bool degenerate_input = false;
};

/// Needs at least 8 rows. Identical rows only set `degenerate_input`.
AutoencoderTrainResult train_autoencoder(const Matrix& rows, const AutoencoderConfig& cfg,
                                         const std::string& stage = "fr");

/// rows x 64; pure.
Matrix compress(const Matrix& rows, const AutoencoderParams& params);
/// MSE(decode(encode(rows)), rows).
double reconstruction_mse(const Matrix& rows, const AutoencoderParams& params);

/// Unified embedding export: header `dim=64`, then `node_type,node_id,f1..f64`.
struct UnifiedEmbeddings {
  Matrix symptoms;
  Matrix herbs;
};
void write_unified(const std::filesystem::path& path, const UnifiedEmbeddings& emb);
UnifiedEmbeddings read_unified(const std::filesystem::path& path);

/// What a Phase-2 head consumes on each training step: symptom and herb
/// tables (rows x 64) and an optional extra loss term from upstream stages.
struct EmbeddingTables {
  Var symptoms;
  Var herbs;
  Var aux_loss;  // undefined when there is none
};

/// Rebuilt on every optimizer step, so upstream stages can train jointly.
struct EmbeddingSource {
  std::function<EmbeddingTables()> provide;
  std::vector<Var> params;  // upstream tensors the head's optimizer also updates
};

/// Tables seeded from fixed embeddings. With `trainable` they are fine-tuned
/// by the head; otherwise they stay frozen.
EmbeddingSource table_source(const UnifiedEmbeddings& emb, bool trainable);

}  // namespace fmash::refine
