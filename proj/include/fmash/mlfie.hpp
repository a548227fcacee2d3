/**
 * Molecular-level herb features.
 *
 * Herbs with known molecules pool their molecule embeddings with attention
 * whose queries come from the herb's property vector, then a sigmoid gate
 * mixes the pooled vector with a learnable per-herb "latent molecule"
 * embedding. Herbs without any molecule get a pooled vector decoded by a VAE
 * from the property vector alone, and go through the same gate.
 */
#pragma once

#include "fmash/autodiff.hpp"
#include "fmash/dataio.hpp"
#include "fmash/nn.hpp"

#include <string_view>
#include <vector>

namespace fmash::mlfie {

using ad::Var;

/// Deterministic stand-in for a pretrained molecule encoder: signed hashed
/// character 1-3 grams, L2-normalized. Throws UsageError on an empty string.
Vector stub_encode_molecule(std::string_view smiles, Index dim);

struct AttentionParams {
  Var w_q;  // P x d_k
  Var w_k;  // d_m x d_k

  static AttentionParams create(Index prop_dim, Index mol_dim, Index d_k, Rng& rng);
  Index d_k() const { return w_q.cols(); }
  void collect(ad::NamedParams& out, const std::string& prefix) const;
};

struct AttentionResult {
  Var pooled;   // one row per herb, d_m wide
  Var weights;  // one row per molecule, 1 wide
};

/// Single herb: mol_embs is K x d_m, props is 1 x P.
AttentionResult aggregate_attention(const Var& mol_embs, const Var& props, const AttentionParams& params);

/// Several herbs at once. Molecules of herb i occupy rows [offsets[i], offsets[i+1])
/// of mol_embs; props row i belongs to herb i.
AttentionResult aggregate_attention_batch(const Var& mol_embs, const Var& props,
                                          std::span<const Index> offsets,
                                          const AttentionParams& params);

enum class GateMode { vector, scalar };

struct GateParams {
  Var w_g;  // d_m x d_m, or d_m x 1 for the scalar gate
  Var b_g;  // 1 x d_m, or 1 x 1
  GateMode mode = GateMode::vector;

  static GateParams create(Index mol_dim, GateMode mode, Rng& rng);
  void collect(ad::NamedParams& out, const std::string& prefix) const;
};

/// lambda = sigmoid(v W_g + b_g); lambda * v + (1 - lambda) * h_e, row-wise.
Var fuse_gate(const Var& pooled, const Var& latent, const GateParams& params);

struct VaeConfig {
  Index hidden = 64;
  Index d_z = 16;
  double beta = 1.0;
  int epochs = 300;
  int batch = 32;
  double lr = 3e-3;
  std::uint64_t seed = 42;
};

/// Encoder P -> hidden -> hidden -> (mu, log variance); decoder d_z -> hidden -> hidden -> d_m.
struct VaeParams {
  nn::Linear enc1, enc2, enc_mu, enc_logvar;
  nn::Linear dec1, dec2, dec_out;

  static VaeParams create(Index prop_dim, Index mol_dim, const VaeConfig& cfg, Rng& rng);
  Index prop_dim() const { return enc1.in_dim(); }
  Index d_z() const { return enc_mu.out_dim(); }
  void collect(ad::NamedParams& out, const std::string& prefix) const;
};

struct Posterior {
  Var mu;
  Var logvar;
};

Posterior vae_encode(const Var& props, const VaeParams& params);
Var vae_decode(const Var& z, const VaeParams& params);

/// Batch mean of 0.5 * sum(mu^2 + sigma^2 - 1 - log sigma^2).
Var gaussian_kl(const Var& mu, const Var& logvar);

struct VaeLoss {
  Var loss;
  Var kl;
  Var recon;
};

/// recon is the batch mean of the summed squared error of decode(mu + sigma*eps);
/// loss = recon + beta * kl. eps is batch x d_z.
VaeLoss vae_loss(const Var& props, const Matrix& target, const VaeParams& params, const Matrix& eps,
                 double beta);

struct CompletePair {
  Vector properties;
  Vector target;
};

struct VaeTrainResult {
  VaeParams params;
  std::vector<double> losses;  // per-epoch mean loss
};

/// Needs at least 8 complete pairs.
VaeTrainResult train_vae(const std::vector<CompletePair>& pairs, const VaeConfig& cfg);

enum class ImputeMode { mean, sample };

/// Decodes a molecule-level vector from a property vector alone.
Vector impute_missing(const Vector& props, const VaeParams& params, ImputeMode mode = ImputeMode::mean,
                      Rng* rng = nullptr);

struct MlfieConfig {
  Index mol_dim = 32;
  Index d_k = 16;
  GateMode gate_mode = GateMode::vector;
  int pretrain_epochs = 100;
  double lr = 3e-3;
  VaeConfig vae;
};

struct MlfieParams {
  AttentionParams attention;
  nn::Linear probe;  // d_m -> P, used only to pretrain the attention
  GateParams gate;
  Var latent;        // herbs x d_m
  VaeParams vae;

  static MlfieParams create(Index n_herb, Index prop_dim, const MlfieConfig& cfg, Rng& rng);
  void collect(ad::NamedParams& out, const std::string& prefix) const;
};

/// Molecule embeddings per herb: precomputed table rows, record embeddings,
/// or stub-encoded molecule strings, in that priority.
std::vector<std::vector<Vector>> molecule_embeddings(const data::Corpus& corpus,
                                                     const data::MolecularTable* table, Index mol_dim);

/// Fits attention + probe so the pooled vector predicts the property vector.
std::vector<double> pretrain_attention(MlfieParams& params, const data::Corpus& corpus,
                                       const std::vector<std::vector<Vector>>& mols, int epochs,
                                       double lr);

/// Pooled vectors for herbs with molecules (property-guided attention).
std::vector<CompletePair> complete_pairs(const MlfieParams& params, const data::Corpus& corpus,
                                         const std::vector<std::vector<Vector>>& mols);

/// v_final for one herb: attention + gate when molecules exist, VAE imputation
/// + gate otherwise.
Vector herb_representation(const data::HerbRecord& herb, const std::vector<Vector>& mol_embs,
                           const MlfieParams& params);

/// v_final for every herb as one differentiable matrix (herbs x d_m).
Var herb_representations(const data::Corpus& corpus, const std::vector<std::vector<Vector>>& mols,
                         const MlfieParams& params);

}  // namespace fmash::mlfie
