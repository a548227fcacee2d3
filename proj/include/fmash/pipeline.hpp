/**
 * Phase 1 orchestration: graph embedding, molecular features, feature
 * assembly and refinement into the unified 64-d tables consumed by both heads.
 */
#pragma once

#include "fmash/config.hpp"
#include "fmash/dataio.hpp"
#include "fmash/hgre.hpp"
#include "fmash/mlfie.hpp"
#include "fmash/recsys.hpp"
#include "fmash/seqgen.hpp"
#include "fmash/refine.hpp"

#include <memory>
#include <vector>

namespace fmash::pipeline {

using ad::Var;

hgre::HgreConfig hgre_config(const RunConfig& cfg);
mlfie::MlfieConfig mlfie_config(const RunConfig& cfg);
recsys::RsConfig rs_config(const RunConfig& cfg);
/// Position table sized to fit the longest symptom set and formula seen.
seqgen::SeqConfig seq_config(const RunConfig& cfg, const std::vector<data::PrescriptionInstance>& rx);

/// Mean BCE of dot-product scores of edges against sampled non-edges.
Var link_loss(const Var& emb, const data::EdgeList& edges, const data::EdgeList& non_edges);
/// `count` random node pairs (u < v) that are not edges; fewer if the graph is nearly complete.
data::EdgeList sample_non_edges(int n_nodes, const data::EdgeList& edges, std::size_t count, Rng& rng);

struct Phase1 {
  RunConfig cfg;
  data::Corpus corpus;  // vocabularies only; prescriptions are dropped
  int n_sym = 0;
  int n_herb = 0;

  hgre::HgreConfig hgre_cfg;
  hgre::HgreGraph graph;
  data::EdgeList edges;  // global indices
  Var features;          // initial node features, |V| x d
  hgre::HgreParams hgre;

  mlfie::MlfieParams mlfie;
  std::vector<std::vector<Vector>> mols;

  Var text;   // n_sym x d_text
  Var props;  // n_herb x P, constant

  refine::AutoencoderParams ae_sym, ae_herb;  // FR on
  nn::Linear proj_sym, proj_herb;             // FR off
  refine::FeatureLayout layout;

  std::vector<double> hgre_losses, attention_losses, vae_losses, fr_sym_losses, fr_herb_losses;
  double fr_sym_initial = 0, fr_sym_final = 0, fr_herb_initial = 0, fr_herb_final = 0;
  std::vector<data::MolecularRow> imputed;

  /// X'' with HGRE on, the raw feature table otherwise.
  Var graph_embeddings() const;
  Var herb_molecular() const;
  refine::AssembledFeatures assemble() const;
  /// Unified tables as differentiable values, with the FR reconstruction loss
  /// as the auxiliary term when FR is on.
  refine::EmbeddingTables tables() const;
  refine::UnifiedEmbeddings unified() const;
  void collect(ad::NamedParams& out) const;
  /// VAE-completed vectors for herbs without molecules (mol_index -1).
  std::vector<data::MolecularRow> imputed_rows() const;
};

/// Builds and trains every enabled Phase-1 stage. `graph` should come from the
/// training split only. Stages draw from independent seeded streams.
std::shared_ptr<Phase1> build_phase1(const RunConfig& cfg, const data::Corpus& corpus,
                                     const data::HeteroGraph& graph, const data::MolecularTable* table,
                                     bool train = true);

/// Source for the heads: fixed tables fine-tuned by the head, or (fr_joint)
/// the whole Phase-1 stack trained together with it.
refine::EmbeddingSource embedding_source(const std::shared_ptr<Phase1>& p1);

}  // namespace fmash::pipeline
