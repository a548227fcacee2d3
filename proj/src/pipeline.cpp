#include "fmash/pipeline.hpp"

#include "fmash/errors.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace fmash::pipeline {

hgre::HgreConfig hgre_config(const RunConfig& cfg) {
  hgre::HgreConfig h;
  h.dim = cfg.d;
  h.d_state = cfg.d_state;
  h.discretization = cfg.discretization == "euler" ? hgre::Discretization::euler : hgre::Discretization::zoh;
  return h;
}

mlfie::MlfieConfig mlfie_config(const RunConfig& cfg) {
  mlfie::MlfieConfig m;
  m.mol_dim = cfg.d_m;
  m.d_k = cfg.d_k;
  m.gate_mode = cfg.gate == "scalar" ? mlfie::GateMode::scalar : mlfie::GateMode::vector;
  m.pretrain_epochs = cfg.mlfie_epochs;
  m.lr = cfg.lr;
  m.vae.d_z = cfg.d_z;
  m.vae.epochs = cfg.vae_epochs;
  m.vae.seed = cfg.seed;
  return m;
}

recsys::RsConfig rs_config(const RunConfig& cfg) {
  recsys::RsConfig r;
  r.d_enc = cfg.d_enc;
  r.layers = cfg.encoder_layers;
  r.heads = cfg.attn_heads;
  r.ffn_hidden = 2 * cfg.d_enc;
  r.gelram = cfg.gelram;
  r.frequency_prior = cfg.frequency_prior;
  r.epochs = cfg.epochs;
  r.batch = cfg.batch;
  r.lr = cfg.lr;
  r.seed = cfg.seed;
  return r;
}

seqgen::SeqConfig seq_config(const RunConfig& cfg, const std::vector<data::PrescriptionInstance>& rx) {
  seqgen::SeqConfig s;
  s.encoder_layers = cfg.encoder_layers;
  s.decoder_layers = cfg.decoder_layers;
  s.heads = cfg.attn_heads;
  s.ffn_hidden = 2 * refine::kUnifiedDim;
  s.max_len = cfg.max_len;
  s.beam_width = cfg.beam_width;
  std::size_t longest = static_cast<std::size_t>(cfg.max_len);
  for (const auto& inst : rx) longest = std::max({longest, inst.symptoms.size(), inst.herbs.size()});
  s.max_positions = std::max<int>(64, static_cast<int>(longest) + 2);
  s.epochs = cfg.epochs;
  s.batch = cfg.batch;
  s.lr = cfg.lr;
  s.seed = cfg.seed;
  return s;
}

Var link_loss(const Var& emb, const data::EdgeList& edges, const data::EdgeList& non_edges) {
  std::vector<Index> left, right;
  Matrix target(static_cast<Index>(edges.size() + non_edges.size()), 1);
  Index row = 0;
  for (const auto* list : {&edges, &non_edges}) {
    for (auto [u, v] : *list) {
      left.push_back(u);
      right.push_back(v);
      target(row++, 0) = list == &edges ? 1.0 : 0.0;
    }
  }
  Var scores = ad::row_sum(ad::mul(ad::gather_rows(emb, left), ad::gather_rows(emb, right)));
  return ad::bce_with_logits(ad::scale(scores, 1.0 / std::sqrt(static_cast<double>(emb.cols()))), target);
}

data::EdgeList sample_non_edges(int n_nodes, const data::EdgeList& edges, std::size_t count, Rng& rng) {
  std::set<std::pair<int, int>> taken;
  for (auto [u, v] : edges) taken.emplace(std::min(u, v), std::max(u, v));
  data::EdgeList out;
  const auto total_pairs = static_cast<std::size_t>(n_nodes) * static_cast<std::size_t>(n_nodes - 1) / 2;
  if (n_nodes < 2 || taken.size() >= total_pairs) return out;
  std::uniform_int_distribution<int> node(0, n_nodes - 1);
  std::size_t attempts = 0;
  while (out.size() < count && attempts < count * 50) {
    ++attempts;
    int u = node(rng), v = node(rng);
    if (u == v) continue;
    std::pair<int, int> key{std::min(u, v), std::max(u, v)};
    if (taken.count(key)) continue;
    out.push_back(key);
  }
  return out;
}

Var Phase1::graph_embeddings() const {
  return cfg.hgre ? hgre::hgre_forward(features, graph, hgre, hgre_cfg) : features;
}

Var Phase1::herb_molecular() const {
  if (!cfg.mlfie) return Var();
  return mlfie::herb_representations(corpus, mols, mlfie);
}

refine::AssembledFeatures Phase1::assemble() const {
  return refine::assemble_features(graph_embeddings(), herb_molecular(), props, text, n_sym);
}

refine::EmbeddingTables Phase1::tables() const {
  refine::AssembledFeatures f = assemble();
  refine::EmbeddingTables t;
  if (cfg.fr) {
    t.symptoms = refine::encode(f.symptoms, ae_sym);
    t.herbs = refine::encode(f.herbs, ae_herb);
    Var rec_sym = ad::mse(refine::decode(t.symptoms, ae_sym), f.symptoms.value());
    Var rec_herb = ad::mse(refine::decode(t.herbs, ae_herb), f.herbs.value());
    // Targets are detached copies; the reconstruction pulls on the encoder and
    // decoder, the head loss on everything upstream.
    t.aux_loss = ad::add(rec_sym, rec_herb);
  } else {
    t.symptoms = proj_sym(f.symptoms);
    t.herbs = proj_herb(f.herbs);
  }
  return t;
}

refine::UnifiedEmbeddings Phase1::unified() const {
  refine::EmbeddingTables t = tables();
  return {t.symptoms.value(), t.herbs.value()};
}

void Phase1::collect(ad::NamedParams& out) const {
  out.emplace_back("phase1.features", features);
  if (cfg.hgre) hgre.collect(out, "phase1.hgre");
  if (cfg.mlfie) mlfie.collect(out, "phase1.mlfie");
  out.emplace_back("phase1.text", text);
  if (cfg.fr) {
    ae_sym.collect(out, "phase1.fr_sym");
    ae_herb.collect(out, "phase1.fr_herb");
  } else {
    proj_sym.collect(out, "phase1.proj_sym");
    proj_herb.collect(out, "phase1.proj_herb");
  }
}

std::vector<data::MolecularRow> Phase1::imputed_rows() const {
  std::vector<data::MolecularRow> rows;
  if (!cfg.mlfie) return rows;
  for (const auto& herb : corpus.herbs) {
    if (!mols[static_cast<std::size_t>(herb.id)].empty()) continue;
    rows.push_back({herb.id, -1, mlfie::impute_missing(herb.properties, mlfie.vae)});
  }
  return rows;
}

std::shared_ptr<Phase1> build_phase1(const RunConfig& cfg, const data::Corpus& corpus,
                                     const data::HeteroGraph& graph, const data::MolecularTable* table,
                                     bool train) {
  auto p = std::make_shared<Phase1>();
  p->cfg = cfg;
  p->corpus.symptoms = corpus.symptoms;
  p->corpus.herbs = corpus.herbs;
  p->corpus.property_dim = corpus.property_dim;
  p->n_sym = corpus.n_sym();
  p->n_herb = corpus.n_herb();
  if (graph.n_sym != p->n_sym || graph.n_herb != p->n_herb) {
    throw DataError("graph node counts do not match the corpus vocabularies");
  }
  if (p->n_sym < 8 || p->n_herb < 8) throw DataError("Phase 1 needs at least 8 symptoms and 8 herbs");
  const int n_nodes = p->n_sym + p->n_herb;

  // Graph stage.
  p->hgre_cfg = hgre_config(cfg);
  p->graph = hgre::make_hgre_graph(graph, p->hgre_cfg.sort_order);
  p->edges = graph.global_edges();
  {
    Rng rng = stage_rng(cfg.seed, "phase1.features");
    p->features = Var::parameter(random_normal(n_nodes, cfg.d, 1.0, rng));
  }
  if (cfg.hgre) {
    Rng rng = stage_rng(cfg.seed, "phase1.hgre");
    p->hgre = hgre::HgreParams::create(p->hgre_cfg, rng);
    if (train && !p->edges.empty()) {
      ad::NamedParams named;
      p->hgre.collect(named, "hgre");
      std::vector<Var> vars = nn::vars_of(named);
      vars.push_back(p->features);
      nn::Adam opt(vars, {.lr = cfg.lr, .clip_norm = 5.0});
      Rng neg = stage_rng(cfg.seed, "phase1.hgre.negatives");
      for (int e = 0; e < cfg.hgre_epochs; ++e) {
        data::EdgeList non_edges = sample_non_edges(n_nodes, p->edges, p->edges.size(), neg);
        opt.zero_grad();
        Var loss = link_loss(hgre::hgre_forward(p->features, p->graph, p->hgre, p->hgre_cfg), p->edges, non_edges);
        ad::backward(loss);
        opt.step();
        if (!std::isfinite(loss.item())) throw NumericError("graph pretraining diverged");
        p->hgre_losses.push_back(loss.item());
      }
    }
  }

  // Molecular stage.
  if (cfg.mlfie) {
    mlfie::MlfieConfig mcfg = mlfie_config(cfg);
    p->mols = mlfie::molecule_embeddings(corpus, table, cfg.d_m);
    Rng rng = stage_rng(cfg.seed, "phase1.mlfie");
    p->mlfie = mlfie::MlfieParams::create(p->n_herb, cfg.P, mcfg, rng);
    bool any_missing = std::any_of(p->mols.begin(), p->mols.end(), [](const auto& l) { return l.empty(); });
    if (train) {
      p->attention_losses = mlfie::pretrain_attention(p->mlfie, corpus, p->mols, mcfg.pretrain_epochs, mcfg.lr);
      auto pairs = mlfie::complete_pairs(p->mlfie, corpus, p->mols);
      if (pairs.size() >= 8) {
        auto vae = mlfie::train_vae(pairs, mcfg.vae);
        p->mlfie.vae = vae.params;
        p->vae_losses = vae.losses;
      } else if (any_missing) {
        throw DataError("imputing herbs without molecules needs at least 8 herbs with molecules, found " +
                        std::to_string(pairs.size()));
      }
    }
  }

  // Symptom text table: record embeddings where present, learned rows otherwise.
  {
    Rng rng = stage_rng(cfg.seed, "phase1.text");
    Matrix t = random_normal(p->n_sym, cfg.d_text, 0.1, rng);
    for (const auto& s : corpus.symptoms) {
      if (!s.text_embedding) continue;
      if (s.text_embedding->size() != cfg.d_text) {
        throw DataError("symptom " + std::to_string(s.id) + " text embedding has length " +
                        std::to_string(s.text_embedding->size()) + ", expected d_text=" + std::to_string(cfg.d_text));
      }
      t.row(s.id) = s.text_embedding->transpose();
    }
    p->text = Var::parameter(t);
  }
  {
    Matrix props(p->n_herb, cfg.P);
    for (const auto& h : corpus.herbs) {
      if (h.properties.size() != cfg.P) throw DataError("herb " + std::to_string(h.id) + " property length mismatch");
      props.row(h.id) = h.properties.transpose();
    }
    p->props = Var::constant(props);
  }

  // Refinement stage.
  refine::AssembledFeatures f = p->assemble();
  p->layout = f.layout;
  if (cfg.fr) {
    refine::AutoencoderConfig acfg;
    acfg.epochs = train ? cfg.fr_epochs : 0;
    acfg.seed = cfg.seed;
    auto rs = refine::train_autoencoder(f.symptoms.value(), acfg, "phase1.fr_sym");
    auto rh = refine::train_autoencoder(f.herbs.value(), acfg, "phase1.fr_herb");
    p->ae_sym = rs.params;
    p->ae_herb = rh.params;
    p->fr_sym_losses = rs.losses;
    p->fr_herb_losses = rh.losses;
    p->fr_sym_initial = rs.initial_mse;
    p->fr_sym_final = rs.final_mse;
    p->fr_herb_initial = rh.initial_mse;
    p->fr_herb_final = rh.final_mse;
  } else {
    Rng rng = stage_rng(cfg.seed, "phase1.proj");
    p->proj_sym = nn::Linear::create(f.layout.symptom_width(), refine::kUnifiedDim, rng);
    p->proj_herb = nn::Linear::create(f.layout.herb_width(), refine::kUnifiedDim, rng);
  }
  if (train) p->imputed = p->imputed_rows();
  return p;
}

refine::EmbeddingSource embedding_source(const std::shared_ptr<Phase1>& p1) {
  if (!p1->cfg.fr_joint) return refine::table_source(p1->unified(), true);
  refine::EmbeddingSource src;
  src.provide = [p1] { return p1->tables(); };
  ad::NamedParams named;
  p1->collect(named);
  for (const auto& [name, v] : named) {
    // The VAE stays frozen after its own training, as does the attention probe.
    if (name.find(".vae.") != std::string::npos || name.find(".probe.") != std::string::npos) continue;
    if (v.requires_grad()) src.params.push_back(v);
  }
  return src;
}

}  // namespace fmash::pipeline
