#include "fmash/mlfie.hpp"

#include "fmash/errors.hpp"

#include <cmath>
#include <numeric>

namespace fmash::mlfie {

Vector stub_encode_molecule(std::string_view smiles, Index dim) {
  if (smiles.empty()) throw UsageError("stub_encode_molecule: empty SMILES string");
  if (dim < 1) throw UsageError("stub_encode_molecule: dimension must be >= 1");
  Vector v = Vector::Zero(dim);
  for (std::size_t n = 1; n <= 3; ++n) {
    if (smiles.size() < n) break;
    for (std::size_t i = 0; i + n <= smiles.size(); ++i) {
      std::uint64_t h = fnv1a64(smiles.substr(i, n), 1469598103934665603ULL + n);
      auto bucket = static_cast<Index>(h % static_cast<std::uint64_t>(dim));
      double sign = ((h >> 63) & 1U) ? -1.0 : 1.0;
      v(bucket) += sign / static_cast<double>(n);
    }
  }
  double norm = v.norm();
  if (norm == 0.0) {
    // Every gram cancelled out; fall back to a single hashed coordinate.
    v(static_cast<Index>(fnv1a64(smiles) % static_cast<std::uint64_t>(dim))) = 1.0;
    return v;
  }
  return v / norm;
}

AttentionParams AttentionParams::create(Index prop_dim, Index mol_dim, Index d_k, Rng& rng) {
  if (d_k < 1) throw UsageError("attention key dimension d_k must be >= 1");
  return {Var::parameter(xavier_uniform(prop_dim, d_k, rng)),
          Var::parameter(xavier_uniform(mol_dim, d_k, rng))};
}

void AttentionParams::collect(ad::NamedParams& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".w_q", w_q);
  out.emplace_back(prefix + ".w_k", w_k);
}

AttentionResult aggregate_attention_batch(const Var& mol_embs, const Var& props,
                                          std::span<const Index> offsets,
                                          const AttentionParams& params) {
  const Index herbs = props.rows();
  if (static_cast<Index>(offsets.size()) != herbs + 1 || offsets.back() != mol_embs.rows()) {
    throw DataError("aggregate_attention: molecule offsets do not match the batch");
  }
  std::vector<Index> owner;
  owner.reserve(static_cast<std::size_t>(mol_embs.rows()));
  for (Index h = 0; h < herbs; ++h) {
    Index count = offsets[static_cast<std::size_t>(h) + 1] - offsets[static_cast<std::size_t>(h)];
    if (count < 1) {
      throw DataError("aggregate_attention: herb without molecules must be routed to imputation");
    }
    owner.insert(owner.end(), static_cast<std::size_t>(count), h);
  }
  Var queries = ad::matmul(props, params.w_q);    // herbs x d_k
  Var keys = ad::matmul(mol_embs, params.w_k);    // mols x d_k
  Var logits = ad::scale(ad::row_sum(ad::mul(ad::gather_rows(queries, owner), keys)),
                         1.0 / std::sqrt(static_cast<double>(params.d_k())));
  Var alpha = ad::segment_softmax(logits, offsets);

  std::vector<Eigen::Triplet<double>> trips;
  for (std::size_t m = 0; m < owner.size(); ++m) trips.emplace_back(owner[m], static_cast<Index>(m), 1.0);
  auto pool = std::make_shared<SparseMatrix>(herbs, mol_embs.rows());
  pool->setFromTriplets(trips.begin(), trips.end());
  Var pooled = ad::spmm(pool, ad::mul_col(mol_embs, alpha));
  return {pooled, alpha};
}

AttentionResult aggregate_attention(const Var& mol_embs, const Var& props, const AttentionParams& params) {
  if (props.rows() != 1) throw DataError("aggregate_attention: expects one property row");
  std::vector<Index> offsets{0, mol_embs.rows()};
  return aggregate_attention_batch(mol_embs, props, offsets, params);
}

GateParams GateParams::create(Index mol_dim, GateMode mode, Rng& rng) {
  Index out = mode == GateMode::vector ? mol_dim : 1;
  GateParams g;
  g.w_g = Var::parameter(xavier_uniform(mol_dim, out, rng));
  g.b_g = Var::parameter(Matrix::Zero(1, out));
  g.mode = mode;
  return g;
}

void GateParams::collect(ad::NamedParams& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".w_g", w_g);
  out.emplace_back(prefix + ".b_g", b_g);
}

Var fuse_gate(const Var& pooled, const Var& latent, const GateParams& params) {
  if (pooled.rows() != latent.rows() || pooled.cols() != latent.cols()) {
    throw DataError("fuse_gate: pooled and latent shapes differ");
  }
  Var lambda = ad::sigmoid(ad::add_row(ad::matmul(pooled, params.w_g), params.b_g));
  if (params.mode == GateMode::scalar) {
    Var mixed = ad::add(latent, ad::mul_col(ad::sub(pooled, latent), lambda));
    return mixed;
  }
  // h_e + lambda * (v - h_e)
  return ad::add(latent, ad::mul(lambda, ad::sub(pooled, latent)));
}

VaeParams VaeParams::create(Index prop_dim, Index mol_dim, const VaeConfig& cfg, Rng& rng) {
  VaeParams p;
  p.enc1 = nn::Linear::create(prop_dim, cfg.hidden, rng);
  p.enc2 = nn::Linear::create(cfg.hidden, cfg.hidden, rng);
  p.enc_mu = nn::Linear::create(cfg.hidden, cfg.d_z, rng);
  p.enc_logvar = nn::Linear::create(cfg.hidden, cfg.d_z, rng);
  p.enc_logvar.weight.mutable_value() *= 0.1;
  p.dec1 = nn::Linear::create(cfg.d_z, cfg.hidden, rng);
  p.dec2 = nn::Linear::create(cfg.hidden, cfg.hidden, rng);
  p.dec_out = nn::Linear::create(cfg.hidden, mol_dim, rng);
  return p;
}

void VaeParams::collect(ad::NamedParams& out, const std::string& prefix) const {
  enc1.collect(out, prefix + ".enc1");
  enc2.collect(out, prefix + ".enc2");
  enc_mu.collect(out, prefix + ".enc_mu");
  enc_logvar.collect(out, prefix + ".enc_logvar");
  dec1.collect(out, prefix + ".dec1");
  dec2.collect(out, prefix + ".dec2");
  dec_out.collect(out, prefix + ".dec_out");
}

Posterior vae_encode(const Var& props, const VaeParams& params) {
  if (props.cols() != params.prop_dim()) {
    throw DataError("VAE expects property vectors of length " + std::to_string(params.prop_dim()) +
                    ", got " + std::to_string(props.cols()));
  }
  Var h = ad::relu(params.enc2(ad::relu(params.enc1(props))));
  return {params.enc_mu(h), params.enc_logvar(h)};
}

Var vae_decode(const Var& z, const VaeParams& params) {
  return params.dec_out(ad::relu(params.dec2(ad::relu(params.dec1(z)))));
}

Var gaussian_kl(const Var& mu, const Var& logvar) {
  Var terms = ad::sub(ad::add_scalar(ad::add(ad::square(mu), ad::exp(logvar)), -1.0), logvar);
  return ad::scale(ad::sum(terms), 0.5 / static_cast<double>(mu.rows()));
}

VaeLoss vae_loss(const Var& props, const Matrix& target, const VaeParams& params, const Matrix& eps,
                 double beta) {
  Posterior post = vae_encode(props, params);
  if (eps.rows() != post.mu.rows() || eps.cols() != post.mu.cols()) {
    throw DataError("vae_loss: noise shape does not match the latent batch");
  }
  Var sigma = ad::exp(ad::scale(post.logvar, 0.5));
  Var z = ad::add(post.mu, ad::mul(sigma, Var::constant(eps)));
  Var recon_out = vae_decode(z, params);
  Var recon = ad::scale(ad::mse(recon_out, target), static_cast<double>(target.cols()));
  Var kl = gaussian_kl(post.mu, post.logvar);
  Var loss = ad::add(recon, ad::scale(kl, beta));
  if (!std::isfinite(loss.item())) throw NumericError("VAE loss is not finite");
  return {loss, kl, recon};
}

VaeTrainResult train_vae(const std::vector<CompletePair>& pairs, const VaeConfig& cfg) {
  if (pairs.empty()) throw DataError("train_vae: no complete (property, molecule) pairs in corpus");
  if (pairs.size() < 8) {
    throw DataError("train_vae: needs at least 8 complete pairs, got " + std::to_string(pairs.size()));
  }
  const Index prop_dim = pairs.front().properties.size();
  const Index mol_dim = pairs.front().target.size();
  Rng init = stage_rng(cfg.seed, "vae.init");
  VaeTrainResult result{VaeParams::create(prop_dim, mol_dim, cfg, init), {}};

  ad::NamedParams named;
  result.params.collect(named, "vae");
  nn::Adam opt(nn::vars_of(named), {.lr = cfg.lr, .clip_norm = 5.0});
  Rng rng = stage_rng(cfg.seed, "vae.train");
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  const auto batch = static_cast<std::size_t>(std::max(1, cfg.batch));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng() % (i + 1)]);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      std::size_t n = std::min(batch, order.size() - start);
      Matrix props(static_cast<Index>(n), prop_dim);
      Matrix target(static_cast<Index>(n), mol_dim);
      for (std::size_t r = 0; r < n; ++r) {
        props.row(static_cast<Index>(r)) = pairs[order[start + r]].properties.transpose();
        target.row(static_cast<Index>(r)) = pairs[order[start + r]].target.transpose();
      }
      Matrix eps(static_cast<Index>(n), result.params.d_z());
      for (Index k = 0; k < eps.size(); ++k) eps.data()[k] = normal(rng);
      opt.zero_grad();
      VaeLoss l = vae_loss(Var::constant(props), target, result.params, eps, cfg.beta);
      ad::backward(l.loss);
      opt.step();
      total += l.loss.item() * static_cast<double>(n);
    }
    result.losses.push_back(total / static_cast<double>(pairs.size()));
  }
  return result;
}

Vector impute_missing(const Vector& props, const VaeParams& params, ImputeMode mode, Rng* rng) {
  if (props.size() != params.prop_dim()) {
    throw DataError("impute_missing: property vector has length " + std::to_string(props.size()) +
                    ", expected P=" + std::to_string(params.prop_dim()));
  }
  Posterior post = vae_encode(Var::constant(props.transpose()), params);
  Matrix z = post.mu.value();
  if (mode == ImputeMode::sample) {
    if (rng == nullptr) throw UsageError("impute_missing: sample mode needs a random generator");
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Index i = 0; i < z.cols(); ++i) {
      z(0, i) += std::exp(0.5 * post.logvar.value()(0, i)) * normal(*rng);
    }
  }
  return vae_decode(Var::constant(z), params).value().row(0).transpose();
}

MlfieParams MlfieParams::create(Index n_herb, Index prop_dim, const MlfieConfig& cfg, Rng& rng) {
  MlfieParams p;
  p.attention = AttentionParams::create(prop_dim, cfg.mol_dim, cfg.d_k, rng);
  p.probe = nn::Linear::create(cfg.mol_dim, prop_dim, rng);
  p.gate = GateParams::create(cfg.mol_dim, cfg.gate_mode, rng);
  p.latent = Var::parameter(random_normal(n_herb, cfg.mol_dim, 0.02, rng));
  p.vae = VaeParams::create(prop_dim, cfg.mol_dim, cfg.vae, rng);
  return p;
}

void MlfieParams::collect(ad::NamedParams& out, const std::string& prefix) const {
  attention.collect(out, prefix + ".attention");
  probe.collect(out, prefix + ".probe");
  gate.collect(out, prefix + ".gate");
  out.emplace_back(prefix + ".latent", latent);
  vae.collect(out, prefix + ".vae");
}

std::vector<std::vector<Vector>> molecule_embeddings(const data::Corpus& corpus,
                                                     const data::MolecularTable* table, Index mol_dim) {
  std::vector<std::vector<Vector>> out(corpus.herbs.size());
  for (const auto& herb : corpus.herbs) {
    auto& dst = out[static_cast<std::size_t>(herb.id)];
    if (table != nullptr) {
      if (auto it = table->find(herb.id); it != table->end()) {
        dst = it->second;
        continue;
      }
    }
    if (herb.mol_embeddings) {
      dst = *herb.mol_embeddings;
      continue;
    }
    for (const auto& smiles : herb.molecules) dst.push_back(stub_encode_molecule(smiles, mol_dim));
  }
  for (const auto& list : out) {
    for (const auto& v : list) {
      if (v.size() != mol_dim) {
        throw DataError("molecule embedding of length " + std::to_string(v.size()) +
                        " does not match d_m=" + std::to_string(mol_dim));
      }
    }
  }
  return out;
}

namespace {

struct MoleculeBatch {
  std::vector<int> herbs;
  std::vector<Index> offsets{0};
  Matrix embeddings;
  Matrix props;
};

MoleculeBatch gather_batch(const data::Corpus& corpus, const std::vector<std::vector<Vector>>& mols) {
  MoleculeBatch b;
  Index total = 0;
  for (const auto& list : mols) total += static_cast<Index>(list.size());
  Index mol_dim = 0;
  for (const auto& list : mols) {
    if (!list.empty()) {
      mol_dim = list.front().size();
      break;
    }
  }
  b.embeddings.resize(total, mol_dim);
  Index row = 0;
  for (const auto& herb : corpus.herbs) {
    const auto& list = mols[static_cast<std::size_t>(herb.id)];
    if (list.empty()) continue;
    b.herbs.push_back(herb.id);
    for (const auto& v : list) b.embeddings.row(row++) = v.transpose();
    b.offsets.push_back(row);
  }
  b.props.resize(static_cast<Index>(b.herbs.size()), corpus.property_dim);
  for (std::size_t i = 0; i < b.herbs.size(); ++i) {
    b.props.row(static_cast<Index>(i)) =
        corpus.herbs[static_cast<std::size_t>(b.herbs[i])].properties.transpose();
  }
  return b;
}

}  // namespace

std::vector<double> pretrain_attention(MlfieParams& params, const data::Corpus& corpus,
                                       const std::vector<std::vector<Vector>>& mols, int epochs,
                                       double lr) {
  MoleculeBatch b = gather_batch(corpus, mols);
  std::vector<double> losses;
  if (b.herbs.empty()) return losses;
  ad::NamedParams named;
  params.attention.collect(named, "attention");
  params.probe.collect(named, "probe");
  nn::Adam opt(nn::vars_of(named), {.lr = lr});
  Var embs = Var::constant(b.embeddings);
  Var props = Var::constant(b.props);
  for (int e = 0; e < epochs; ++e) {
    opt.zero_grad();
    auto pooled = aggregate_attention_batch(embs, props, b.offsets, params.attention).pooled;
    Var loss = ad::mse(params.probe(pooled), b.props);
    ad::backward(loss);
    opt.step();
    losses.push_back(loss.item());
  }
  return losses;
}

std::vector<CompletePair> complete_pairs(const MlfieParams& params, const data::Corpus& corpus,
                                         const std::vector<std::vector<Vector>>& mols) {
  MoleculeBatch b = gather_batch(corpus, mols);
  std::vector<CompletePair> out;
  if (b.herbs.empty()) return out;
  Matrix pooled = aggregate_attention_batch(Var::constant(b.embeddings), Var::constant(b.props),
                                            b.offsets, params.attention)
                      .pooled.value();
  for (std::size_t i = 0; i < b.herbs.size(); ++i) {
    out.push_back({b.props.row(static_cast<Index>(i)).transpose(),
                   pooled.row(static_cast<Index>(i)).transpose()});
  }
  return out;
}

Vector herb_representation(const data::HerbRecord& herb, const std::vector<Vector>& mol_embs,
                           const MlfieParams& params) {
  if (herb.id < 0 || herb.id >= params.latent.rows()) throw DataError("herb id outside latent table");
  Matrix pooled;
  if (!mol_embs.empty()) {
    Matrix embs(static_cast<Index>(mol_embs.size()), mol_embs.front().size());
    for (std::size_t i = 0; i < mol_embs.size(); ++i) embs.row(static_cast<Index>(i)) = mol_embs[i].transpose();
    pooled = aggregate_attention(Var::constant(embs), Var::constant(herb.properties.transpose()),
                                 params.attention)
                 .pooled.value();
  } else {
    pooled = impute_missing(herb.properties, params.vae).transpose();
  }
  Matrix latent = params.latent.value().row(herb.id);
  return fuse_gate(Var::constant(pooled), Var::constant(latent), params.gate).value().row(0).transpose();
}

Var herb_representations(const data::Corpus& corpus, const std::vector<std::vector<Vector>>& mols,
                         const MlfieParams& params) {
  MoleculeBatch b = gather_batch(corpus, mols);
  const Index n_herb = corpus.n_herb();
  const Index mol_dim = params.latent.cols();
  std::vector<Var> parts;
  std::vector<Index> row_of(static_cast<std::size_t>(n_herb), -1);
  Index next = 0;
  if (!b.herbs.empty()) {
    parts.push_back(aggregate_attention_batch(Var::constant(b.embeddings), Var::constant(b.props),
                                              b.offsets, params.attention)
                        .pooled);
    for (int h : b.herbs) row_of[static_cast<std::size_t>(h)] = next++;
  }
  std::vector<int> missing;
  for (const auto& herb : corpus.herbs) {
    if (row_of[static_cast<std::size_t>(herb.id)] < 0) missing.push_back(herb.id);
  }
  if (!missing.empty()) {
    // The VAE is frozen after its own training; imputed vectors enter as constants.
    Matrix imputed(static_cast<Index>(missing.size()), mol_dim);
    for (std::size_t i = 0; i < missing.size(); ++i) {
      imputed.row(static_cast<Index>(i)) =
          impute_missing(corpus.herbs[static_cast<std::size_t>(missing[i])].properties, params.vae)
              .transpose();
      row_of[static_cast<std::size_t>(missing[i])] = next++;
    }
    parts.push_back(Var::constant(imputed));
  }
  Var pooled = ad::gather_rows(ad::vcat(parts), row_of);
  return fuse_gate(pooled, params.latent, params.gate);
}

}  // namespace fmash::mlfie
