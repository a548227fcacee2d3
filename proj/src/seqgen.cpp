#include "fmash/seqgen.hpp"

#include "fmash/errors.hpp"
#include "fmash/recsys.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

namespace fmash::seqgen {

void IntegrationLayer::collect(ad::NamedParams& out, const std::string& prefix) const {
  norm.collect(out, prefix + ".norm");
  cross.collect(out, prefix + ".cross");
}

Seq2SeqParams Seq2SeqParams::create(Index d, int n_herb, const SeqConfig& cfg, Rng& rng) {
  Seq2SeqParams p;
  p.vocab = {n_herb};
  for (int i = 0; i < cfg.encoder_layers; ++i) {
    p.encoder.push_back(nn::EncoderLayer::create(d, cfg.heads, cfg.ffn_hidden, rng));
  }
  p.encoder_norm = nn::LayerNorm::create(d);
  p.special_tokens = Var::parameter(random_normal(3, d, 0.02, rng));
  p.integration = {nn::LayerNorm::create(d), nn::MultiHeadAttention::create(d, cfg.heads, rng)};
  for (int i = 0; i < cfg.decoder_layers; ++i) {
    p.decoder.push_back(nn::DecoderLayer::create(d, cfg.heads, cfg.ffn_hidden, rng));
  }
  p.decoder_norm = nn::LayerNorm::create(d);
  p.out_proj = nn::Linear::create(d, p.vocab.size(), rng);
  p.positions = nn::sinusoidal_positions(cfg.max_positions, d);
  return p;
}

void Seq2SeqParams::collect(ad::NamedParams& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < encoder.size(); ++i) encoder[i].collect(out, prefix + ".encoder" + std::to_string(i));
  encoder_norm.collect(out, prefix + ".encoder_norm");
  out.emplace_back(prefix + ".special_tokens", special_tokens);
  integration.collect(out, prefix + ".integration");
  for (std::size_t i = 0; i < decoder.size(); ++i) decoder[i].collect(out, prefix + ".decoder" + std::to_string(i));
  decoder_norm.collect(out, prefix + ".decoder_norm");
  out_proj.collect(out, prefix + ".out_proj");
}

Var token_table(const Var& herb_emb, const Seq2SeqParams& params) {
  return ad::vcat({herb_emb, params.special_tokens});
}

namespace {

Matrix position_rows(const std::vector<Index>& lengths, const Matrix& table) {
  Index total = std::accumulate(lengths.begin(), lengths.end(), Index{0});
  Matrix out(total, table.cols());
  Index r = 0;
  for (Index len : lengths) {
    if (len > table.rows()) {
      throw UsageError("sequence of length " + std::to_string(len) + " exceeds max_positions " +
                       std::to_string(table.rows()));
    }
    out.middleRows(r, len) = table.topRows(len);
    r += len;
  }
  return out;
}

}  // namespace

Var encode_batch(const std::vector<std::vector<int>>& symptom_sets, const Var& sym_emb,
                 const Seq2SeqParams& params, std::vector<Index>& offsets) {
  std::vector<Index> flat, lengths;
  std::vector<ad::AttentionSegment> segments;
  offsets.clear();
  for (const auto& set : symptom_sets) {
    const auto begin = static_cast<Index>(flat.size());
    const auto len = static_cast<Index>(set.size());
    offsets.push_back(begin);
    lengths.push_back(len);
    segments.push_back({begin, len, begin, len});
    flat.insert(flat.end(), set.begin(), set.end());
  }
  Var x = ad::add(ad::gather_rows(sym_emb, flat), Var::constant(position_rows(lengths, params.positions)));
  for (const auto& layer : params.encoder) x = layer(x, segments);
  return params.encoder_norm(x);
}

Matrix encode_symptoms(const std::vector<int>& symptom_ids, const Matrix& sym_emb, const Seq2SeqParams& params) {
  std::vector<Index> offsets;
  auto set = recsys::canonical_symptoms(symptom_ids, static_cast<int>(sym_emb.rows()));
  return encode_batch({set}, Var::constant(sym_emb), params, offsets).value();
}

Var decode_batch(const std::vector<std::vector<int>>& inputs, const Var& memory,
                 const std::vector<Index>& mem_offsets, const std::vector<Index>& mem_lengths,
                 const Var& tokens, const Seq2SeqParams& params) {
  std::vector<Index> flat, lengths;
  std::vector<ad::AttentionSegment> self_segs, cross_segs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto begin = static_cast<Index>(flat.size());
    const auto len = static_cast<Index>(inputs[i].size());
    lengths.push_back(len);
    self_segs.push_back({begin, len, begin, len});
    cross_segs.push_back({begin, len, mem_offsets[i], mem_lengths[i]});
    flat.insert(flat.end(), inputs[i].begin(), inputs[i].end());
  }
  Var x = ad::add(ad::gather_rows(tokens, flat), Var::constant(position_rows(lengths, params.positions)));
  x = ad::add(x, params.integration.cross(params.integration.norm(x), memory, cross_segs, false));
  for (const auto& layer : params.decoder) x = layer(x, memory, self_segs, cross_segs);
  return params.out_proj(params.decoder_norm(x));
}

Var seq_loss(const std::vector<const SeqExample*>& batch, const Var& sym_emb, const Var& herb_emb,
             const Seq2SeqParams& params, int pad_to) {
  const TokenVocab& v = params.vocab;
  std::vector<std::vector<int>> sets, inputs;
  std::vector<int> targets;
  for (const auto* ex : batch) {
    sets.push_back(ex->symptoms);
    std::vector<int> in{v.bos()};
    in.insert(in.end(), ex->herbs.begin(), ex->herbs.end());
    std::vector<int> tgt(ex->herbs.begin(), ex->herbs.end());
    tgt.push_back(v.eos());
    while (static_cast<int>(in.size()) < pad_to) {
      in.push_back(v.pad());
      tgt.push_back(v.pad());
    }
    inputs.push_back(std::move(in));
    targets.insert(targets.end(), tgt.begin(), tgt.end());
  }
  std::vector<Index> offsets;
  Var memory = encode_batch(sets, sym_emb, params, offsets);
  std::vector<Index> lengths;
  for (const auto& s : sets) lengths.push_back(static_cast<Index>(s.size()));
  Var logits = decode_batch(inputs, memory, offsets, lengths, token_table(herb_emb, params), params);
  return ad::cross_entropy(logits, targets, v.pad());
}

Matrix teacher_forced_logits(const std::vector<int>& symptoms, const std::vector<int>& input_tokens,
                             const Matrix& sym_emb, const Matrix& herb_emb, const Seq2SeqParams& params) {
  auto set = recsys::canonical_symptoms(symptoms, static_cast<int>(sym_emb.rows()));
  std::vector<Index> offsets;
  Var memory = encode_batch({set}, Var::constant(sym_emb), params, offsets);
  return decode_batch({input_tokens}, memory, {0}, {static_cast<Index>(set.size())},
                      token_table(Var::constant(herb_emb), params), params)
      .value();
}

namespace {

struct Beam {
  std::vector<int> tokens;  // starts with BOS
  double logp = 0.0;
  bool done = false;
};

/// Log-softmax of one logit row with the generation mask applied.
Eigen::RowVectorXd masked_log_probs(const Eigen::RowVectorXd& logits, const std::vector<int>& tokens,
                                    const TokenVocab& v, bool suppress_eos) {
  constexpr double kNeg = -std::numeric_limits<double>::infinity();
  Eigen::RowVectorXd l = logits;
  l(v.bos()) = kNeg;
  l(v.pad()) = kNeg;
  if (suppress_eos) l(v.eos()) = kNeg;
  for (std::size_t i = 1; i < tokens.size(); ++i) l(tokens[i]) = kNeg;
  double mx = l.maxCoeff();
  if (!std::isfinite(mx)) return l;
  double lse = mx + std::log((l.array() - mx).exp().sum());
  return l.array() - lse;
}

}  // namespace

std::vector<int> generate(const std::vector<int>& symptom_ids, const Matrix& sym_emb, const Matrix& herb_emb,
                          const Seq2SeqParams& params, const GenerateOptions& opts) {
  if (opts.max_len < 1) throw UsageError("max_len must be at least 1");
  const TokenVocab& v = params.vocab;
  auto set = recsys::canonical_symptoms(symptom_ids, static_cast<int>(sym_emb.rows()));
  std::vector<Index> offsets;
  Var memory = encode_batch({set}, Var::constant(sym_emb), params, offsets);
  const auto mem_len = static_cast<Index>(set.size());
  Var tokens = token_table(Var::constant(herb_emb), params);
  const int width = std::max(1, opts.beam_width);
  const int max_len = std::min(opts.max_len, static_cast<int>(params.positions.rows()) - 1);

  std::vector<Beam> beams{{{v.bos()}, 0.0, false}};
  for (int step = 0; step < max_len; ++step) {
    std::vector<std::size_t> alive;
    std::vector<std::vector<int>> inputs;
    for (std::size_t b = 0; b < beams.size(); ++b) {
      if (!beams[b].done) {
        alive.push_back(b);
        inputs.push_back(beams[b].tokens);
      }
    }
    if (alive.empty()) break;
    Matrix logits = decode_batch(inputs, memory, std::vector<Index>(inputs.size(), 0),
                                 std::vector<Index>(inputs.size(), mem_len), tokens, params)
                        .value();
    ad::check_finite(logits, "decoder logits");
    std::vector<Beam> next;
    for (const auto& b : beams) {
      if (b.done) next.push_back(b);
    }
    Index row = -1;
    for (std::size_t a = 0; a < alive.size(); ++a) {
      row += static_cast<Index>(inputs[a].size());
      const Beam& cur = beams[alive[a]];
      Eigen::RowVectorXd lp = masked_log_probs(logits.row(row), cur.tokens, v, opts.suppress_eos);
      std::vector<int> cand(static_cast<std::size_t>(lp.size()));
      std::iota(cand.begin(), cand.end(), 0);
      std::stable_sort(cand.begin(), cand.end(), [&](int x, int y) { return lp(x) > lp(y); });
      for (int c = 0; c < width && c < static_cast<int>(cand.size()); ++c) {
        int tok = cand[static_cast<std::size_t>(c)];
        if (!std::isfinite(lp(tok))) break;
        Beam nb = cur;
        nb.logp += lp(tok);
        if (tok == v.eos()) {
          nb.done = true;
        } else {
          nb.tokens.push_back(tok);
        }
        next.push_back(std::move(nb));
      }
      if (!std::isfinite(lp.maxCoeff())) {
        Beam nb = cur;
        nb.done = true;  // nothing left to emit
        next.push_back(std::move(nb));
      }
    }
    std::stable_sort(next.begin(), next.end(), [](const Beam& a, const Beam& b) { return a.logp > b.logp; });
    if (static_cast<int>(next.size()) > width) next.resize(static_cast<std::size_t>(width));
    beams = std::move(next);
  }
  const Beam& best = beams.front();
  return {best.tokens.begin() + 1, best.tokens.end()};
}

SeqModel train_seq(const std::vector<data::PrescriptionInstance>& train, int n_herb,
                   const refine::EmbeddingSource& source, const SeqConfig& cfg) {
  if (train.empty()) throw DataError("train_seq: training split is empty");
  refine::EmbeddingTables init_tables = source.provide();
  if (init_tables.herbs.rows() != n_herb) throw DataError("train_seq: herb table does not match vocabulary");
  Rng init = stage_rng(cfg.seed, "seq.init");
  SeqModel model{Seq2SeqParams::create(init_tables.symptoms.cols(), n_herb, cfg, init), {}, {}, {}};

  std::vector<SeqExample> examples;
  for (const auto& inst : train) examples.push_back({inst.symptoms, inst.herbs});

  ad::NamedParams named;
  model.params.collect(named, "seq");
  std::vector<Var> vars = nn::vars_of(named);
  vars.insert(vars.end(), source.params.begin(), source.params.end());
  nn::Adam opt(vars, {.lr = cfg.lr, .clip_norm = cfg.clip_norm});

  Rng rng = stage_rng(cfg.seed, "seq.train");
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto batch = static_cast<std::size_t>(std::max(1, cfg.batch));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng() % (i + 1)]);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      std::vector<const SeqExample*> chunk;
      for (std::size_t i = start; i < std::min(order.size(), start + batch); ++i) chunk.push_back(&examples[order[i]]);
      opt.zero_grad();
      refine::EmbeddingTables tables = source.provide();
      Var loss = seq_loss(chunk, tables.symptoms, tables.herbs, model.params);
      total += loss.item() * static_cast<double>(chunk.size());
      if (tables.aux_loss.defined()) loss = ad::add(loss, tables.aux_loss);
      ad::backward(loss);
      opt.step();
    }
    double mean_loss = total / static_cast<double>(examples.size());
    if (!std::isfinite(mean_loss)) throw NumericError("train_seq: loss is not finite at epoch " + std::to_string(epoch));
    model.losses.push_back(mean_loss);
  }
  refine::EmbeddingTables final_tables = source.provide();
  model.sym_emb = final_tables.symptoms.value();
  model.herb_emb = final_tables.herbs.value();
  return model;
}

void write_seq_predictions(const std::filesystem::path& path, const std::vector<std::size_t>& instance_ids,
                           const std::vector<std::vector<int>>& formulas) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (std::size_t i = 0; i < formulas.size(); ++i) {
    out << instance_ids[i] << '\t';
    for (std::size_t j = 0; j < formulas[i].size(); ++j) {
      if (j) out << ',';
      out << formulas[i][j];
    }
    out << '\n';
  }
}

}  // namespace fmash::seqgen
