#include "fmash/refine.hpp"

#include "fmash/errors.hpp"

#include <nlohmann/json.hpp>

#include <charconv>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

namespace fmash::refine {

using json = nlohmann::json;

json layout_to_json(const FeatureLayout& l) {
  return {{"graph_dim", l.graph_dim}, {"mol_dim", l.mol_dim}, {"prop_dim", l.prop_dim},
          {"text_dim", l.text_dim}};
}

FeatureLayout layout_from_json(const json& j) {
  try {
    return {j.at("graph_dim").get<Index>(), j.at("mol_dim").get<Index>(), j.at("prop_dim").get<Index>(),
            j.at("text_dim").get<Index>()};
  } catch (const json::exception& e) {
    throw DataError(std::string("feature layout: ") + e.what());
  }
}

void save_layout(const std::filesystem::path& path, const FeatureLayout& layout) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << layout_to_json(layout).dump(2) << '\n';
}

FeatureLayout load_layout(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return layout_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

AssembledFeatures assemble_features(const Var& graph, const Var& mol, const Var& props, const Var& text,
                                    Index n_sym) {
  const Index n_herb = graph.rows() - n_sym;
  if (n_herb < 0 || props.rows() != n_herb || text.rows() != n_sym ||
      (mol.defined() && mol.rows() != n_herb)) {
    throw DataError("assemble_features: component row counts disagree");
  }
  AssembledFeatures out;
  out.layout = {graph.cols(), mol.defined() ? mol.cols() : 0, props.cols(), text.cols()};
  std::vector<Var> herb_parts{ad::slice_rows(graph, n_sym, n_herb)};
  if (mol.defined()) herb_parts.push_back(mol);
  herb_parts.push_back(props);
  out.herbs = ad::hcat(herb_parts);
  out.symptoms = ad::hcat({ad::slice_rows(graph, 0, n_sym), text});
  return out;
}

AutoencoderParams AutoencoderParams::create(Index input_dim, Index hidden, Rng& rng) {
  return {nn::Linear::create(input_dim, hidden, rng), nn::Linear::create(hidden, kUnifiedDim, rng),
          nn::Linear::create(kUnifiedDim, hidden, rng), nn::Linear::create(hidden, input_dim, rng)};
}

void AutoencoderParams::collect(ad::NamedParams& out, const std::string& prefix) const {
  enc1.collect(out, prefix + ".enc1");
  enc2.collect(out, prefix + ".enc2");
  dec1.collect(out, prefix + ".dec1");
  dec2.collect(out, prefix + ".dec2");
}

Var encode(const Var& rows, const AutoencoderParams& p) {
  if (rows.cols() != p.input_dim()) {
    throw DataError("autoencoder expects rows of width " + std::to_string(p.input_dim()) + ", got " +
                    std::to_string(rows.cols()));
  }
  return p.enc2(ad::relu(p.enc1(rows)));
}

Var decode(const Var& codes, const AutoencoderParams& p) { return p.dec2(ad::relu(p.dec1(codes))); }

Matrix compress(const Matrix& rows, const AutoencoderParams& params) {
  return encode(Var::constant(rows), params).value();
}

double reconstruction_mse(const Matrix& rows, const AutoencoderParams& params) {
  Matrix recon = decode(encode(Var::constant(rows), params), params).value();
  return (recon - rows).squaredNorm() / static_cast<double>(rows.size());
}

AutoencoderTrainResult train_autoencoder(const Matrix& rows, const AutoencoderConfig& cfg,
                                         const std::string& stage) {
  if (rows.rows() < 8) {
    throw DataError("train_autoencoder: needs at least 8 rows, got " + std::to_string(rows.rows()));
  }
  Rng init = stage_rng(cfg.seed, stage + ".init");
  AutoencoderTrainResult result{AutoencoderParams::create(rows.cols(), cfg.hidden, init), {}, 0, 0, false};
  bool all_same = true;
  for (Index r = 1; r < rows.rows() && all_same; ++r) all_same = rows.row(r) == rows.row(0);
  if (all_same) {
    result.degenerate_input = true;
    std::cerr << "warning: " << stage << " autoencoder input rows are all identical\n";
  }
  result.initial_mse = reconstruction_mse(rows, result.params);

  ad::NamedParams named;
  result.params.collect(named, stage);
  nn::Adam opt(nn::vars_of(named), {.lr = cfg.lr, .clip_norm = 5.0});
  Rng rng = stage_rng(cfg.seed, stage + ".train");
  std::vector<Index> order(static_cast<std::size_t>(rows.rows()));
  std::iota(order.begin(), order.end(), Index{0});
  const auto batch = static_cast<std::size_t>(std::max(1, cfg.batch));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng() % (i + 1)]);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      std::size_t n = std::min(batch, order.size() - start);
      Matrix chunk(static_cast<Index>(n), rows.cols());
      for (std::size_t r = 0; r < n; ++r) chunk.row(static_cast<Index>(r)) = rows.row(order[start + r]);
      opt.zero_grad();
      Var loss = ad::mse(decode(encode(Var::constant(chunk), result.params), result.params), chunk);
      ad::backward(loss);
      opt.step();
      total += loss.item() * static_cast<double>(n);
    }
    result.losses.push_back(total / static_cast<double>(rows.rows()));
  }
  result.final_mse = reconstruction_mse(rows, result.params);
  if (!std::isfinite(result.final_mse)) throw NumericError("autoencoder training diverged");
  return result;
}

namespace {

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

void write_unified(const std::filesystem::path& path, const UnifiedEmbeddings& emb) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "dim=" << kUnifiedDim << '\n';
  auto dump = [&](const char* type, const Matrix& m) {
    if (m.cols() != kUnifiedDim) throw DataError("unified embeddings must be 64 wide");
    for (Index r = 0; r < m.rows(); ++r) {
      out << type << ',' << r;
      for (Index c = 0; c < m.cols(); ++c) out << ',' << fmt(m(r, c));
      out << '\n';
    }
  };
  dump("symptom", emb.symptoms);
  dump("herb", emb.herbs);
}

UnifiedEmbeddings read_unified(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "dim=64") throw DataError(path.string() + ": expected 'dim=64'");
  std::vector<std::vector<double>> sym, herb;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string type, id, cell;
    std::getline(ss, type, ',');
    std::getline(ss, id, ',');
    std::vector<double> row;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    if (static_cast<Index>(row.size()) != kUnifiedDim) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected 64 values");
    }
    auto& dst = type == "symptom" ? sym : herb;
    if (std::stoul(id) != dst.size()) throw DataError(path.string() + ": rows out of order");
    dst.push_back(std::move(row));
  }
  auto to_matrix = [](const std::vector<std::vector<double>>& rows) {
    Matrix m(static_cast<Index>(rows.size()), kUnifiedDim);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (Index c = 0; c < kUnifiedDim; ++c) m(static_cast<Index>(r), c) = rows[r][static_cast<std::size_t>(c)];
    }
    return m;
  };
  return {to_matrix(sym), to_matrix(herb)};
}

EmbeddingSource table_source(const UnifiedEmbeddings& emb, bool trainable) {
  Var sym(emb.symptoms, trainable);
  Var herb(emb.herbs, trainable);
  EmbeddingSource src;
  src.provide = [sym, herb] { return EmbeddingTables{sym, herb, Var()}; };
  if (trainable) src.params = {sym, herb};
  return src;
}

}  // namespace fmash::refine
