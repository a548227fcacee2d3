#include "fmash/nn.hpp"

#include "fmash/errors.hpp"

#include <cmath>

namespace fmash {

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

Rng stage_rng(std::uint64_t seed, std::string_view stage) {
  std::uint64_t h = fnv1a64(stage, 1469598103934665603ULL ^ (seed * 0x9E3779B97F4A7C15ULL));
  return Rng(h);
}

Matrix random_normal(Index rows, Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) m(r, c) = dist(rng);
  }
  return m;
}

Matrix xavier_uniform(Index rows, Index cols, Rng& rng) {
  double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) m(r, c) = dist(rng);
  }
  return m;
}

namespace nn {

Linear Linear::create(Index in, Index out, Rng& rng, bool with_bias) {
  Linear l;
  l.weight = Var::parameter(xavier_uniform(in, out, rng));
  if (with_bias) l.bias = Var::parameter(Matrix::Zero(1, out));
  return l;
}

Var Linear::operator()(const Var& x) const {
  Var y = ad::matmul(x, weight);
  return bias.defined() ? ad::add_row(y, bias) : y;
}

void Linear::collect(NamedParams& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".weight", weight);
  if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
}

LayerNorm LayerNorm::create(Index dim) {
  return {Var::parameter(Matrix::Ones(1, dim)), Var::parameter(Matrix::Zero(1, dim))};
}

void LayerNorm::collect(NamedParams& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".gamma", gamma);
  out.emplace_back(prefix + ".beta", beta);
}

MultiHeadAttention MultiHeadAttention::create(Index dim, int heads, Rng& rng) {
  if (heads < 1 || dim % heads != 0) {
    throw UsageError("attention width " + std::to_string(dim) + " is not divisible by " +
                     std::to_string(heads) + " heads");
  }
  MultiHeadAttention m;
  m.q = Linear::create(dim, dim, rng);
  m.k = Linear::create(dim, dim, rng);
  m.v = Linear::create(dim, dim, rng);
  m.o = Linear::create(dim, dim, rng);
  m.heads = heads;
  return m;
}

Var MultiHeadAttention::operator()(const Var& queries, const Var& keys_values,
                                   std::span<const ad::AttentionSegment> segments,
                                   bool causal) const {
  Var ctx = ad::attention(q(queries), k(keys_values), v(keys_values), segments, heads, causal);
  return o(ctx);
}

void MultiHeadAttention::collect(NamedParams& out, const std::string& prefix) const {
  q.collect(out, prefix + ".q");
  k.collect(out, prefix + ".k");
  v.collect(out, prefix + ".v");
  o.collect(out, prefix + ".o");
}

FeedForward FeedForward::create(Index dim, Index hidden, Rng& rng) {
  return {Linear::create(dim, hidden, rng), Linear::create(hidden, dim, rng)};
}

void FeedForward::collect(NamedParams& out, const std::string& prefix) const {
  up.collect(out, prefix + ".up");
  down.collect(out, prefix + ".down");
}

EncoderLayer EncoderLayer::create(Index dim, int heads, Index hidden, Rng& rng) {
  EncoderLayer l;
  l.norm_attn = LayerNorm::create(dim);
  l.attn = MultiHeadAttention::create(dim, heads, rng);
  l.norm_ffn = LayerNorm::create(dim);
  l.ffn = FeedForward::create(dim, hidden, rng);
  return l;
}

Var EncoderLayer::operator()(const Var& x, std::span<const ad::AttentionSegment> segments) const {
  Var normed = norm_attn(x);
  Var h = ad::add(x, attn(normed, normed, segments, false));
  return ad::add(h, ffn(norm_ffn(h)));
}

void EncoderLayer::collect(NamedParams& out, const std::string& prefix) const {
  norm_attn.collect(out, prefix + ".norm_attn");
  attn.collect(out, prefix + ".attn");
  norm_ffn.collect(out, prefix + ".norm_ffn");
  ffn.collect(out, prefix + ".ffn");
}

DecoderLayer DecoderLayer::create(Index dim, int heads, Index hidden, Rng& rng) {
  DecoderLayer l;
  l.norm_self = LayerNorm::create(dim);
  l.self_attn = MultiHeadAttention::create(dim, heads, rng);
  l.norm_cross = LayerNorm::create(dim);
  l.cross_attn = MultiHeadAttention::create(dim, heads, rng);
  l.norm_ffn = LayerNorm::create(dim);
  l.ffn = FeedForward::create(dim, hidden, rng);
  return l;
}

Var DecoderLayer::operator()(const Var& x, const Var& memory,
                             std::span<const ad::AttentionSegment> self_segments,
                             std::span<const ad::AttentionSegment> cross_segments) const {
  Var normed = norm_self(x);
  Var h = ad::add(x, self_attn(normed, normed, self_segments, true));
  h = ad::add(h, cross_attn(norm_cross(h), memory, cross_segments, false));
  return ad::add(h, ffn(norm_ffn(h)));
}

void DecoderLayer::collect(NamedParams& out, const std::string& prefix) const {
  norm_self.collect(out, prefix + ".norm_self");
  self_attn.collect(out, prefix + ".self_attn");
  norm_cross.collect(out, prefix + ".norm_cross");
  cross_attn.collect(out, prefix + ".cross_attn");
  norm_ffn.collect(out, prefix + ".norm_ffn");
  ffn.collect(out, prefix + ".ffn");
}

Matrix sinusoidal_positions(Index positions, Index dim) {
  Matrix table(positions, dim);
  for (Index p = 0; p < positions; ++p) {
    for (Index i = 0; i < dim; ++i) {
      double rate = std::pow(10000.0, -2.0 * static_cast<double>(i / 2) / static_cast<double>(dim));
      double angle = static_cast<double>(p) * rate;
      table(p, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return table;
}

Adam::Adam(std::vector<Var> params, AdamConfig config) : params_(std::move(params)), cfg_(config) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.push_back(Matrix::Zero(p.rows(), p.cols()));
    v_.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Adam::step() {
  ++steps_;
  double clip = 1.0;
  if (cfg_.clip_norm > 0) {
    double sq = 0.0;
    for (const auto& p : params_) {
      if (p.grad().size() != 0) sq += p.grad().squaredNorm();
    }
    double norm = std::sqrt(sq);
    if (norm > cfg_.clip_norm) clip = cfg_.clip_norm / norm;
  }
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var& p = params_[i];
    if (p.grad().size() == 0) continue;
    Matrix g = p.grad() * clip;
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    Matrix update = (m_[i] / bc1).array() / ((v_[i] / bc2).array().sqrt() + cfg_.eps);
    p.mutable_value() -= cfg_.lr * update;
  }
}

std::vector<Var> vars_of(const NamedParams& named) {
  std::vector<Var> out;
  out.reserve(named.size());
  for (const auto& [name, v] : named) out.push_back(v);
  return out;
}

std::vector<double> smoothed(const std::vector<double>& values, std::size_t window) {
  std::vector<double> out(values.size());
  double running = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    running += values[i];
    if (i >= window) running -= values[i - window];
    out[i] = running / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

}  // namespace nn
}  // namespace fmash
