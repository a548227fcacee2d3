/**
 * Layers, initializers and the Adam optimizer shared by every trainable stage.
 *
 * Parameter structs hold `ad::Var` handles; the handles own the storage, so a
 * struct stays valid after the function that created it returns. Each struct
 * exposes `collect(out, prefix)` to list its tensors by name for
 * checkpointing and optimization.
 */
#pragma once

#include "fmash/autodiff.hpp"

#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace fmash {

using Rng = std::mt19937_64;

/// FNV-1a over bytes; used for seed derivation and content hashes.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 1469598103934665603ULL);

/// Independent stream per named stage so that toggling one stage never shifts
/// another stage's initialization.
Rng stage_rng(std::uint64_t seed, std::string_view stage);

Matrix random_normal(Index rows, Index cols, double stddev, Rng& rng);
Matrix xavier_uniform(Index rows, Index cols, Rng& rng);

namespace nn {

using ad::NamedParams;
using ad::Var;

struct Linear {
  Var weight;  // in x out
  Var bias;    // 1 x out, undefined when created without bias

  static Linear create(Index in, Index out, Rng& rng, bool with_bias = true);
  Var operator()(const Var& x) const;
  Index in_dim() const { return weight.rows(); }
  Index out_dim() const { return weight.cols(); }
  void collect(NamedParams& out, const std::string& prefix) const;
};

struct LayerNorm {
  Var gamma;
  Var beta;

  static LayerNorm create(Index dim);
  Var operator()(const Var& x) const { return ad::layer_norm(x, gamma, beta); }
  void collect(NamedParams& out, const std::string& prefix) const;
};

struct MultiHeadAttention {
  Linear q, k, v, o;
  int heads = 1;

  static MultiHeadAttention create(Index dim, int heads, Rng& rng);
  Var operator()(const Var& queries, const Var& keys_values,
                 std::span<const ad::AttentionSegment> segments, bool causal) const;
  void collect(NamedParams& out, const std::string& prefix) const;
};

struct FeedForward {
  Linear up, down;

  static FeedForward create(Index dim, Index hidden, Rng& rng);
  Var operator()(const Var& x) const { return down(ad::relu(up(x))); }
  void collect(NamedParams& out, const std::string& prefix) const;
};

/// Pre-norm transformer encoder layer.
struct EncoderLayer {
  LayerNorm norm_attn, norm_ffn;
  MultiHeadAttention attn;
  FeedForward ffn;

  static EncoderLayer create(Index dim, int heads, Index hidden, Rng& rng);
  Var operator()(const Var& x, std::span<const ad::AttentionSegment> segments) const;
  void collect(NamedParams& out, const std::string& prefix) const;
};

/// Pre-norm transformer decoder layer: masked self-attention, cross-attention, FFN.
struct DecoderLayer {
  LayerNorm norm_self, norm_cross, norm_ffn;
  MultiHeadAttention self_attn, cross_attn;
  FeedForward ffn;

  static DecoderLayer create(Index dim, int heads, Index hidden, Rng& rng);
  Var operator()(const Var& x, const Var& memory, std::span<const ad::AttentionSegment> self_segments,
                 std::span<const ad::AttentionSegment> cross_segments) const;
  void collect(NamedParams& out, const std::string& prefix) const;
};

/// Fixed sinusoidal position table, positions x dim.
Matrix sinusoidal_positions(Index positions, Index dim);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
};

class Adam {
 public:
  Adam(std::vector<Var> params, AdamConfig config);
  void zero_grad();
  void step();
  const std::vector<Var>& params() const { return params_; }

 private:
  std::vector<Var> params_;
  std::vector<Matrix> m_, v_;
  AdamConfig cfg_;
  long steps_ = 0;
};

std::vector<Var> vars_of(const NamedParams& named);

/// Mean of the trailing `window` entries ending at each position.
std::vector<double> smoothed(const std::vector<double>& values, std::size_t window);

}  // namespace nn
}  // namespace fmash
