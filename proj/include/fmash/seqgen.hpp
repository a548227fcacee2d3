/**
 * Autoregressive formula generation.
 *
 * Symptoms (ascending id order, sinusoidal positions) go through a transformer
 * encoder. On the target side, herb tokens start from the unified herb
 * embeddings, pass one cross-attention integration layer and two decoder
 * layers, and a projection gives logits over herbs plus BOS/EOS/PAD.
 */
#pragma once

#include "fmash/autodiff.hpp"
#include "fmash/dataio.hpp"
#include "fmash/nn.hpp"
#include "fmash/refine.hpp"

#include <filesystem>
#include <vector>

namespace fmash::seqgen {

using ad::Var;

/// Herb ids map to themselves; BOS, EOS, PAD follow.
struct TokenVocab {
  int n_herb = 0;

  int bos() const { return n_herb; }
  int eos() const { return n_herb + 1; }
  int pad() const { return n_herb + 2; }
  int size() const { return n_herb + 3; }
  bool is_herb(int token) const { return token >= 0 && token < n_herb; }
};

struct SeqConfig {
  int encoder_layers = 2;
  int decoder_layers = 2;
  int heads = 4;
  Index ffn_hidden = 128;
  int max_len = 20;
  int beam_width = 1;
  int max_positions = 64;
  int epochs = 300;
  int batch = 32;
  double lr = 2e-3;
  double clip_norm = 5.0;
  std::uint64_t seed = 42;
};

/// The target-side integration block: tokens cross-attend to the symptom memory.
struct IntegrationLayer {
  nn::LayerNorm norm;
  nn::MultiHeadAttention cross;

  void collect(ad::NamedParams& out, const std::string& prefix) const;
};

struct Seq2SeqParams {
  TokenVocab vocab;
  std::vector<nn::EncoderLayer> encoder;
  nn::LayerNorm encoder_norm;
  Var special_tokens;  // 3 x d: BOS, EOS, PAD rows of the token table
  IntegrationLayer integration;
  std::vector<nn::DecoderLayer> decoder;
  nn::LayerNorm decoder_norm;
  nn::Linear out_proj;  // d -> vocab
  Matrix positions;     // fixed sinusoidal table

  static Seq2SeqParams create(Index d, int n_herb, const SeqConfig& cfg, Rng& rng);
  Index dim() const { return special_tokens.cols(); }
  void collect(ad::NamedParams& out, const std::string& prefix) const;
};

/// Token table: herb rows from `herb_emb`, then the special rows.
Var token_table(const Var& herb_emb, const Seq2SeqParams& params);

/// Memory rows for a batch of canonical symptom sets, stacked; offsets[i] is
/// where set i starts.
Var encode_batch(const std::vector<std::vector<int>>& symptom_sets, const Var& sym_emb,
                 const Seq2SeqParams& params, std::vector<Index>& offsets);

/// One memory row per symptom of one set (deduplicated, ascending).
Matrix encode_symptoms(const std::vector<int>& symptom_ids, const Matrix& sym_emb, const Seq2SeqParams& params);

/// Decoder logits for token prefixes (each starting with BOS), stacked.
Var decode_batch(const std::vector<std::vector<int>>& inputs, const Var& memory,
                 const std::vector<Index>& mem_offsets, const std::vector<Index>& mem_lengths,
                 const Var& tokens, const Seq2SeqParams& params);

struct SeqExample {
  std::vector<int> symptoms;
  std::vector<int> herbs;
};

/// Teacher-forced cross-entropy: input BOS + herbs, target herbs + EOS. Each
/// sequence is right-padded with PAD to at least `pad_to` tokens; PAD targets
/// are ignored.
Var seq_loss(const std::vector<const SeqExample*>& batch, const Var& sym_emb, const Var& herb_emb,
             const Seq2SeqParams& params, int pad_to = 0);

/// Logits (length x vocab) for a single teacher-forced example.
Matrix teacher_forced_logits(const std::vector<int>& symptoms, const std::vector<int>& input_tokens,
                             const Matrix& sym_emb, const Matrix& herb_emb, const Seq2SeqParams& params);

struct GenerateOptions {
  int max_len = 20;
  int beam_width = 1;
  bool suppress_eos = false;
};

/// Greedy (beam_width 1) or beam decoding from BOS. BOS, PAD and herbs already
/// emitted are masked; stops at EOS or max_len. Output holds herb ids only.
std::vector<int> generate(const std::vector<int>& symptom_ids, const Matrix& sym_emb, const Matrix& herb_emb,
                          const Seq2SeqParams& params, const GenerateOptions& opts);

struct SeqModel {
  Seq2SeqParams params;
  Matrix sym_emb;
  Matrix herb_emb;
  std::vector<double> losses;
};

/// Throws DataError on an empty split.
SeqModel train_seq(const std::vector<data::PrescriptionInstance>& train, int n_herb,
                   const refine::EmbeddingSource& source, const SeqConfig& cfg);

/// `instance_id<TAB>h,h,...` in generation order.
void write_seq_predictions(const std::filesystem::path& path, const std::vector<std::size_t>& instance_ids,
                           const std::vector<std::vector<int>>& formulas);

}  // namespace fmash::seqgen
