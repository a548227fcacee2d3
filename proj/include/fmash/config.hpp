/**
 * Run configuration and the tensor checkpoint format.
 *
 * Configs are flat JSON objects; every key is optional except that unknown
 * keys are rejected. Checkpoints are one file: the 8-byte magic "FMASHCK1", a
 * little-endian u64 manifest length, the JSON manifest (version, config hash,
 * tensor names / shapes / dtype / offsets, free-form metadata), then the raw
 * float64 tensor data.
 */
#pragma once

#include "fmash/autodiff.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace fmash {

struct RunConfig {
  std::string corpus_dir;
  std::string out_dir = "fmash_out";
  std::string molecular_table;  // optional precomputed molecule embeddings

  // Dimensions
  int P = 23;
  int d = 64;       // graph embedding width
  int d_m = 32;     // molecule embedding width
  int d_k = 16;     // attention key width
  int d_enc = 64;   // recommendation encoder width
  int d_z = 16;     // VAE latent width
  int d_text = 32;  // learned symptom text table width
  int d_state = 16;
  int attn_heads = 4;
  int encoder_layers = 2;
  int decoder_layers = 2;

  // Graph and split
  int tau_s = 2;
  int tau_h = 2;
  std::array<double, 3> split_ratio{0.7, 0.1, 0.2};

  // Training
  std::uint64_t seed = 42;
  double lr = 2e-3;
  int epochs = 200;
  int batch = 32;
  int hgre_epochs = 100;
  int mlfie_epochs = 100;
  int vae_epochs = 300;
  int fr_epochs = 200;
  int max_len = 20;
  int beam_width = 1;

  // Stage switches
  bool hgre = true;
  bool mlfie = true;
  bool gelram = true;
  bool fr = true;
  bool fr_joint = false;  // train FR together with the head instead of before it
  bool frequency_prior = false;
  std::string gate = "vector";           // vector | scalar
  std::string discretization = "zoh";    // zoh | euler
  std::string averaging = "macro";       // macro | micro
  std::vector<std::string> train_heads{"rs", "seq"};

  bool operator==(const RunConfig&) const = default;
};

/// Throws UsageError naming the offending key.
RunConfig parse_config(const nlohmann::json& j);
RunConfig parse_config_text(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
nlohmann::json config_to_json(const RunConfig& cfg);
std::string serialize_config(const RunConfig& cfg);
void validate(const RunConfig& cfg);
/// Applies FMASH_SEED when it is set.
void apply_env_overrides(RunConfig& cfg);
std::uint64_t config_hash(const RunConfig& cfg);

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const ad::NamedParams& tensors, std::uint64_t cfg_hash,
                     const nlohmann::json& meta = nlohmann::json::object());

struct Checkpoint {
  nlohmann::json manifest;
  std::vector<std::pair<std::string, Matrix>> tensors;

  const Matrix& at(const std::string& name) const;
  bool has(const std::string& name) const;
};

Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Copies every tensor of `into` from the checkpoint, checking shapes.
void restore(const Checkpoint& ckpt, ad::NamedParams& into);

}  // namespace fmash
