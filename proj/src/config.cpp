#include "fmash/config.hpp"

#include "fmash/errors.hpp"
#include "fmash/nn.hpp"

#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace fmash {

using json = nlohmann::json;

namespace {

template <class Cfg, class F>
void for_each_field(Cfg& c, F&& f) {
  f("corpus_dir", c.corpus_dir);
  f("out_dir", c.out_dir);
  f("molecular_table", c.molecular_table);
  f("P", c.P);
  f("d", c.d);
  f("d_m", c.d_m);
  f("d_k", c.d_k);
  f("d_enc", c.d_enc);
  f("d_z", c.d_z);
  f("d_text", c.d_text);
  f("d_state", c.d_state);
  f("attn_heads", c.attn_heads);
  f("encoder_layers", c.encoder_layers);
  f("decoder_layers", c.decoder_layers);
  f("tau_s", c.tau_s);
  f("tau_h", c.tau_h);
  f("split_ratio", c.split_ratio);
  f("seed", c.seed);
  f("lr", c.lr);
  f("epochs", c.epochs);
  f("batch", c.batch);
  f("hgre_epochs", c.hgre_epochs);
  f("mlfie_epochs", c.mlfie_epochs);
  f("vae_epochs", c.vae_epochs);
  f("fr_epochs", c.fr_epochs);
  f("max_len", c.max_len);
  f("beam_width", c.beam_width);
  f("hgre", c.hgre);
  f("mlfie", c.mlfie);
  f("gelram", c.gelram);
  f("fr", c.fr);
  f("fr_joint", c.fr_joint);
  f("frequency_prior", c.frequency_prior);
  f("gate", c.gate);
  f("discretization", c.discretization);
  f("averaging", c.averaging);
  f("train_heads", c.train_heads);
}

[[noreturn]] void type_error(const std::string& key, const char* expected) {
  throw UsageError("config key '" + key + "': expected " + expected);
}

void read_value(const std::string& key, const json& v, std::string& dst) {
  if (!v.is_string()) type_error(key, "a string");
  dst = v.get<std::string>();
}
void read_value(const std::string& key, const json& v, int& dst) {
  if (!v.is_number_integer()) type_error(key, "an integer");
  dst = v.get<int>();
}
void read_value(const std::string& key, const json& v, std::uint64_t& dst) {
  if (!v.is_number_unsigned()) type_error(key, "a non-negative integer");
  dst = v.get<std::uint64_t>();
}
void read_value(const std::string& key, const json& v, double& dst) {
  if (!v.is_number()) type_error(key, "a number");
  dst = v.get<double>();
}
void read_value(const std::string& key, const json& v, bool& dst) {
  if (!v.is_boolean()) type_error(key, "true or false");
  dst = v.get<bool>();
}
void read_value(const std::string& key, const json& v, std::array<double, 3>& dst) {
  if (!v.is_array() || v.size() != 3) type_error(key, "an array of 3 numbers");
  for (std::size_t i = 0; i < 3; ++i) {
    if (!v[i].is_number()) type_error(key + "[" + std::to_string(i) + "]", "a number");
    dst[i] = v[i].get<double>();
  }
}
void read_value(const std::string& key, const json& v, std::vector<std::string>& dst) {
  if (!v.is_array()) type_error(key, "an array of strings");
  dst.clear();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_string()) type_error(key + "[" + std::to_string(i) + "]", "a string");
    dst.push_back(v[i].get<std::string>());
  }
}

}  // namespace

RunConfig parse_config(const json& j) {
  if (!j.is_object()) throw UsageError("config must be a JSON object");
  RunConfig cfg;
  std::set<std::string> known;
  for_each_field(cfg, [&](const char* name, auto&) { known.insert(name); });
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw UsageError("unknown config key '" + key + "'");
  }
  for_each_field(cfg, [&](const char* name, auto& field) {
    if (auto it = j.find(name); it != j.end()) read_value(name, *it, field);
  });
  validate(cfg);
  return cfg;
}

RunConfig parse_config_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw UsageError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(j);
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config_text(ss.str());
  } catch (const UsageError& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
}

json config_to_json(const RunConfig& cfg) {
  json j = json::object();
  for_each_field(cfg, [&](const char* name, const auto& field) { j[name] = field; });
  return j;
}

std::string serialize_config(const RunConfig& cfg) { return config_to_json(cfg).dump(2) + "\n"; }

void validate(const RunConfig& c) {
  auto at_least = [](const char* key, long long value, long long min) {
    if (value < min) {
      throw UsageError("config key '" + std::string(key) + "' must be >= " + std::to_string(min) + ", got " +
                       std::to_string(value));
    }
  };
  at_least("P", c.P, 1);
  at_least("d", c.d, 1);
  at_least("d_m", c.d_m, 1);
  at_least("d_k", c.d_k, 1);
  at_least("d_enc", c.d_enc, 1);
  at_least("d_z", c.d_z, 1);
  at_least("d_text", c.d_text, 1);
  at_least("d_state", c.d_state, 1);
  at_least("attn_heads", c.attn_heads, 1);
  at_least("encoder_layers", c.encoder_layers, 0);
  at_least("decoder_layers", c.decoder_layers, 0);
  at_least("tau_s", c.tau_s, 1);
  at_least("tau_h", c.tau_h, 1);
  at_least("epochs", c.epochs, 0);
  at_least("batch", c.batch, 1);
  at_least("hgre_epochs", c.hgre_epochs, 0);
  at_least("mlfie_epochs", c.mlfie_epochs, 0);
  at_least("vae_epochs", c.vae_epochs, 0);
  at_least("fr_epochs", c.fr_epochs, 0);
  at_least("max_len", c.max_len, 1);
  at_least("beam_width", c.beam_width, 1);
  if (!(c.lr > 0.0) || !std::isfinite(c.lr)) throw UsageError("config key 'lr' must be a positive number");
  double total = 0.0;
  for (double r : c.split_ratio) {
    if (!(r > 0.0)) throw UsageError("config key 'split_ratio' entries must be positive");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) throw UsageError("config key 'split_ratio' must sum to 1");
  if (c.d_enc % c.attn_heads != 0) throw UsageError("config key 'd_enc' must be divisible by 'attn_heads'");
  if (64 % c.attn_heads != 0) throw UsageError("config key 'attn_heads' must divide the unified width 64");
  if (c.gate != "vector" && c.gate != "scalar") throw UsageError("config key 'gate' must be 'vector' or 'scalar'");
  if (c.discretization != "zoh" && c.discretization != "euler") {
    throw UsageError("config key 'discretization' must be 'zoh' or 'euler'");
  }
  if (c.averaging != "macro" && c.averaging != "micro") {
    throw UsageError("config key 'averaging' must be 'macro' or 'micro'");
  }
  for (const auto& h : c.train_heads) {
    if (h != "rs" && h != "seq") throw UsageError("config key 'train_heads' entries must be 'rs' or 'seq'");
  }
}

void apply_env_overrides(RunConfig& cfg) {
  const char* env = std::getenv("FMASH_SEED");
  if (env == nullptr || *env == '\0') return;
  char* end = nullptr;
  errno = 0;
  unsigned long long v = std::strtoull(env, &end, 10);
  if (*end != '\0' || errno != 0 || env[0] == '-') throw UsageError(std::string("FMASH_SEED is not a seed: ") + env);
  cfg.seed = v;
}

std::uint64_t config_hash(const RunConfig& cfg) { return fnv1a64(config_to_json(cfg).dump()); }

namespace {

constexpr char kMagic[8] = {'F', 'M', 'A', 'S', 'H', 'C', 'K', '1'};

void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ad::NamedParams& tensors, std::uint64_t cfg_hash,
                     const json& meta) {
  json entries = json::array();
  std::uint64_t offset = 0;
  std::set<std::string> names;
  for (const auto& [name, v] : tensors) {
    if (!names.insert(name).second) throw Error("duplicate tensor name " + name);
    entries.push_back({{"name", name}, {"shape", {v.rows(), v.cols()}}, {"dtype", "f64"}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(v.rows() * v.cols()) * 8;
  }
  json manifest = {{"version", kCheckpointVersion},
                   {"config_hash", cfg_hash},
                   {"tensors", entries},
                   {"meta", meta}};
  std::string text = manifest.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(kMagic, 8);
  write_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, v] : tensors) {
    // Row-major, little-endian doubles.
    for (Index r = 0; r < v.rows(); ++r) {
      for (Index c = 0; c < v.cols(); ++c) {
        double x = v.value()(r, c);
        std::uint64_t bits;
        std::memcpy(&bits, &x, 8);
        write_u64(out, bits);
      }
    }
  }
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

const Matrix& Checkpoint::at(const std::string& name) const {
  for (const auto& [n, m] : tensors) {
    if (n == name) return m;
  }
  throw DataError("checkpoint has no tensor '" + name + "'");
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, m] : tensors) {
    if (n == name) return true;
  }
  return false;
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw DataError(path.string() + ": not a checkpoint file");
  std::uint64_t len = read_u64(in);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError(path.string() + ": truncated manifest");
  Checkpoint ck;
  try {
    ck.manifest = json::parse(text);
    if (ck.manifest.at("version").get<int>() != kCheckpointVersion) {
      throw DataError(path.string() + ": unsupported checkpoint version");
    }
    for (const auto& e : ck.manifest.at("tensors")) {
      if (e.at("dtype").get<std::string>() != "f64") throw DataError(path.string() + ": unsupported dtype");
      auto shape = e.at("shape").get<std::vector<Index>>();
      Matrix m(shape.at(0), shape.at(1));
      for (Index r = 0; r < m.rows(); ++r) {
        for (Index c = 0; c < m.cols(); ++c) {
          std::uint64_t bits = read_u64(in);
          std::memcpy(&m(r, c), &bits, 8);
        }
      }
      ck.tensors.emplace_back(e.at("name").get<std::string>(), std::move(m));
    }
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": bad manifest: " + e.what());
  }
  if (!in) throw DataError(path.string() + ": truncated tensor data");
  return ck;
}

void restore(const Checkpoint& ckpt, ad::NamedParams& into) {
  for (auto& [name, v] : into) {
    const Matrix& m = ckpt.at(name);
    if (m.rows() != v.rows() || m.cols() != v.cols()) {
      throw DataError("checkpoint tensor '" + name + "' has shape " + std::to_string(m.rows()) + "x" +
                      std::to_string(m.cols()) + ", expected " + std::to_string(v.rows()) + "x" +
                      std::to_string(v.cols()));
    }
    v.mutable_value() = m;
  }
}

}  // namespace fmash
