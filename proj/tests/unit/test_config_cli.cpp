#include "fmash/cli.hpp"
#include "fmash/config.hpp"
#include "fmash/errors.hpp"
#include "fmash/evalkit.hpp"
#include "fmash/nn.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace fmash;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / "fmash_cli_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Run {
  int code;
  std::string out, err;
};

Run fmash_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "fmash");
  std::ostringstream out, err;
  int code = cli::execute_command(args, out, err);
  return {code, out.str(), err.str()};
}

// Small, fast run over a synthetic corpus in `dir`.
fs::path write_run_config(const fs::path& dir, const fs::path& corpus, nlohmann::json extra = {}) {
  nlohmann::json j{{"corpus_dir", corpus.string()},
                   {"out_dir", (dir / "out").string()},
                   {"d", 16},
                   {"d_m", 8},
                   {"d_k", 8},
                   {"d_enc", 16},
                   {"d_z", 4},
                   {"d_text", 8},
                   {"d_state", 4},
                   {"attn_heads", 2},
                   {"encoder_layers", 1},
                   {"decoder_layers", 1},
                   {"epochs", 3},
                   {"hgre_epochs", 3},
                   {"mlfie_epochs", 3},
                   {"vae_epochs", 3},
                   {"fr_epochs", 3}};
  for (auto& [k, v] : extra.items()) j[k] = v;
  auto path = dir / "config.json";
  std::ofstream(path) << j.dump(2);
  return path;
}

fs::path synth_corpus(const fs::path& dir) {
  auto corpus = dir / "corpus";
  EXPECT_EQ(fmash_cli({"synth", "--out", corpus.string(), "--prescriptions", "60"}).code, 0);
  return corpus;
}

}  // namespace

TEST(Config, DefaultsFromMinimalFile) {
  auto cfg = parse_config_text(R"({"corpus_dir": "c"})");
  EXPECT_EQ(cfg.d, 64);
  EXPECT_EQ(cfg.seed, 42u);
  EXPECT_EQ(cfg.corpus_dir, "c");
  EXPECT_EQ(parse_config_text("{}"), RunConfig{});
}

TEST(Config, ValidationNamesTheKey) {
  try {
    parse_config_text(R"({"d": -1})");
    FAIL() << "accepted d = -1";
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("'d'"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_config_text(R"({"bogus": 1})"), UsageError);
  EXPECT_THROW(parse_config_text(R"({"d": "wide"})"), UsageError);
  EXPECT_THROW(parse_config_text(R"({"gate": "fancy"})"), UsageError);
  EXPECT_THROW(parse_config_text(R"({"split_ratio": [0.5, 0.5, 0.5]})"), UsageError);
  EXPECT_THROW(parse_config_text("not json"), UsageError);
}

TEST(Config, RoundTrip) {
  RunConfig cfg;
  cfg.corpus_dir = "x";
  cfg.d = 12;
  cfg.fr = false;
  cfg.train_heads = {"seq"};
  cfg.split_ratio = {0.6, 0.2, 0.2};
  EXPECT_EQ(parse_config_text(serialize_config(cfg)), cfg);
  EXPECT_EQ(serialize_config(parse_config_text(serialize_config(cfg))), serialize_config(cfg));
  EXPECT_NE(config_hash(cfg), config_hash(RunConfig{}));
}

TEST(Config, SeedEnvironmentOverride) {
  RunConfig cfg;
  ::setenv("FMASH_SEED", "7", 1);
  apply_env_overrides(cfg);
  EXPECT_EQ(cfg.seed, 7u);
  ::setenv("FMASH_SEED", "seven", 1);
  EXPECT_THROW(apply_env_overrides(cfg), UsageError);
  ::unsetenv("FMASH_SEED");
  cfg.seed = 3;
  apply_env_overrides(cfg);
  EXPECT_EQ(cfg.seed, 3u);
}

TEST(Checkpoint, RoundTripAndShapeCheck) {
  auto dir = fresh_dir("ckpt");
  Rng rng(1);
  ad::Var a = ad::Var::parameter(random_normal(3, 4, 1.0, rng)), b = ad::Var::parameter(random_normal(1, 2, 1.0, rng));
  save_checkpoint(dir / "x.ckpt", {{"a", a}, {"b", b}}, 99, {{"note", "hi"}});
  auto ck = read_checkpoint(dir / "x.ckpt");
  EXPECT_EQ(ck.manifest.at("version"), kCheckpointVersion);
  EXPECT_EQ(ck.manifest.at("meta").at("note"), "hi");
  EXPECT_TRUE((ck.at("a").array() == a.value().array()).all());
  ad::Var a2 = ad::Var::parameter(Matrix::Zero(3, 4)), wrong = ad::Var::parameter(Matrix::Zero(2, 2));
  ad::NamedParams into{{"a", a2}};
  restore(ck, into);
  EXPECT_TRUE((a2.value().array() == a.value().array()).all());
  ad::NamedParams bad{{"b", wrong}};
  EXPECT_THROW(restore(ck, bad), DataError);
  ad::NamedParams missing{{"c", wrong}};
  EXPECT_THROW(restore(ck, missing), DataError);
  std::ofstream(dir / "junk.ckpt") << "garbage";
  EXPECT_THROW(read_checkpoint(dir / "junk.ckpt"), DataError);
}

TEST(Cli, NearMatches) {
  std::map<std::string, int> vocab{{"headache", 0}, {"head sweat", 1}, {"fever", 2}};
  EXPECT_EQ(cli::resolve_names(" fever , headache", vocab), (std::vector<int>{2, 0}));
  try {
    cli::resolve_names("headach", vocab);
    FAIL();
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("headache"), std::string::npos);
  }
  EXPECT_EQ(cli::near_matches("fevr", vocab, 1), (std::vector<std::string>{"fever"}));
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(fmash_cli({}).code, 1);
  EXPECT_EQ(fmash_cli({"frobnicate"}).code, 1);
  EXPECT_EQ(fmash_cli({"--help"}).code, 0);
  EXPECT_EQ(fmash_cli({"evaluate", "--config", "x.json"}).code, 1);
  EXPECT_EQ(fmash_cli({"prepare", "--config", "/nonexistent/config.json"}).code, 2);
}

TEST(Cli, EndToEndSmoke) {
  auto dir = fresh_dir("e2e");
  auto corpus = synth_corpus(dir);
  auto config = write_run_config(dir, corpus).string();

  // Nothing has been prepared yet.
  auto early = fmash_cli({"train-rs", "--config", config});
  EXPECT_EQ(early.code, 2);
  EXPECT_NE(early.err.find("fmash prepare"), std::string::npos) << early.err;

  ASSERT_EQ(fmash_cli({"prepare", "--config", config}).code, 0);
  EXPECT_EQ(fmash_cli({"evaluate", "--config", config, "--pred", (dir / "out" / "predictions_rs.tsv").string()}).code,
            2);
  ASSERT_EQ(fmash_cli({"train-rs", "--config", config}).code, 0);
  ASSERT_EQ(fmash_cli({"train-seq", "--config", config}).code, 0);
  ASSERT_EQ(fmash_cli({"impute-mol", "--config", config}).code, 0);

  auto ev = fmash_cli({"evaluate", "--config", config, "--pred", (dir / "out" / "predictions_rs.tsv").string(), "--k",
                       "5,10,20"});
  ASSERT_EQ(ev.code, 0) << ev.err;
  auto report = eval::load_report(dir / "out" / "report_predictions_rs.json");
  EXPECT_EQ(report.ks, (std::vector<int>{5, 10, 20}));
  EXPECT_EQ(report.precision.size(), 3u);
  EXPECT_GT(report.n_instances, 0u);

  ASSERT_EQ(fmash_cli({"evaluate", "--config", config, "--pred", (dir / "out" / "predictions_seq.tsv").string(),
                       "--out", (dir / "seq.json").string()})
                .code,
            0);
  EXPECT_TRUE(eval::load_report(dir / "seq.json").precision.empty());

  auto rec = fmash_cli({"recommend", "--config", config, "--symptoms", "sym_000,sym_001", "--k", "4"});
  EXPECT_EQ(rec.code, 0) << rec.err;
  EXPECT_EQ(fmash_cli({"recommend", "--config", config, "--symptoms", "sym_000", "--k", "0"}).code, 1);
  auto typo = fmash_cli({"recommend", "--config", config, "--symptoms", "sym_0000", "--k", "3"});
  EXPECT_EQ(typo.code, 1);
  EXPECT_NE(typo.err.find("did you mean"), std::string::npos);
  EXPECT_EQ(fmash_cli({"generate", "--config", config, "--symptoms", "sym_002"}).code, 0);
  EXPECT_EQ(fmash_cli({"generate", "--config", config, "--symptoms", "sym_002", "--max-len", "0"}).code, 1);
}

TEST(Cli, RepeatedRunsAreByteIdentical) {
  auto dir = fresh_dir("determinism");
  auto corpus = synth_corpus(dir);
  auto config = write_run_config(dir, corpus).string();
  std::vector<std::map<std::string, std::string>> runs;
  for (int run = 0; run < 2; ++run) {
    fs::remove_all(dir / "out");
    ASSERT_EQ(fmash_cli({"prepare", "--config", config}).code, 0);
    ASSERT_EQ(fmash_cli({"train-rs", "--config", config}).code, 0);
    ASSERT_EQ(fmash_cli({"evaluate", "--config", config, "--pred", (dir / "out" / "predictions_rs.tsv").string()})
                  .code,
              0);
    std::map<std::string, std::string> files;
    for (const char* f : {"phase1.ckpt", "rs.ckpt", "unified.txt", "predictions_rs.tsv", "report_predictions_rs.json"}) {
      files[f] = slurp(dir / "out" / f);
      EXPECT_FALSE(files[f].empty()) << f;
    }
    runs.push_back(files);
  }
  for (const auto& [name, bytes] : runs[0]) EXPECT_TRUE(bytes == runs[1].at(name)) << name;
}

TEST(Cli, DisablingAStageKeepsOtherInitializations) {
  auto dir = fresh_dir("ablation");
  auto corpus = synth_corpus(dir);
  nlohmann::json frozen{{"hgre_epochs", 0}, {"mlfie_epochs", 0}, {"vae_epochs", 0}, {"fr_epochs", 0}, {"epochs", 0}};
  std::map<std::string, Checkpoint> ckpts;
  for (const char* variant : {"all", "no_hgre", "no_mlfie"}) {
    auto sub = dir / variant;
    fs::create_directories(sub);
    auto extra = frozen;
    if (std::string(variant) == "no_hgre") extra["hgre"] = false;
    if (std::string(variant) == "no_mlfie") extra["mlfie"] = false;
    auto config = write_run_config(sub, corpus, extra).string();
    ASSERT_EQ(fmash_cli({"prepare", "--config", config}).code, 0);
    ckpts[variant] = read_checkpoint(sub / "out" / "phase1.ckpt");
  }
  // Stages downstream of the dropped one may change shape and are skipped.
  auto shared = [&](const Checkpoint& a, const Checkpoint& b, const std::vector<std::string>& skip) {
    int compared = 0;
    for (const auto& [name, m] : a.tensors) {
      bool skipped = false;
      for (const auto& prefix : skip) skipped = skipped || name.rfind(prefix, 0) == 0;
      if (skipped) continue;
      EXPECT_TRUE(b.has(name)) << name;
      if (!b.has(name)) continue;
      EXPECT_TRUE((b.at(name).array() == m.array()).all()) << name << " changed";
      ++compared;
    }
    return compared;
  };
  EXPECT_GT(shared(ckpts["all"], ckpts["no_hgre"], {"phase1.hgre."}), 5);
  EXPECT_GT(shared(ckpts["all"], ckpts["no_mlfie"], {"phase1.mlfie.", "phase1.fr_herb."}), 5);
  EXPECT_FALSE(ckpts["no_hgre"].has("phase1.hgre.gcn_global.weight"));
  EXPECT_FALSE(ckpts["no_mlfie"].has("phase1.mlfie.attention.w_q"));
}
