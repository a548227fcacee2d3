#include "fmash/cli.hpp"

#include "fmash/config.hpp"
#include "fmash/errors.hpp"
#include "fmash/evalkit.hpp"
#include "fmash/pipeline.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

namespace fmash::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

fs::path artifact(const RunConfig& cfg, const std::string& name) { return fs::path(cfg.out_dir) / name; }

fs::path require_artifact(const RunConfig& cfg, const std::string& name, const char* producer) {
  fs::path p = artifact(cfg, name);
  if (!fs::exists(p)) {
    throw DataError("missing " + p.string() + "; run `fmash " + producer + "` first");
  }
  return p;
}

RunConfig read_config(const std::string& path) {
  if (path.empty()) throw UsageError("--config is required");
  RunConfig cfg = load_config(path);
  apply_env_overrides(cfg);
  validate(cfg);
  return cfg;
}

data::Corpus read_corpus(const RunConfig& cfg) {
  if (cfg.corpus_dir.empty()) throw UsageError("config key 'corpus_dir' is required");
  return data::load_corpus(cfg.corpus_dir, cfg.P);
}

std::optional<data::MolecularTable> read_table(const RunConfig& cfg, int n_herb) {
  if (cfg.molecular_table.empty()) return std::nullopt;
  return data::load_molecular_table(cfg.molecular_table, n_herb);
}

std::shared_ptr<pipeline::Phase1> restore_phase1(const RunConfig& cfg, const data::Corpus& corpus,
                                                 const data::DatasetSplit& split) {
  auto graph = data::build_graph(split.train, corpus.n_sym(), corpus.n_herb(), cfg.tau_s, cfg.tau_h);
  auto table = read_table(cfg, corpus.n_herb());
  auto p1 = pipeline::build_phase1(cfg, corpus, graph, table ? &*table : nullptr, false);
  Checkpoint ck = read_checkpoint(require_artifact(cfg, "phase1.ckpt", "prepare"));
  ad::NamedParams named;
  p1->collect(named);
  restore(ck, named);
  return p1;
}

std::vector<std::vector<int>> symptom_sets(const std::vector<data::PrescriptionInstance>& rx) {
  std::vector<std::vector<int>> out;
  for (const auto& r : rx) out.push_back(r.symptoms);
  return out;
}

recsys::RsModel load_rs(const RunConfig& cfg, int n_herb) {
  Checkpoint ck = read_checkpoint(require_artifact(cfg, "rs.ckpt", "train-rs"));
  recsys::RsConfig rc = pipeline::rs_config(cfg);
  Rng rng(0);
  recsys::RsModel m{recsys::GelramParams::create(refine::kUnifiedDim, n_herb, rc, rng), ck.at("rs.sym_emb"),
                    ck.at("rs.herb_emb"), {}};
  ad::NamedParams named;
  m.params.collect(named, "rs");
  restore(ck, named);
  return m;
}

seqgen::SeqModel load_seq(const RunConfig& cfg, int n_herb) {
  Checkpoint ck = read_checkpoint(require_artifact(cfg, "seq.ckpt", "train-seq"));
  seqgen::SeqConfig sc = pipeline::seq_config(cfg, {});
  sc.max_positions = ck.manifest.at("meta").at("max_positions").get<int>();
  Rng rng(0);
  seqgen::SeqModel m{seqgen::Seq2SeqParams::create(refine::kUnifiedDim, n_herb, sc, rng), ck.at("seq.sym_emb"),
                     ck.at("seq.herb_emb"), {}};
  ad::NamedParams named;
  m.params.collect(named, "seq");
  restore(ck, named);
  return m;
}

refine::EmbeddingSource head_source(const RunConfig& cfg, const data::Corpus& corpus,
                                    const data::DatasetSplit& split) {
  if (cfg.fr_joint) return pipeline::embedding_source(restore_phase1(cfg, corpus, split));
  auto unified = refine::read_unified(require_artifact(cfg, "unified.txt", "prepare"));
  if (unified.symptoms.rows() != corpus.n_sym() || unified.herbs.rows() != corpus.n_herb()) {
    throw DataError("unified embeddings do not match the corpus vocabularies; rerun `fmash prepare`");
  }
  return refine::table_source(unified, true);
}

std::string format_metric(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << v;
  return os.str();
}

int cmd_synth(const std::string& out_dir, data::SyntheticConfig sc, std::ostream& out) {
  data::Corpus c = data::generate_synthetic(sc);
  data::write_corpus(out_dir, c);
  out << "wrote " << c.n_sym() << " symptoms, " << c.n_herb() << " herbs, " << c.prescriptions.size()
      << " prescriptions to " << out_dir << "\n";
  return 0;
}

int cmd_prepare(const RunConfig& cfg, std::ostream& out) {
  data::Corpus corpus = read_corpus(cfg);
  fs::create_directories(cfg.out_dir);
  {
    std::ofstream f(artifact(cfg, "config.json"), std::ios::binary);
    f << serialize_config(cfg);
  }
  auto split = data::split_dataset(corpus.prescriptions, cfg.split_ratio, cfg.seed);
  data::save_split(artifact(cfg, "split.json"), split);
  auto graph = data::build_graph(split.train, corpus.n_sym(), corpus.n_herb(), cfg.tau_s, cfg.tau_h);
  auto table = read_table(cfg, corpus.n_herb());
  auto p1 = pipeline::build_phase1(cfg, corpus, graph, table ? &*table : nullptr);

  ad::NamedParams named;
  p1->collect(named);
  json meta = {{"stage", "phase1"},
               {"layout", refine::layout_to_json(p1->layout)},
               {"fr_sym_mse", {p1->fr_sym_initial, p1->fr_sym_final}},
               {"fr_herb_mse", {p1->fr_herb_initial, p1->fr_herb_final}}};
  save_checkpoint(artifact(cfg, "phase1.ckpt"), named, config_hash(cfg), meta);
  refine::write_unified(artifact(cfg, "unified.txt"), p1->unified());
  refine::save_layout(artifact(cfg, "layout.json"), p1->layout);
  if (!p1->imputed.empty()) {
    data::write_molecular_table(artifact(cfg, "imputed_molecules.tsv"), cfg.d_m, p1->imputed);
  }

  out << "corpus: " << corpus.n_sym() << " symptoms, " << corpus.n_herb() << " herbs, "
      << corpus.prescriptions.size() << " prescriptions\n";
  out << "split: " << split.train.size() << " / " << split.valid.size() << " / " << split.test.size() << "\n";
  out << "graph: " << graph.edges_ss.size() << " sym-sym, " << graph.edges_hh.size() << " herb-herb, "
      << graph.edges_sh.size() << " sym-herb edges\n";
  if (cfg.fr) {
    out << "feature refinement mse: symptoms " << p1->fr_sym_initial << " -> " << p1->fr_sym_final << ", herbs "
        << p1->fr_herb_initial << " -> " << p1->fr_herb_final << "\n";
  }
  if (cfg.mlfie) out << "imputed molecular vectors: " << p1->imputed.size() << "\n";
  out << "artifacts in " << cfg.out_dir << "\n";
  return 0;
}

int cmd_train_rs(const RunConfig& cfg, std::ostream& out) {
  data::Corpus corpus = read_corpus(cfg);
  auto split = data::load_split(require_artifact(cfg, "split.json", "prepare"), corpus.prescriptions);
  auto source = head_source(cfg, corpus, split);
  recsys::RsConfig rc = pipeline::rs_config(cfg);
  recsys::RsModel model = recsys::train_rs(split.train, corpus.n_herb(), source, rc);

  ad::NamedParams named;
  model.params.collect(named, "rs");
  named.emplace_back("rs.sym_emb", ad::Var::constant(model.sym_emb));
  named.emplace_back("rs.herb_emb", ad::Var::constant(model.herb_emb));
  save_checkpoint(artifact(cfg, "rs.ckpt"), named, config_hash(cfg), {{"stage", "rs"}, {"losses", model.losses}});

  auto results = recsys::score_many(symptom_sets(split.test), model.sym_emb, model.herb_emb, model.params, rc);
  recsys::write_rs_predictions(artifact(cfg, "predictions_rs.tsv"), split.test_idx, results);
  if (!model.losses.empty()) out << "final training loss " << model.losses.back() << "\n";
  out << "wrote " << artifact(cfg, "rs.ckpt").string() << " and " << artifact(cfg, "predictions_rs.tsv").string()
      << "\n";
  return 0;
}

int cmd_train_seq(const RunConfig& cfg, std::ostream& out) {
  data::Corpus corpus = read_corpus(cfg);
  auto split = data::load_split(require_artifact(cfg, "split.json", "prepare"), corpus.prescriptions);
  auto source = head_source(cfg, corpus, split);
  seqgen::SeqConfig sc = pipeline::seq_config(cfg, corpus.prescriptions);
  seqgen::SeqModel model = seqgen::train_seq(split.train, corpus.n_herb(), source, sc);

  ad::NamedParams named;
  model.params.collect(named, "seq");
  named.emplace_back("seq.sym_emb", ad::Var::constant(model.sym_emb));
  named.emplace_back("seq.herb_emb", ad::Var::constant(model.herb_emb));
  save_checkpoint(artifact(cfg, "seq.ckpt"), named, config_hash(cfg),
                  {{"stage", "seq"}, {"max_positions", sc.max_positions}, {"losses", model.losses}});

  std::vector<std::vector<int>> formulas;
  seqgen::GenerateOptions opts{cfg.max_len, cfg.beam_width, false};
  for (const auto& inst : split.test) {
    formulas.push_back(seqgen::generate(inst.symptoms, model.sym_emb, model.herb_emb, model.params, opts));
  }
  seqgen::write_seq_predictions(artifact(cfg, "predictions_seq.tsv"), split.test_idx, formulas);
  if (!model.losses.empty()) out << "final training loss " << model.losses.back() << "\n";
  out << "wrote " << artifact(cfg, "seq.ckpt").string() << " and " << artifact(cfg, "predictions_seq.tsv").string()
      << "\n";
  return 0;
}

int cmd_impute(const RunConfig& cfg, const std::string& out_path, std::ostream& out) {
  if (!cfg.mlfie) throw UsageError("impute-mol needs the molecular stage enabled (config key 'mlfie')");
  data::Corpus corpus = read_corpus(cfg);
  auto split = data::load_split(require_artifact(cfg, "split.json", "prepare"), corpus.prescriptions);
  auto p1 = restore_phase1(cfg, corpus, split);
  auto rows = p1->imputed_rows();
  fs::path dst = out_path.empty() ? artifact(cfg, "imputed_molecules.tsv") : fs::path(out_path);
  data::write_molecular_table(dst, cfg.d_m, rows);
  out << "imputed " << rows.size() << " herbs -> " << dst.string() << "\n";
  return 0;
}

int cmd_recommend(const RunConfig& cfg, const std::string& names, int k, std::ostream& out) {
  data::Corpus corpus = read_corpus(cfg);
  if (k < 1 || k > corpus.n_herb()) {
    throw UsageError("--k must be between 1 and " + std::to_string(corpus.n_herb()));
  }
  auto ids = resolve_names(names, data::symptom_index(corpus));
  recsys::RsModel model = load_rs(cfg, corpus.n_herb());
  auto top = recsys::recommend(ids, k, model, pipeline::rs_config(cfg));
  for (std::size_t i = 0; i < top.size(); ++i) {
    out << (i + 1) << '\t' << corpus.herbs[static_cast<std::size_t>(top[i].herb)].name << '\t'
        << format_metric(top[i].score) << '\n';
  }
  return 0;
}

int cmd_generate(const RunConfig& cfg, const std::string& names, std::optional<int> max_len, std::ostream& out) {
  data::Corpus corpus = read_corpus(cfg);
  auto ids = resolve_names(names, data::symptom_index(corpus));
  seqgen::SeqModel model = load_seq(cfg, corpus.n_herb());
  seqgen::GenerateOptions opts{max_len.value_or(cfg.max_len), cfg.beam_width, false};
  auto formula = seqgen::generate(ids, model.sym_emb, model.herb_emb, model.params, opts);
  for (std::size_t i = 0; i < formula.size(); ++i) {
    if (i) out << ", ";
    out << corpus.herbs[static_cast<std::size_t>(formula[i])].name;
  }
  out << '\n';
  return 0;
}

int cmd_evaluate(const RunConfig& cfg, const std::string& pred, const std::string& ks_text,
                 const std::string& report_path, std::ostream& out) {
  std::vector<int> ks = eval::parse_ks(ks_text);
  if (!fs::exists(pred)) throw DataError("missing predictions file " + pred);
  data::Corpus corpus = read_corpus(cfg);
  auto split = data::load_split(require_artifact(cfg, "split.json", "prepare"), corpus.prescriptions);
  eval::EvalOptions opts;
  opts.averaging = cfg.averaging == "micro" ? eval::Averaging::micro : eval::Averaging::macro;
  opts.model = fs::path(pred).stem().string();
  eval::MetricReport rep = eval::evaluate_run(pred, corpus.prescriptions, split.test_idx, ks, opts);
  fs::path dst = report_path.empty() ? artifact(cfg, "report_" + opts.model + ".json") : fs::path(report_path);
  eval::save_report(dst, rep);

  out << "model " << rep.model << ", " << rep.n_instances << " instances, " << rep.n_groups << " groups\n";
  out << "k";
  if (!rep.precision.empty()) out << "\tP@k\tR@k\tF1@k";
  out << "\tBMP@k\n";
  for (std::size_t i = 0; i < rep.ks.size(); ++i) {
    out << rep.ks[i];
    if (!rep.precision.empty()) {
      out << '\t' << format_metric(rep.precision[i]) << '\t' << format_metric(rep.recall[i]) << '\t'
          << format_metric(rep.f1[i]);
    }
    out << '\t' << format_metric(rep.bmp[i]) << '\n';
  }
  out << "report written to " << dst.string() << "\n";
  return 0;
}

}  // namespace

std::vector<std::string> near_matches(const std::string& name, const std::map<std::string, int>& vocab,
                                      std::size_t limit) {
  std::vector<std::pair<std::size_t, std::string>> scored;
  for (const auto& [candidate, id] : vocab) {
    std::size_t d = edit_distance(name, candidate);
    if (candidate.find(name) != std::string::npos || name.find(candidate) != std::string::npos) d = std::min<std::size_t>(d, 1);
    scored.emplace_back(d, candidate);
  }
  std::sort(scored.begin(), scored.end());
  std::vector<std::string> out;
  const std::size_t cutoff = std::max<std::size_t>(2, name.size() / 2);
  for (const auto& [d, candidate] : scored) {
    if (out.size() >= limit || d > cutoff) break;
    out.push_back(candidate);
  }
  return out;
}

std::vector<int> resolve_names(const std::string& list, const std::map<std::string, int>& vocab) {
  std::vector<int> ids;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::string name = trim(item);
    if (name.empty()) continue;
    auto it = vocab.find(name);
    if (it == vocab.end()) {
      std::string msg = "unknown symptom '" + name + "'";
      auto near = near_matches(name, vocab);
      if (!near.empty()) {
        msg += "; did you mean: ";
        for (std::size_t i = 0; i < near.size(); ++i) msg += (i ? ", " : "") + near[i];
      }
      throw UsageError(msg);
    }
    ids.push_back(it->second);
  }
  if (ids.empty()) throw UsageError("--symptoms is empty");
  return ids;
}

int execute_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"FMASH symptom-to-herb formula recommendation", "fmash"};
  app.require_subcommand(1);
  std::string config_path;

  auto* synth = app.add_subcommand("synth", "Write a synthetic corpus with planted syndromes");
  std::string synth_out;
  data::SyntheticConfig sc;
  synth->add_option("--out", synth_out, "Output corpus directory")->required();
  synth->add_option("--n-sym", sc.n_sym);
  synth->add_option("--n-herb", sc.n_herb);
  synth->add_option("--syndromes", sc.n_syndromes);
  synth->add_option("--prescriptions", sc.n_prescriptions);
  synth->add_option("--seed", sc.seed);
  synth->add_option("--P", sc.property_dim, "Property vector length");
  synth->add_option("--missing", sc.missing_molecule_fraction, "Fraction of herbs without molecules");
  synth->add_option("--ambiguous", sc.n_ambiguous_sets, "Symptom sets mapped to two disjoint formulas");

  auto add_config = [&](CLI::App* sub) { sub->add_option("--config", config_path, "Run config (JSON)")->required(); };
  auto* prepare = app.add_subcommand("prepare", "Load corpus, split, build graph and Phase-1 embeddings");
  add_config(prepare);
  auto* train_rs = app.add_subcommand("train-rs", "Train the ranked recommendation head");
  add_config(train_rs);
  auto* train_seq = app.add_subcommand("train-seq", "Train the sequence generation head");
  add_config(train_seq);
  auto* impute = app.add_subcommand("impute-mol", "Export VAE-completed molecular vectors");
  add_config(impute);
  std::string impute_out;
  impute->add_option("--out", impute_out, "Output table (default <out_dir>/imputed_molecules.tsv)");

  std::string symptoms;
  int k = 10;
  auto* recommend = app.add_subcommand("recommend", "Top-k herbs for a symptom list");
  add_config(recommend);
  recommend->add_option("--symptoms", symptoms, "Comma-separated symptom names")->required();
  recommend->add_option("--k", k, "Number of herbs");

  std::optional<int> max_len;
  auto* generate = app.add_subcommand("generate", "Generate a formula for a symptom list");
  add_config(generate);
  generate->add_option("--symptoms", symptoms, "Comma-separated symptom names")->required();
  generate->add_option("--max-len", max_len, "Maximum formula length (default from config)");

  std::string pred, ks = "5,10,20", report_path;
  auto* evaluate = app.add_subcommand("evaluate", "Score a prediction file on the test split");
  add_config(evaluate);
  evaluate->add_option("--pred", pred, "Prediction file")->required();
  evaluate->add_option("--k", ks, "Comma-separated cutoffs");
  evaluate->add_option("--out", report_path, "Report path (default <out_dir>/report_<pred>.json)");

  std::vector<std::string> rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (synth->parsed()) return cmd_synth(synth_out, sc, out);
    RunConfig cfg = read_config(config_path);
    if (prepare->parsed()) return cmd_prepare(cfg, out);
    if (train_rs->parsed()) return cmd_train_rs(cfg, out);
    if (train_seq->parsed()) return cmd_train_seq(cfg, out);
    if (impute->parsed()) return cmd_impute(cfg, impute_out, out);
    if (recommend->parsed()) return cmd_recommend(cfg, symptoms, k, out);
    if (generate->parsed()) return cmd_generate(cfg, symptoms, max_len, out);
    if (evaluate->parsed()) return cmd_evaluate(cfg, pred, ks, report_path, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace fmash::cli
