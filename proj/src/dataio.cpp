#include "fmash/dataio.hpp"

#include "fmash/errors.hpp"
#include "fmash/nn.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace fmash::data {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::ifstream open_input(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return in;
}

std::string where(const fs::path& path, std::size_t line) {
  return path.filename().string() + ":" + std::to_string(line);
}

template <typename Fn>
void for_each_record(const fs::path& path, Fn&& fn) {
  auto in = open_input(path);
  std::string text;
  std::size_t line_no = 0;
  while (std::getline(in, text)) {
    ++line_no;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(text);
    } catch (const json::parse_error& e) {
      throw DataError(where(path, line_no) + ": malformed record: " + e.what());
    }
    try {
      fn(rec, line_no);
    } catch (const json::exception& e) {
      throw DataError(where(path, line_no) + ": schema error: " + e.what());
    }
  }
}

Vector to_vector(const json& arr) {
  auto values = arr.get<std::vector<double>>();
  return Eigen::Map<const Vector>(values.data(), static_cast<Index>(values.size()));
}

json to_json(const Vector& v) { return json(std::vector<double>(v.data(), v.data() + v.size())); }

template <typename Rec>
void check_dense(const std::vector<Rec>& recs, const fs::path& path) {
  std::set<std::string> names;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    if (recs[i].id != static_cast<int>(i)) {
      throw DataError(path.filename().string() + ": ids must be dense 0.." +
                      std::to_string(recs.size() - 1) + ", missing or repeated id near " +
                      std::to_string(i));
    }
    if (!names.insert(recs[i].name).second) {
      throw DataError(path.filename().string() + ": duplicate name '" + recs[i].name + "'");
    }
  }
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

EdgeList HeteroGraph::global_edges() const {
  EdgeList out;
  out.reserve(edges_ss.size() + edges_hh.size() + edges_sh.size());
  for (auto [u, v] : edges_ss) out.emplace_back(u, v);
  for (auto [u, v] : edges_hh) out.emplace_back(n_sym + u, n_sym + v);
  for (auto [s, h] : edges_sh) out.emplace_back(s, n_sym + h);
  return out;
}

Corpus load_corpus(const fs::path& dir, int property_dim) {
  if (property_dim < 1) throw UsageError("property dimension P must be >= 1");
  Corpus corpus;
  corpus.property_dim = property_dim;

  const fs::path sym_path = dir / "symptoms.jsonl";
  for_each_record(sym_path, [&](const json& rec, std::size_t) {
    SymptomRecord s;
    s.id = rec.at("id").get<int>();
    s.name = rec.at("name").get<std::string>();
    if (rec.contains("text_embedding") && !rec["text_embedding"].is_null()) {
      s.text_embedding = to_vector(rec["text_embedding"]);
    }
    corpus.symptoms.push_back(std::move(s));
  });
  std::sort(corpus.symptoms.begin(), corpus.symptoms.end(),
            [](const auto& a, const auto& b) { return a.id < b.id; });
  check_dense(corpus.symptoms, sym_path);
  std::optional<Index> text_dim;
  for (const auto& s : corpus.symptoms) {
    if (!s.text_embedding) continue;
    if (text_dim && *text_dim != s.text_embedding->size()) {
      throw DataError(sym_path.filename().string() + ": symptom '" + s.name +
                      "' has a text embedding of a different length");
    }
    text_dim = s.text_embedding->size();
  }

  const fs::path herb_path = dir / "herbs.jsonl";
  for_each_record(herb_path, [&](const json& rec, std::size_t line) {
    HerbRecord h;
    h.id = rec.at("id").get<int>();
    h.name = rec.at("name").get<std::string>();
    h.properties = to_vector(rec.at("properties"));
    if (h.properties.size() != property_dim) {
      throw DataError(where(herb_path, line) + ": herb '" + h.name + "' has " +
                      std::to_string(h.properties.size()) + " properties, expected P=" +
                      std::to_string(property_dim));
    }
    if (rec.contains("molecules")) h.molecules = rec["molecules"].get<std::vector<std::string>>();
    if (rec.contains("mol_embeddings") && !rec["mol_embeddings"].is_null()) {
      std::vector<Vector> embs;
      for (const auto& e : rec["mol_embeddings"]) embs.push_back(to_vector(e));
      if (embs.size() != h.molecules.size()) {
        throw DataError(where(herb_path, line) + ": herb '" + h.name +
                        "' mol_embeddings do not align with molecules");
      }
      h.mol_embeddings = std::move(embs);
    }
    corpus.herbs.push_back(std::move(h));
  });
  std::sort(corpus.herbs.begin(), corpus.herbs.end(),
            [](const auto& a, const auto& b) { return a.id < b.id; });
  check_dense(corpus.herbs, herb_path);

  const fs::path rx_path = dir / "prescriptions.jsonl";
  const int n_sym = corpus.n_sym();
  const int n_herb = corpus.n_herb();
  for_each_record(rx_path, [&](const json& rec, std::size_t line) {
    PrescriptionInstance rx;
    auto syms = rec.at("symptoms").get<std::vector<int>>();
    auto herbs = rec.at("herbs").get<std::vector<int>>();
    for (int s : syms) {
      if (s < 0 || s >= n_sym) {
        throw DataError(where(rx_path, line) + ": unknown symptom id " + std::to_string(s));
      }
    }
    std::set<int> seen;
    for (int h : herbs) {
      if (h < 0 || h >= n_herb) {
        throw DataError(where(rx_path, line) + ": unknown herb id " + std::to_string(h));
      }
      if (seen.insert(h).second) rx.herbs.push_back(h);
    }
    std::set<int> sym_set(syms.begin(), syms.end());
    rx.symptoms.assign(sym_set.begin(), sym_set.end());
    if (rx.symptoms.empty() || rx.herbs.empty()) {
      throw DataError(where(rx_path, line) + ": prescription needs at least one symptom and herb");
    }
    corpus.prescriptions.push_back(std::move(rx));
  });
  return corpus;
}

void write_corpus(const fs::path& dir, const Corpus& corpus) {
  fs::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw DataError("cannot write " + (dir / name).string());
    return out;
  };
  {
    auto out = open("symptoms.jsonl");
    for (const auto& s : corpus.symptoms) {
      json rec = {{"id", s.id}, {"name", s.name}};
      if (s.text_embedding) rec["text_embedding"] = to_json(*s.text_embedding);
      out << rec.dump() << '\n';
    }
  }
  {
    auto out = open("herbs.jsonl");
    for (const auto& h : corpus.herbs) {
      json rec = {{"id", h.id}, {"name", h.name}, {"properties", to_json(h.properties)},
                  {"molecules", h.molecules}};
      if (h.mol_embeddings) {
        json arr = json::array();
        for (const auto& e : *h.mol_embeddings) arr.push_back(to_json(e));
        rec["mol_embeddings"] = arr;
      }
      out << rec.dump() << '\n';
    }
  }
  {
    auto out = open("prescriptions.jsonl");
    for (const auto& rx : corpus.prescriptions) {
      json rec = {{"symptoms", rx.symptoms}, {"herbs", rx.herbs}};
      out << rec.dump() << '\n';
    }
  }
}

HeteroGraph build_graph(const std::vector<PrescriptionInstance>& prescriptions, int n_sym,
                        int n_herb, int tau_s, int tau_h) {
  if (tau_s < 1 || tau_h < 1) throw UsageError("graph thresholds tau_s and tau_h must be >= 1");
  if (n_sym < 0 || n_herb < 0) throw UsageError("negative vocabulary size");
  const auto ns = static_cast<std::size_t>(n_sym);
  const auto nh = static_cast<std::size_t>(n_herb);
  std::vector<int> ss(ns * ns, 0), hh(nh * nh, 0);
  std::vector<char> sh(ns * nh, 0);

  for (const auto& rx : prescriptions) {
    std::set<int> syms(rx.symptoms.begin(), rx.symptoms.end());
    std::set<int> herbs(rx.herbs.begin(), rx.herbs.end());
    std::vector<int> s(syms.begin(), syms.end()), h(herbs.begin(), herbs.end());
    for (int x : s) {
      if (x < 0 || x >= n_sym) throw DataError("build_graph: symptom id out of range");
    }
    for (int x : h) {
      if (x < 0 || x >= n_herb) throw DataError("build_graph: herb id out of range");
    }
    for (std::size_t i = 0; i < s.size(); ++i) {
      for (std::size_t j = i + 1; j < s.size(); ++j) ++ss[static_cast<std::size_t>(s[i]) * ns + s[j]];
    }
    for (std::size_t i = 0; i < h.size(); ++i) {
      for (std::size_t j = i + 1; j < h.size(); ++j) ++hh[static_cast<std::size_t>(h[i]) * nh + h[j]];
    }
    for (int a : s) {
      for (int b : h) sh[static_cast<std::size_t>(a) * nh + b] = 1;
    }
  }

  HeteroGraph g;
  g.n_sym = n_sym;
  g.n_herb = n_herb;
  g.degrees.assign(ns + nh, 0);
  g.sub_degrees_ss.assign(ns, 0);
  g.sub_degrees_hh.assign(nh, 0);
  for (int u = 0; u < n_sym; ++u) {
    for (int v = u + 1; v < n_sym; ++v) {
      if (ss[static_cast<std::size_t>(u) * ns + v] >= tau_s) {
        g.edges_ss.emplace_back(u, v);
        ++g.sub_degrees_ss[u];
        ++g.sub_degrees_ss[v];
      }
    }
  }
  for (int u = 0; u < n_herb; ++u) {
    for (int v = u + 1; v < n_herb; ++v) {
      if (hh[static_cast<std::size_t>(u) * nh + v] >= tau_h) {
        g.edges_hh.emplace_back(u, v);
        ++g.sub_degrees_hh[u];
        ++g.sub_degrees_hh[v];
      }
    }
  }
  for (int s = 0; s < n_sym; ++s) {
    for (int h = 0; h < n_herb; ++h) {
      if (sh[static_cast<std::size_t>(s) * nh + h]) g.edges_sh.emplace_back(s, h);
    }
  }
  for (auto [u, v] : g.global_edges()) {
    ++g.degrees[u];
    ++g.degrees[v];
  }
  return g;
}

std::array<std::size_t, 3> split_sizes(std::size_t n, std::array<double, 3> ratio) {
  double total = ratio[0] + ratio[1] + ratio[2];
  if (ratio[0] <= 0 || ratio[1] <= 0 || ratio[2] <= 0 || std::abs(total - 1.0) > 1e-9) {
    throw UsageError("split ratio must be positive and sum to 1");
  }
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> rem{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    double share = static_cast<double>(n) * ratio[i];
    // Tolerate representation error such as 10 * 0.7 = 6.9999999.
    double fl = std::floor(share + 1e-9);
    sizes[i] = static_cast<std::size_t>(fl);
    rem[i] = std::max(0.0, share - fl);
    assigned += sizes[i];
  }
  while (assigned < n) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < 3; ++i) {
      if (rem[i] >= rem[best] - 1e-12) best = i;
    }
    ++sizes[best];
    rem[best] = -1.0;
    ++assigned;
  }
  return sizes;
}

DatasetSplit split_dataset(const std::vector<PrescriptionInstance>& prescriptions,
                           std::array<double, 3> ratio, std::uint64_t seed) {
  if (prescriptions.size() < 3) throw DataError("split_dataset: corpus needs at least 3 instances");
  auto sizes = split_sizes(prescriptions.size(), ratio);
  std::vector<std::size_t> order(prescriptions.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  // Fisher-Yates with an explicit draw so the order does not depend on the
  // standard library's distribution implementation.
  for (std::size_t i = order.size() - 1; i > 0; --i) {
    std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
    std::swap(order[i], order[j]);
  }
  DatasetSplit split;
  split.seed = seed;
  split.train_idx.assign(order.begin(), order.begin() + static_cast<long>(sizes[0]));
  split.valid_idx.assign(order.begin() + static_cast<long>(sizes[0]),
                         order.begin() + static_cast<long>(sizes[0] + sizes[1]));
  split.test_idx.assign(order.begin() + static_cast<long>(sizes[0] + sizes[1]), order.end());
  for (auto i : split.train_idx) split.train.push_back(prescriptions[i]);
  for (auto i : split.valid_idx) split.valid.push_back(prescriptions[i]);
  for (auto i : split.test_idx) split.test.push_back(prescriptions[i]);
  return split;
}

void save_split(const fs::path& path, const DatasetSplit& split) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  json j = {{"seed", split.seed}, {"train", split.train_idx}, {"valid", split.valid_idx}, {"test", split.test_idx}};
  out << j.dump() << '\n';
}

DatasetSplit load_split(const fs::path& path, const std::vector<PrescriptionInstance>& prescriptions) {
  std::ifstream in = open_input(path);
  DatasetSplit split;
  try {
    json j = json::parse(in);
    split.seed = j.at("seed").get<std::uint64_t>();
    split.train_idx = j.at("train").get<std::vector<std::size_t>>();
    split.valid_idx = j.at("valid").get<std::vector<std::size_t>>();
    split.test_idx = j.at("test").get<std::vector<std::size_t>>();
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  auto attach = [&](const std::vector<std::size_t>& idx, std::vector<PrescriptionInstance>& dst) {
    for (auto i : idx) {
      if (i >= prescriptions.size()) {
        throw DataError(path.string() + ": instance " + std::to_string(i) + " is outside the corpus");
      }
      dst.push_back(prescriptions[i]);
    }
  };
  attach(split.train_idx, split.train);
  attach(split.valid_idx, split.valid);
  attach(split.test_idx, split.test);
  return split;
}

int synthetic_syndrome_of(int id, int n_items, int n_syndromes) {
  // Block c spans [c*n/k, (c+1)*n/k).
  for (int c = 0; c < n_syndromes; ++c) {
    int end = static_cast<int>((static_cast<long>(c) + 1) * n_items / n_syndromes);
    if (id < end) return c;
  }
  return n_syndromes - 1;
}

namespace {

int block_begin(int c, int n, int k) { return static_cast<int>(static_cast<long>(c) * n / k); }

int uniform_int(Rng& rng, int lo, int hi) {
  return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::vector<int> sample_without_replacement(Rng& rng, int begin, int end, int count) {
  std::vector<int> pool(static_cast<std::size_t>(end - begin));
  std::iota(pool.begin(), pool.end(), begin);
  for (int i = 0; i < count; ++i) {
    int j = uniform_int(rng, i, static_cast<int>(pool.size()) - 1);
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
  }
  pool.resize(static_cast<std::size_t>(count));
  return pool;
}

std::string pseudo_smiles(Rng& rng) {
  static const char* kParts[] = {"C", "C", "C", "CC", "N", "O", "c1ccccc1", "C(=O)", "S", "Cl",
                                 "F", "C=C", "O[H]", "N(C)"};
  int len = uniform_int(rng, 3, 8);
  std::string s;
  for (int i = 0; i < len; ++i) s += kParts[uniform_int(rng, 0, 13)];
  return s;
}

}  // namespace

Corpus generate_synthetic(const SyntheticConfig& cfg) {
  const int k = cfg.n_syndromes;
  if (k < 1 || k > std::min(cfg.n_sym, cfg.n_herb)) {
    throw UsageError("n_syndromes must be in [1, min(n_sym, n_herb)]");
  }
  if (cfg.min_symptoms < 1 || cfg.min_symptoms > cfg.max_symptoms || cfg.min_herbs < 1 ||
      cfg.min_herbs > cfg.max_herbs) {
    throw UsageError("invalid per-prescription size ranges");
  }
  if (cfg.missing_molecule_fraction < 0 || cfg.missing_molecule_fraction > 1) {
    throw UsageError("missing_molecule_fraction must be in [0, 1]");
  }
  if (cfg.n_sym / k < cfg.min_symptoms || cfg.n_herb / k < cfg.min_herbs) {
    throw DataError("infeasible cluster sizes: " + std::to_string(k) + " syndromes over " +
                    std::to_string(cfg.n_sym) + " symptoms / " + std::to_string(cfg.n_herb) +
                    " herbs leave fewer than " + std::to_string(cfg.min_symptoms) + " symptoms or " +
                    std::to_string(cfg.min_herbs) + " herbs per syndrome");
  }
  if (cfg.n_ambiguous_sets > 0 && cfg.n_herb / k < 2 * cfg.min_herbs) {
    throw DataError("infeasible cluster sizes for ambiguous formulas");
  }

  Corpus corpus;
  corpus.property_dim = cfg.property_dim;
  Rng rng = stage_rng(cfg.seed, "synthetic");

  for (int s = 0; s < cfg.n_sym; ++s) {
    char name[32];
    std::snprintf(name, sizeof(name), "sym_%03d", s);
    corpus.symptoms.push_back({s, name, std::nullopt});
  }

  // Per-syndrome property prototype and molecule pool.
  std::vector<Vector> prototypes;
  std::vector<std::vector<std::string>> pools;
  for (int c = 0; c < k; ++c) {
    Vector proto(cfg.property_dim);
    for (Index i = 0; i < proto.size(); ++i) proto(i) = uniform01(rng);
    prototypes.push_back(proto);
    std::vector<std::string> pool;
    for (int m = 0; m < 8; ++m) pool.push_back(pseudo_smiles(rng));
    pools.push_back(std::move(pool));
  }

  std::vector<int> herb_order(static_cast<std::size_t>(cfg.n_herb));
  std::iota(herb_order.begin(), herb_order.end(), 0);
  for (std::size_t i = herb_order.size() - 1; i > 0; --i) {
    std::swap(herb_order[i], herb_order[rng() % (i + 1)]);
  }
  auto n_missing = static_cast<std::size_t>(
      std::llround(cfg.missing_molecule_fraction * static_cast<double>(cfg.n_herb)));
  std::vector<char> missing(static_cast<std::size_t>(cfg.n_herb), 0);
  for (std::size_t i = 0; i < n_missing; ++i) missing[static_cast<std::size_t>(herb_order[i])] = 1;

  std::normal_distribution<double> noise(0.0, 0.1);
  for (int h = 0; h < cfg.n_herb; ++h) {
    int c = synthetic_syndrome_of(h, cfg.n_herb, k);
    HerbRecord rec;
    rec.id = h;
    char name[32];
    std::snprintf(name, sizeof(name), "herb_%03d", h);
    rec.name = name;
    rec.properties.resize(cfg.property_dim);
    for (int i = 0; i < cfg.property_dim; ++i) {
      double v = prototypes[static_cast<std::size_t>(c)](i) + 0.1 * (2.0 * uniform01(rng) - 1.0);
      rec.properties(i) = std::round(std::clamp(v, 0.0, 1.0) * 1e4) / 1e4;
    }
    int n_mol = uniform_int(rng, 1, 4);
    auto picks = sample_without_replacement(rng, 0, 8, n_mol);
    if (!missing[static_cast<std::size_t>(h)]) {
      for (int p : picks) rec.molecules.push_back(pools[static_cast<std::size_t>(c)][static_cast<std::size_t>(p)]);
    }
    corpus.herbs.push_back(std::move(rec));
  }

  std::set<std::vector<int>> used;
  auto draw_symptoms = [&](int c) {
    int b = block_begin(c, cfg.n_sym, k);
    int e = block_begin(c + 1, cfg.n_sym, k);
    for (int attempt = 0; attempt < 1000; ++attempt) {
      int n = std::min(uniform_int(rng, cfg.min_symptoms, cfg.max_symptoms), e - b);
      auto syms = sample_without_replacement(rng, b, e, n);
      std::sort(syms.begin(), syms.end());
      if (!cfg.distinct_symptom_sets || used.insert(syms).second) return syms;
    }
    throw DataError("infeasible cluster sizes: cannot draw a fresh symptom set for syndrome " +
                    std::to_string(c));
  };

  for (int i = 0; i < cfg.n_prescriptions; ++i) {
    int c = uniform_int(rng, 0, k - 1);
    PrescriptionInstance rx;
    rx.symptoms = draw_symptoms(c);
    int b = block_begin(c, cfg.n_herb, k);
    int e = block_begin(c + 1, cfg.n_herb, k);
    int n = std::min(uniform_int(rng, cfg.min_herbs, cfg.max_herbs), e - b);
    rx.herbs = sample_without_replacement(rng, b, e, n);
    corpus.prescriptions.push_back(std::move(rx));
  }

  for (int i = 0; i < cfg.n_ambiguous_sets; ++i) {
    int c = uniform_int(rng, 0, k - 1);
    auto syms = draw_symptoms(c);
    used.insert(syms);
    int b = block_begin(c, cfg.n_herb, k);
    int e = block_begin(c + 1, cfg.n_herb, k);
    int span = e - b;
    int n = std::min(uniform_int(rng, cfg.min_herbs, cfg.max_herbs), span / 2);
    auto both = sample_without_replacement(rng, b, e, 2 * n);
    PrescriptionInstance first{syms, std::vector<int>(both.begin(), both.begin() + n)};
    PrescriptionInstance second{syms, std::vector<int>(both.begin() + n, both.end())};
    corpus.prescriptions.push_back(std::move(first));
    corpus.prescriptions.push_back(std::move(second));
  }
  return corpus;
}

MolecularTable load_molecular_table(const fs::path& path, int n_herb) {
  auto in = open_input(path);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": missing dim header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.rfind("dim=", 0) != 0) throw DataError(path.string() + ":1: expected 'dim=<d>' header");
  int dim = 0;
  auto [p, ec] = std::from_chars(line.data() + 4, line.data() + line.size(), dim);
  if (ec != std::errc() || p != line.data() + line.size() || dim < 1) {
    throw DataError(path.string() + ":1: bad dimension in header");
  }

  MolecularTable table;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto loc = path.filename().string() + ":" + std::to_string(line_no);
    auto t1 = line.find('\t');
    auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) throw DataError(loc + ": expected three tab-separated fields");
    int herb = 0, mol = 0;
    auto r1 = std::from_chars(line.data(), line.data() + t1, herb);
    auto r2 = std::from_chars(line.data() + t1 + 1, line.data() + t2, mol);
    if (r1.ec != std::errc() || r2.ec != std::errc()) throw DataError(loc + ": bad herb or molecule index");
    if (herb < 0 || (n_herb >= 0 && herb >= n_herb)) {
      throw DataError(loc + ": unknown herb id " + std::to_string(herb));
    }
    std::vector<double> values;
    const char* cur = line.data() + t2 + 1;
    const char* end = line.data() + line.size();
    while (cur < end) {
      double v = 0;
      auto r = std::from_chars(cur, end, v);
      if (r.ec != std::errc()) throw DataError(loc + ": bad number");
      values.push_back(v);
      cur = r.ptr;
      if (cur < end) {
        if (*cur != ',') throw DataError(loc + ": expected ',' between values");
        ++cur;
      }
    }
    if (static_cast<int>(values.size()) != dim) {
      throw DataError(loc + ": dimension mismatch, row has " + std::to_string(values.size()) +
                      " values but header declares dim=" + std::to_string(dim));
    }
    table[herb].push_back(Eigen::Map<const Vector>(values.data(), dim));
  }
  return table;
}

void write_molecular_table(const fs::path& path, Index dim, const std::vector<MolecularRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "dim=" << dim << '\n';
  for (const auto& r : rows) {
    if (r.values.size() != dim) throw DataError("write_molecular_table: row dimension mismatch");
    out << r.herb_id << '\t' << r.mol_index << '\t';
    for (Index i = 0; i < dim; ++i) {
      if (i) out << ',';
      out << format_double(r.values(i));
    }
    out << '\n';
  }
}

std::map<std::string, int> symptom_index(const Corpus& corpus) {
  std::map<std::string, int> out;
  for (const auto& s : corpus.symptoms) out.emplace(s.name, s.id);
  return out;
}

}  // namespace fmash::data
