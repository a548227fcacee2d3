#include "fmash/evalkit.hpp"

#include "fmash/errors.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

namespace fmash::eval {

using json = nlohmann::json;

TopK topk_metrics(std::span<const int> ranked, std::span<const int> truth, int k) {
  if (k < 1) throw UsageError("k must be at least 1");
  std::unordered_set<int> t(truth.begin(), truth.end());
  if (t.empty()) throw UsageError("ground truth is empty");
  std::unordered_set<int> seen;
  std::size_t hits = 0;
  const std::size_t n = std::min(ranked.size(), static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < n; ++i) {
    if (seen.insert(ranked[i]).second && t.count(ranked[i])) ++hits;
  }
  TopK r;
  r.precision = static_cast<double>(hits) / k;
  r.recall = static_cast<double>(hits) / static_cast<double>(t.size());
  if (r.precision + r.recall > 0) r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
  return r;
}

double bmp_at_k(std::span<const int> prediction, const std::vector<std::vector<int>>& truths, int k) {
  if (truths.empty()) throw UsageError("bmp_at_k: group has no ground truth");
  double best = 0.0;
  for (const auto& t : truths) best = std::max(best, topk_metrics(prediction, t, k).precision);
  return best;
}

std::string group_key(std::vector<int> symptoms) {
  std::sort(symptoms.begin(), symptoms.end());
  symptoms.erase(std::unique(symptoms.begin(), symptoms.end()), symptoms.end());
  std::string key;
  for (std::size_t i = 0; i < symptoms.size(); ++i) {
    if (i) key += ',';
    key += std::to_string(symptoms[i]);
  }
  return key;
}

std::vector<EvalGroup> group_instances(const std::vector<data::PrescriptionInstance>& corpus,
                                       const std::vector<std::size_t>& test_ids) {
  std::vector<EvalGroup> groups;
  std::map<std::string, std::size_t> index;
  for (std::size_t id : test_ids) {
    if (id >= corpus.size()) throw DataError("test instance id " + std::to_string(id) + " out of range");
    std::string key = group_key(corpus[id].symptoms);
    auto [it, inserted] = index.emplace(key, groups.size());
    if (inserted) groups.push_back({key, {}, {}});
    groups[it->second].instances.push_back(id);
    groups[it->second].truths.push_back(corpus[id].herbs);
  }
  return groups;
}

Predictions load_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open predictions " + path.string());
  Predictions preds;
  bool kind_known = false;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto where = [&] { return path.string() + ":" + std::to_string(line_no) + ": "; };
    auto tab = line.find('\t');
    if (tab == std::string::npos) throw DataError(where() + "expected instance_id<TAB>predictions");
    std::size_t id = 0;
    try {
      id = std::stoul(line.substr(0, tab));
    } catch (const std::exception&) {
      throw DataError(where() + "bad instance id");
    }
    std::string body = line.substr(tab + 1);
    if (!body.empty()) {
      PredictionKind kind = body.find(':') != std::string::npos ? PredictionKind::ranked : PredictionKind::sequence;
      if (kind_known && kind != preds.kind) throw DataError(where() + "mixes ranked and sequence predictions");
      preds.kind = kind;
      kind_known = true;
    }
    std::vector<int> herbs;
    std::stringstream ss(body);
    std::string item;
    while (std::getline(ss, item, ',')) {
      try {
        herbs.push_back(std::stoi(item.substr(0, item.find(':'))));
      } catch (const std::exception&) {
        throw DataError(where() + "bad herb entry '" + item + "'");
      }
    }
    if (!preds.by_instance.emplace(id, std::move(herbs)).second) {
      throw DataError(where() + "duplicate prediction for instance " + std::to_string(id));
    }
  }
  if (!kind_known) preds.kind = PredictionKind::sequence;
  return preds;
}

MetricReport evaluate(const Predictions& preds, const std::vector<data::PrescriptionInstance>& corpus,
                      const std::vector<std::size_t>& test_ids, const std::vector<int>& ks,
                      const EvalOptions& opts) {
  if (ks.empty()) throw UsageError("no k values given");
  for (int k : ks) {
    if (k < 1) throw UsageError("k must be at least 1");
  }
  auto prediction_for = [&](std::size_t id) -> const std::vector<int>& {
    auto it = preds.by_instance.find(id);
    if (it == preds.by_instance.end()) throw DataError("missing prediction for instance " + std::to_string(id));
    return it->second;
  };

  MetricReport rep;
  rep.model = opts.model;
  rep.ks = ks;
  rep.averaging = opts.averaging == Averaging::macro ? "macro" : "micro";
  rep.n_instances = test_ids.size();
  const bool classic = preds.kind == PredictionKind::ranked || opts.classic_for_sequences;
  const std::size_t nk = ks.size();

  if (classic) {
    rep.precision.assign(nk, 0.0);
    rep.recall.assign(nk, 0.0);
    rep.f1.assign(nk, 0.0);
    std::vector<double> hits(nk, 0.0);
    double truth_total = 0.0;
    for (std::size_t id : test_ids) {
      const auto& pred = prediction_for(id);
      const auto& truth = corpus[id].herbs;
      std::set<int> t(truth.begin(), truth.end());
      truth_total += static_cast<double>(t.size());
      for (std::size_t i = 0; i < nk; ++i) {
        TopK m = topk_metrics(pred, truth, ks[i]);
        rep.precision[i] += m.precision;
        rep.recall[i] += m.recall;
        rep.f1[i] += m.f1;
        hits[i] += m.precision * ks[i];
      }
    }
    const auto n = static_cast<double>(test_ids.size());
    for (std::size_t i = 0; i < nk && n > 0; ++i) {
      if (opts.averaging == Averaging::macro) {
        rep.precision[i] /= n;
        rep.recall[i] /= n;
        rep.f1[i] /= n;
      } else {
        double p = hits[i] / (ks[i] * n);
        double r = hits[i] / truth_total;
        rep.precision[i] = p;
        rep.recall[i] = r;
        rep.f1[i] = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
      }
    }
  }

  auto groups = group_instances(corpus, test_ids);
  rep.n_groups = groups.size();
  rep.bmp.assign(nk, 0.0);
  for (const auto& g : groups) {
    // Every instance must have a prediction; the group is scored with its first.
    for (std::size_t id : g.instances) prediction_for(id);
    const auto& pred = prediction_for(g.instances.front());
    GroupScore gs{g.key, g.truths.size(), {}};
    for (std::size_t i = 0; i < nk; ++i) {
      double b = bmp_at_k(pred, g.truths, ks[i]);
      gs.bmp.push_back(b);
      rep.bmp[i] += b;
    }
    rep.groups.push_back(std::move(gs));
  }
  if (!groups.empty()) {
    for (double& b : rep.bmp) b /= static_cast<double>(groups.size());
  }
  return rep;
}

MetricReport evaluate_run(const std::filesystem::path& prediction_file,
                          const std::vector<data::PrescriptionInstance>& corpus,
                          const std::vector<std::size_t>& test_ids, const std::vector<int>& ks,
                          const EvalOptions& opts) {
  return evaluate(load_predictions(prediction_file), corpus, test_ids, ks, opts);
}

namespace {

json to_json(const MetricReport& r) {
  json groups = json::array();
  for (const auto& g : r.groups) groups.push_back({{"key", g.key}, {"n_truths", g.n_truths}, {"bmp", g.bmp}});
  json j;
  j["model"] = r.model;
  j["split"] = r.split;
  j["averaging"] = r.averaging;
  j["ks"] = r.ks;
  j["precision"] = r.precision;
  j["recall"] = r.recall;
  j["f1"] = r.f1;
  j["bmp"] = r.bmp;
  j["n_instances"] = r.n_instances;
  j["n_groups"] = r.n_groups;
  j["groups"] = groups;
  return j;
}

}  // namespace

std::string report_to_string(const MetricReport& report) { return to_json(report).dump(2) + "\n"; }

MetricReport report_from_string(const std::string& text) {
  try {
    json j = json::parse(text);
    MetricReport r;
    r.model = j.at("model").get<std::string>();
    r.split = j.at("split").get<std::string>();
    r.averaging = j.at("averaging").get<std::string>();
    r.ks = j.at("ks").get<std::vector<int>>();
    r.precision = j.at("precision").get<std::vector<double>>();
    r.recall = j.at("recall").get<std::vector<double>>();
    r.f1 = j.at("f1").get<std::vector<double>>();
    r.bmp = j.at("bmp").get<std::vector<double>>();
    r.n_instances = j.at("n_instances").get<std::size_t>();
    r.n_groups = j.at("n_groups").get<std::size_t>();
    for (const auto& g : j.at("groups")) {
      r.groups.push_back({g.at("key").get<std::string>(), g.at("n_truths").get<std::size_t>(),
                          g.at("bmp").get<std::vector<double>>()});
    }
    return r;
  } catch (const json::exception& e) {
    throw DataError(std::string("metric report: ") + e.what());
  }
}

void save_report(const std::filesystem::path& path, const MetricReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << report_to_string(report);
}

MetricReport load_report(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return report_from_string(ss.str());
}

std::vector<int> parse_ks(const std::string& text) {
  std::vector<int> ks;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto b = item.find_first_not_of(" \t");
    auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) throw UsageError("empty entry in k list '" + text + "'");
    item = item.substr(b, e - b + 1);
    std::size_t used = 0;
    int k = 0;
    try {
      k = std::stoi(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || k < 1) throw UsageError("bad k value '" + item + "'");
    ks.push_back(k);
  }
  if (ks.empty()) throw UsageError("no k values given");
  return ks;
}

}  // namespace fmash::eval
