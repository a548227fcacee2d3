/**
 * Top-K precision / recall / F1 and Best Matched Precision over groups of
 * test instances that share the same symptom set.
 */
#pragma once

#include "fmash/dataio.hpp"

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace fmash::eval {

struct TopK {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Uses the first k entries of `ranked` (fewer if it is shorter; the divisor
/// stays k). `truth` is treated as a set. Throws UsageError on empty truth or k < 1.
TopK topk_metrics(std::span<const int> ranked, std::span<const int> truth, int k);

/// Max over the group's ground truths of P@k.
double bmp_at_k(std::span<const int> prediction, const std::vector<std::vector<int>>& truths, int k);

/// Sorted unique symptom ids joined by commas.
std::string group_key(std::vector<int> symptoms);

struct EvalGroup {
  std::string key;
  std::vector<std::size_t> instances;      // corpus instance ids, in test order
  std::vector<std::vector<int>> truths;
};

std::vector<EvalGroup> group_instances(const std::vector<data::PrescriptionInstance>& corpus,
                                       const std::vector<std::size_t>& test_ids);

enum class PredictionKind { ranked, sequence };
enum class Averaging { macro, micro };

struct Predictions {
  PredictionKind kind = PredictionKind::ranked;
  std::map<std::size_t, std::vector<int>> by_instance;
};

/// Lines `id<TAB>h:score,...` are ranked predictions, `id<TAB>h,h,...` sequences.
Predictions load_predictions(const std::filesystem::path& path);

struct GroupScore {
  std::string key;
  std::size_t n_truths = 0;
  std::vector<double> bmp;  // aligned with ks

  bool operator==(const GroupScore&) const = default;
};

struct MetricReport {
  std::string model;
  std::string split = "test";
  std::string averaging = "macro";
  std::vector<int> ks;
  std::vector<double> precision, recall, f1;  // empty when not computed
  std::vector<double> bmp;
  std::size_t n_instances = 0;
  std::size_t n_groups = 0;
  std::vector<GroupScore> groups;

  bool operator==(const MetricReport&) const = default;
};

struct EvalOptions {
  Averaging averaging = Averaging::macro;
  /// Also score sequence predictions with P/R/F1.
  bool classic_for_sequences = false;
  std::string model;
};

/// Scores every test instance; throws DataError if one lacks a prediction.
MetricReport evaluate(const Predictions& preds, const std::vector<data::PrescriptionInstance>& corpus,
                      const std::vector<std::size_t>& test_ids, const std::vector<int>& ks,
                      const EvalOptions& opts = {});

MetricReport evaluate_run(const std::filesystem::path& prediction_file,
                          const std::vector<data::PrescriptionInstance>& corpus,
                          const std::vector<std::size_t>& test_ids, const std::vector<int>& ks,
                          const EvalOptions& opts = {});

std::string report_to_string(const MetricReport& report);
MetricReport report_from_string(const std::string& text);
void save_report(const std::filesystem::path& path, const MetricReport& report);
MetricReport load_report(const std::filesystem::path& path);

/// Parses "5,10,20"; UsageError on anything but positive integers.
std::vector<int> parse_ks(const std::string& text);

}  // namespace fmash::eval
