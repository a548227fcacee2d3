/**
 * Corpus ingestion, heterogeneous graph construction, deterministic splits and
 * the planted-structure synthetic corpus.
 *
 * Corpus directory layout (all JSON Lines, UTF-8, 0-based ids):
 *   symptoms.jsonl       {"id", "name", optional "text_embedding": [..]}
 *   herbs.jsonl          {"id", "name", "properties": [P floats], "molecules": [strings]}
 *   prescriptions.jsonl  {"symptoms": [ids], "herbs": [ids, in formula order]}
 */
#pragma once

#include "fmash/autodiff.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace fmash::data {

struct SymptomRecord {
  int id = 0;
  std::string name;
  std::optional<Vector> text_embedding;
};

struct HerbRecord {
  int id = 0;
  std::string name;
  Vector properties;
  std::vector<std::string> molecules;
  /// Precomputed molecule embeddings aligned 1:1 with `molecules`.
  std::optional<std::vector<Vector>> mol_embeddings;
};

/// A symptom set (sorted, unique) and its formula in source order.
struct PrescriptionInstance {
  std::vector<int> symptoms;
  std::vector<int> herbs;

  bool operator==(const PrescriptionInstance&) const = default;
};

struct Corpus {
  std::vector<SymptomRecord> symptoms;
  std::vector<HerbRecord> herbs;
  std::vector<PrescriptionInstance> prescriptions;
  int property_dim = 23;

  int n_sym() const { return static_cast<int>(symptoms.size()); }
  int n_herb() const { return static_cast<int>(herbs.size()); }
};

using EdgeList = std::vector<std::pair<int, int>>;

/// Undirected typed edges. edges_ss / edges_hh hold (u, v) with u < v in
/// per-type ids; edges_sh holds (symptom id, herb id). Global node order is
/// symptoms first, then herbs (herb h has global index n_sym + h).
struct HeteroGraph {
  int n_sym = 0;
  int n_herb = 0;
  EdgeList edges_ss;
  EdgeList edges_hh;
  EdgeList edges_sh;
  std::vector<int> degrees;
  std::vector<int> sub_degrees_ss;
  std::vector<int> sub_degrees_hh;

  int n_nodes() const { return n_sym + n_herb; }
  /// All edges in global node indices.
  EdgeList global_edges() const;
};

struct DatasetSplit {
  std::vector<PrescriptionInstance> train, valid, test;
  std::vector<std::size_t> train_idx, valid_idx, test_idx;
  std::uint64_t seed = 0;
};

/// Reads the three corpus files. Duplicate herbs in a prescription keep their
/// first occurrence; duplicate symptoms collapse into the sorted set.
Corpus load_corpus(const std::filesystem::path& dir, int property_dim);
void write_corpus(const std::filesystem::path& dir, const Corpus& corpus);

/// Symptom pairs co-occurring in >= tau_s prescriptions, herb pairs in >= tau_h,
/// and every symptom-herb pair seen at least once.
HeteroGraph build_graph(const std::vector<PrescriptionInstance>& prescriptions, int n_sym,
                        int n_herb, int tau_s, int tau_h);

/// Shuffles under `seed` and cuts by `ratio`. Sizes are the floors of each
/// share with leftover instances handed out by largest remainder, ties going
/// to the later (smaller) split.
DatasetSplit split_dataset(const std::vector<PrescriptionInstance>& prescriptions,
                           std::array<double, 3> ratio, std::uint64_t seed);
std::array<std::size_t, 3> split_sizes(std::size_t n, std::array<double, 3> ratio);

/// Index-only JSON: {"seed", "train", "valid", "test"}.
void save_split(const std::filesystem::path& path, const DatasetSplit& split);
/// Re-attaches the instances from `prescriptions`; ids must be in range.
DatasetSplit load_split(const std::filesystem::path& path, const std::vector<PrescriptionInstance>& prescriptions);

struct SyntheticConfig {
  int n_sym = 40;
  int n_herb = 60;
  int n_syndromes = 5;
  int n_prescriptions = 200;
  std::uint64_t seed = 7;
  int property_dim = 23;
  double missing_molecule_fraction = 0.2;
  int min_symptoms = 2, max_symptoms = 4;
  int min_herbs = 5, max_herbs = 10;
  /// Redraw a symptom set already used by another prescription.
  bool distinct_symptom_sets = true;
  /// Extra symptom sets that each map to two disjoint formulas of one syndrome.
  int n_ambiguous_sets = 0;
};

/// Each syndrome owns a contiguous block of symptoms and of herbs; a
/// prescription picks one syndrome, some of its symptoms and some of its herbs.
Corpus generate_synthetic(const SyntheticConfig& config);
/// Syndrome owning a symptom / herb in a corpus built by generate_synthetic.
int synthetic_syndrome_of(int id, int n_items, int n_syndromes);

using MolecularTable = std::map<int, std::vector<Vector>>;

struct MolecularRow {
  int herb_id = 0;
  int mol_index = 0;  // -1 marks an imputed vector
  Vector values;
};

/// Header `dim=<d>`, then `herb_id<TAB>mol_index<TAB>f1,f2,...` rows. Rows are
/// grouped per herb in file order. `n_herb` < 0 skips the id range check.
MolecularTable load_molecular_table(const std::filesystem::path& path, int n_herb = -1);
void write_molecular_table(const std::filesystem::path& path, Index dim,
                           const std::vector<MolecularRow>& rows);

/// Id lookup by exact name.
std::map<std::string, int> symptom_index(const Corpus& corpus);

}  // namespace fmash::data
