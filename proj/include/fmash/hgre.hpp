/**
 * Heterogeneous graph representation embedding.
 *
 * Each homogeneous subgraph (symptom-symptom, herb-herb) gets a GCN layer,
 * then its nodes are laid out as a sequence in degree order and passed
 * through a bidirectional selective state-space block; the results are put
 * back in node order. The enhanced features of both node types then go
 * through a global GCN over every edge and a wider bidirectional block in
 * full-graph degree order.
 */
#pragma once

#include "fmash/autodiff.hpp"
#include "fmash/dataio.hpp"
#include "fmash/nn.hpp"

#include <memory>
#include <vector>

namespace fmash::hgre {

using ad::Var;

enum class Activation { identity, relu };
enum class SortOrder { descending, ascending };
enum class Discretization { zoh, euler };
enum class ScanDirection { forward, backward };

/// D^-1/2 (A + I) D^-1/2 for an undirected graph on n nodes.
SparseMatrix normalized_adjacency(int n, const data::EdgeList& edges);

struct GcnParams {
  Var weight;  // d_in x d_out
  Var bias;    // 1 x d_out

  static GcnParams create(Index d_in, Index d_out, Rng& rng);
  void collect(ad::NamedParams& out, const std::string& prefix) const;
};

Var gcn_forward(const Var& x, std::shared_ptr<const SparseMatrix> norm_adj, const GcnParams& params,
                Activation act = Activation::relu);
Var gcn_forward(const Var& x, const data::EdgeList& edges, const GcnParams& params,
                Activation act = Activation::relu);

/// perm[i] is the node placed at sorted position i; inverse[perm[i]] == i.
struct DegreePermutation {
  std::vector<Index> perm;
  std::vector<Index> inverse;
};

/// Stable sort by degree (descending by default); ties keep ascending node order.
DegreePermutation degree_permutation(std::span<const int> degrees,
                                     SortOrder order = SortOrder::descending);
Var sort_rows(const Var& x, const DegreePermutation& p);
Var unsort_rows(const Var& x, const DegreePermutation& p);

/// One scan direction: input/gate projections, input-dependent step size and
/// B/C projections, and the diagonal state matrix A = -exp(a_log).
struct ScanBranch {
  nn::Linear in_proj;    // d -> d_inner
  nn::Linear gate_proj;  // d -> d_inner
  nn::Linear dt_proj;    // d_inner -> d_inner, softplus gives the step size
  nn::Linear b_proj;     // d_inner -> d_state
  nn::Linear c_proj;     // d_inner -> d_state
  Var a_log;             // d_inner x d_state

  void collect(ad::NamedParams& out, const std::string& prefix) const;
};

struct SsmParams {
  ScanBranch forward;
  ScanBranch backward;
  nn::Linear merge;  // 2*d_inner -> d
  Discretization discretization = Discretization::zoh;

  static SsmParams create(Index d, Index d_inner, Index d_state, Rng& rng,
                          Discretization disc = Discretization::zoh);
  Index d_state() const { return forward.a_log.cols(); }
  void collect(ad::NamedParams& out, const std::string& prefix) const;
};

/// Fused linear recurrence h_t = exp(dt_t A) h_{t-1} + Bbar_t u_t,
/// y_t = C_t h_t, per channel with a diagonal state. Inputs: u, delta (L x D),
/// a (D x N), b, c (L x N). Bbar is dt*B (euler) or (exp(dt A) - 1)/A * B (zoh).
Var selective_scan(const Var& u, const Var& delta, const Var& a, const Var& b, const Var& c,
                   Discretization disc);

/// One gated scan branch. Backward direction runs on the reversed sequence and
/// reverses the result back, so output t depends on inputs >= t.
Var ssm_scan(const Var& seq, const SsmParams& params, ScanDirection direction);

/// seq + merge([forward branch, backward branch]).
Var bidirectional_block(const Var& seq, const SsmParams& params);

/// Normalized adjacency plus degree permutation for one (sub)graph.
struct GraphView {
  std::shared_ptr<const SparseMatrix> norm_adj;
  DegreePermutation order;
};

GraphView make_view(int n, const data::EdgeList& edges, std::span<const int> degrees,
                    SortOrder order = SortOrder::descending);

/// Unsort(Block(Sort(GCN(x)))).
Var subgraph_enhance(const Var& x, const GraphView& view, const GcnParams& gcn, const SsmParams& ssm,
                     Activation act = Activation::relu);

struct HgreConfig {
  Index dim = 64;
  Index d_state = 16;
  /// The global block gets this multiple of d_state.
  Index global_state_factor = 2;
  Index expand = 1;
  Activation activation = Activation::relu;
  Discretization discretization = Discretization::zoh;
  SortOrder sort_order = SortOrder::descending;
};

struct HgreParams {
  GcnParams gcn_sym, gcn_herb, gcn_global;
  SsmParams ssm_sym, ssm_herb, ssm_global;

  static HgreParams create(const HgreConfig& cfg, Rng& rng);
  void collect(ad::NamedParams& out, const std::string& prefix) const;
};

struct HgreGraph {
  int n_sym = 0;
  int n_herb = 0;
  GraphView sym, herb, global;
};

HgreGraph make_hgre_graph(const data::HeteroGraph& g, SortOrder order = SortOrder::descending);

/// x holds symptom rows then herb rows; returns the same layout.
Var hgre_forward(const Var& x, const HgreGraph& graph, const HgreParams& params,
                 const HgreConfig& cfg);

}  // namespace fmash::hgre
