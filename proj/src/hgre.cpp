#include "fmash/hgre.hpp"

#include "fmash/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fmash::hgre {

SparseMatrix normalized_adjacency(int n, const data::EdgeList& edges) {
  std::vector<double> deg(static_cast<std::size_t>(n), 1.0);  // self-loop
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(edges.size() * 2 + static_cast<std::size_t>(n));
  for (auto [u, v] : edges) {
    if (u < 0 || v < 0 || u >= n || v >= n) {
      throw DataError("edge (" + std::to_string(u) + ", " + std::to_string(v) +
                      ") has an endpoint outside 0.." + std::to_string(n - 1));
    }
    if (u == v) continue;
    deg[static_cast<std::size_t>(u)] += 1.0;
    deg[static_cast<std::size_t>(v)] += 1.0;
  }
  for (auto [u, v] : edges) {
    if (u == v) continue;
    double w = 1.0 / std::sqrt(deg[static_cast<std::size_t>(u)] * deg[static_cast<std::size_t>(v)]);
    trips.emplace_back(u, v, w);
    trips.emplace_back(v, u, w);
  }
  for (int i = 0; i < n; ++i) trips.emplace_back(i, i, 1.0 / deg[static_cast<std::size_t>(i)]);
  SparseMatrix a(n, n);
  a.setFromTriplets(trips.begin(), trips.end());
  return a;
}

GcnParams GcnParams::create(Index d_in, Index d_out, Rng& rng) {
  return {Var::parameter(xavier_uniform(d_in, d_out, rng)), Var::parameter(Matrix::Zero(1, d_out))};
}

void GcnParams::collect(ad::NamedParams& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

Var gcn_forward(const Var& x, std::shared_ptr<const SparseMatrix> norm_adj, const GcnParams& params,
                Activation act) {
  if (norm_adj->rows() != x.rows()) {
    throw DataError("gcn_forward: adjacency has " + std::to_string(norm_adj->rows()) +
                    " nodes but features have " + std::to_string(x.rows()) + " rows");
  }
  if (params.weight.rows() != x.cols()) throw DataError("gcn_forward: weight/feature width mismatch");
  Var h = ad::add_row(ad::spmm(std::move(norm_adj), ad::matmul(x, params.weight)), params.bias);
  return act == Activation::relu ? ad::relu(h) : h;
}

Var gcn_forward(const Var& x, const data::EdgeList& edges, const GcnParams& params, Activation act) {
  auto adj = std::make_shared<const SparseMatrix>(normalized_adjacency(static_cast<int>(x.rows()), edges));
  return gcn_forward(x, std::move(adj), params, act);
}

DegreePermutation degree_permutation(std::span<const int> degrees, SortOrder order) {
  DegreePermutation p;
  p.perm.resize(degrees.size());
  std::iota(p.perm.begin(), p.perm.end(), Index{0});
  std::stable_sort(p.perm.begin(), p.perm.end(), [&](Index a, Index b) {
    int da = degrees[static_cast<std::size_t>(a)];
    int db = degrees[static_cast<std::size_t>(b)];
    return order == SortOrder::descending ? da > db : da < db;
  });
  p.inverse.resize(degrees.size());
  for (std::size_t i = 0; i < p.perm.size(); ++i) p.inverse[static_cast<std::size_t>(p.perm[i])] = static_cast<Index>(i);
  return p;
}

Var sort_rows(const Var& x, const DegreePermutation& p) { return ad::gather_rows(x, p.perm); }
Var unsort_rows(const Var& x, const DegreePermutation& p) { return ad::gather_rows(x, p.inverse); }

void ScanBranch::collect(ad::NamedParams& out, const std::string& prefix) const {
  in_proj.collect(out, prefix + ".in_proj");
  gate_proj.collect(out, prefix + ".gate_proj");
  dt_proj.collect(out, prefix + ".dt_proj");
  b_proj.collect(out, prefix + ".b_proj");
  c_proj.collect(out, prefix + ".c_proj");
  out.emplace_back(prefix + ".a_log", a_log);
}

namespace {

ScanBranch make_branch(Index d, Index d_inner, Index d_state, Rng& rng) {
  ScanBranch b;
  b.in_proj = nn::Linear::create(d, d_inner, rng);
  b.gate_proj = nn::Linear::create(d, d_inner, rng);
  b.dt_proj = nn::Linear::create(d_inner, d_inner, rng);
  b.dt_proj.weight.mutable_value() *= 0.1;
  // Step sizes start log-uniform in [1e-3, 1e-1]; the bias is their inverse softplus.
  std::uniform_real_distribution<double> log_dt(std::log(1e-3), std::log(1e-1));
  Matrix bias(1, d_inner);
  for (Index i = 0; i < d_inner; ++i) {
    double dt = std::exp(log_dt(rng));
    bias(0, i) = dt + std::log(-std::expm1(-dt));
  }
  b.dt_proj.bias.mutable_value() = bias;
  b.b_proj = nn::Linear::create(d_inner, d_state, rng);
  b.c_proj = nn::Linear::create(d_inner, d_state, rng);
  Matrix a_log(d_inner, d_state);
  for (Index i = 0; i < d_inner; ++i) {
    for (Index n = 0; n < d_state; ++n) a_log(i, n) = std::log(static_cast<double>(n + 1));
  }
  b.a_log = Var::parameter(a_log);
  return b;
}

Var run_branch(const Var& seq, const ScanBranch& br, Discretization disc) {
  Var u = br.in_proj(seq);
  Var gate = br.gate_proj(seq);
  Var delta = ad::softplus(br.dt_proj(u));
  Var b = br.b_proj(u);
  Var c = br.c_proj(u);
  Var a = ad::scale(ad::exp(br.a_log), -1.0);
  Var y = selective_scan(u, delta, a, b, c, disc);
  return ad::mul(y, ad::silu(gate));
}

std::vector<Index> reversed_index(Index n) {
  std::vector<Index> idx(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = n - 1 - i;
  return idx;
}

}  // namespace

SsmParams SsmParams::create(Index d, Index d_inner, Index d_state, Rng& rng, Discretization disc) {
  SsmParams p;
  p.forward = make_branch(d, d_inner, d_state, rng);
  p.backward = make_branch(d, d_inner, d_state, rng);
  p.merge = nn::Linear::create(2 * d_inner, d, rng);
  p.discretization = disc;
  return p;
}

void SsmParams::collect(ad::NamedParams& out, const std::string& prefix) const {
  forward.collect(out, prefix + ".fwd");
  backward.collect(out, prefix + ".bwd");
  merge.collect(out, prefix + ".merge");
}

Var selective_scan(const Var& u, const Var& delta, const Var& a, const Var& b, const Var& c,
                   Discretization disc) {
  const Index len = u.rows();
  const Index dim = u.cols();
  const Index ns = a.cols();
  if (len < 1) throw DataError("selective_scan: empty sequence");
  if (delta.rows() != len || delta.cols() != dim || a.rows() != dim || b.rows() != len ||
      c.rows() != len || b.cols() != ns || c.cols() != ns) {
    throw DataError("selective_scan: inconsistent shapes");
  }
  const Matrix& U = u.value();
  const Matrix& DT = delta.value();
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  const Matrix& C = c.value();

  // states[t] is h_t (dim x ns); states[0] is the zero initial state.
  auto states = std::make_shared<std::vector<Matrix>>();
  states->reserve(static_cast<std::size_t>(len + 1));
  states->push_back(Matrix::Zero(dim, ns));
  Matrix y(len, dim);
  for (Index t = 0; t < len; ++t) {
    const Matrix& prev = states->back();
    Matrix h(dim, ns);
    for (Index d = 0; d < dim; ++d) {
      double dt = DT(t, d);
      double x = U(t, d);
      double acc = 0.0;
      for (Index n = 0; n < ns; ++n) {
        double an = A(d, n);
        double da = std::exp(dt * an);
        double db = disc == Discretization::zoh ? (da - 1.0) / an * B(t, n) : dt * B(t, n);
        double hv = da * prev(d, n) + db * x;
        h(d, n) = hv;
        acc += C(t, n) * hv;
      }
      y(t, d) = acc;
    }
    states->push_back(std::move(h));
  }
  ad::check_finite(y, "selective scan output");

  return ad::make_result(std::move(y), {u, delta, a, b, c}, [states, disc](ad::Node& node) {
    auto& pu = *node.parents[0];
    auto& pdt = *node.parents[1];
    auto& pa = *node.parents[2];
    auto& pb = *node.parents[3];
    auto& pc = *node.parents[4];
    const Matrix& U = pu.value;
    const Matrix& DT = pdt.value;
    const Matrix& A = pa.value;
    const Matrix& B = pb.value;
    const Matrix& C = pc.value;
    const Matrix& GY = node.grad;
    const Index len = U.rows();
    const Index dim = U.cols();
    const Index ns = A.cols();

    Matrix gu = Matrix::Zero(len, dim);
    Matrix gdt = Matrix::Zero(len, dim);
    Matrix ga = Matrix::Zero(dim, ns);
    Matrix gb = Matrix::Zero(len, ns);
    Matrix gc = Matrix::Zero(len, ns);
    Matrix gh = Matrix::Zero(dim, ns);  // dL/dh_t flowing back from later steps

    for (Index t = len - 1; t >= 0; --t) {
      const Matrix& h = (*states)[static_cast<std::size_t>(t + 1)];
      const Matrix& prev = (*states)[static_cast<std::size_t>(t)];
      for (Index d = 0; d < dim; ++d) {
        double dt = DT(t, d);
        double x = U(t, d);
        double gy = GY(t, d);
        for (Index n = 0; n < ns; ++n) {
          double an = A(d, n);
          double g = gh(d, n) + gy * C(t, n);
          gc(t, n) += gy * h(d, n);
          double da = std::exp(dt * an);
          double g_da = g * prev(d, n);
          double g_db = g * x;
          double db_coef;  // Bbar / B
          if (disc == Discretization::zoh) {
            db_coef = (da - 1.0) / an;
            gdt(t, d) += g_db * da * B(t, n);
            ga(d, n) += g_db * B(t, n) * (dt * an * da - (da - 1.0)) / (an * an);
          } else {
            db_coef = dt;
            gdt(t, d) += g_db * B(t, n);
          }
          gb(t, n) += g_db * db_coef;
          gu(t, d) += g * db_coef * B(t, n);
          gdt(t, d) += g_da * da * an;
          ga(d, n) += g_da * da * dt;
          gh(d, n) = g * da;
        }
      }
    }
    if (pu.requires_grad) pu.accumulate(gu);
    if (pdt.requires_grad) pdt.accumulate(gdt);
    if (pa.requires_grad) pa.accumulate(ga);
    if (pb.requires_grad) pb.accumulate(gb);
    if (pc.requires_grad) pc.accumulate(gc);
  });
}

Var ssm_scan(const Var& seq, const SsmParams& params, ScanDirection direction) {
  if (seq.rows() < 1) throw DataError("ssm_scan: empty sequence");
  if (direction == ScanDirection::forward) {
    return run_branch(seq, params.forward, params.discretization);
  }
  auto rev = reversed_index(seq.rows());
  Var out = run_branch(ad::gather_rows(seq, rev), params.backward, params.discretization);
  return ad::gather_rows(out, rev);
}

Var bidirectional_block(const Var& seq, const SsmParams& params) {
  Var fwd = ssm_scan(seq, params, ScanDirection::forward);
  Var bwd = ssm_scan(seq, params, ScanDirection::backward);
  return ad::add(seq, params.merge(ad::hcat({fwd, bwd})));
}

GraphView make_view(int n, const data::EdgeList& edges, std::span<const int> degrees, SortOrder order) {
  if (static_cast<int>(degrees.size()) != n) throw DataError("make_view: degree vector length mismatch");
  return {std::make_shared<const SparseMatrix>(normalized_adjacency(n, edges)),
          degree_permutation(degrees, order)};
}

Var subgraph_enhance(const Var& x, const GraphView& view, const GcnParams& gcn, const SsmParams& ssm,
                     Activation act) {
  Var h = gcn_forward(x, view.norm_adj, gcn, act);
  return unsort_rows(bidirectional_block(sort_rows(h, view.order), ssm), view.order);
}

HgreParams HgreParams::create(const HgreConfig& cfg, Rng& rng) {
  HgreParams p;
  Index inner = cfg.dim * cfg.expand;
  p.gcn_sym = GcnParams::create(cfg.dim, cfg.dim, rng);
  p.gcn_herb = GcnParams::create(cfg.dim, cfg.dim, rng);
  p.gcn_global = GcnParams::create(cfg.dim, cfg.dim, rng);
  p.ssm_sym = SsmParams::create(cfg.dim, inner, cfg.d_state, rng, cfg.discretization);
  p.ssm_herb = SsmParams::create(cfg.dim, inner, cfg.d_state, rng, cfg.discretization);
  p.ssm_global = SsmParams::create(cfg.dim, inner, cfg.d_state * cfg.global_state_factor, rng,
                                   cfg.discretization);
  return p;
}

void HgreParams::collect(ad::NamedParams& out, const std::string& prefix) const {
  gcn_sym.collect(out, prefix + ".gcn_sym");
  gcn_herb.collect(out, prefix + ".gcn_herb");
  gcn_global.collect(out, prefix + ".gcn_global");
  ssm_sym.collect(out, prefix + ".ssm_sym");
  ssm_herb.collect(out, prefix + ".ssm_herb");
  ssm_global.collect(out, prefix + ".ssm_global");
}

HgreGraph make_hgre_graph(const data::HeteroGraph& g, SortOrder order) {
  HgreGraph out;
  out.n_sym = g.n_sym;
  out.n_herb = g.n_herb;
  out.sym = make_view(g.n_sym, g.edges_ss, g.sub_degrees_ss, order);
  out.herb = make_view(g.n_herb, g.edges_hh, g.sub_degrees_hh, order);
  out.global = make_view(g.n_nodes(), g.global_edges(), g.degrees, order);
  return out;
}

Var hgre_forward(const Var& x, const HgreGraph& graph, const HgreParams& params, const HgreConfig& cfg) {
  if (x.rows() != graph.n_sym + graph.n_herb) {
    throw DataError("hgre_forward: feature rows " + std::to_string(x.rows()) + " != node count " +
                    std::to_string(graph.n_sym + graph.n_herb));
  }
  std::vector<Var> parts;
  if (graph.n_sym > 0) {
    parts.push_back(subgraph_enhance(ad::slice_rows(x, 0, graph.n_sym), graph.sym, params.gcn_sym,
                                     params.ssm_sym, cfg.activation));
  }
  if (graph.n_herb > 0) {
    parts.push_back(subgraph_enhance(ad::slice_rows(x, graph.n_sym, graph.n_herb), graph.herb,
                                     params.gcn_herb, params.ssm_herb, cfg.activation));
  }
  // Enhanced rows go back to global order (symptoms, then herbs).
  Var enhanced = ad::vcat(parts);
  return subgraph_enhance(enhanced, graph.global, params.gcn_global, params.ssm_global, cfg.activation);
}

}  // namespace fmash::hgre
