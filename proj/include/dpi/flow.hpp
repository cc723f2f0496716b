#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dpi/graph.hpp"
#include "dpi/rng.hpp"
#include "dpi/tensor.hpp"

namespace dpi {

enum class OutputMap { None, Softplus };

inline std::string to_string(OutputMap m) { return m == OutputMap::None ? "none" : "softplus"; }
inline OutputMap output_map_from_string(const std::string& s) {
  if (s == "none") return OutputMap::None;
  if (s == "softplus") return OutputMap::Softplus;
  throw parse_error("unknown output_map '" + s + "'");
}

/// Conditioner: fully connected net with five hidden layers and additive
/// skip connections (h4 += h2, h5 += h1), per-feature affine normalization
/// after each hidden linear, leaky-ReLU activations, zero-initialized
/// output layer so the coupling starts as the identity.
struct Conditioner {
  static constexpr int kLinears = 6;
  static constexpr int kHidden = 5;
  std::array<Tensor, kLinears> W;  // (in x out)
  std::array<Tensor, kLinears> b;  // (1 x out)
  std::array<Tensor, kHidden> an_scale;
  std::array<Tensor, kHidden> an_shift;

  int in_dim() const { return W[0].rows; }
  int out_dim() const { return W[kLinears - 1].cols; }
  int width() const { return W[0].cols; }
};

struct CouplingLayer {
  int na = 0;  // pass-through half; nb = D - na is transformed
  double scale_clamp = 1.5;
  Conditioner cond;
  std::vector<int> perm;      // applied before the coupling
  std::vector<int> inv_perm;  // applied after, so an identity coupling is the identity map
};

struct FlowModel {
  int dim = 0;
  int hidden_width = 0;
  OutputMap output_map = OutputMap::None;
  uint64_t seed = 0;
  double leaky_slope = 0.01;
  bool calibrated = false;
  std::vector<CouplingLayer> layers;
};

namespace detail {

inline double softplus_inv(double x) {
  // inverse of log(1+e^u); requires x > 0
  if (x > 30.0) return x + std::log1p(-std::exp(-x));
  return std::log(std::expm1(x));
}

inline EMat lrelu(EMat m, double slope) {
  for (int i = 0; i < m.size(); ++i) {
    double& v = m.data()[i];
    if (v <= 0.0) v *= slope;
  }
  return m;
}

// u * scale + shift, per column
inline void apply_affine(EMat& u, const Tensor& scale, const Tensor& shift) {
  for (int r = 0; r < u.rows(); ++r)
    for (int c = 0; c < u.cols(); ++c) u(r, c) = u(r, c) * scale.data[c] + shift.data[c];
}

}  // namespace detail

/// Runs the conditioner on A (N x na), returning (N x 2*nb) raw outputs.
/// When `calibrating` is set, each per-feature affine is (re)initialized so
/// its output has zero mean and unit variance on this batch.
inline EMat conditioner_forward(Conditioner& c, const EMat& A, double slope,
                                bool calibrating = false) {
  auto linear = [&](const EMat& in, int k) -> EMat {
    EMat u = in * emap(c.W[k]);
    for (int r = 0; r < u.rows(); ++r)
      for (int j = 0; j < u.cols(); ++j) u(r, j) += c.b[k].data[j];
    return u;
  };
  auto norm_act = [&](EMat u, int k) -> EMat {
    if (calibrating) {
      const int n = static_cast<int>(u.rows());
      for (int j = 0; j < u.cols(); ++j) {
        double mean = u.col(j).mean();
        double var = (u.col(j).array() - mean).square().sum() / n;
        double sd = std::sqrt(var);
        if (sd < 1e-8) sd = 1.0;
        c.an_scale[k].data[j] = 1.0 / sd;
        c.an_shift[k].data[j] = -mean / sd;
      }
    }
    detail::apply_affine(u, c.an_scale[k], c.an_shift[k]);
    return detail::lrelu(std::move(u), slope);
  };
  EMat h1 = norm_act(linear(A, 0), 0);
  EMat h2 = norm_act(linear(h1, 1), 1);
  EMat h3 = norm_act(linear(h2, 2), 2);
  EMat h4 = norm_act(linear(h3, 3), 3) + h2;
  EMat h5 = norm_act(linear(h4, 4), 4) + h1;
  return linear(h5, 5);
}

inline EMat conditioner_forward(const Conditioner& c, const EMat& A, double slope) {
  return conditioner_forward(const_cast<Conditioner&>(c), A, slope, false);
}

/// Clamped log-scale: s = clamp * tanh(raw / clamp), so |s| < clamp.
inline double clamp_scale(double raw, double c) { return c * std::tanh(raw / c); }

/// Applies one coupling layer (without its permutation) to a batch V
/// (N x D). Forward: B' = B*exp(s(A)) + t(A); inverse undoes it. The
/// per-sample log-det contribution (+/- sum s) is accumulated into logdet.
inline void coupling_apply_batch(const CouplingLayer& layer, EMat& V,
                                 Eigen::VectorXd& logdet, bool forward, double slope) {
  const int na = layer.na;
  const int nb = static_cast<int>(V.cols()) - na;
  const EMat A = V.leftCols(na);
  EMat raw = conditioner_forward(layer.cond, A, slope);
  if (!raw.allFinite()) throw numeric_error("coupling: non-finite conditioner output");
  for (int r = 0; r < V.rows(); ++r) {
    double ld = 0.0;
    for (int j = 0; j < nb; ++j) {
      const double s = clamp_scale(raw(r, j), layer.scale_clamp);
      const double t = raw(r, nb + j);
      double& bv = V(r, na + j);
      if (forward) {
        bv = bv * std::exp(s) + t;
        ld += s;
      } else {
        bv = (bv - t) * std::exp(-s);
        ld -= s;
      }
    }
    logdet(r) += ld;
  }
}

/// coupling_apply on a single vector; returns (output, logdet contribution).
inline std::pair<Tensor, double> coupling_apply(const CouplingLayer& layer, const Tensor& v,
                                                bool forward, double slope = 0.01) {
  if (v.rows != 1) throw usage_error("coupling_apply: expected a row vector");
  EMat V = emap(v);
  Eigen::VectorXd ld = Eigen::VectorXd::Zero(1);
  coupling_apply_batch(layer, V, ld, forward, slope);
  Tensor out(1, v.cols);
  EMap(out.data.data(), 1, v.cols) = V;
  return {out, ld(0)};
}

inline FlowModel init_model(int dim, int n_layers, int hidden_width, OutputMap output_map,
                            uint64_t seed) {
  if (dim < 2) throw usage_error("init_model: dim must be >= 2");
  if (n_layers < 1) throw usage_error("init_model: need at least one layer");
  FlowModel m;
  m.dim = dim;
  m.hidden_width = hidden_width > 0 ? hidden_width : std::max(dim, 64);
  m.output_map = output_map;
  m.seed = seed;
  Rng rng(seed);
  const int na = (dim + 1) / 2;
  const int nb = dim - na;
  const int w = m.hidden_width;
  for (int l = 0; l < n_layers; ++l) {
    CouplingLayer layer;
    layer.na = na;
    layer.perm = rng.permutation(dim);
    layer.inv_perm.resize(dim);
    for (int j = 0; j < dim; ++j) layer.inv_perm[layer.perm[j]] = j;
    const int dims_in[Conditioner::kLinears] = {na, w, w, w, w, w};
    const int dims_out[Conditioner::kLinears] = {w, w, w, w, w, 2 * nb};
    for (int k = 0; k < Conditioner::kLinears; ++k) {
      layer.cond.W[k] = Tensor(dims_in[k], dims_out[k]);
      layer.cond.b[k] = Tensor(1, dims_out[k]);
      if (k < Conditioner::kLinears - 1) {
        const double sd = 1.0 / std::sqrt(static_cast<double>(dims_in[k]));
        for (double& v : layer.cond.W[k].data) v = sd * rng.gaussian();
      }
      // final linear stays zero: the fresh model is the identity map
    }
    for (int k = 0; k < Conditioner::kHidden; ++k) {
      layer.cond.an_scale[k] = Tensor(1, w);
      layer.cond.an_scale[k].fill(1.0);
      layer.cond.an_shift[k] = Tensor(1, w);
    }
    m.layers.push_back(std::move(layer));
  }
  return m;
}

struct FlowForwardResult {
  Tensor x;       // N x D
  Tensor logdet;  // N x 1
};

namespace detail {

inline void permute_cols_inplace(EMat& V, const std::vector<int>& perm, EMat& scratch) {
  for (int j = 0; j < V.cols(); ++j) scratch.col(j) = V.col(perm[j]);
  V.swap(scratch);
}

}  // namespace detail

/// x = G(z) with exact log|det dG/dz| per sample. z: N x D.
inline FlowForwardResult flow_forward(const FlowModel& m, const Tensor& z) {
  if (z.cols != m.dim) throw shape_error("flow_forward: z has wrong dimension");
  if (!z.all_finite()) throw numeric_error("flow_forward: non-finite input");
  EMat V = emap(z);
  EMat scratch(V.rows(), V.cols());
  Eigen::VectorXd ld = Eigen::VectorXd::Zero(V.rows());
  for (const CouplingLayer& layer : m.layers) {
    detail::permute_cols_inplace(V, layer.perm, scratch);
    coupling_apply_batch(layer, V, ld, /*forward=*/true, m.leaky_slope);
    detail::permute_cols_inplace(V, layer.inv_perm, scratch);
  }
  if (m.output_map == OutputMap::Softplus) {
    for (int r = 0; r < V.rows(); ++r)
      for (int c = 0; c < V.cols(); ++c) {
        const double u = V(r, c);
        ld(r) -= stable_softplus(-u);  // log sigmoid(u)
        V(r, c) = stable_softplus(u);
      }
  }
  FlowForwardResult res;
  res.x = Tensor(z.rows, z.cols);
  emap(res.x) = V;
  res.logdet = Tensor(z.rows, 1);
  for (int r = 0; r < z.rows; ++r) res.logdet.data[r] = ld(r);
  if (!res.x.all_finite() || !res.logdet.all_finite())
    throw numeric_error("flow_forward: non-finite output");
  return res;
}

/// z = G^{-1}(x). x: N x D.
inline Tensor flow_inverse(const FlowModel& m, const Tensor& x) {
  if (x.cols != m.dim) throw shape_error("flow_inverse: x has wrong dimension");
  EMat V = emap(x);
  EMat work = V;
  if (m.output_map == OutputMap::Softplus) {
    for (int r = 0; r < work.rows(); ++r)
      for (int c = 0; c < work.cols(); ++c) {
        if (work(r, c) <= 0.0)
          throw usage_error("flow_inverse: non-positive entry under softplus output map");
        work(r, c) = detail::softplus_inv(work(r, c));
      }
  }
  EMat scratch(work.rows(), work.cols());
  Eigen::VectorXd ld = Eigen::VectorXd::Zero(work.rows());
  for (auto it = m.layers.rbegin(); it != m.layers.rend(); ++it) {
    detail::permute_cols_inplace(work, it->perm, scratch);
    coupling_apply_batch(*it, work, ld, /*forward=*/false, m.leaky_slope);
    detail::permute_cols_inplace(work, it->inv_perm, scratch);
  }
  Tensor z(x.rows, x.cols);
  emap(z) = work;
  return z;
}

/// log q(x) = log pi(G^{-1}(x)) - logdet, with the log-det taken from the
/// forward pass at z = G^{-1}(x). Returns an N x 1 tensor.
inline Tensor log_density(const FlowModel& m, const Tensor& x) {
  const Tensor z = flow_inverse(m, x);
  const FlowForwardResult fwd = flow_forward(m, z);
  Tensor out(x.rows, 1);
  const double c = -0.5 * m.dim * std::log(2.0 * M_PI);
  for (int r = 0; r < x.rows; ++r) {
    double q = 0.0;
    for (int j = 0; j < m.dim; ++j) q += z.at(r, j) * z.at(r, j);
    out.data[r] = c - 0.5 * q - fwd.logdet.data[r];
  }
  return out;
}

/// N x D batch of standard-normal latents, reproducible from the seed.
inline Tensor sample_latent(int n, int dim, Rng& rng) {
  Tensor z(n, dim);
  for (double& v : z.data) v = rng.gaussian();
  return z;
}

/// Data-dependent init of every per-feature affine from the given batch,
/// in network order (later layers see earlier calibrated outputs).
inline void calibrate(FlowModel& m, const Tensor& first_batch) {
  EMat V = emap(first_batch);
  EMat scratch(V.rows(), V.cols());
  Eigen::VectorXd ld = Eigen::VectorXd::Zero(V.rows());
  for (CouplingLayer& layer : m.layers) {
    detail::permute_cols_inplace(V, layer.perm, scratch);
    const int na = layer.na;
    EMat A = V.leftCols(na);
    EMat raw = conditioner_forward(layer.cond, A, m.leaky_slope, /*calibrating=*/true);
    const int nb = m.dim - na;
    for (int r = 0; r < V.rows(); ++r)
      for (int j = 0; j < nb; ++j) {
        const double s = clamp_scale(raw(r, j), layer.scale_clamp);
        V(r, na + j) = V(r, na + j) * std::exp(s) + raw(r, nb + j);
      }
    detail::permute_cols_inplace(V, layer.inv_perm, scratch);
  }
  m.calibrated = true;
}

// ---------------------------------------------------------------------------
// Training-graph construction

/// Graph nodes mirroring the model parameters, in serialization order.
struct FlowGraphBinding {
  int z = -1;       // placeholder (N x D)
  int x = -1;       // generated batch (N x D)
  int logdet = -1;  // per-sample log-det (N x 1)
  std::vector<int> param_nodes;
};

namespace detail {

inline void for_each_param(FlowModel& m, const std::function<void(Tensor&)>& fn) {
  for (CouplingLayer& layer : m.layers)
    for (int k = 0; k < Conditioner::kLinears; ++k) {
      fn(layer.cond.W[k]);
      fn(layer.cond.b[k]);
      if (k < Conditioner::kHidden) {
        fn(layer.cond.an_scale[k]);
        fn(layer.cond.an_shift[k]);
      }
    }
}

}  // namespace detail

/// Builds the differentiable sampling path x = G(z) into `g`. Parameter
/// nodes are initialized from the model; read_back_params() returns the
/// trained values.
inline FlowGraphBinding build_flow_graph(Graph& g, const FlowModel& m, int batch) {
  FlowGraphBinding bind;
  bind.z = g.placeholder(batch, m.dim, "z");
  int v = bind.z;
  int logdet = -1;
  int li = 0;
  for (const CouplingLayer& layer : m.layers) {
    const std::string tag = "L" + std::to_string(li++);
    v = g.permute_cols(v, layer.perm);
    const int na = layer.na;
    const int nb = m.dim - na;
    int a = g.slice_cols(v, 0, na);
    int bpart = g.slice_cols(v, na, m.dim);
    // conditioner
    std::array<int, Conditioner::kLinears> Wn, bn;
    std::array<int, Conditioner::kHidden> sn, hn;
    for (int k = 0; k < Conditioner::kLinears; ++k) {
      Wn[k] = g.parameter(layer.cond.W[k], tag + ".W" + std::to_string(k));
      bn[k] = g.parameter(layer.cond.b[k], tag + ".b" + std::to_string(k));
      bind.param_nodes.push_back(Wn[k]);
      bind.param_nodes.push_back(bn[k]);
      if (k < Conditioner::kHidden) {
        sn[k] = g.parameter(layer.cond.an_scale[k], tag + ".ans" + std::to_string(k));
        hn[k] = g.parameter(layer.cond.an_shift[k], tag + ".anh" + std::to_string(k));
        bind.param_nodes.push_back(sn[k]);
        bind.param_nodes.push_back(hn[k]);
      }
    }
    auto lin = [&](int in, int k) { return g.add(g.matmul(in, Wn[k]), bn[k]); };
    auto norm_act = [&](int u, int k) {
      return g.leaky_relu(g.add(g.mul(u, sn[k]), hn[k]), m.leaky_slope);
    };
    int h1 = norm_act(lin(a, 0), 0);
    int h2 = norm_act(lin(h1, 1), 1);
    int h3 = norm_act(lin(h2, 2), 2);
    int h4 = g.add(norm_act(lin(h3, 3), 3), h2);
    int h5 = g.add(norm_act(lin(h4, 4), 4), h1);
    int raw = lin(h5, 5);
    int raw_s = g.slice_cols(raw, 0, nb);
    int t = g.slice_cols(raw, nb, 2 * nb);
    const double c = layer.scale_clamp;
    int s = g.scale(g.tanh(g.scale(raw_s, 1.0 / c)), c);
    int bnew = g.add(g.mul(bpart, g.exp(s)), t);
    int ld = g.sum_cols(s);
    logdet = logdet < 0 ? ld : g.add(logdet, ld);
    v = g.permute_cols(g.concat_cols(a, bnew), layer.inv_perm);
  }
  if (m.output_map == OutputMap::Softplus) {
    int ld_out = g.sum_cols(g.neg(g.softplus(g.neg(v))));
    logdet = logdet < 0 ? ld_out : g.add(logdet, ld_out);
    v = g.softplus(v);
  }
  if (logdet < 0) logdet = g.constant(Tensor(batch, 1), "logdet0");
  bind.x = v;
  bind.logdet = logdet;
  return bind;
}

inline void read_back_params(const Graph& g, const FlowGraphBinding& bind, FlowModel& m) {
  size_t i = 0;
  detail::for_each_param(m, [&](Tensor& t) { t = g.value(bind.param_nodes[i++]); });
}

// ---------------------------------------------------------------------------
// Checkpoint I/O: text manifest, a "---" separator, then the raw
// little-endian 64-bit weight blob in declared order.

inline void save_checkpoint(const FlowModel& model, const std::string& path) {
  FlowModel& m = const_cast<FlowModel&>(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw usage_error("save_checkpoint: cannot open " + path);
  size_t count = 0;
  detail::for_each_param(m, [&](Tensor& t) { count += t.size(); });
  out << "dpi-checkpoint v1\n";
  out << "dim=" << m.dim << "\n";
  out << "layers=" << m.layers.size() << "\n";
  out << "hidden_width=" << m.hidden_width << "\n";
  out << "output_map=" << to_string(m.output_map) << "\n";
  out << "seed=" << m.seed << "\n";
  out << "leaky_slope=" << m.leaky_slope << "\n";
  out << "scale_clamp=" << (m.layers.empty() ? 1.5 : m.layers[0].scale_clamp) << "\n";
  out << "calibrated=" << (m.calibrated ? 1 : 0) << "\n";
  for (size_t l = 0; l < m.layers.size(); ++l) {
    out << "perm" << l << "=";
    for (size_t j = 0; j < m.layers[l].perm.size(); ++j)
      out << (j ? "," : "") << m.layers[l].perm[j];
    out << "\n";
  }
  out << "blob_doubles=" << count << "\n";
  out << "---\n";
  detail::for_each_param(m, [&](Tensor& t) {
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  });
}

inline FlowModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw usage_error("load_checkpoint: cannot open " + path);
  std::string line;
  std::getline(in, line);
  if (line != "dpi-checkpoint v1") throw parse_error("checkpoint: bad magic in " + path);
  std::map<std::string, std::string> kv;
  while (std::getline(in, line) && line != "---") {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw parse_error("checkpoint: bad manifest line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const int dim = std::stoi(kv.at("dim"));
  const int n_layers = std::stoi(kv.at("layers"));
  const int width = std::stoi(kv.at("hidden_width"));
  FlowModel m = init_model(dim, n_layers, width, output_map_from_string(kv.at("output_map")),
                           std::stoull(kv.at("seed")));
  m.leaky_slope = std::stod(kv.at("leaky_slope"));
  m.calibrated = kv.at("calibrated") == "1";
  const double clamp = std::stod(kv.at("scale_clamp"));
  for (int l = 0; l < n_layers; ++l) {
    CouplingLayer& layer = m.layers[l];
    layer.scale_clamp = clamp;
    std::stringstream ss(kv.at("perm" + std::to_string(l)));
    std::string tok;
    layer.perm.clear();
    while (std::getline(ss, tok, ',')) layer.perm.push_back(std::stoi(tok));
    if (static_cast<int>(layer.perm.size()) != dim)
      throw parse_error("checkpoint: permutation length mismatch");
    layer.inv_perm.assign(dim, 0);
    for (int j = 0; j < dim; ++j) layer.inv_perm[layer.perm[j]] = j;
  }
  const size_t count = std::stoull(kv.at("blob_doubles"));
  size_t read_count = 0;
  detail::for_each_param(m, [&](Tensor& t) {
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    read_count += t.size();
  });
  if (!in || read_count != count) throw parse_error("checkpoint: truncated weight blob");
  return m;
}

}  // namespace dpi
