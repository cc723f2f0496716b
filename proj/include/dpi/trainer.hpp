#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dpi/flow.hpp"
#include "dpi/forward_models.hpp"
#include "dpi/graph.hpp"
#include "dpi/priors.hpp"

namespace dpi {

struct TrainConfig {
  int batch = 32;
  int epochs = 1000;  // one optimizer step on one fresh latent batch each
  double lr = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double entropy_weight = 1.0;  // beta
  uint64_t seed = 0;
  double clip_norm = 10.0;  // global-norm gradient clip
  int checkpoint_every = 0;
  std::string checkpoint_path;
  bool anneal_beta = false;  // linear ramp from anneal_from to entropy_weight
  double anneal_from = 1.0;

  void validate() const {
    if (batch < 1 || epochs < 1 || entropy_weight < 0.0)
      throw usage_error("TrainConfig: need batch >= 1, epochs >= 1, beta >= 0");
  }
};

struct LossBreakdown {
  double total = 0.0;
  double data_fit = 0.0;
  double prior = 0.0;
  double neg_logdet = 0.0;  // -mean(logdet), before the beta weight
};

// ---------------------------------------------------------------------------
// Adam with bias correction and global-norm clipping

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // 0 disables clipping
};

struct AdamState {
  long step = 0;
  std::vector<Tensor> m, v;
};

inline void adam_step(std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
                      AdamState& state, const AdamConfig& cfg) {
  if (params.size() != grads.size()) throw usage_error("adam_step: params/grads mismatch");
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->rows, p->cols);
      state.v.emplace_back(p->rows, p->cols);
    }
  }
  double gscale = 1.0;
  if (cfg.clip_norm > 0.0) {
    double sq = 0.0;
    for (const Tensor* g : grads)
      for (double v : g->data) sq += v * v;
    const double norm = std::sqrt(sq);
    if (norm > cfg.clip_norm) gscale = cfg.clip_norm / norm;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    const Tensor& g = *grads[i];
    for (size_t j = 0; j < p.size(); ++j) {
      const double gj = gscale * g.data[j];
      m.data[j] = cfg.beta1 * m.data[j] + (1.0 - cfg.beta1) * gj;
      v.data[j] = cfg.beta2 * v.data[j] + (1.0 - cfg.beta2) * gj * gj;
      p.data[j] -= cfg.lr * (m.data[j] / c1) / (std::sqrt(v.data[j] / c2) + cfg.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// The variational objective

/// Builds a per-sample (N x 1) data-fitting loss on the generated batch.
using LossBuilder = std::function<int(Graph&, int x_node)>;

/// Differentiable DPI objective over a fixed graph: the latent batch and
/// the entropy weight are placeholders, so one graph serves the whole run.
struct Objective {
  Graph g;
  FlowGraphBinding bind;
  int beta_node = -1;
  int data_mean = -1;
  int prior_mean = -1;
  int logdet_mean = -1;
  int total = -1;

  LossBreakdown evaluate(const Tensor& z, double beta) {
    g.set_value(bind.z, z);
    g.set_value(beta_node, Tensor::scalar(beta));
    g.evaluate();
    return breakdown();
  }

  LossBreakdown breakdown() const {
    LossBreakdown b;
    b.data_fit = g.value(data_mean).value();
    b.prior = g.value(prior_mean).value();
    b.neg_logdet = -g.value(logdet_mean).value();
    b.total = g.value(total).value();
    return b;
  }
};

/// (1/N) sum_k [ L(y, f(G(z_k))) + lambda*R(G(z_k)) - beta*logdet_k ];
/// log pi(z_k) is omitted (constant in expectation).
inline std::unique_ptr<Objective> make_dpi_objective(const FlowModel& model, int batch,
                                                     const LossBuilder& data_loss,
                                                     const PriorSpec* prior) {
  auto obj = std::make_unique<Objective>();
  Graph& g = obj->g;
  obj->bind = build_flow_graph(g, model, batch);
  int L = data_loss(g, obj->bind.x);
  int R = prior ? build_prior(g, obj->bind.x, *prior)
                : g.constant(Tensor(batch, 1), "prior_zero");
  obj->beta_node = g.placeholder(1, 1, "beta");
  obj->data_mean = g.mean(L);
  obj->prior_mean = g.mean(R);
  obj->logdet_mean = g.mean(obj->bind.logdet);
  int per_sample = g.sub(g.add(L, R), g.mul(obj->bind.logdet, obj->beta_node));
  obj->total = g.mean(per_sample);
  return obj;
}

/// E[J(G(z))] - beta * mean logdet, the simplified 2D objective.
inline std::unique_ptr<Objective> make_toy_objective(const FlowModel& model, int batch,
                                                     const ToyPotential& potential) {
  return make_dpi_objective(
      model, batch,
      [&potential](Graph& g, int x) { return build_toy_potential(g, x, potential); }, nullptr);
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainResult {
  std::vector<LossBreakdown> history;  // one entry per epoch
};

/// Trains the model in place. Deterministic given cfg.seed: the latent
/// batches, the first-batch calibration, and the update order are all
/// fixed. On a non-finite loss the last good checkpoint is kept on disk
/// and a numeric_error is thrown.
inline TrainResult train(FlowModel& model, const LossBuilder& data_loss, const PriorSpec* prior,
                         const TrainConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  Tensor z = sample_latent(cfg.batch, model.dim, rng);
  if (!model.calibrated) calibrate(model, z);

  auto obj = make_dpi_objective(model, cfg.batch, data_loss, prior);
  Graph& g = obj->g;

  std::vector<Tensor*> params;
  std::vector<const Tensor*> grads;
  for (int id : obj->bind.param_nodes) {
    params.push_back(&g.mutable_leaf(id));
    grads.push_back(&g.grad(id));
  }
  AdamConfig acfg{cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.clip_norm};
  AdamState astate;

  TrainResult result;
  result.history.reserve(cfg.epochs);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (epoch > 0) z = sample_latent(cfg.batch, model.dim, rng);
    double beta = cfg.entropy_weight;
    if (cfg.anneal_beta && cfg.epochs > 1)
      beta = cfg.anneal_from +
             (cfg.entropy_weight - cfg.anneal_from) * epoch / (cfg.epochs - 1);
    LossBreakdown b;
    try {
      b = obj->evaluate(z, beta);
    } catch (const numeric_error& e) {
      read_back_params(g, obj->bind, model);
      throw numeric_error(std::string("train: aborted at epoch ") + std::to_string(epoch) +
                          " (last good checkpoint retained): " + e.what());
    }
    result.history.push_back(b);
    g.backward(obj->total);
    adam_step(params, grads, astate, acfg);
    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_path.empty() &&
        (epoch + 1) % cfg.checkpoint_every == 0) {
      read_back_params(g, obj->bind, model);
      save_checkpoint(model, cfg.checkpoint_path);
    }
  }
  read_back_params(g, obj->bind, model);
  if (!cfg.checkpoint_path.empty()) save_checkpoint(model, cfg.checkpoint_path);
  return result;
}

}  // namespace dpi
