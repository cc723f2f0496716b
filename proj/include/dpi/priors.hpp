#pragma once

#include <Eigen/Cholesky>
#include <cmath>
#include <vector>

#include "dpi/graph.hpp"
#include "dpi/rng.hpp"
#include "dpi/tensor.hpp"

namespace dpi {

/// Gaussian image prior 0.5*(x-mu)^T Lambda^{-1} (x-mu), with Lambda and
/// its inverse both held explicitly (the covariances used here are small
/// or circulant).
struct GaussianPrior {
  Tensor mu;          // 1 x D
  Tensor lambda;      // D x D, SPD
  Tensor lambda_inv;  // D x D
};

inline GaussianPrior make_gaussian_prior(Tensor mu, Tensor lambda) {
  const int D = lambda.rows;
  if (lambda.cols != D || mu.cols != D || mu.rows != 1)
    throw shape_error("make_gaussian_prior: inconsistent shapes");
  Eigen::MatrixXd L = emap(lambda);
  Eigen::LLT<Eigen::MatrixXd> llt(L);
  if (llt.info() != Eigen::Success)
    throw usage_error("make_gaussian_prior: covariance is not positive definite");
  GaussianPrior p;
  p.mu = std::move(mu);
  p.lambda = std::move(lambda);
  p.lambda_inv = Tensor(D, D);
  Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(D, D));
  emap(p.lambda_inv) = inv;
  return p;
}

inline double gaussian_reg(const Tensor& x, const GaussianPrior& p) {
  const int D = p.lambda.rows;
  if (static_cast<int>(x.size()) != D) throw shape_error("gaussian_reg: dimension mismatch");
  Eigen::VectorXd r(D);
  for (int i = 0; i < D; ++i) r(i) = x.data[i] - p.mu.data[i];
  return 0.5 * r.dot(emap(p.lambda_inv) * r);
}

/// Stationary (circulant) covariance diagonalized by the 2D DFT with
/// spectral density (|f| + f0)^(-kappa), scaled so every pixel has the
/// requested variance. The inverse shares the eigenbasis, so it is exact.
inline GaussianPrior build_power_spectrum_cov(int M, double kappa, double f0,
                                              double pixel_variance) {
  if (kappa < 0.0 || f0 <= 0.0 || pixel_variance <= 0.0)
    throw usage_error("build_power_spectrum_cov: bad parameters");
  const int D = M * M;
  // spectral density over centered integer frequencies
  std::vector<double> dens(static_cast<size_t>(M) * M);
  for (int fr = 0; fr < M; ++fr)
    for (int fc = 0; fc < M; ++fc) {
      const double gr = std::min(fr, M - fr);
      const double gc = std::min(fc, M - fc);
      dens[fr * M + fc] = std::pow(std::sqrt(gr * gr + gc * gc) + f0, -kappa);
    }
  // circulant kernels of Lambda and Lambda^{-1}
  auto kernel = [&](bool inverse) {
    std::vector<double> ker(static_cast<size_t>(M) * M, 0.0);
    for (int dr = 0; dr < M; ++dr)
      for (int dc = 0; dc < M; ++dc) {
        double s = 0.0;
        for (int fr = 0; fr < M; ++fr)
          for (int fc = 0; fc < M; ++fc) {
            const double d = dens[fr * M + fc];
            s += (inverse ? 1.0 / d : d) *
                 std::cos(2.0 * M_PI * (fr * dr + fc * dc) / M);
          }
        ker[dr * M + dc] = s / (M * M);
      }
    return ker;
  };
  const auto kf = kernel(false);
  const auto ki = kernel(true);
  const double s = pixel_variance / kf[0];
  GaussianPrior p;
  p.mu = Tensor(1, D);
  p.lambda = Tensor(D, D);
  p.lambda_inv = Tensor(D, D);
  for (int pr = 0; pr < M; ++pr)
    for (int pc = 0; pc < M; ++pc)
      for (int qr = 0; qr < M; ++qr)
        for (int qc = 0; qc < M; ++qc) {
          const int i = pr * M + pc, j = qr * M + qc;
          const int dr = ((pr - qr) % M + M) % M;
          const int dc = ((pc - qc) % M + M) % M;
          p.lambda.at(i, j) = s * kf[dr * M + dc];
          p.lambda_inv.at(i, j) = ki[dr * M + dc] / s;
        }
  return p;
}

/// Draw one sample from N(mu, Lambda) via Cholesky.
inline Tensor sample_gaussian_prior(const GaussianPrior& p, Rng& rng) {
  const int D = p.lambda.rows;
  Eigen::MatrixXd L = emap(p.lambda);
  Eigen::LLT<Eigen::MatrixXd> llt(L);
  Eigen::VectorXd z(D);
  for (int i = 0; i < D; ++i) z(i) = rng.gaussian();
  Eigen::VectorXd x = llt.matrixL() * z;
  Tensor out(1, D);
  for (int i = 0; i < D; ++i) out.data[i] = x(i) + p.mu.data[i];
  return out;
}

// ---------------------------------------------------------------------------
// Smoothness / sparsity regularizers (forward differences, replicate boundary)

enum class SmoothKind { TV, TSV, L1, MEM };

constexpr double kTvEps = 1e-8;
constexpr double kMemEps = 1e-12;

/// x: flattened M x M image. For MEM the prior image p must be > 0 and x >= 0.
inline double smooth_reg(const Tensor& x, SmoothKind kind, int M,
                         const Tensor* mem_prior = nullptr) {
  if (static_cast<int>(x.size()) != M * M) throw shape_error("smooth_reg: size != M^2");
  auto px = [&](int r, int c) { return x.data[r * M + c]; };
  double acc = 0.0;
  switch (kind) {
    case SmoothKind::TV:
    case SmoothKind::TSV:
      for (int r = 0; r < M; ++r)
        for (int c = 0; c < M; ++c) {
          const double gh = c + 1 < M ? px(r, c + 1) - px(r, c) : 0.0;
          const double gv = r + 1 < M ? px(r + 1, c) - px(r, c) : 0.0;
          const double q = gh * gh + gv * gv;
          acc += kind == SmoothKind::TV ? std::sqrt(q + kTvEps * kTvEps) : q;
        }
      return acc;
    case SmoothKind::L1:
      for (double v : x.data) acc += std::abs(v);
      return acc;
    case SmoothKind::MEM: {
      if (!mem_prior || mem_prior->size() != x.size())
        throw usage_error("smooth_reg: MEM needs a prior image");
      for (size_t i = 0; i < x.size(); ++i) {
        if (x.data[i] < 0.0) throw usage_error("smooth_reg: MEM requires x >= 0");
        if (mem_prior->data[i] <= 0.0)
          throw usage_error("smooth_reg: MEM prior image must be > 0");
        acc += x.data[i] * std::log((x.data[i] + kMemEps) / mem_prior->data[i]);
      }
      return acc;
    }
  }
  return acc;
}

struct PriorTerm {
  enum class Kind { Gaussian, TV, TSV, L1, MEM };
  Kind kind = Kind::TV;
  double weight = 0.0;
  GaussianPrior gaussian;  // Kind::Gaussian
  Tensor mem_prior;        // Kind::MEM
};

struct PriorSpec {
  int M = 0;  // image side for the pixel-grid regularizers
  std::vector<PriorTerm> terms;
};

inline double prior_value(const PriorSpec& spec, const Tensor& x) {
  double acc = 0.0;
  for (const PriorTerm& t : spec.terms) {
    if (t.weight < 0.0) throw usage_error("prior weights must be non-negative");
    switch (t.kind) {
      case PriorTerm::Kind::Gaussian: acc += t.weight * gaussian_reg(x, t.gaussian); break;
      case PriorTerm::Kind::TV: acc += t.weight * smooth_reg(x, SmoothKind::TV, spec.M); break;
      case PriorTerm::Kind::TSV: acc += t.weight * smooth_reg(x, SmoothKind::TSV, spec.M); break;
      case PriorTerm::Kind::L1: acc += t.weight * smooth_reg(x, SmoothKind::L1, spec.M); break;
      case PriorTerm::Kind::MEM:
        acc += t.weight * smooth_reg(x, SmoothKind::MEM, spec.M, &t.mem_prior);
        break;
    }
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Differentiable builders (x_node: N x D batch)

namespace detail {

/// Transposed forward-difference matrices (D x D) so that x * DhT gives
/// horizontal differences with replicate (zero-difference) boundary.
inline std::pair<Tensor, Tensor> difference_matrices_t(int M) {
  const int D = M * M;
  Tensor DhT(D, D), DvT(D, D);
  for (int r = 0; r < M; ++r)
    for (int c = 0; c < M; ++c) {
      const int p = r * M + c;
      if (c + 1 < M) {
        DhT.at(r * M + c + 1, p) += 1.0;
        DhT.at(p, p) -= 1.0;
      }
      if (r + 1 < M) {
        DvT.at((r + 1) * M + c, p) += 1.0;
        DvT.at(p, p) -= 1.0;
      }
    }
  return {std::move(DhT), std::move(DvT)};
}

}  // namespace detail

/// Per-sample weighted prior (N x 1).
inline int build_prior(Graph& g, int x_node, const PriorSpec& spec) {
  int acc = -1;
  auto accumulate = [&](int term, double w) {
    int scaled = g.scale(term, w);
    acc = acc < 0 ? scaled : g.add(acc, scaled);
  };
  for (const PriorTerm& t : spec.terms) {
    if (t.weight < 0.0) throw usage_error("prior weights must be non-negative");
    if (t.weight == 0.0) continue;
    switch (t.kind) {
      case PriorTerm::Kind::Gaussian: {
        int r = g.sub(x_node, g.constant(t.gaussian.mu, "prior_mu"));
        int ri = g.matmul(r, g.constant(t.gaussian.lambda_inv, "lambda_inv"));
        accumulate(g.scale(g.sum_cols(g.mul(r, ri)), 0.5), t.weight);
        break;
      }
      case PriorTerm::Kind::TV:
      case PriorTerm::Kind::TSV: {
        auto [DhT, DvT] = detail::difference_matrices_t(spec.M);
        int gh = g.matmul(x_node, g.constant(std::move(DhT), "DhT"));
        int gv = g.matmul(x_node, g.constant(std::move(DvT), "DvT"));
        int q = g.add(g.mul(gh, gh), g.mul(gv, gv));
        if (t.kind == PriorTerm::Kind::TV)
          accumulate(g.sum_cols(g.sqrt(g.shift(q, kTvEps * kTvEps))), t.weight);
        else
          accumulate(g.sum_cols(q), t.weight);
        break;
      }
      case PriorTerm::Kind::L1:
        accumulate(g.sum_cols(g.abs(x_node)), t.weight);
        break;
      case PriorTerm::Kind::MEM: {
        Tensor logp(1, static_cast<int>(t.mem_prior.size()));
        for (size_t i = 0; i < t.mem_prior.size(); ++i) {
          if (t.mem_prior.data[i] <= 0.0)
            throw usage_error("build_prior: MEM prior image must be > 0");
          logp.data[i] = std::log(t.mem_prior.data[i]);
        }
        int lg = g.sub(g.log(g.shift(x_node, kMemEps)), g.constant(std::move(logp), "log_p"));
        accumulate(g.sum_cols(g.mul(x_node, lg)), t.weight);
        break;
      }
    }
  }
  if (acc < 0) {
    const int n = g.value(x_node).rows;
    acc = g.constant(Tensor(n, 1), "prior_zero");
  }
  return acc;
}

}  // namespace dpi
