#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "dpi/flow.hpp"
#include "dpi/forward_models.hpp"
#include "dpi/priors.hpp"
#include "dpi/rng.hpp"
#include "dpi/tensor.hpp"

namespace dpi {

struct SampleStats {
  Tensor mean;  // 1 x D
  Tensor sd;    // 1 x D, unbiased
  Tensor cov;   // D x D, unbiased
};

inline SampleStats sample_stats(const Tensor& samples, bool with_cov = true) {
  const int n = samples.rows, D = samples.cols;
  if (n < 2) throw usage_error("sample_stats: need at least two samples");
  SampleStats s;
  s.mean = Tensor(1, D);
  s.sd = Tensor(1, D);
  ECMap X = emap(samples);
  Eigen::RowVectorXd mu = X.colwise().mean();
  for (int j = 0; j < D; ++j) s.mean.data[j] = mu(j);
  EMat C = X.rowwise() - mu;
  for (int j = 0; j < D; ++j) s.sd.data[j] = std::sqrt(C.col(j).squaredNorm() / (n - 1));
  if (with_cov) {
    s.cov = Tensor(D, D);
    emap(s.cov).noalias() = C.transpose() * C / static_cast<double>(n - 1);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Analytic linear-Gaussian posterior

struct AnalyticPosterior {
  Tensor mean;  // 1 x D
  Tensor cov;   // D x D
};

/// Measurements stacked as interleaved (Re, Im) rows: F (2K x D),
/// y (2K), per-row noise std sigma (2K).
struct StackedLinearData {
  Tensor F;
  std::vector<double> y;
  std::vector<double> sigma;
};

inline StackedLinearData stack_visibilities(const DftMatrices& F, const VisibilitySet& vis) {
  const int K = F.rows(), D = F.re.cols;
  StackedLinearData d;
  d.F = Tensor(2 * K, D);
  d.y.resize(2 * K);
  d.sigma.resize(2 * K);
  for (int k = 0; k < K; ++k) {
    for (int p = 0; p < D; ++p) {
      d.F.at(2 * k, p) = F.re.at(k, p);
      d.F.at(2 * k + 1, p) = F.im.at(k, p);
    }
    d.y[2 * k] = vis[k].vis.real();
    d.y[2 * k + 1] = vis[k].vis.imag();
    d.sigma[2 * k] = d.sigma[2 * k + 1] = vis[k].sigma;
  }
  return d;
}

/// m = mu + Lambda F^T (Sigma + F Lambda F^T)^{-1} (y - F mu)
/// C = Lambda - Lambda F^T (Sigma + F Lambda F^T)^{-1} F Lambda
inline AnalyticPosterior analytic_posterior(const StackedLinearData& data,
                                            const GaussianPrior& prior) {
  const int K = data.F.rows, D = data.F.cols;
  ECMap F = emap(data.F);
  ECMap L = emap(prior.lambda);
  Eigen::VectorXd mu(D), y(K);
  for (int i = 0; i < D; ++i) mu(i) = prior.mu.data[i];
  for (int i = 0; i < K; ++i) y(i) = data.y[i];
  Eigen::MatrixXd LFt = L * F.transpose();
  Eigen::MatrixXd S = F * LFt;
  for (int i = 0; i < K; ++i) S(i, i) += data.sigma[i] * data.sigma[i];
  Eigen::LDLT<Eigen::MatrixXd> ldlt(S);
  if (ldlt.info() != Eigen::Success)
    throw numeric_error("analytic_posterior: singular data covariance");
  Eigen::VectorXd m = mu + LFt * ldlt.solve(y - F * mu);
  Eigen::MatrixXd C = Eigen::MatrixXd(L) - LFt * ldlt.solve(LFt.transpose());
  AnalyticPosterior out;
  out.mean = Tensor(1, D);
  for (int i = 0; i < D; ++i) out.mean.data[i] = m(i);
  out.cov = Tensor(D, D);
  emap(out.cov) = 0.5 * (C + C.transpose());  // symmetrize roundoff
  return out;
}

// ---------------------------------------------------------------------------
// KL estimation

struct KlEstimate {
  double value = 0.0;
  double std_err = 0.0;
  int n = 0;
};

/// Monte-Carlo KL(q || p): mean over flow samples of log q(x) - log p(x).
/// log q comes from the forward pass directly (no inverse needed).
inline KlEstimate kl_monte_carlo(const FlowModel& model,
                                 const std::function<double(const double*)>& log_p, int n,
                                 uint64_t seed) {
  Rng rng(seed);
  const Tensor z = sample_latent(n, model.dim, rng);
  const FlowForwardResult fwd = flow_forward(model, z);
  const double c = -0.5 * model.dim * std::log(2.0 * M_PI);
  double sum = 0.0, sumsq = 0.0;
  for (int r = 0; r < n; ++r) {
    double zz = 0.0;
    for (int j = 0; j < model.dim; ++j) zz += z.at(r, j) * z.at(r, j);
    const double log_q = c - 0.5 * zz - fwd.logdet.data[r];
    const double term = log_q - log_p(&fwd.x.data[static_cast<size_t>(r) * model.dim]);
    sum += term;
    sumsq += term * term;
  }
  KlEstimate est;
  est.n = n;
  est.value = sum / n;
  est.std_err = std::sqrt(std::max(0.0, sumsq / n - est.value * est.value) / n);
  return est;
}

/// log of the trapezoidal quadrature of exp(-J) over [lo,hi]^2. Errors out
/// if the box visibly truncates probability mass.
inline double grid_log_partition(const ToyPotential& p, double lo, double hi, int resolution) {
  if (resolution < 8) throw usage_error("grid_log_partition: resolution too small");
  const int n = resolution;
  const double h = (hi - lo) / (n - 1);
  std::vector<double> J(static_cast<size_t>(n) * n);
  double jmin = 1e300, boundary_min = 1e300;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double v = toy_potential(p, lo + i * h, lo + j * h);
      J[i * static_cast<size_t>(n) + j] = v;
      jmin = std::min(jmin, v);
      if (i == 0 || j == 0 || i == n - 1 || j == n - 1) boundary_min = std::min(boundary_min, v);
    }
  // boundary density must be negligible relative to the peak
  if (std::exp(-(boundary_min - jmin)) >= 1e-10)
    throw usage_error("grid_log_partition: box too small, boundary mass is not negligible");
  double acc = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double w = 1.0;
      if (i == 0 || i == n - 1) w *= 0.5;
      if (j == 0 || j == n - 1) w *= 0.5;
      acc += w * std::exp(-(J[i * static_cast<size_t>(n) + j] - jmin));
    }
  return -jmin + std::log(acc) + 2.0 * std::log(h);
}

/// KL( N(m0,C0) || N(m1,C1) ) in closed form.
inline double gaussian_kl(const Tensor& m0, const Tensor& c0, const Tensor& m1,
                          const Tensor& c1) {
  const int D = c0.rows;
  Eigen::MatrixXd C0 = emap(c0), C1 = emap(c1);
  Eigen::LDLT<Eigen::MatrixXd> l1(C1);
  Eigen::VectorXd d(D);
  for (int i = 0; i < D; ++i) d(i) = m1.data[i] - m0.data[i];
  const double tr = l1.solve(C0).trace();
  const double quad = d.dot(l1.solve(d));
  const double logdet1 = l1.vectorD().array().log().sum();
  Eigen::LDLT<Eigen::MatrixXd> l0(C0);
  Eigen::ArrayXd d0 = l0.vectorD().array();
  if ((d0 <= 0.0).any()) {
    // sample covariances can be numerically semidefinite; jitter slightly
    const double jitter = 1e-10 * C0.trace() / D;
    l0.compute(C0 + jitter * Eigen::MatrixXd::Identity(D, D));
    d0 = l0.vectorD().array();
  }
  const double logdet0 = d0.log().sum();
  return 0.5 * (tr + quad - D + logdet1 - logdet0);
}

/// KL between a Gaussian fit to the samples and the analytic posterior.
inline double gaussian_fit_kl(const Tensor& samples, const AnalyticPosterior& post) {
  const SampleStats st = sample_stats(samples);
  return gaussian_kl(st.mean, st.cov, post.mean, post.cov);
}

// ---------------------------------------------------------------------------
// Sample alignment (closure-mode outputs are flux- and shift-degenerate)

namespace detail {

inline void circular_shift(const double* in, double* out, int M, int dr, int dc) {
  for (int r = 0; r < M; ++r) {
    const int sr = ((r - dr) % M + M) % M;
    for (int c = 0; c < M; ++c) out[r * M + c] = in[sr * M + ((c - dc) % M + M) % M];
  }
}

inline std::pair<int, int> best_shift(const double* img, const double* ref, int M) {
  double best = -1e300;
  int bdr = 0, bdc = 0;
  std::vector<double> tmp(static_cast<size_t>(M) * M);
  for (int dr = 0; dr < M; ++dr)
    for (int dc = 0; dc < M; ++dc) {
      circular_shift(img, tmp.data(), M, dr, dc);
      double x = 0.0;
      for (int i = 0; i < M * M; ++i) x += tmp[i] * ref[i];
      if (x > best) {
        best = x;
        bdr = dr;
        bdc = dc;
      }
    }
  return {bdr, bdc};
}

}  // namespace detail

/// Scales every sample to the target total flux, then circularly shifts it
/// to maximize cross-correlation with the reference; two passes with the
/// reference recomputed (as the running mean) in between.
inline Tensor align_normalize(const Tensor& samples, int M, double flux_target,
                              const Tensor* reference = nullptr) {
  const int n = samples.rows, D = samples.cols;
  if (D != M * M) throw shape_error("align_normalize: D != M^2");
  Tensor out = samples;
  for (int r = 0; r < n; ++r) {
    double flux = 0.0;
    for (int j = 0; j < D; ++j) flux += out.at(r, j);
    if (flux == 0.0) throw usage_error("align_normalize: zero-flux sample");
    const double sc = flux_target / flux;
    for (int j = 0; j < D; ++j) out.at(r, j) *= sc;
  }
  std::vector<double> tmp(static_cast<size_t>(D));
  for (int pass = 0; pass < 2; ++pass) {
    Tensor ref(1, D);
    if (pass == 0 && reference) {
      ref = *reference;
    } else {
      for (int r = 0; r < n; ++r)
        for (int j = 0; j < D; ++j) ref.data[j] += out.at(r, j);
      for (int j = 0; j < D; ++j) ref.data[j] /= n;
    }
    for (int r = 0; r < n; ++r) {
      double* row = &out.data[static_cast<size_t>(r) * D];
      const auto [dr, dc] = detail::best_shift(row, ref.data.data(), M);
      if (dr || dc) {
        detail::circular_shift(row, tmp.data(), M, dr, dc);
        std::copy(tmp.begin(), tmp.end(), row);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// PCA and mode clustering

/// Projection onto the top principal components of the centered samples.
inline Tensor pca_embed(const Tensor& samples, int dims = 2) {
  const int n = samples.rows, D = samples.cols;
  if (n <= dims) throw usage_error("pca_embed: need more samples than dims");
  dims = std::min(dims, D);
  ECMap X = emap(samples);
  Eigen::RowVectorXd mu = X.colwise().mean();
  EMat C = X.rowwise() - mu;
  Eigen::MatrixXd cov = C.transpose() * C / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  Tensor out(n, dims);
  // eigenvalues ascend; take the trailing (largest) columns
  for (int d = 0; d < dims; ++d) {
    Eigen::VectorXd pc = es.eigenvectors().col(D - 1 - d);
    Eigen::VectorXd proj = C * pc;
    for (int r = 0; r < n; ++r) out.at(r, d) = proj(r);
  }
  return out;
}

struct Mode {
  std::vector<int> members;
  Tensor mean, sd, frac_sd;              // 1 x D each
  std::vector<double> chi2_phase;        // per-member reduced chi^2
  std::vector<double> chi2_lcamp;
};

struct ModeReport {
  std::vector<Mode> modes;
  std::vector<int> assignment;  // sample index -> mode
};

namespace detail {

struct KMeansResult {
  std::vector<int> assign;
  double inertia = 0.0;
};

inline KMeansResult kmeans_once(const Tensor& pts, int k, Rng& rng) {
  const int n = pts.rows, d = pts.cols;
  // k-means++ seeding
  std::vector<int> centers_idx;
  centers_idx.push_back(static_cast<int>(rng.below(n)));
  std::vector<double> dist2(n, 1e300);
  auto sqd = [&](int a, int b) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) {
      const double t = pts.at(a, j) - pts.at(b, j);
      s += t * t;
    }
    return s;
  };
  while (static_cast<int>(centers_idx.size()) < k) {
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      dist2[i] = std::min(dist2[i], sqd(i, centers_idx.back()));
      total += dist2[i];
    }
    double target = rng.uniform() * total;
    int pick = n - 1;
    double run = 0.0;
    for (int i = 0; i < n; ++i) {
      run += dist2[i];
      if (run >= target) {
        pick = i;
        break;
      }
    }
    centers_idx.push_back(pick);
  }
  std::vector<std::vector<double>> centers(k, std::vector<double>(d));
  for (int c = 0; c < k; ++c)
    for (int j = 0; j < d; ++j) centers[c][j] = pts.at(centers_idx[c], j);

  KMeansResult res;
  res.assign.assign(n, -1);
  for (int iter = 0; iter < 200; ++iter) {
    bool changed = false;
    for (int i = 0; i < n; ++i) {
      int best = 0;
      double bd = 1e300;
      for (int c = 0; c < k; ++c) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) {
          const double t = pts.at(i, j) - centers[c][j];
          s += t * t;
        }
        if (s < bd) {
          bd = s;
          best = c;
        }
      }
      if (res.assign[i] != best) {
        res.assign[i] = best;
        changed = true;
      }
    }
    for (int c = 0; c < k; ++c) {
      std::fill(centers[c].begin(), centers[c].end(), 0.0);
      int cnt = 0;
      for (int i = 0; i < n; ++i)
        if (res.assign[i] == c) {
          ++cnt;
          for (int j = 0; j < d; ++j) centers[c][j] += pts.at(i, j);
        }
      if (cnt)
        for (int j = 0; j < d; ++j) centers[c][j] /= cnt;
    }
    if (!changed) break;
  }
  res.inertia = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) {
      const double t = pts.at(i, j) - centers[res.assign[i]][j];
      res.inertia += t * t;
    }
  }
  return res;
}

}  // namespace detail

/// Seeded k-means (20 restarts, best inertia) on the top-10 principal
/// components. chi2_fn, when given, supplies (reduced chi^2 phase, reduced
/// chi^2 log-amp) per raw sample for the per-mode histograms.
inline ModeReport cluster_modes(
    const Tensor& samples, int k, uint64_t seed,
    const std::function<std::pair<double, double>(const double*)>& chi2_fn = nullptr) {
  const int n = samples.rows, D = samples.cols;
  if (k < 1) throw usage_error("cluster_modes: k must be >= 1");
  if (k > n) throw usage_error("cluster_modes: k exceeds the sample count");
  const int pcs = std::min({10, D, n - 1});
  const Tensor emb = pca_embed(samples, pcs);
  Rng rng(seed);
  detail::KMeansResult best;
  best.inertia = 1e300;
  for (int restart = 0; restart < 20; ++restart) {
    auto r = detail::kmeans_once(emb, k, rng);
    if (r.inertia < best.inertia) best = std::move(r);
  }
  ModeReport rep;
  rep.assignment = best.assign;
  rep.modes.resize(k);
  for (int i = 0; i < n; ++i) rep.modes[best.assign[i]].members.push_back(i);
  for (Mode& m : rep.modes) {
    if (m.members.size() < 2) {
      if (!m.members.empty()) {
        m.mean = Tensor(1, D);
        for (int j = 0; j < D; ++j) m.mean.data[j] = samples.at(m.members[0], j);
        m.sd = Tensor(1, D);
        m.frac_sd = Tensor(1, D);
      }
    } else {
      Tensor sub(static_cast<int>(m.members.size()), D);
      for (size_t r = 0; r < m.members.size(); ++r)
        for (int j = 0; j < D; ++j) sub.at(static_cast<int>(r), j) = samples.at(m.members[r], j);
      SampleStats st = sample_stats(sub, /*with_cov=*/false);
      m.mean = st.mean;
      m.sd = st.sd;
      m.frac_sd = Tensor(1, D);
      for (int j = 0; j < D; ++j)
        m.frac_sd.data[j] = m.mean.data[j] != 0.0 ? m.sd.data[j] / std::abs(m.mean.data[j]) : 0.0;
    }
    if (chi2_fn) {
      for (int idx : m.members) {
        auto [cp, ca] = chi2_fn(&samples.data[static_cast<size_t>(idx) * D]);
        m.chi2_phase.push_back(cp);
        m.chi2_lcamp.push_back(ca);
      }
    }
  }
  return rep;
}

/// Fraction of pixels with |mean - truth| <= k * std. Zero-std pixels
/// count as covered only on exact agreement.
inline double coverage_fraction(const Tensor& mean, const Tensor& sd, const Tensor& truth,
                                double k) {
  if (mean.size() != sd.size() || mean.size() != truth.size())
    throw shape_error("coverage_fraction: size mismatch");
  int covered = 0;
  for (size_t i = 0; i < mean.size(); ++i) {
    const double err = std::abs(mean.data[i] - truth.data[i]);
    if (sd.data[i] > 0.0 ? err <= k * sd.data[i] : err == 0.0) ++covered;
  }
  return static_cast<double>(covered) / static_cast<double>(mean.size());
}

}  // namespace dpi
