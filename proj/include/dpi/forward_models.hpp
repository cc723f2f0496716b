#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <functional>
#include <map>
#include <set>
#include <vector>

#include "dpi/graph.hpp"
#include "dpi/rng.hpp"
#include "dpi/tensor.hpp"

namespace dpi {

constexpr double kUasToRad = M_PI / (180.0 * 3600.0 * 1e6);

/// Square pixel grid. fov is in micro-arcseconds for interferometry;
/// MRI uses integer spatial frequencies and ignores it.
struct ImageGrid {
  int M = 0;
  double fov_uas = 0.0;

  ImageGrid() = default;
  ImageGrid(int m, double fov) : M(m), fov_uas(fov) {
    if (m < 2) throw usage_error("ImageGrid: M must be >= 2");
  }
  double pixel_rad() const { return fov_uas * kUasToRad / M; }
  /// pixel-center coordinate in radians, index 0..M-1, centered on the grid
  double coord_rad(int i) const { return (i - 0.5 * (M - 1)) * pixel_rad(); }
  int dim() const { return M * M; }
};

struct CoverageRow {
  double t = 0.0;
  int st1 = 0, st2 = 0;
  double u = 0.0, v = 0.0;
  double sigma = 0.0;  // thermal noise std per complex component, Jy
};
using UVCoverage = std::vector<CoverageRow>;

struct VisRow {
  double t = 0.0;
  int st1 = 0, st2 = 0;
  double u = 0.0, v = 0.0;
  std::complex<double> vis;
  double sigma = 0.0;
};
using VisibilitySet = std::vector<VisRow>;

struct ClosurePhaseRow {
  double t;
  int a, b, c;
  double value, sigma;
};
struct LogCampRow {
  double t;
  int a, b, c, d;
  double value, sigma;
};
struct ClosureSet {
  std::vector<ClosurePhaseRow> phases;
  std::vector<LogCampRow> lcamps;
};

/// Real/imaginary parts of the K x M^2 under-sampled Fourier matrix.
struct DftMatrices {
  Tensor re, im;  // each K x M^2
  int rows() const { return re.rows; }
};

inline double thermal_sigma(double sefd_a, double sefd_b, double c) {
  if (sefd_a < 0 || sefd_b < 0 || c <= 0) throw usage_error("thermal_sigma: bad arguments");
  return c * std::sqrt(sefd_a * sefd_b);
}

/// Row k = exp(-2*pi*i*(u_k*l + v_k*m)) over pixel centers; the (0,0)
/// row is all ones, so F*x at (0,0) is the total flux.
inline DftMatrices build_dft_matrix(const ImageGrid& grid, const UVCoverage& coverage) {
  const int K = static_cast<int>(coverage.size());
  const int D = grid.dim();
  DftMatrices F{Tensor(K, D), Tensor(K, D)};
  for (int k = 0; k < K; ++k) {
    const double u = coverage[k].u, v = coverage[k].v;
    for (int r = 0; r < grid.M; ++r) {
      const double m = grid.coord_rad(r);
      for (int c = 0; c < grid.M; ++c) {
        const double l = grid.coord_rad(c);
        const double ph = -2.0 * M_PI * (u * l + v * m);
        const int p = r * grid.M + c;
        F.re.at(k, p) = std::cos(ph);
        F.im.at(k, p) = std::sin(ph);
      }
    }
  }
  return F;
}

/// F*x for a flattened image, via the naive matrices.
inline std::vector<std::complex<double>> apply_dft(const DftMatrices& F, const Tensor& x) {
  if (x.size() != static_cast<size_t>(F.re.cols)) throw shape_error("apply_dft: image size mismatch");
  std::vector<std::complex<double>> out(F.rows());
  for (int k = 0; k < F.rows(); ++k) {
    double re = 0.0, im = 0.0;
    for (int p = 0; p < F.re.cols; ++p) {
      re += F.re.at(k, p) * x.data[p];
      im += F.im.at(k, p) * x.data[p];
    }
    out[k] = {re, im};
  }
  return out;
}

using StationFn = std::function<double(double t, int station)>;

inline StationFn unit_gains() {
  return [](double, int) { return 1.0; };
}
inline StationFn zero_phases() {
  return [](double, int) { return 0.0; };
}

/// V = g_a g_b exp(-i(phi_a - phi_b)) (Fx) + n, with independent Gaussian
/// noise of std sigma on each complex component.
inline VisibilitySet simulate_visibilities(const Tensor& x, const DftMatrices& F,
                                           const UVCoverage& coverage, const StationFn& gain,
                                           const StationFn& phase, uint64_t noise_seed,
                                           bool add_noise = true) {
  const auto ideal = apply_dft(F, x);
  Rng rng(noise_seed);
  VisibilitySet out(coverage.size());
  for (size_t k = 0; k < coverage.size(); ++k) {
    const CoverageRow& row = coverage[k];
    const double g = gain(row.t, row.st1) * gain(row.t, row.st2);
    const double dphi = phase(row.t, row.st1) - phase(row.t, row.st2);
    std::complex<double> v = g * std::exp(std::complex<double>(0.0, -dphi)) * ideal[k];
    if (add_noise && row.sigma > 0.0)
      v += std::complex<double>(row.sigma * rng.gaussian(), row.sigma * rng.gaussian());
    out[k] = {row.t, row.st1, row.st2, row.u, row.v, v, row.sigma};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Closure geometry

struct TriangleGeom {
  double t;
  int a, b, c;
  int rows[3];   // coverage rows for legs (a,b), (b,c), (c,a)
  bool conj[3];  // leg stored with opposite orientation
};
struct QuadGeom {
  double t;
  int a, b, c, d;
  int rows[4];  // legs (a,b), (c,d), (a,c), (b,d)
};

namespace detail {

struct BaselineIndex {
  std::map<std::pair<double, std::pair<int, int>>, int> rows;
  // returns coverage row and whether the stored orientation is (s2, s1)
  bool find(double t, int s1, int s2, int* row, bool* conj) const {
    auto it = rows.find({t, {s1, s2}});
    if (it != rows.end()) {
      *row = it->second;
      *conj = false;
      return true;
    }
    it = rows.find({t, {s2, s1}});
    if (it != rows.end()) {
      *row = it->second;
      *conj = true;
      return true;
    }
    return false;
  }
};

inline BaselineIndex index_baselines(const UVCoverage& cov) {
  BaselineIndex idx;
  for (size_t k = 0; k < cov.size(); ++k)
    idx.rows[{cov[k].t, {cov[k].st1, cov[k].st2}}] = static_cast<int>(k);
  return idx;
}

inline std::map<double, std::set<int>> stations_by_time(const UVCoverage& cov) {
  std::map<double, std::set<int>> by_time;
  for (const CoverageRow& r : cov) {
    by_time[r.t].insert(r.st1);
    by_time[r.t].insert(r.st2);
  }
  return by_time;
}

}  // namespace detail

/// All time-coincident station triangles (a<b<c) whose three legs exist.
inline std::vector<TriangleGeom> find_triangles(const UVCoverage& cov) {
  const auto idx = detail::index_baselines(cov);
  std::vector<TriangleGeom> out;
  for (const auto& [t, st] : detail::stations_by_time(cov)) {
    std::vector<int> s(st.begin(), st.end());
    for (size_t i = 0; i < s.size(); ++i)
      for (size_t j = i + 1; j < s.size(); ++j)
        for (size_t k = j + 1; k < s.size(); ++k) {
          TriangleGeom tri{t, s[i], s[j], s[k], {0, 0, 0}, {false, false, false}};
          if (idx.find(t, tri.a, tri.b, &tri.rows[0], &tri.conj[0]) &&
              idx.find(t, tri.b, tri.c, &tri.rows[1], &tri.conj[1]) &&
              idx.find(t, tri.c, tri.a, &tri.rows[2], &tri.conj[2]))
            out.push_back(tri);
        }
  }
  return out;
}

/// One quadrangle per sorted 4-subset (a<b<c<d): |V_ab||V_cd| / (|V_ac||V_bd|).
inline std::vector<QuadGeom> find_quadrangles(const UVCoverage& cov) {
  const auto idx = detail::index_baselines(cov);
  std::vector<QuadGeom> out;
  bool conj;
  for (const auto& [t, st] : detail::stations_by_time(cov)) {
    std::vector<int> s(st.begin(), st.end());
    const size_t n = s.size();
    for (size_t i = 0; i < n; ++i)
      for (size_t j = i + 1; j < n; ++j)
        for (size_t k = j + 1; k < n; ++k)
          for (size_t l = k + 1; l < n; ++l) {
            QuadGeom q{t, s[i], s[j], s[k], s[l], {0, 0, 0, 0}};
            if (idx.find(t, q.a, q.b, &q.rows[0], &conj) &&
                idx.find(t, q.c, q.d, &q.rows[1], &conj) &&
                idx.find(t, q.a, q.c, &q.rows[2], &conj) &&
                idx.find(t, q.b, q.d, &q.rows[3], &conj))
              out.push_back(q);
          }
  }
  return out;
}

inline double wrap_angle(double a) { return std::atan2(std::sin(a), std::cos(a)); }

/// Closure phases with linearized sigma: sigma^2 = sum_i (sigma_i/|V_i|)^2.
inline std::vector<ClosurePhaseRow> closure_phases(const VisibilitySet& vis,
                                                   const std::vector<TriangleGeom>& tris) {
  std::vector<ClosurePhaseRow> out;
  out.reserve(tris.size());
  for (const TriangleGeom& tri : tris) {
    std::complex<double> bisp(1.0, 0.0);
    double var = 0.0;
    for (int leg = 0; leg < 3; ++leg) {
      const VisRow& r = vis[tri.rows[leg]];
      const std::complex<double> v = tri.conj[leg] ? std::conj(r.vis) : r.vis;
      const double mag = std::abs(v);
      if (mag == 0.0) throw numeric_error("closure_phases: degenerate triangle leg");
      bisp *= v;
      var += (r.sigma / mag) * (r.sigma / mag);
    }
    out.push_back({tri.t, tri.a, tri.b, tri.c, std::arg(bisp), std::sqrt(var)});
  }
  return out;
}

/// Log closure amplitudes with linearized sigma over the four legs.
inline std::vector<LogCampRow> log_closure_amplitudes(const VisibilitySet& vis,
                                                      const std::vector<QuadGeom>& quads) {
  std::vector<LogCampRow> out;
  out.reserve(quads.size());
  const double sgn[4] = {1.0, 1.0, -1.0, -1.0};
  for (const QuadGeom& q : quads) {
    double lc = 0.0, var = 0.0;
    for (int leg = 0; leg < 4; ++leg) {
      const VisRow& r = vis[q.rows[leg]];
      const double mag = std::abs(r.vis);
      if (mag == 0.0) throw numeric_error("log_closure_amplitudes: degenerate quadrangle leg");
      lc += sgn[leg] * std::log(mag);
      var += (r.sigma / mag) * (r.sigma / mag);
    }
    out.push_back({q.t, q.a, q.b, q.c, q.d, lc, std::sqrt(var)});
  }
  return out;
}

inline ClosureSet closure_from_vis(const VisibilitySet& vis, const UVCoverage& cov) {
  return {closure_phases(vis, find_triangles(cov)), log_closure_amplitudes(vis, find_quadrangles(cov))};
}

// ---------------------------------------------------------------------------
// Chi-squared losses (eager evaluation, for reporting)

struct ClosureChi2 {
  double loss = 0.0;
  double reduced_phase = 0.0;
  double reduced_lcamp = 0.0;
};

/// Closure loss of Eq-style quadratic residuals with wrapped phase terms,
/// evaluated against model visibilities F x (noiseless, unit gains).
inline ClosureChi2 chi2_closure(const Tensor& x, const ClosureSet& data, const ImageGrid& grid,
                                const UVCoverage& coverage) {
  const DftMatrices F = build_dft_matrix(grid, coverage);
  const auto mvis = apply_dft(F, x);
  VisibilitySet model(coverage.size());
  for (size_t k = 0; k < coverage.size(); ++k)
    model[k] = {coverage[k].t, coverage[k].st1, coverage[k].st2,
                coverage[k].u, coverage[k].v, mvis[k], coverage[k].sigma};
  const auto tris = find_triangles(coverage);
  const auto quads = find_quadrangles(coverage);
  const auto mph = closure_phases(model, tris);
  const auto mlc = log_closure_amplitudes(model, quads);
  if (mph.size() != data.phases.size() || mlc.size() != data.lcamps.size())
    throw usage_error("chi2_closure: data closure sets do not match the coverage geometry");
  ClosureChi2 out;
  for (size_t i = 0; i < mph.size(); ++i) {
    const double d = wrap_angle(data.phases[i].value - mph[i].value);
    out.reduced_phase += d * d / (data.phases[i].sigma * data.phases[i].sigma);
  }
  for (size_t i = 0; i < mlc.size(); ++i) {
    const double d = data.lcamps[i].value - mlc[i].value;
    out.reduced_lcamp += d * d / (data.lcamps[i].sigma * data.lcamps[i].sigma);
  }
  out.loss = out.reduced_phase + out.reduced_lcamp;
  if (!mph.empty()) out.reduced_phase /= static_cast<double>(mph.size());
  if (!mlc.empty()) out.reduced_lcamp /= static_cast<double>(mlc.size());
  return out;
}

/// 0.5 * (y - Fx)^T Sigma^{-1} (y - Fx) over stacked real/imaginary parts.
inline double chi2_vis(const Tensor& x, const VisibilitySet& y, const DftMatrices& F) {
  if (y.size() != static_cast<size_t>(F.rows())) throw shape_error("chi2_vis: size mismatch");
  const auto model = apply_dft(F, x);
  double q = 0.0;
  for (size_t k = 0; k < y.size(); ++k) {
    const double s2 = y[k].sigma * y[k].sigma;
    const double dr = y[k].vis.real() - model[k].real();
    const double di = y[k].vis.imag() - model[k].imag();
    q += (dr * dr + di * di) / s2;
  }
  return 0.5 * q;
}

// ---------------------------------------------------------------------------
// MRI masked Fourier sampling

struct MRIMask {
  int M = 0;
  std::vector<uint8_t> mask;  // M x M, DC centered at (M/2, M/2)
  double nu_frac = 0.0;       // noise std as a fraction of the DC amplitude

  int observed() const {
    int n = 0;
    for (uint8_t v : mask) n += v ? 1 : 0;
    return n;
  }
  double acceleration() const { return static_cast<double>(M) * M / observed(); }
};

/// DFT rows for the observed k-space components. DC row is all ones, so
/// y_DC is the total image sum; the adjoint divided by M^2 inverts a
/// fully sampled transform exactly.
inline DftMatrices build_mri_matrix(const MRIMask& mask) {
  const int M = mask.M;
  int K = mask.observed();
  if (K == 0) throw usage_error("build_mri_matrix: empty mask");
  DftMatrices F{Tensor(K, M * M), Tensor(K, M * M)};
  int k = 0;
  for (int fr = 0; fr < M; ++fr)
    for (int fc = 0; fc < M; ++fc) {
      if (!mask.mask[fr * M + fc]) continue;
      const double fy = fr - M / 2, fx = fc - M / 2;
      for (int r = 0; r < M; ++r)
        for (int c = 0; c < M; ++c) {
          const double ph = -2.0 * M_PI * (fx * c + fy * r) / M;
          F.re.at(k, r * M + c) = std::cos(ph);
          F.im.at(k, r * M + c) = std::sin(ph);
        }
      ++k;
    }
  return F;
}

struct MRIData {
  DftMatrices F;
  std::vector<std::complex<double>> y;
  double noise_std = 0.0;  // nu_frac * |DC amplitude|
};

inline MRIData mri_forward(const Tensor& x, const MRIMask& mask, uint64_t noise_seed,
                           bool add_noise = true) {
  MRIData d;
  d.F = build_mri_matrix(mask);
  d.y = apply_dft(d.F, x);
  double flux = 0.0;
  for (double v : x.data) flux += v;
  d.noise_std = mask.nu_frac * std::abs(flux);
  if (add_noise && d.noise_std > 0.0) {
    Rng rng(noise_seed);
    for (auto& v : d.y)
      v += std::complex<double>(d.noise_std * rng.gaussian(), d.noise_std * rng.gaussian());
  }
  return d;
}

inline double chi2_mri(const Tensor& x, const MRIData& data) {
  const auto model = apply_dft(data.F, x);
  const double s2 = data.noise_std * data.noise_std;
  double q = 0.0;
  for (size_t k = 0; k < data.y.size(); ++k) {
    const double dr = data.y[k].real() - model[k].real();
    const double di = data.y[k].imag() - model[k].imag();
    q += (dr * dr + di * di) / s2;
  }
  return 0.5 * q;
}

/// Variable-density random mask: a fully sampled center block plus random
/// frequencies with radially decaying probability, tuned to hit the
/// requested acceleration factor.
inline MRIMask make_mri_mask(int M, double acceleration, double nu_frac, uint64_t seed) {
  if (acceleration < 1.0) throw usage_error("make_mri_mask: acceleration must be >= 1");
  MRIMask mk;
  mk.M = M;
  mk.nu_frac = nu_frac;
  mk.mask.assign(static_cast<size_t>(M) * M, 0);
  const int target = std::max(1, static_cast<int>(std::lround(M * M / acceleration)));
  const int half_center = std::max(1, M / 16);
  struct Cand {
    double key;
    int idx;
  };
  std::vector<Cand> cands;
  Rng rng(seed);
  int taken = 0;
  for (int r = 0; r < M; ++r)
    for (int c = 0; c < M; ++c) {
      const double fr = r - M / 2, fc = c - M / 2;
      const double rad = std::sqrt(fr * fr + fc * fc);
      const int idx = r * M + c;
      if (std::abs(fr) <= half_center && std::abs(fc) <= half_center) {
        mk.mask[idx] = 1;
        ++taken;
      } else {
        // smaller key = selected earlier; decay favors low frequencies
        cands.push_back({rng.uniform() * (1.0 + rad * rad / M), idx});
      }
    }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.key < b.key; });
  for (const Cand& c : cands) {
    if (taken >= target) break;
    mk.mask[c.idx] = 1;
    ++taken;
  }
  return mk;
}

// ---------------------------------------------------------------------------
// Toy potentials

struct GmmComponent {
  double weight = 1.0;
  double mean[2] = {0.0, 0.0};
  double cov[3] = {1.0, 0.0, 1.0};  // xx, xy, yy
};

struct ToyPotential {
  enum class Kind { GaussianMixture, Bowtie, Sinusoidal };
  Kind kind = Kind::GaussianMixture;
  std::vector<GmmComponent> components;
  // bowtie: J = 0.5*(x2/(pinch*(|x1|+soften)))^2 + 0.5*(x1/arm)^2
  double bowtie_pinch = 0.4, bowtie_soften = 0.1, bowtie_arm = 2.0;
  // sinusoidal: J = 0.5*((x2 - sin(2*pi*x1/period))/width)^2
  double sin_period = 4.0, sin_width = 0.4;
};

inline double toy_potential(const ToyPotential& p, double x1, double x2) {
  switch (p.kind) {
    case ToyPotential::Kind::GaussianMixture: {
      // log-sum-exp over components keeps far-out tails finite
      double acc = 0.0;
      bool first = true;
      for (const GmmComponent& g : p.components) {
        const double det = g.cov[0] * g.cov[2] - g.cov[1] * g.cov[1];
        const double dx = x1 - g.mean[0], dy = x2 - g.mean[1];
        const double q = (g.cov[2] * dx * dx - 2.0 * g.cov[1] * dx * dy + g.cov[0] * dy * dy) / det;
        const double lc = std::log(g.weight / (2.0 * M_PI * std::sqrt(det))) - 0.5 * q;
        acc = first ? lc : acc + stable_softplus(lc - acc);
        first = false;
      }
      return -acc;
    }
    case ToyPotential::Kind::Bowtie: {
      const double a = x2 / (p.bowtie_pinch * (std::abs(x1) + p.bowtie_soften));
      const double b = x1 / p.bowtie_arm;
      return 0.5 * a * a + 0.5 * b * b;
    }
    case ToyPotential::Kind::Sinusoidal: {
      const double r = (x2 - std::sin(2.0 * M_PI * x1 / p.sin_period)) / p.sin_width;
      return 0.5 * r * r;
    }
  }
  return 0.0;
}

inline ToyPotential default_gmm() {
  ToyPotential p;
  p.kind = ToyPotential::Kind::GaussianMixture;
  GmmComponent a, b;
  a.weight = b.weight = 0.5;
  a.mean[0] = -1.2;
  b.mean[0] = 1.2;
  a.cov[0] = a.cov[2] = b.cov[0] = b.cov[2] = 0.25;
  p.components = {a, b};
  return p;
}

// ---------------------------------------------------------------------------
// Differentiable loss builders (x_node: N x D batch of images / points)

/// Per-sample visibility chi^2 (N x 1): 0.5 * sum_k [(ReV-yre)^2 + (ImV-yim)^2] / sigma_k^2
inline int build_vis_chi2(Graph& g, int x_node, const DftMatrices& F, const VisibilitySet& y) {
  const int K = F.rows();
  Tensor FreT(F.re.cols, K), FimT(F.im.cols, K);
  for (int k = 0; k < K; ++k)
    for (int p = 0; p < F.re.cols; ++p) {
      FreT.at(p, k) = F.re.at(k, p);
      FimT.at(p, k) = F.im.at(k, p);
    }
  Tensor yre(1, K), yim(1, K), w(1, K);
  for (int k = 0; k < K; ++k) {
    yre.data[k] = y[k].vis.real();
    yim.data[k] = y[k].vis.imag();
    w.data[k] = 0.5 / (y[k].sigma * y[k].sigma);
  }
  int re = g.matmul(x_node, g.constant(std::move(FreT), "F_re"));
  int im = g.matmul(x_node, g.constant(std::move(FimT), "F_im"));
  int dr = g.sub(re, g.constant(std::move(yre), "y_re"));
  int di = g.sub(im, g.constant(std::move(yim), "y_im"));
  int wn = g.constant(std::move(w), "vis_w");
  return g.sum_cols(g.add(g.mul(g.mul(dr, dr), wn), g.mul(g.mul(di, di), wn)));
}

/// Per-sample closure chi^2 (N x 1) against observed closure data, with
/// wrapped phase residuals.
inline int build_closure_chi2(Graph& g, int x_node, const DftMatrices& F,
                              const UVCoverage& coverage, const ClosureSet& data) {
  const int K = F.rows();
  Tensor FreT(F.re.cols, K), FimT(F.im.cols, K);
  for (int k = 0; k < K; ++k)
    for (int p = 0; p < F.re.cols; ++p) {
      FreT.at(p, k) = F.re.at(k, p);
      FimT.at(p, k) = F.im.at(k, p);
    }
  int re = g.matmul(x_node, g.constant(std::move(FreT), "F_re"));
  int im = g.matmul(x_node, g.constant(std::move(FimT), "F_im"));

  const auto tris = find_triangles(coverage);
  const auto quads = find_quadrangles(coverage);
  if (tris.size() != data.phases.size() || quads.size() != data.lcamps.size())
    throw usage_error("build_closure_chi2: closure data does not match coverage geometry");

  int loss = -1;
  if (!tris.empty()) {
    const int T = static_cast<int>(tris.size());
    std::vector<int> leg_idx[3];
    Tensor leg_sign[3];
    for (int leg = 0; leg < 3; ++leg) {
      leg_idx[leg].resize(T);
      leg_sign[leg] = Tensor(1, T);
      for (int i = 0; i < T; ++i) {
        leg_idx[leg][i] = tris[i].rows[leg];
        leg_sign[leg].data[i] = tris[i].conj[leg] ? -1.0 : 1.0;
      }
    }
    Tensor dval(1, T), dw(1, T);
    for (int i = 0; i < T; ++i) {
      dval.data[i] = data.phases[i].value;
      dw.data[i] = 1.0 / (data.phases[i].sigma * data.phases[i].sigma);
    }
    // bispectrum of the three legs, with conjugation folded into imag signs
    int r1 = g.gather_cols(re, leg_idx[0]);
    int i1 = g.mul(g.gather_cols(im, leg_idx[0]), g.constant(leg_sign[0]));
    int r2 = g.gather_cols(re, leg_idx[1]);
    int i2 = g.mul(g.gather_cols(im, leg_idx[1]), g.constant(leg_sign[1]));
    int r3 = g.gather_cols(re, leg_idx[2]);
    int i3 = g.mul(g.gather_cols(im, leg_idx[2]), g.constant(leg_sign[2]));
    int r12 = g.sub(g.mul(r1, r2), g.mul(i1, i2));
    int i12 = g.add(g.mul(r1, i2), g.mul(i1, r2));
    int rb = g.sub(g.mul(r12, r3), g.mul(i12, i3));
    int ib = g.add(g.mul(r12, i3), g.mul(i12, r3));
    int ph = g.atan2(ib, rb);
    int d = g.sub(g.constant(std::move(dval), "cp_data"), ph);
    int dwrap = g.atan2(g.sin(d), g.cos(d));
    loss = g.sum_cols(g.mul(g.mul(dwrap, dwrap), g.constant(std::move(dw), "cp_w")));
  }
  if (!quads.empty()) {
    const int Q = static_cast<int>(quads.size());
    std::vector<int> leg_idx[4];
    for (int leg = 0; leg < 4; ++leg) {
      leg_idx[leg].resize(Q);
      for (int i = 0; i < Q; ++i) leg_idx[leg][i] = quads[i].rows[leg];
    }
    Tensor dval(1, Q), dw(1, Q);
    for (int i = 0; i < Q; ++i) {
      dval.data[i] = data.lcamps[i].value;
      dw.data[i] = 1.0 / (data.lcamps[i].sigma * data.lcamps[i].sigma);
    }
    auto log_mag = [&](int leg) {
      int r = g.gather_cols(re, leg_idx[leg]);
      int i = g.gather_cols(im, leg_idx[leg]);
      return g.scale(g.log(g.add(g.mul(r, r), g.mul(i, i))), 0.5);
    };
    int lc = g.sub(g.add(log_mag(0), log_mag(1)), g.add(log_mag(2), log_mag(3)));
    int d = g.sub(g.constant(std::move(dval), "lca_data"), lc);
    int term = g.sum_cols(g.mul(g.mul(d, d), g.constant(std::move(dw), "lca_w")));
    loss = loss < 0 ? term : g.add(loss, term);
  }
  if (loss < 0) throw usage_error("build_closure_chi2: no closure terms");
  return loss;
}

/// Per-sample MRI chi^2 (N x 1).
inline int build_mri_chi2(Graph& g, int x_node, const MRIData& data) {
  VisibilitySet y(data.y.size());
  for (size_t k = 0; k < data.y.size(); ++k) {
    y[k].vis = data.y[k];
    y[k].sigma = data.noise_std;
  }
  return build_vis_chi2(g, x_node, data.F, y);
}

/// Per-sample toy potential J(x) (N x 1) for 2-dim x.
inline int build_toy_potential(Graph& g, int x_node, const ToyPotential& p) {
  if (g.value(x_node).cols != 2) throw shape_error("build_toy_potential: x must be N x 2");
  int x1 = g.slice_cols(x_node, 0, 1);
  int x2 = g.slice_cols(x_node, 1, 2);
  switch (p.kind) {
    case ToyPotential::Kind::GaussianMixture: {
      // log-sum-exp chain: acc = acc + softplus(lc - acc)
      int acc = -1;
      for (const GmmComponent& c : p.components) {
        const double det = c.cov[0] * c.cov[2] - c.cov[1] * c.cov[1];
        const double lnorm = std::log(c.weight / (2.0 * M_PI * std::sqrt(det)));
        int dx = g.shift(x1, -c.mean[0]);
        int dy = g.shift(x2, -c.mean[1]);
        int q = g.add(g.sub(g.scale(g.mul(dx, dx), c.cov[2] / det),
                            g.scale(g.mul(dx, dy), 2.0 * c.cov[1] / det)),
                      g.scale(g.mul(dy, dy), c.cov[0] / det));
        int lc = g.shift(g.scale(q, -0.5), lnorm);
        acc = acc < 0 ? lc : g.add(acc, g.softplus(g.sub(lc, acc)));
      }
      return g.neg(acc);
    }
    case ToyPotential::Kind::Bowtie: {
      int denom = g.scale(g.shift(g.abs(x1), p.bowtie_soften), p.bowtie_pinch);
      int a = g.div(x2, denom);
      int b = g.scale(x1, 1.0 / p.bowtie_arm);
      return g.add(g.scale(g.mul(a, a), 0.5), g.scale(g.mul(b, b), 0.5));
    }
    case ToyPotential::Kind::Sinusoidal: {
      int s = g.sin(g.scale(x1, 2.0 * M_PI / p.sin_period));
      int r = g.scale(g.sub(x2, s), 1.0 / p.sin_width);
      return g.scale(g.mul(r, r), 0.5);
    }
  }
  throw usage_error("build_toy_potential: unknown kind");
}

// ---------------------------------------------------------------------------
// Synthetic data helpers

/// Synthetic array: stations scattered in a disk, baselines rotated over
/// the observation to emulate aperture rotation.
struct ArraySpec {
  int n_stations = 9;
  int n_times = 12;
  double max_baseline = 8e9;   // wavelengths
  double rotation_rad = 1.2;   // total baseline rotation over the run
  double sefd = 5000.0;        // per-station, Jy
  double sigma_const = 1e-5;   // proportionality constant of Eq-style thermal noise
  uint64_t seed = 7;
};

inline UVCoverage make_coverage(const ArraySpec& spec) {
  Rng rng(spec.seed);
  std::vector<std::array<double, 2>> pos(spec.n_stations);
  for (auto& p : pos) {
    // rejection-sample the unit disk
    do {
      p[0] = rng.uniform(-1.0, 1.0);
      p[1] = rng.uniform(-1.0, 1.0);
    } while (p[0] * p[0] + p[1] * p[1] > 1.0);
    p[0] *= 0.5 * spec.max_baseline;
    p[1] *= 0.5 * spec.max_baseline;
  }
  UVCoverage cov;
  for (int ti = 0; ti < spec.n_times; ++ti) {
    const double t = static_cast<double>(ti);
    const double th = spec.n_times > 1 ? spec.rotation_rad * ti / (spec.n_times - 1) : 0.0;
    const double ct = std::cos(th), st = std::sin(th);
    for (int a = 0; a < spec.n_stations; ++a)
      for (int b = a + 1; b < spec.n_stations; ++b) {
        const double dx = pos[a][0] - pos[b][0];
        const double dy = pos[a][1] - pos[b][1];
        CoverageRow row;
        row.t = t;
        row.st1 = a;
        row.st2 = b;
        row.u = ct * dx - st * dy;
        row.v = st * dx + ct * dy;
        row.sigma = thermal_sigma(spec.sefd, spec.sefd, spec.sigma_const);
        cov.push_back(row);
      }
  }
  return cov;
}

/// Asymmetric ring ("crescent") test image, normalized to the given flux.
inline Tensor make_ring_image(const ImageGrid& grid, double total_flux, double radius_frac = 0.3,
                              double width_frac = 0.08, double asym = 0.6,
                              double asym_angle = 0.0) {
  Tensor img(grid.M, grid.M);
  const double r0 = radius_frac * grid.M;
  const double w = width_frac * grid.M;
  double sum = 0.0;
  for (int r = 0; r < grid.M; ++r)
    for (int c = 0; c < grid.M; ++c) {
      const double dy = r - 0.5 * (grid.M - 1);
      const double dx = c - 0.5 * (grid.M - 1);
      const double rad = std::sqrt(dx * dx + dy * dy);
      const double ang = std::atan2(dy, dx);
      double v = std::exp(-0.5 * (rad - r0) * (rad - r0) / (w * w)) *
                 (1.0 + asym * std::cos(ang - asym_angle));
      img.at(r, c) = v;
      sum += v;
    }
  for (double& v : img.data) v *= total_flux / sum;
  return img;
}

/// Smooth synthetic "knee-like" phantom: overlapping soft ellipses with a
/// bright interior band; deterministic.
inline Tensor make_phantom_image(int M) {
  Tensor img(M, M);
  auto soft_ellipse = [&](double cx, double cy, double ax, double ay, double angle, double amp) {
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (int r = 0; r < M; ++r)
      for (int c = 0; c < M; ++c) {
        const double x = (c - cx * M) / M, y = (r - cy * M) / M;
        const double xr = ca * x + sa * y, yr = -sa * x + ca * y;
        const double q = (xr / ax) * (xr / ax) + (yr / ay) * (yr / ay);
        img.at(r, c) += amp * std::exp(-4.0 * q * q);
      }
  };
  soft_ellipse(0.5, 0.5, 0.32, 0.42, 0.15, 1.0);
  soft_ellipse(0.45, 0.4, 0.10, 0.22, -0.3, -0.55);
  soft_ellipse(0.62, 0.58, 0.08, 0.16, 0.4, -0.35);
  soft_ellipse(0.52, 0.74, 0.16, 0.06, 0.0, 0.45);
  soft_ellipse(0.38, 0.62, 0.05, 0.05, 0.0, 0.5);
  double lo = 1e9;
  for (double v : img.data) lo = std::min(lo, v);
  for (double& v : img.data) v = v - lo + 0.01;
  return img;
}

}  // namespace dpi
