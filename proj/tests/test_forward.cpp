#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <complex>

#include "dpi/forward_models.hpp"
#include "dpi/graph.hpp"
#include "dpi/rng.hpp"

using namespace dpi;

namespace {

UVCoverage three_station_time() {
  // one time, stations 0-1-2, legs (0,1), (1,2), (0,2)
  UVCoverage cov;
  cov.push_back({0.0, 0, 1, 1.1e9, -0.4e9, 0.01});
  cov.push_back({0.0, 1, 2, -0.5e9, 0.9e9, 0.01});
  cov.push_back({0.0, 0, 2, 0.6e9, 0.5e9, 0.01});
  return cov;
}

}  // namespace

TEST_CASE("zero-baseline visibility is the total flux") {
  ImageGrid grid(16, 160.0);
  Tensor img = make_ring_image(grid, 2.0);
  UVCoverage cov{{0.0, 0, 1, 0.0, 0.0, 1e-5}};
  DftMatrices F = build_dft_matrix(grid, cov);
  auto vis = apply_dft(F, img);
  CHECK(vis[0].real() == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(std::abs(vis[0].imag()) <= 1e-12);
}

TEST_CASE("delta image gives a unit-magnitude phase ramp") {
  ImageGrid grid(8, 100.0);
  Tensor img(8, 8);
  const int pr = 2, pc = 5;
  img.at(pr, pc) = 1.0;
  Rng rng(3);
  UVCoverage cov;
  for (int k = 0; k < 12; ++k)
    cov.push_back({0.0, 0, 1, rng.uniform(-4e9, 4e9), rng.uniform(-4e9, 4e9), 1e-5});
  DftMatrices F = build_dft_matrix(grid, cov);
  auto vis = apply_dft(F, img);
  for (int k = 0; k < 12; ++k) {
    CHECK(std::abs(vis[k]) == doctest::Approx(1.0).epsilon(1e-12));
    const double expect = -2.0 * M_PI * (cov[k].u * grid.coord_rad(pc) + cov[k].v * grid.coord_rad(pr));
    CHECK(std::abs(wrap_angle(std::arg(vis[k]) - expect)) <= 1e-10);
  }
}

TEST_CASE("dft matches an independent complex-exponential sum") {
  ImageGrid grid(6, 120.0);
  Rng rng(7);
  Tensor img(6, 6);
  for (double& v : img.data) v = std::abs(rng.gaussian());
  UVCoverage cov;
  for (int k = 0; k < 9; ++k)
    cov.push_back({0.0, 0, 1, rng.uniform(-5e9, 5e9), rng.uniform(-5e9, 5e9), 1e-5});
  DftMatrices F = build_dft_matrix(grid, cov);
  auto vis = apply_dft(F, img);
  for (int k = 0; k < 9; ++k) {
    std::complex<double> oracle(0.0, 0.0);
    for (int r = 0; r < 6; ++r)
      for (int c = 0; c < 6; ++c)
        oracle += img.at(r, c) * std::exp(std::complex<double>(
                      0.0, -2.0 * M_PI * (cov[k].u * grid.coord_rad(c) + cov[k].v * grid.coord_rad(r))));
    CHECK(std::abs(vis[k] - oracle) <= 1e-12 * std::abs(oracle) + 1e-14);
  }
}

TEST_CASE("thermal noise std matches its setting") {
  CHECK(thermal_sigma(5000.0, 5000.0, 1e-5) == doctest::Approx(0.05).epsilon(1e-14));
  CHECK_THROWS_AS(thermal_sigma(-1.0, 1.0, 1.0), usage_error);

  ImageGrid grid(4, 100.0);
  Tensor img(4, 4);
  img.fill(0.125);  // flux 2
  UVCoverage cov;
  const int n = 20000;
  for (int k = 0; k < n; ++k) cov.push_back({0.0, 0, 1, 0.0, 0.0, 0.1});
  DftMatrices F = build_dft_matrix(grid, cov);
  auto vis = simulate_visibilities(img, F, cov, unit_gains(), zero_phases(), 42);
  double sr = 0.0, si = 0.0;
  for (const VisRow& r : vis) {
    sr += (r.vis.real() - 2.0) * (r.vis.real() - 2.0);
    si += r.vis.imag() * r.vis.imag();
  }
  CHECK(std::sqrt(sr / n) == doctest::Approx(0.1).epsilon(0.03));
  CHECK(std::sqrt(si / n) == doctest::Approx(0.1).epsilon(0.03));
}

TEST_CASE("triangle and quadrangle enumeration") {
  ArraySpec spec;
  spec.n_stations = 4;
  spec.n_times = 2;
  UVCoverage cov = make_coverage(spec);
  CHECK(cov.size() == 12);  // 6 baselines x 2 times
  CHECK(find_triangles(cov).size() == 8);   // C(4,3) per time
  CHECK(find_quadrangles(cov).size() == 2); // C(4,4) per time
}

TEST_CASE("closure phase matches the direct bispectrum product") {
  UVCoverage cov = three_station_time();
  VisibilitySet vis(3);
  std::complex<double> v01(0.8, 0.3), v12(-0.2, 0.9), v02(0.5, -0.6);
  vis[0] = {0.0, 0, 1, cov[0].u, cov[0].v, v01, 0.01};
  vis[1] = {0.0, 1, 2, cov[1].u, cov[1].v, v12, 0.02};
  vis[2] = {0.0, 0, 2, cov[2].u, cov[2].v, v02, 0.03};
  auto tris = find_triangles(cov);
  REQUIRE(tris.size() == 1);
  auto cp = closure_phases(vis, tris);
  // legs (0,1), (1,2), (2,0): the last is the conjugate of the stored (0,2)
  const double oracle = std::arg(v01 * v12 * std::conj(v02));
  CHECK(cp[0].value == doctest::Approx(oracle).epsilon(1e-14));
  const double var = std::pow(0.01 / std::abs(v01), 2) + std::pow(0.02 / std::abs(v12), 2) +
                     std::pow(0.03 / std::abs(v02), 2);
  CHECK(cp[0].sigma == doctest::Approx(std::sqrt(var)).epsilon(1e-14));
}

TEST_CASE("closure quantities are invariant to station gains and phases") {
  ImageGrid grid(8, 120.0);
  Tensor img = make_ring_image(grid, 2.0);
  ArraySpec spec;
  spec.n_stations = 5;
  spec.n_times = 3;
  UVCoverage cov = make_coverage(spec);
  DftMatrices F = build_dft_matrix(grid, cov);

  auto clean = simulate_visibilities(img, F, cov, unit_gains(), zero_phases(), 0, false);
  StationFn gains = [](double t, int s) { return 0.5 + 0.3 * s + 0.1 * t; };
  StationFn phases = [](double t, int s) { return wrap_angle(1.7 * s - 0.9 * t + 0.4); };
  auto corrupt = simulate_visibilities(img, F, cov, gains, phases, 0, false);

  ClosureSet a = closure_from_vis(clean, cov);
  ClosureSet b = closure_from_vis(corrupt, cov);
  REQUIRE(a.phases.size() == b.phases.size());
  REQUIRE(!a.phases.empty());
  for (size_t i = 0; i < a.phases.size(); ++i)
    CHECK(std::abs(wrap_angle(a.phases[i].value - b.phases[i].value)) <= 1e-10);
  REQUIRE(a.lcamps.size() == b.lcamps.size());
  REQUIRE(!a.lcamps.empty());
  for (size_t i = 0; i < a.lcamps.size(); ++i)
    CHECK(std::abs(a.lcamps[i].value - b.lcamps[i].value) <= 1e-10);
}

TEST_CASE("closure chi^2 is zero at the truth and counts wrapped residuals") {
  ImageGrid grid(8, 120.0);
  Tensor img = make_ring_image(grid, 2.0);
  UVCoverage cov = three_station_time();
  DftMatrices F = build_dft_matrix(grid, cov);
  auto vis = simulate_visibilities(img, F, cov, unit_gains(), zero_phases(), 0, false);
  ClosureSet data = closure_from_vis(vis, cov);
  data.lcamps.clear();  // 3 stations give no quadrangle anyway

  ClosureChi2 at_truth = chi2_closure(img, data, grid, cov);
  CHECK(at_truth.loss <= 1e-20);

  // shift the single phase by pi/2 with sigma = pi/4: residual^2/sigma^2 = 4
  REQUIRE(data.phases.size() == 1);
  data.phases[0].value = wrap_angle(data.phases[0].value + M_PI / 2.0);
  data.phases[0].sigma = M_PI / 4.0;
  ClosureChi2 shifted = chi2_closure(img, data, grid, cov);
  CHECK(shifted.loss == doctest::Approx(4.0).epsilon(1e-10));
  CHECK(shifted.reduced_phase == doctest::Approx(4.0).epsilon(1e-10));
}

TEST_CASE("visibility chi^2 is zero at the truth and 0.5 per sigma-unit residual") {
  ImageGrid grid(8, 120.0);
  Tensor img = make_ring_image(grid, 2.0);
  ArraySpec spec;
  spec.n_stations = 4;
  spec.n_times = 2;
  UVCoverage cov = make_coverage(spec);
  DftMatrices F = build_dft_matrix(grid, cov);
  auto vis = simulate_visibilities(img, F, cov, unit_gains(), zero_phases(), 0, false);
  CHECK(chi2_vis(img, vis, F) <= 1e-18);
  for (VisRow& r : vis) r.vis += std::complex<double>(r.sigma, r.sigma);
  CHECK(chi2_vis(img, vis, F) == doctest::Approx(static_cast<double>(vis.size())).epsilon(1e-12));
}

TEST_CASE("mri full mask is inverted by the scaled adjoint") {
  const int M = 8;
  MRIMask mask;
  mask.M = M;
  mask.mask.assign(M * M, 1);
  mask.nu_frac = 0.0;
  Tensor img = make_phantom_image(M);
  MRIData d = mri_forward(img, mask, 0, false);
  for (int p = 0; p < M * M; ++p) {
    std::complex<double> acc(0.0, 0.0);
    for (int k = 0; k < d.F.rows(); ++k)
      acc += std::conj(std::complex<double>(d.F.re.at(k, p), d.F.im.at(k, p))) * d.y[k];
    CHECK(std::abs(acc.real() / (M * M) - img.data[p]) <= 1e-10);
    CHECK(std::abs(acc.imag()) / (M * M) <= 1e-10);
  }
}

TEST_CASE("mri dc sample is the image sum and sets the noise scale") {
  const int M = 8;
  MRIMask mask;
  mask.M = M;
  mask.mask.assign(M * M, 0);
  mask.mask[(M / 2) * M + M / 2] = 1;  // DC only
  mask.nu_frac = 0.0004;
  Tensor img = make_phantom_image(M);
  double flux = 0.0;
  for (double v : img.data) flux += v;
  MRIData d = mri_forward(img, mask, 0, false);
  REQUIRE(d.y.size() == 1);
  CHECK(d.y[0].real() == doctest::Approx(flux).epsilon(1e-12));
  CHECK(std::abs(d.y[0].imag()) <= 1e-10 * std::abs(flux));
  CHECK(d.noise_std == doctest::Approx(0.0004 * flux).epsilon(1e-12));
}

TEST_CASE("variable-density mask hits the requested acceleration") {
  for (double accel : {3.5, 5.5, 8.4}) {
    MRIMask mk = make_mri_mask(32, accel, 0.0004, 11);
    CHECK(std::abs(mk.acceleration() - accel) <= 0.25);
    // center block is fully sampled
    const int h = std::max(1, 32 / 16);
    for (int r = 16 - h; r <= 16 + h; ++r)
      for (int c = 16 - h; c <= 16 + h; ++c) CHECK(mk.mask[r * 32 + c] == 1);
  }
  CHECK_THROWS_AS(make_mri_mask(32, 0.5, 0.0, 1), usage_error);
}

TEST_CASE("mri chi^2 is zero at the truth") {
  MRIMask mk = make_mri_mask(16, 4.0, 0.0004, 5);
  Tensor img = make_phantom_image(16);
  mk.nu_frac = 0.0004;
  MRIData d = mri_forward(img, mk, 0, false);
  d.noise_std = 0.01;  // noiseless data, nonzero sigma for the quotient
  CHECK(chi2_mri(img, d) <= 1e-14);
}

TEST_CASE("toy potential values") {
  ToyPotential gauss;
  gauss.kind = ToyPotential::Kind::GaussianMixture;
  gauss.components = {GmmComponent{}};
  CHECK(toy_potential(gauss, 0.0, 0.0) == doctest::Approx(std::log(2.0 * M_PI)).epsilon(1e-12));
  CHECK(toy_potential(gauss, 1.0, 2.0) ==
        doctest::Approx(std::log(2.0 * M_PI) + 2.5).epsilon(1e-12));

  ToyPotential bow;
  bow.kind = ToyPotential::Kind::Bowtie;
  const double a = 0.7 / (0.4 * (std::abs(-1.3) + 0.1));
  const double b = -1.3 / 2.0;
  CHECK(toy_potential(bow, -1.3, 0.7) == doctest::Approx(0.5 * a * a + 0.5 * b * b).epsilon(1e-12));

  ToyPotential sine;
  sine.kind = ToyPotential::Kind::Sinusoidal;
  CHECK(toy_potential(sine, 0.8, std::sin(2.0 * M_PI * 0.8 / 4.0)) <= 1e-15);
  CHECK(toy_potential(sine, 0.8, std::sin(2.0 * M_PI * 0.8 / 4.0) + 0.4) ==
        doctest::Approx(0.5).epsilon(1e-12));

  ToyPotential gmm = default_gmm();
  CHECK(toy_potential(gmm, 1.2, 0.0) == doctest::Approx(toy_potential(gmm, -1.2, 0.0)).epsilon(1e-12));
}

TEST_CASE("graph visibility chi^2 matches the eager value per sample") {
  ImageGrid grid(6, 120.0);
  ArraySpec spec;
  spec.n_stations = 4;
  spec.n_times = 2;
  UVCoverage cov = make_coverage(spec);
  DftMatrices F = build_dft_matrix(grid, cov);
  Tensor truth = make_ring_image(grid, 2.0);
  auto vis = simulate_visibilities(truth, F, cov, unit_gains(), zero_phases(), 3);

  Rng rng(9);
  const int N = 4, D = grid.dim();
  Tensor batch(N, D);
  for (double& v : batch.data) v = std::abs(rng.gaussian()) * 0.02;

  Graph g;
  int x = g.parameter(batch, "x");
  int loss = build_vis_chi2(g, x, F, vis);
  g.evaluate();
  for (int n = 0; n < N; ++n) {
    Tensor row(1, D);
    for (int j = 0; j < D; ++j) row.data[j] = batch.at(n, j);
    CHECK(g.value(loss).at(n, 0) ==
          doctest::Approx(chi2_vis(row, vis, F)).epsilon(1e-10));
  }
  auto rep = g.check_gradients(g.mean(loss), 1e-5, 1e-4);
  CHECK(rep.pass);
}

TEST_CASE("graph closure chi^2 matches the eager value per sample") {
  ImageGrid grid(6, 120.0);
  ArraySpec spec;
  spec.n_stations = 5;
  spec.n_times = 2;
  UVCoverage cov = make_coverage(spec);
  DftMatrices F = build_dft_matrix(grid, cov);
  Tensor truth = make_ring_image(grid, 2.0);
  auto vis = simulate_visibilities(truth, F, cov, unit_gains(), zero_phases(), 0, false);
  ClosureSet data = closure_from_vis(vis, cov);

  Rng rng(14);
  const int N = 3, D = grid.dim();
  // images near the truth keep the bispectrum magnitudes away from zero,
  // where the phase curvature would swamp the finite differences
  Tensor batch(N, D);
  for (int n = 0; n < N; ++n)
    for (int j = 0; j < D; ++j)
      batch.at(n, j) = truth.data[j] * (1.0 + 0.1 * rng.gaussian()) + 1e-4;

  Graph g;
  int x = g.parameter(batch, "x");
  int loss = build_closure_chi2(g, x, F, cov, data);
  g.evaluate();
  for (int n = 0; n < N; ++n) {
    Tensor row(1, D);
    for (int j = 0; j < D; ++j) row.data[j] = batch.at(n, j);
    const ClosureChi2 eager = chi2_closure(row, data, grid, cov);
    CHECK(g.value(loss).at(n, 0) == doctest::Approx(eager.loss).epsilon(1e-9));
  }
  auto rep = g.check_gradients(g.mean(loss), 1e-5, 1e-4);
  CHECK(rep.pass);
}

TEST_CASE("graph mri chi^2 matches the eager value per sample") {
  MRIMask mk = make_mri_mask(8, 3.0, 0.0004, 2);
  Tensor truth = make_phantom_image(8);
  MRIData d = mri_forward(truth, mk, 5);

  Rng rng(20);
  const int N = 3, D = 64;
  Tensor batch(N, D);
  for (double& v : batch.data) v = std::abs(rng.gaussian());

  Graph g;
  int x = g.parameter(batch, "x");
  int loss = build_mri_chi2(g, x, d);
  g.evaluate();
  for (int n = 0; n < N; ++n) {
    Tensor row(1, D);
    for (int j = 0; j < D; ++j) row.data[j] = batch.at(n, j);
    CHECK(g.value(loss).at(n, 0) == doctest::Approx(chi2_mri(row, d)).epsilon(1e-10));
  }
}

TEST_CASE("graph toy potentials match the eager values") {
  ToyPotential pots[3] = {default_gmm(), ToyPotential{}, ToyPotential{}};
  pots[1].kind = ToyPotential::Kind::Bowtie;
  pots[2].kind = ToyPotential::Kind::Sinusoidal;
  Rng rng(31);
  for (const ToyPotential& p : pots) {
    Tensor batch(5, 2);
    for (double& v : batch.data) v = rng.gaussian();
    Graph g;
    int x = g.parameter(batch, "x");
    int J = build_toy_potential(g, x, p);
    g.evaluate();
    for (int n = 0; n < 5; ++n)
      CHECK(g.value(J).at(n, 0) ==
            doctest::Approx(toy_potential(p, batch.at(n, 0), batch.at(n, 1))).epsilon(1e-10));
    auto rep = g.check_gradients(g.mean(J), 1e-5, 1e-4);
    CHECK(rep.pass);
  }
}
