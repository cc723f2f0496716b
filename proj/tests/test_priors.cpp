#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "dpi/priors.hpp"
#include "dpi/rng.hpp"

using namespace dpi;

namespace {

Tensor random_spd(int D, Rng& rng) {
  Eigen::MatrixXd A(D, D);
  for (int i = 0; i < D; ++i)
    for (int j = 0; j < D; ++j) A(i, j) = rng.gaussian();
  Eigen::MatrixXd S = A.transpose() * A + Eigen::MatrixXd::Identity(D, D);
  Tensor out(D, D);
  emap(out) = S;
  return out;
}

}  // namespace

TEST_CASE("gaussian regularizer matches a direct solve") {
  Rng rng(1);
  const int D = 6;
  Tensor lambda = random_spd(D, rng);
  Tensor mu(1, D);
  for (double& v : mu.data) v = rng.gaussian();
  GaussianPrior p = make_gaussian_prior(mu, lambda);

  Tensor x(1, D);
  for (double& v : x.data) v = rng.gaussian();
  Eigen::VectorXd r(D);
  for (int i = 0; i < D; ++i) r(i) = x.data[i] - mu.data[i];
  const double oracle = 0.5 * r.dot(emap(p.lambda).ldlt().solve(r));
  CHECK(gaussian_reg(x, p) == doctest::Approx(oracle).epsilon(1e-10));
}

TEST_CASE("non positive definite covariance is rejected") {
  Tensor mu(1, 2), bad(2, 2);
  bad.at(0, 0) = 1.0;
  bad.at(1, 1) = -1.0;
  CHECK_THROWS_AS(make_gaussian_prior(mu, bad), usage_error);
}

TEST_CASE("power-spectrum covariance structure") {
  const int M = 8, D = M * M;
  GaussianPrior p = build_power_spectrum_cov(M, 2.5, 1.0, 0.04);

  Eigen::MatrixXd L = emap(p.lambda);
  CHECK((L - L.transpose()).cwiseAbs().maxCoeff() <= 1e-12);
  for (int i = 0; i < D; ++i) CHECK(L(i, i) == doctest::Approx(0.04).epsilon(1e-10));

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(L);
  CHECK(es.eigenvalues().minCoeff() > 0.0);

  // the stored inverse really is the inverse
  Eigen::MatrixXd prod = L * emap(p.lambda_inv);
  CHECK((prod - Eigen::MatrixXd::Identity(D, D)).cwiseAbs().maxCoeff() <= 1e-8);

  // stationarity: entries depend only on the wrapped pixel offset
  auto wrapd = [&](int a, int b) {
    int d = std::abs(a - b) % M;
    return std::min(d, M - d);
  };
  for (int trial = 0; trial < 50; ++trial) {
    Rng rng(trial);
    int pr = (int)rng.below(M), pc = (int)rng.below(M);
    int qr = (int)rng.below(M), qc = (int)rng.below(M);
    int sr = (int)rng.below(M), sc = (int)rng.below(M);
    int tr = (pr - qr + sr + M) % M, tc = (pc - qc + sc + M) % M;
    (void)wrapd;
    CHECK(p.lambda.at(pr * M + pc, qr * M + qc) ==
          doctest::Approx(p.lambda.at(tr * M + tc, sr * M + sc)).epsilon(1e-9));
  }
}

TEST_CASE("kappa zero gives an uncorrelated prior") {
  const int M = 6, D = M * M;
  GaussianPrior p = build_power_spectrum_cov(M, 0.0, 1.0, 0.09);
  for (int i = 0; i < D; ++i)
    for (int j = 0; j < D; ++j) {
      if (i == j)
        CHECK(p.lambda.at(i, j) == doctest::Approx(0.09).epsilon(1e-10));
      else
        CHECK(std::abs(p.lambda.at(i, j)) <= 1e-12);
    }
}

TEST_CASE("covariance eigenvalues follow the spectral density") {
  const int M = 8;
  const double kappa = 2.0, f0 = 1.0, var = 0.04;
  GaussianPrior p = build_power_spectrum_cov(M, kappa, f0, var);
  Eigen::MatrixXd L = emap(p.lambda);
  // quadratic form with an exact DFT eigenvector gives the eigenvalue
  auto eigval = [&](int fr, int fc) {
    Eigen::VectorXd re(M * M), im(M * M);
    for (int r = 0; r < M; ++r)
      for (int c = 0; c < M; ++c) {
        const double ph = 2.0 * M_PI * (fr * r + fc * c) / M;
        re(r * M + c) = std::cos(ph);
        im(r * M + c) = std::sin(ph);
      }
    return (re.dot(L * re) + im.dot(L * im)) / (M * M);
  };
  auto dens = [&](int fr, int fc) {
    const double gr = std::min(fr, M - fr), gc = std::min(fc, M - fc);
    return std::pow(std::sqrt(gr * gr + gc * gc) + f0, -kappa);
  };
  const double scale = eigval(0, 0) / dens(0, 0);
  for (int fr = 0; fr < M; ++fr)
    for (int fc = 0; fc < M; ++fc)
      CHECK(eigval(fr, fc) == doctest::Approx(scale * dens(fr, fc)).epsilon(1e-8));
}

TEST_CASE("prior samples reproduce mean and covariance") {
  Rng rng(77);
  const int D = 4;
  Tensor lambda = random_spd(D, rng);
  Tensor mu(1, D);
  for (double& v : mu.data) v = rng.gaussian();
  GaussianPrior p = make_gaussian_prior(mu, lambda);

  const int n = 40000;
  Eigen::MatrixXd S(n, D);
  Rng srng(5);
  for (int i = 0; i < n; ++i) {
    Tensor s = sample_gaussian_prior(p, srng);
    for (int j = 0; j < D; ++j) S(i, j) = s.data[j];
  }
  Eigen::RowVectorXd mean = S.colwise().mean();
  Eigen::MatrixXd centered = S.rowwise() - mean;
  Eigen::MatrixXd cov = centered.transpose() * centered / (n - 1);
  const double sd0 = std::sqrt(p.lambda.at(0, 0));
  for (int j = 0; j < D; ++j)
    CHECK(std::abs(mean(j) - mu.data[j]) <= 5.0 * sd0 / std::sqrt((double)n) * 3.0);
  for (int i = 0; i < D; ++i)
    for (int j = 0; j < D; ++j)
      CHECK(cov(i, j) == doctest::Approx(p.lambda.at(i, j)).epsilon(0.08));
}

TEST_CASE("smoothness regularizers match naive loops and scale laws") {
  const int M = 5;
  Rng rng(3);
  Tensor x(1, M * M);
  for (double& v : x.data) v = rng.gaussian();

  double tv = 0.0, tsv = 0.0, l1 = 0.0;
  for (int r = 0; r < M; ++r)
    for (int c = 0; c < M; ++c) {
      const double gh = c + 1 < M ? x.data[r * M + c + 1] - x.data[r * M + c] : 0.0;
      const double gv = r + 1 < M ? x.data[(r + 1) * M + c] - x.data[r * M + c] : 0.0;
      tv += std::sqrt(gh * gh + gv * gv + kTvEps * kTvEps);
      tsv += gh * gh + gv * gv;
      l1 += std::abs(x.data[r * M + c]);
    }
  CHECK(smooth_reg(x, SmoothKind::TV, M) == doctest::Approx(tv).epsilon(1e-12));
  CHECK(smooth_reg(x, SmoothKind::TSV, M) == doctest::Approx(tsv).epsilon(1e-12));
  CHECK(smooth_reg(x, SmoothKind::L1, M) == doctest::Approx(l1).epsilon(1e-12));

  // scale laws: TSV quadratic, L1 linear
  Tensor x3 = x;
  for (double& v : x3.data) v *= 3.0;
  CHECK(smooth_reg(x3, SmoothKind::TSV, M) == doctest::Approx(9.0 * tsv).epsilon(1e-12));
  CHECK(smooth_reg(x3, SmoothKind::L1, M) == doctest::Approx(3.0 * l1).epsilon(1e-12));

  // constant image: only the TV floor remains
  Tensor flat(1, M * M);
  flat.fill(0.7);
  CHECK(smooth_reg(flat, SmoothKind::TSV, M) == 0.0);
  CHECK(smooth_reg(flat, SmoothKind::TV, M) == doctest::Approx(M * M * kTvEps).epsilon(1e-9));

  // vertical step edge of height h: TSV = M * h^2
  Tensor step(1, M * M);
  for (int r = 0; r < M; ++r)
    for (int c = 0; c < M; ++c) step.data[r * M + c] = c >= 3 ? 2.5 : 0.0;
  CHECK(smooth_reg(step, SmoothKind::TSV, M) == doctest::Approx(M * 2.5 * 2.5).epsilon(1e-12));
}

TEST_CASE("maximum-entropy regularizer") {
  const int M = 3;
  Tensor p(1, M * M), x(1, M * M);
  p.fill(0.5);
  x = p;
  CHECK(std::abs(smooth_reg(x, SmoothKind::MEM, M, &p)) <= 1e-10);

  x.fill(1.0);
  double oracle = 0.0;
  for (int i = 0; i < M * M; ++i) oracle += std::log((1.0 + kMemEps) / 0.5);
  CHECK(smooth_reg(x, SmoothKind::MEM, M, &p) == doctest::Approx(oracle).epsilon(1e-12));

  Tensor bad = x;
  bad.data[0] = -0.1;
  CHECK_THROWS_AS(smooth_reg(bad, SmoothKind::MEM, M, &p), usage_error);
  Tensor badp = p;
  badp.data[0] = 0.0;
  CHECK_THROWS_AS(smooth_reg(x, SmoothKind::MEM, M, &badp), usage_error);
  CHECK_THROWS_AS(smooth_reg(x, SmoothKind::MEM, M, nullptr), usage_error);
}

TEST_CASE("prior_value combines weighted terms") {
  const int M = 4;
  Rng rng(9);
  Tensor x(1, M * M);
  for (double& v : x.data) v = 0.1 + std::abs(rng.gaussian());

  PriorSpec spec;
  spec.M = M;
  PriorTerm tv;
  tv.kind = PriorTerm::Kind::TV;
  tv.weight = 2.0;
  PriorTerm l1;
  l1.kind = PriorTerm::Kind::L1;
  l1.weight = 0.3;
  spec.terms = {tv, l1};
  const double oracle =
      2.0 * smooth_reg(x, SmoothKind::TV, M) + 0.3 * smooth_reg(x, SmoothKind::L1, M);
  CHECK(prior_value(spec, x) == doctest::Approx(oracle).epsilon(1e-12));

  spec.terms[0].weight = -1.0;
  CHECK_THROWS_AS(prior_value(spec, x), usage_error);
}

TEST_CASE("graph priors match eager values and pass finite differences") {
  const int M = 4, D = M * M, N = 3;
  Rng rng(21);
  Tensor batch(N, D);
  for (double& v : batch.data) v = 0.2 + std::abs(rng.gaussian());

  PriorSpec spec;
  spec.M = M;
  PriorTerm gauss;
  gauss.kind = PriorTerm::Kind::Gaussian;
  gauss.weight = 0.7;
  Tensor mu(1, D);
  for (double& v : mu.data) v = rng.gaussian() * 0.1;
  gauss.gaussian = make_gaussian_prior(mu, random_spd(D, rng));
  PriorTerm tv;
  tv.kind = PriorTerm::Kind::TV;
  tv.weight = 1.3;
  PriorTerm tsv;
  tsv.kind = PriorTerm::Kind::TSV;
  tsv.weight = 0.4;
  PriorTerm l1;
  l1.kind = PriorTerm::Kind::L1;
  l1.weight = 0.2;
  PriorTerm mem;
  mem.kind = PriorTerm::Kind::MEM;
  mem.weight = 0.5;
  mem.mem_prior = Tensor(1, D);
  mem.mem_prior.fill(0.8);
  spec.terms = {gauss, tv, tsv, l1, mem};

  Graph g;
  int x = g.parameter(batch, "x");
  int prior = build_prior(g, x, spec);
  g.evaluate();
  for (int n = 0; n < N; ++n) {
    Tensor row(1, D);
    for (int j = 0; j < D; ++j) row.data[j] = batch.at(n, j);
    CHECK(g.value(prior).at(n, 0) == doctest::Approx(prior_value(spec, row)).epsilon(1e-9));
  }
  auto rep = g.check_gradients(g.mean(prior), 1e-5, 1e-4);
  CHECK(rep.pass);
}

TEST_CASE("empty prior spec contributes zero") {
  Graph g;
  Tensor batch(2, 4);
  batch.fill(1.0);
  int x = g.parameter(batch, "x");
  PriorSpec spec;
  spec.M = 2;
  int prior = build_prior(g, x, spec);
  g.evaluate();
  CHECK(g.value(prior).at(0, 0) == 0.0);
  CHECK(g.value(prior).at(1, 0) == 0.0);
}
