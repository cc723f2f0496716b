#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "dpi/io.hpp"
#include "dpi/rng.hpp"

using namespace dpi;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* tag) {
  fs::path p = fs::temp_directory_path() / (std::string("dpi_cli_test_") + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args) {
  const int rc = std::system((std::string(DPI_CLI_BIN) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("coverage, visibility, and closure csvs round-trip bit-exactly") {
  const fs::path dir = temp_dir("roundtrip");
  Rng rng(11);
  UVCoverage cov;
  VisibilitySet vis;
  std::vector<ClosurePhaseRow> phases;
  std::vector<LogCampRow> lcamps;
  for (int k = 0; k < 25; ++k) {
    CoverageRow c{rng.uniform(0, 10), k % 5, (k + 1) % 5, rng.gaussian() * 1e9,
                  rng.gaussian() * 1e9, std::abs(rng.gaussian())};
    cov.push_back(c);
    vis.push_back({c.t, c.st1, c.st2, c.u, c.v, {rng.gaussian(), rng.gaussian()}, c.sigma});
    phases.push_back({c.t, 0, 1, 2, rng.uniform(-3.14, 3.14), std::abs(rng.gaussian())});
    lcamps.push_back({c.t, 0, 1, 2, 3, rng.gaussian(), std::abs(rng.gaussian())});
  }
  store_coverage(cov, (dir / "c.csv").string());
  store_visibilities(vis, (dir / "v.csv").string());
  store_closure_phases(phases, (dir / "p.csv").string());
  store_log_camps(lcamps, (dir / "l.csv").string());

  const UVCoverage cov2 = load_coverage((dir / "c.csv").string());
  const VisibilitySet vis2 = load_visibilities((dir / "v.csv").string());
  const auto phases2 = load_closure_phases((dir / "p.csv").string());
  const auto lcamps2 = load_log_camps((dir / "l.csv").string());
  REQUIRE(cov2.size() == cov.size());
  REQUIRE(vis2.size() == vis.size());
  REQUIRE(phases2.size() == phases.size());
  REQUIRE(lcamps2.size() == lcamps.size());
  for (size_t k = 0; k < cov.size(); ++k) {
    CHECK(cov2[k].t == cov[k].t);
    CHECK(cov2[k].st1 == cov[k].st1);
    CHECK(cov2[k].st2 == cov[k].st2);
    CHECK(cov2[k].u == cov[k].u);
    CHECK(cov2[k].v == cov[k].v);
    CHECK(cov2[k].sigma == cov[k].sigma);
    CHECK(vis2[k].vis == vis[k].vis);
    CHECK(vis2[k].sigma == vis[k].sigma);
    CHECK(phases2[k].value == phases[k].value);
    CHECK(phases2[k].c == phases[k].c);
    CHECK(lcamps2[k].value == lcamps[k].value);
    CHECK(lcamps2[k].d == lcamps[k].d);
  }
}

TEST_CASE("image csv round-trips exactly, including awkward doubles") {
  const fs::path dir = temp_dir("image");
  Tensor img(2, 2);
  img.data = {1.0 / 3.0, -2.7182818284590452e-17, 6.0221408e23, 0.1};
  store_image(img, (dir / "img.csv").string());
  const Tensor back = load_image((dir / "img.csv").string());
  REQUIRE(back.rows == 2);
  REQUIRE(back.cols == 2);
  for (size_t i = 0; i < img.size(); ++i) CHECK(back.data[i] == img.data[i]);
}

TEST_CASE("loss history and samples csvs round-trip") {
  const fs::path dir = temp_dir("loss");
  std::vector<LossBreakdown> hist(7);
  Rng rng(3);
  for (auto& b : hist) {
    b.data_fit = rng.gaussian();
    b.prior = rng.gaussian();
    b.neg_logdet = rng.gaussian();
    b.total = b.data_fit + b.prior + b.neg_logdet;
  }
  store_loss_history(hist, (dir / "loss.csv").string());
  const auto hist2 = load_loss_history((dir / "loss.csv").string());
  REQUIRE(hist2.size() == hist.size());
  for (size_t i = 0; i < hist.size(); ++i) {
    CHECK(hist2[i].total == hist[i].total);
    CHECK(hist2[i].neg_logdet == hist[i].neg_logdet);
  }

  Tensor samples(5, 3), log_q(5, 1);
  for (auto& v : samples.data) v = rng.gaussian();
  for (auto& v : log_q.data) v = rng.gaussian();
  store_samples(samples, log_q, (dir / "s.csv").string());
  auto [s2, q2] = load_samples((dir / "s.csv").string());
  REQUIRE(s2.rows == 5);
  REQUIRE(s2.cols == 3);
  for (size_t i = 0; i < samples.size(); ++i) CHECK(s2.data[i] == samples.data[i]);
  for (size_t i = 0; i < log_q.size(); ++i) CHECK(q2.data[i] == log_q.data[i]);
}

TEST_CASE("mask csv round-trips and rejects non-binary entries") {
  const fs::path dir = temp_dir("mask");
  MRIMask mk;
  mk.M = 4;
  mk.mask = {1, 0, 0, 1, 0, 1, 1, 0, 1, 1, 1, 1, 0, 0, 0, 1};
  store_mask(mk, (dir / "m.csv").string());
  const MRIMask mk2 = load_mask((dir / "m.csv").string());
  REQUIRE(mk2.M == 4);
  CHECK(mk2.mask == mk.mask);

  write_text(dir / "bad.csv", "1,0\n0,2\n");
  CHECK_THROWS_AS(load_mask((dir / "bad.csv").string()), parse_error);
}

TEST_CASE("malformed csv rows raise parse errors naming file and line") {
  const fs::path dir = temp_dir("malformed");
  write_text(dir / "cov.csv", "t,st1,st2,u,v,sigma\n0,0,1,1e9,2e9,0.1\n0,0,oops,1e9,2e9,0.1\n");
  try {
    load_coverage((dir / "cov.csv").string());
    FAIL("expected parse_error");
  } catch (const parse_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("cov.csv:3") != std::string::npos);
    CHECK(msg.find("oops") != std::string::npos);
  }

  write_text(dir / "img.csv", "1,2\n3\n");
  CHECK_THROWS_AS(load_image((dir / "img.csv").string()), parse_error);

  write_text(dir / "vis.csv", "t,u,v\n");
  CHECK_THROWS_AS(load_visibilities((dir / "vis.csv").string()), parse_error);
}

TEST_CASE("run config json round-trips every field") {
  RunConfig c;
  c.mode = "closure";
  c.M = 24;
  c.fov_uas = 123.0;
  c.flux = 1.5;
  c.layers = 48;
  c.hidden_width = 96;
  c.output_map = "softplus";
  c.model_seed = 9;
  c.array.n_stations = 7;
  c.array.sigma_const = 2e-5;
  c.noise_seed = 17;
  c.mri_acceleration = 5.5;
  c.mri_noise_frac = 0.0008;
  c.mask_seed = 21;
  c.toy_potential = "bowtie";
  c.beta_grid = {0.5, 1.0, 2.0};
  c.toy_box = 8.0;
  c.toy_grid = 600;
  RunConfig::PriorTermConfig g;
  g.kind = "gaussian";
  g.weight = 2.0;
  g.kappa = 3.0;
  g.f0 = 1.5;
  g.pixel_variance = 0.02;
  c.prior_terms = {g};
  c.train.epochs = 1234;
  c.train.entropy_weight = 0.5;
  c.train.anneal_beta = true;
  c.n_samples = 512;
  c.cluster_k = 2;
  c.sample_seed = 31;
  c.cluster_seed = 32;
  c.output_dir = "somewhere";
  c.truth_image = "t.csv";
  c.coverage_path = "cov.csv";
  c.checkpoint_path = "ck.bin";

  const RunConfig back = config_from_json(config_to_json(c));
  CHECK(back.mode == c.mode);
  CHECK(back.M == c.M);
  CHECK(back.fov_uas == c.fov_uas);
  CHECK(back.flux == c.flux);
  CHECK(back.layers == c.layers);
  CHECK(back.hidden_width == c.hidden_width);
  CHECK(back.output_map == c.output_map);
  CHECK(back.model_seed == c.model_seed);
  CHECK(back.array.n_stations == c.array.n_stations);
  CHECK(back.array.sigma_const == c.array.sigma_const);
  CHECK(back.noise_seed == c.noise_seed);
  CHECK(back.mri_acceleration == c.mri_acceleration);
  CHECK(back.mri_noise_frac == c.mri_noise_frac);
  CHECK(back.mask_seed == c.mask_seed);
  CHECK(back.toy_potential == c.toy_potential);
  CHECK(back.beta_grid == c.beta_grid);
  CHECK(back.toy_box == c.toy_box);
  CHECK(back.toy_grid == c.toy_grid);
  REQUIRE(back.prior_terms.size() == 1);
  CHECK(back.prior_terms[0].kind == "gaussian");
  CHECK(back.prior_terms[0].weight == 2.0);
  CHECK(back.prior_terms[0].kappa == 3.0);
  CHECK(back.prior_terms[0].f0 == 1.5);
  CHECK(back.prior_terms[0].pixel_variance == 0.02);
  CHECK(back.train.epochs == c.train.epochs);
  CHECK(back.train.entropy_weight == c.train.entropy_weight);
  CHECK(back.train.anneal_beta == c.train.anneal_beta);
  CHECK(back.n_samples == c.n_samples);
  CHECK(back.cluster_k == c.cluster_k);
  CHECK(back.sample_seed == c.sample_seed);
  CHECK(back.cluster_seed == c.cluster_seed);
  CHECK(back.output_dir == c.output_dir);
  CHECK(back.truth_image == c.truth_image);
  CHECK(back.coverage_path == c.coverage_path);
  CHECK(back.checkpoint_path == c.checkpoint_path);
}

TEST_CASE("config validation catches bad values") {
  RunConfig c;
  c.mode = "nope";
  CHECK_THROWS_AS(c.validate(), usage_error);
  c.mode = "vis";
  c.output_map = "tanh";
  CHECK_THROWS_AS(c.validate(), usage_error);
  c.output_map = "none";
  c.prior_terms.push_back({});
  c.prior_terms[0].kind = "gaussian";
  c.prior_terms[0].weight = -1.0;
  CHECK_THROWS_AS(c.validate(), usage_error);
}

TEST_CASE("fnv1a-64 checksum matches an independent reference") {
  // reference: hash of "hello" under FNV-1a 64 is a published test vector
  const fs::path dir = temp_dir("fnv");
  write_text(dir / "f.txt", "hello");
  CHECK(fnv1a64_file((dir / "f.txt").string()) == 0xa430d84680aabd0bull);
  // independent byte-by-byte reference on random content
  Rng rng(5);
  std::string content;
  for (int i = 0; i < 1000; ++i) content += static_cast<char>(rng.below(256));
  std::ofstream(dir / "g.bin", std::ios::binary).write(content.data(), content.size());
  uint64_t h = 14695981039346656037ull;
  for (char ch : content) {
    h ^= static_cast<unsigned char>(ch);
    h *= 1099511628211ull;
  }
  CHECK(fnv1a64_file((dir / "g.bin").string()) == h);
}

TEST_CASE("pgm writer emits a valid 16-bit header and payload size") {
  const fs::path dir = temp_dir("pgm");
  Tensor img(3, 4);
  for (size_t i = 0; i < img.size(); ++i) img.data[i] = static_cast<double>(i);
  store_pgm(img, (dir / "i.pgm").string());
  const std::string raw = read_text(dir / "i.pgm");
  CHECK(raw.rfind("P5\n4 3\n65535\n", 0) == 0);
  CHECK(raw.size() == std::string("P5\n4 3\n65535\n").size() + 2 * img.size());
  // max pixel maps to 65535 (big-endian)
  CHECK(static_cast<unsigned char>(raw[raw.size() - 2]) == 0xff);
  CHECK(static_cast<unsigned char>(raw[raw.size() - 1]) == 0xff);
}

TEST_CASE("cli: exit codes for usage, config, and missing-file errors") {
  const fs::path dir = temp_dir("exit");
  CHECK(run_cli("definitely-not-a-subcommand") == 2);
  CHECK(run_cli("train --no-such-flag") == 2);
  CHECK(run_cli("train --config " + (dir / "missing.json").string()) == 3);
  write_text(dir / "broken.json", "{ not json");
  CHECK(run_cli("train --config " + (dir / "broken.json").string()) == 3);
  write_text(dir / "badmode.json", "{\"mode\": \"warp\"}");
  CHECK(run_cli("train --config " + (dir / "badmode.json").string()) == 3);
}

TEST_CASE("cli: noiseless simulate gives exactly zero truth chi^2") {
  const fs::path dir = temp_dir("chi2");
  nlohmann::json j;
  j["mode"] = "vis";
  j["grid"] = {{"M", 8}, {"fov_uas", 160.0}, {"flux", 2.0}};
  j["array"] = {{"n_stations", 4}, {"n_times", 3}};
  j["noise_seed"] = 0;  // no noise
  j["files"] = {{"output_dir", (dir / "out").string()}};
  write_text(dir / "cfg.json", j.dump());
  REQUIRE(run_cli("simulate --config " + (dir / "cfg.json").string()) == 0);
  REQUIRE(run_cli("stats --chi2 --config " + (dir / "cfg.json").string()) == 0);
  // chi2.csv: key,value rows
  std::ifstream in(dir / "out" / "chi2.csv");
  std::string header, row;
  REQUIRE(std::getline(in, header));
  REQUIRE(std::getline(in, row));
  CHECK(row == "reduced_chi2_vis,0");
}

TEST_CASE("cli: every run writes a manifest with checksums that match the files") {
  const fs::path dir = temp_dir("manifest");
  nlohmann::json j;
  j["mode"] = "vis";
  j["grid"] = {{"M", 6}, {"fov_uas", 160.0}, {"flux", 2.0}};
  j["array"] = {{"n_stations", 4}, {"n_times", 2}};
  j["noise_seed"] = 5;
  j["files"] = {{"output_dir", (dir / "out").string()}};
  write_text(dir / "cfg.json", j.dump());
  REQUIRE(run_cli("simulate --config " + (dir / "cfg.json").string()) == 0);

  const auto man = nlohmann::json::parse(read_text(dir / "out" / "manifest.json"));
  CHECK(man.at("version") == kVersion);
  CHECK(man.at("command") == "simulate");
  CHECK(man.at("config").at("mode") == "vis");
  const auto& files = man.at("files");
  REQUIRE(files.contains("vis.csv"));
  REQUIRE(files.contains("coverage.csv"));
  REQUIRE(files.contains("truth.csv"));
  for (auto it = files.begin(); it != files.end(); ++it) {
    char hex[20];
    std::snprintf(hex, sizeof hex, "%016llx",
                  static_cast<unsigned long long>(fnv1a64_file((dir / "out" / it.key()).string())));
    CHECK(it.value().get<std::string>() == hex);
  }
}

TEST_CASE("cli: training twice produces byte-identical loss history and checkpoint") {
  const fs::path dir = temp_dir("determinism");
  nlohmann::json j;
  j["mode"] = "vis";
  j["grid"] = {{"M", 4}, {"fov_uas", 160.0}, {"flux", 2.0}};
  j["model"] = {{"layers", 2}, {"hidden_width", 16}, {"output_map", "softplus"}, {"seed", 1}};
  j["array"] = {{"n_stations", 4}, {"n_times", 2}};
  j["noise_seed"] = 5;
  j["prior"] = {{{"kind", "tsv"}, {"weight", 1.0}}};
  j["train"] = {{"batch", 4}, {"epochs", 12}, {"lr", 1e-3}, {"seed", 2}};
  j["files"] = {{"output_dir", (dir / "out").string()}};
  write_text(dir / "cfg.json", j.dump());
  REQUIRE(run_cli("simulate --config " + (dir / "cfg.json").string()) == 0);

  REQUIRE(run_cli("train --config " + (dir / "cfg.json").string()) == 0);
  const std::string loss1 = read_text(dir / "out" / "loss.csv");
  const std::string ck1 = read_text(dir / "out" / "checkpoint.bin");
  REQUIRE(run_cli("train --config " + (dir / "cfg.json").string()) == 0);
  CHECK(read_text(dir / "out" / "loss.csv") == loss1);
  CHECK(read_text(dir / "out" / "checkpoint.bin") == ck1);
  CHECK(!loss1.empty());
  CHECK(!ck1.empty());

  // sample twice from the same checkpoint: identical samples csv
  REQUIRE(run_cli("sample --n 16 --config " + (dir / "cfg.json").string()) == 0);
  const std::string s1 = read_text(dir / "out" / "samples.csv");
  REQUIRE(run_cli("sample --n 16 --config " + (dir / "cfg.json").string()) == 0);
  CHECK(read_text(dir / "out" / "samples.csv") == s1);
}

TEST_CASE("make_prior_spec and make_toy_potential map configs onto domain objects") {
  RunConfig c;
  c.mode = "vis";
  c.M = 6;
  c.flux = 3.6;
  RunConfig::PriorTermConfig g;
  g.kind = "gaussian";
  g.weight = 2.0;
  g.pixel_variance = 0.04;
  RunConfig::PriorTermConfig tv;
  tv.kind = "tv";
  tv.weight = 0.5;
  c.prior_terms = {g, tv};
  const PriorSpec spec = make_prior_spec(c);
  REQUIRE(spec.terms.size() == 2);
  CHECK(spec.terms[0].kind == PriorTerm::Kind::Gaussian);
  CHECK(spec.terms[0].gaussian.mu.data[0] == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(spec.terms[0].gaussian.lambda.at(0, 0) == doctest::Approx(0.04).epsilon(1e-9));
  CHECK(spec.terms[1].kind == PriorTerm::Kind::TV);
  CHECK(spec.terms[1].weight == 0.5);

  c.prior_terms[0].kind = "mem";
  CHECK_THROWS_AS(make_prior_spec(c), usage_error);

  RunConfig t;
  t.toy_potential = "sinusoidal";
  CHECK(make_toy_potential(t).kind == ToyPotential::Kind::Sinusoidal);
  t.toy_potential = "gmm";
  CHECK(make_toy_potential(t).components.size() == default_gmm().components.size());
}
