#include <CLI11.hpp>
#include <filesystem>
#include <iostream>

#include "dpi/analysis.hpp"
#include "dpi/flow.hpp"
#include "dpi/forward_models.hpp"
#include "dpi/io.hpp"
#include "dpi/priors.hpp"
#include "dpi/trainer.hpp"

namespace fs = std::filesystem;
using namespace dpi;

namespace {

std::string resolve(const RunConfig& c, const std::string& explicit_path,
                    const std::string& default_name) {
  if (!explicit_path.empty()) return explicit_path;
  return c.output_dir + "/" + default_name;
}

Tensor load_truth(const RunConfig& c) {
  if (!c.truth_image.empty()) {
    Tensor t = load_image(c.truth_image);
    if (t.rows != c.M || t.cols != c.M)
      throw usage_error("truth image is " + shape_str(t) + ", config M is " +
                        std::to_string(c.M));
    return t;
  }
  if (c.mode == "mri") return make_phantom_image(c.M);
  ImageGrid grid(c.M, c.fov_uas);
  return make_ring_image(grid, c.flux);
}

Tensor flat_row(const Tensor& img) {
  return Tensor(1, static_cast<int>(img.size()), img.data);
}

Tensor as_grid(const double* v, int M) {
  Tensor img(M, M);
  std::copy(v, v + static_cast<size_t>(M) * M, img.data.begin());
  return img;
}

struct LoadedData {
  ImageGrid grid;
  UVCoverage coverage;
  VisibilitySet vis;
  ClosureSet closure;
  DftMatrices F;
  MRIMask mask;
  MRIData mri;
};

LoadedData load_measurements(const RunConfig& c) {
  LoadedData d;
  if (c.mode == "vis" || c.mode == "closure") {
    d.grid = ImageGrid(c.M, c.fov_uas);
    d.coverage = load_coverage(resolve(c, c.coverage_path, "coverage.csv"));
    d.F = build_dft_matrix(d.grid, d.coverage);
    if (c.mode == "vis") {
      d.vis = load_visibilities(resolve(c, c.vis_path, "vis.csv"));
      if (d.vis.size() != d.coverage.size())
        throw usage_error("visibility file does not match the coverage row count");
    } else {
      d.closure.phases = load_closure_phases(resolve(c, c.closure_phase_path, "closure_phases.csv"));
      d.closure.lcamps = load_log_camps(resolve(c, c.closure_amp_path, "closure_amps.csv"));
    }
  } else if (c.mode == "mri") {
    d.mask = load_mask(resolve(c, c.mask_path, "mask.csv"));
    if (d.mask.M != c.M) throw usage_error("mask size does not match config M");
    d.mask.nu_frac = c.mri_noise_frac;
    VisibilitySet y = load_visibilities(resolve(c, c.vis_path, "kspace.csv"));
    d.mri.F = build_mri_matrix(d.mask);
    if (static_cast<int>(y.size()) != d.mri.F.rows())
      throw usage_error("k-space file does not match the mask's observed count");
    d.mri.y.resize(y.size());
    for (size_t k = 0; k < y.size(); ++k) d.mri.y[k] = y[k].vis;
    d.mri.noise_std = y.empty() ? 0.0 : y[0].sigma;
  }
  return d;
}

LossBuilder make_data_loss(const RunConfig& c, const LoadedData& d, const ToyPotential& pot) {
  if (c.mode == "toy")
    return [&pot](Graph& g, int x) { return build_toy_potential(g, x, pot); };
  if (c.mode == "vis")
    return [&d](Graph& g, int x) { return build_vis_chi2(g, x, d.F, d.vis); };
  if (c.mode == "closure")
    return [&d, &c](Graph& g, int x) {
      (void)c;
      return build_closure_chi2(g, x, d.F, d.coverage, d.closure);
    };
  return [&d](Graph& g, int x) { return build_mri_chi2(g, x, d.mri); };
}

FlowModel init_from_config(const RunConfig& c) {
  return init_model(c.dim(), c.layers, c.hidden_width, output_map_from_string(c.output_map),
                    c.model_seed);
}

struct SampleSet {
  Tensor x;      // N x D
  Tensor log_q;  // N x 1
};

SampleSet draw_samples(const FlowModel& model, int n, uint64_t seed) {
  Rng rng(seed);
  Tensor z = sample_latent(n, model.dim, rng);
  FlowForwardResult fwd = flow_forward(model, z);
  SampleSet s;
  s.x = std::move(fwd.x);
  s.log_q = Tensor(n, 1);
  const double base = -0.5 * model.dim * std::log(2.0 * M_PI);
  for (int r = 0; r < n; ++r) {
    double q = 0.0;
    for (int j = 0; j < model.dim; ++j) q += z.at(r, j) * z.at(r, j);
    s.log_q.data[r] = base - 0.5 * q - fwd.logdet.data[r];
  }
  return s;
}

void write_kv_csv(const std::string& path, const std::vector<std::pair<std::string, double>>& kv) {
  std::ofstream out(path);
  if (!out) throw usage_error("cannot open " + path);
  out << "key,value\n";
  for (const auto& [k, v] : kv) out << k << ',' << fmt17(v) << '\n';
}

// reduced chi^2 of one flattened image against the loaded measurements
std::vector<std::pair<std::string, double>> reduced_chi2(const RunConfig& c, const LoadedData& d,
                                                         const Tensor& img) {
  std::vector<std::pair<std::string, double>> out;
  if (c.mode == "vis") {
    const double k = static_cast<double>(d.vis.size());
    out.emplace_back("reduced_chi2_vis", chi2_vis(img, d.vis, d.F) / k);
  } else if (c.mode == "closure") {
    ClosureChi2 cc = chi2_closure(img, d.closure, d.grid, d.coverage);
    out.emplace_back("reduced_chi2_phase", cc.reduced_phase);
    out.emplace_back("reduced_chi2_lcamp", cc.reduced_lcamp);
  } else if (c.mode == "mri") {
    const double k = static_cast<double>(d.mri.y.size());
    out.emplace_back("reduced_chi2_mri", chi2_mri(img, d.mri) / k);
  }
  return out;
}

// -----------------------------------------------------------------------------
// Subcommands

int cmd_simulate(const RunConfig& c) {
  if (c.mode == "toy") throw usage_error("simulate: nothing to simulate in toy mode");
  fs::create_directories(c.output_dir);
  Manifest man;
  man.command = "simulate";
  man.config = config_to_json(c);
  Tensor truth = load_truth(c);
  store_image(truth, c.output_dir + "/truth.csv");
  man.add(c.output_dir, "truth.csv");

  if (c.mode == "mri") {
    MRIMask mask = make_mri_mask(c.M, c.mri_acceleration, c.mri_noise_frac, c.mask_seed);
    // noise_seed 0 requests a noiseless simulation
    MRIData data = mri_forward(flat_row(truth), mask, c.noise_seed, c.noise_seed != 0);
    store_mask(mask, c.output_dir + "/mask.csv");
    man.add(c.output_dir, "mask.csv");
    // k-space rows reuse the visibility schema with (st1,st2) = (f_row,f_col)
    VisibilitySet rows;
    int k = 0;
    for (int fr = 0; fr < c.M; ++fr)
      for (int fc = 0; fc < c.M; ++fc) {
        if (!mask.mask[fr * c.M + fc]) continue;
        VisRow r;
        r.t = 0.0;
        r.st1 = fr;
        r.st2 = fc;
        r.u = fc - c.M / 2;
        r.v = fr - c.M / 2;
        r.vis = data.y[k++];
        r.sigma = data.noise_std;
        rows.push_back(r);
      }
    store_visibilities(rows, c.output_dir + "/kspace.csv");
    man.add(c.output_dir, "kspace.csv");
  } else {
    ImageGrid grid(c.M, c.fov_uas);
    UVCoverage cov = make_coverage(c.array);
    DftMatrices F = build_dft_matrix(grid, cov);
    VisibilitySet vis = simulate_visibilities(truth, F, cov, unit_gains(), zero_phases(),
                                              c.noise_seed, /*add_noise=*/c.noise_seed != 0);
    ClosureSet cl = closure_from_vis(vis, cov);
    store_coverage(cov, c.output_dir + "/coverage.csv");
    store_visibilities(vis, c.output_dir + "/vis.csv");
    store_closure_phases(cl.phases, c.output_dir + "/closure_phases.csv");
    store_log_camps(cl.lcamps, c.output_dir + "/closure_amps.csv");
    man.add(c.output_dir, "coverage.csv");
    man.add(c.output_dir, "vis.csv");
    man.add(c.output_dir, "closure_phases.csv");
    man.add(c.output_dir, "closure_amps.csv");
  }
  man.write(c.output_dir);
  return 0;
}

int cmd_train(const RunConfig& c) {
  fs::create_directories(c.output_dir);
  LoadedData d = load_measurements(c);
  ToyPotential pot = make_toy_potential(c);
  PriorSpec prior = make_prior_spec(c);
  FlowModel model = init_from_config(c);
  TrainConfig tc = c.train;
  tc.checkpoint_path = resolve(c, c.checkpoint_path, "checkpoint.bin");
  LossBuilder loss = make_data_loss(c, d, pot);
  TrainResult res = train(model, loss, prior.terms.empty() ? nullptr : &prior, tc);
  store_loss_history(res.history, c.output_dir + "/loss.csv");
  Manifest man;
  man.command = "train";
  man.config = config_to_json(c);
  man.add(c.output_dir, "loss.csv");
  if (fs::exists(tc.checkpoint_path) &&
      fs::path(tc.checkpoint_path).parent_path() == fs::path(c.output_dir))
    man.add(c.output_dir, fs::path(tc.checkpoint_path).filename().string());
  man.write(c.output_dir);
  std::cout << "final loss " << fmt17(res.history.back().total) << "\n";
  return 0;
}

int cmd_sample(const RunConfig& c, int n_override) {
  fs::create_directories(c.output_dir);
  FlowModel model = load_checkpoint(resolve(c, c.checkpoint_path, "checkpoint.bin"));
  const int n = n_override > 0 ? n_override : c.n_samples;
  SampleSet s = draw_samples(model, n, c.sample_seed);
  store_samples(s.x, s.log_q, c.output_dir + "/samples.csv");
  Manifest man;
  man.command = "sample";
  man.config = config_to_json(c);
  man.add(c.output_dir, "samples.csv");
  man.write(c.output_dir);
  return 0;
}

int cmd_stats(const RunConfig& c, const std::string& samples_override, bool chi2_truth) {
  fs::create_directories(c.output_dir);
  Manifest man;
  man.command = "stats";
  man.config = config_to_json(c);
  LoadedData d = load_measurements(c);

  if (chi2_truth) {
    Tensor truth = load_truth(c);
    auto kv = reduced_chi2(c, d, flat_row(truth));
    write_kv_csv(c.output_dir + "/chi2.csv", kv);
    man.add(c.output_dir, "chi2.csv");
    for (const auto& [k, v] : kv) std::cout << k << " = " << fmt17(v) << "\n";
    man.write(c.output_dir);
    return 0;
  }

  const std::string spath =
      samples_override.empty() ? c.output_dir + "/samples.csv" : samples_override;
  auto [samples, log_q] = load_samples(spath);
  const int D = samples.cols;
  if (c.mode != "toy" && D != c.M * c.M)
    throw usage_error("stats: sample dimension does not match config M");

  Tensor work = samples;
  if (c.mode == "closure") work = align_normalize(samples, c.M, c.flux);
  SampleStats st = sample_stats(work, /*with_cov=*/false);

  std::vector<std::pair<std::string, double>> summary;
  if (c.mode == "toy") {
    store_image(st.mean, c.output_dir + "/mean.csv");
    store_image(st.sd, c.output_dir + "/std.csv");
  } else {
    store_image(as_grid(st.mean.data.data(), c.M), c.output_dir + "/mean.csv");
    store_image(as_grid(st.sd.data.data(), c.M), c.output_dir + "/std.csv");
    store_pgm(as_grid(st.mean.data.data(), c.M), c.output_dir + "/mean.pgm");
    store_pgm(as_grid(st.sd.data.data(), c.M), c.output_dir + "/std.pgm");
    man.add(c.output_dir, "mean.pgm");
    man.add(c.output_dir, "std.pgm");
    double mean_std = 0.0;
    for (double v : st.sd.data) mean_std += v / st.sd.size();
    summary.emplace_back("mean_std", mean_std);
  }
  man.add(c.output_dir, "mean.csv");
  man.add(c.output_dir, "std.csv");

  // pca embedding for external plotting
  Tensor emb = pca_embed(work, 2);
  {
    std::ofstream out(c.output_dir + "/embedding.csv");
    out << "pc1,pc2\n";
    for (int r = 0; r < emb.rows; ++r)
      out << fmt17(emb.at(r, 0)) << ',' << fmt17(emb.at(r, 1)) << '\n';
  }
  man.add(c.output_dir, "embedding.csv");

  if (!c.truth_image.empty() || c.mode == "mri") {
    Tensor truth = load_truth(c);
    Tensor truth_row = flat_row(truth);
    summary.emplace_back("coverage_4sigma",
                         coverage_fraction(st.mean, st.sd, truth_row, 4.0));
    double lo = truth_row.data[0], hi = truth_row.data[0];
    for (double v : truth_row.data) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    double rmse = 0.0;
    for (size_t i = 0; i < truth_row.size(); ++i) {
      const double e = st.mean.data[i] - truth_row.data[i];
      rmse += e * e;
    }
    rmse = std::sqrt(rmse / truth_row.size());
    summary.emplace_back("rmse_vs_truth", rmse);
    summary.emplace_back("rmse_over_dynamic_range", rmse / (hi - lo));
  }

  if (c.cluster_k > 0) {
    std::function<std::pair<double, double>(const double*)> chi2_fn;
    if (c.mode == "closure")
      chi2_fn = [&](const double* x) {
        ClosureChi2 cc = chi2_closure(as_grid(x, c.M), d.closure, d.grid, d.coverage);
        return std::make_pair(cc.reduced_phase, cc.reduced_lcamp);
      };
    ModeReport rep = cluster_modes(work, c.cluster_k, c.cluster_seed, chi2_fn);
    {
      std::ofstream out(c.output_dir + "/modes.csv");
      out << "sample,mode\n";
      for (size_t i = 0; i < rep.assignment.size(); ++i)
        out << i << ',' << rep.assignment[i] << '\n';
    }
    man.add(c.output_dir, "modes.csv");
    std::ofstream hist(c.output_dir + "/mode_chi2.csv");
    hist << "mode,member,chi2_phase,chi2_lcamp\n";
    for (size_t m = 0; m < rep.modes.size(); ++m) {
      const Mode& mode = rep.modes[m];
      const std::string base = "mode" + std::to_string(m);
      if (mode.mean.size() == static_cast<size_t>(c.M) * c.M) {
        store_image(as_grid(mode.mean.data.data(), c.M), c.output_dir + "/" + base + "_mean.csv");
        man.add(c.output_dir, base + "_mean.csv");
        if (mode.sd.size() == mode.mean.size()) {
          store_image(as_grid(mode.sd.data.data(), c.M), c.output_dir + "/" + base + "_std.csv");
          man.add(c.output_dir, base + "_std.csv");
        }
      }
      for (size_t i = 0; i < mode.members.size(); ++i) {
        hist << m << ',' << mode.members[i];
        if (i < mode.chi2_phase.size())
          hist << ',' << fmt17(mode.chi2_phase[i]) << ',' << fmt17(mode.chi2_lcamp[i]);
        else
          hist << ",,";
        hist << '\n';
      }
      summary.emplace_back("mode" + std::to_string(m) + "_members",
                           static_cast<double>(mode.members.size()));
    }
    hist.close();
    man.add(c.output_dir, "mode_chi2.csv");
  }

  if (!summary.empty()) {
    write_kv_csv(c.output_dir + "/stats.csv", summary);
    man.add(c.output_dir, "stats.csv");
    for (const auto& [k, v] : summary) std::cout << k << " = " << fmt17(v) << "\n";
  }
  man.write(c.output_dir);
  return 0;
}

int cmd_oracle(const RunConfig& c, const std::string& samples_path) {
  if (c.mode != "vis") throw usage_error("oracle: analytic posterior requires mode 'vis'");
  fs::create_directories(c.output_dir);
  LoadedData d = load_measurements(c);
  PriorSpec prior = make_prior_spec(c);
  const GaussianPrior* gp = nullptr;
  for (const PriorTerm& t : prior.terms)
    if (t.kind == PriorTerm::Kind::Gaussian) gp = &t.gaussian;
  if (!gp) throw usage_error("oracle: config needs a gaussian prior term");

  StackedLinearData stacked = stack_visibilities(d.F, d.vis);
  AnalyticPosterior post = analytic_posterior(stacked, *gp);

  Manifest man;
  man.command = "oracle";
  man.config = config_to_json(c);
  store_image(as_grid(post.mean.data.data(), c.M), c.output_dir + "/post_mean.csv");
  Tensor sd(1, c.M * c.M);
  for (int i = 0; i < c.M * c.M; ++i) sd.data[i] = std::sqrt(std::max(0.0, post.cov.at(i, i)));
  store_image(as_grid(sd.data.data(), c.M), c.output_dir + "/post_std.csv");
  store_image(post.cov, c.output_dir + "/post_cov.csv");
  man.add(c.output_dir, "post_mean.csv");
  man.add(c.output_dir, "post_std.csv");
  man.add(c.output_dir, "post_cov.csv");

  if (!samples_path.empty()) {
    auto [samples, log_q] = load_samples(samples_path);
    const double kl = gaussian_fit_kl(samples, post);
    write_kv_csv(c.output_dir + "/oracle_kl.csv", {{"gaussian_fit_kl", kl}});
    man.add(c.output_dir, "oracle_kl.csv");
    std::cout << "gaussian_fit_kl = " << fmt17(kl) << "\n";
  }
  man.write(c.output_dir);
  return 0;
}

int cmd_toy_sweep(const RunConfig& c) {
  if (c.mode != "toy") throw usage_error("toy-sweep: config mode must be 'toy'");
  fs::create_directories(c.output_dir);
  ToyPotential pot = make_toy_potential(c);
  const double log_z = grid_log_partition(pot, -c.toy_box, c.toy_box, c.toy_grid);
  auto log_p = [&](const double* x) { return -toy_potential(pot, x[0], x[1]) - log_z; };

  std::ofstream out(c.output_dir + "/beta_kl.csv");
  if (!out) throw usage_error("cannot open " + c.output_dir + "/beta_kl.csv");
  out << "beta,kl,std_err\n";
  for (double beta : c.beta_grid) {
    TrainConfig tc = c.train;
    tc.entropy_weight = beta;
    FlowModel model = init_from_config(c);
    train(model, [&pot](Graph& g, int x) { return build_toy_potential(g, x, pot); }, nullptr, tc);
    KlEstimate kl = kl_monte_carlo(model, log_p, c.n_samples, c.sample_seed);
    out << fmt17(beta) << ',' << fmt17(kl.value) << ',' << fmt17(kl.std_err) << '\n';
    std::cout << "beta " << beta << " kl " << fmt17(kl.value) << " +- " << fmt17(kl.std_err)
              << "\n";
  }
  out.close();
  Manifest man;
  man.command = "toy-sweep";
  man.config = config_to_json(c);
  man.add(c.output_dir, "beta_kl.csv");
  man.write(c.output_dir);
  return 0;
}

int cmd_mri(const RunConfig& c) {
  if (c.mode != "mri") throw usage_error("mri: config mode must be 'mri'");
  int rc = cmd_simulate(c);
  if (rc) return rc;
  rc = cmd_train(c);
  if (rc) return rc;
  rc = cmd_sample(c, 0);
  if (rc) return rc;

  auto [samples, log_q] = load_samples(c.output_dir + "/samples.csv");
  SampleStats st = sample_stats(samples, /*with_cov=*/false);
  Tensor truth = flat_row(load_truth(c));
  double mean_std = 0.0;
  for (double v : st.sd.data) mean_std += v / st.sd.size();
  MRIMask mask = load_mask(resolve(c, c.mask_path, "mask.csv"));
  write_kv_csv(c.output_dir + "/mri_report.csv",
               {{"acceleration", mask.acceleration()},
                {"mean_std", mean_std},
                {"coverage_4sigma", coverage_fraction(st.mean, st.sd, truth, 4.0)}});
  store_image(as_grid(st.mean.data.data(), c.M), c.output_dir + "/mean.csv");
  store_image(as_grid(st.sd.data.data(), c.M), c.output_dir + "/std.csv");
  store_pgm(as_grid(st.mean.data.data(), c.M), c.output_dir + "/mean.pgm");
  Manifest man;
  man.command = "mri";
  man.config = config_to_json(c);
  for (const char* f : {"mri_report.csv", "mean.csv", "std.csv", "mean.pgm", "mask.csv",
                        "kspace.csv", "truth.csv", "loss.csv", "samples.csv"})
    if (fs::exists(c.output_dir + "/" + f)) man.add(c.output_dir, f);
  man.write(c.output_dir);
  std::cout << "acceleration " << fmt17(mask.acceleration()) << " mean_std " << fmt17(mean_std)
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deep probabilistic imaging toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::string samples_path;
  int n_override = 0;
  bool chi2_truth = false;

  auto* sim = app.add_subcommand("simulate", "generate synthetic measurements");
  sim->add_option("--config", config_path, "run config (json)")->required();
  auto* tr = app.add_subcommand("train", "train the flow on the configured data");
  tr->add_option("--config", config_path, "run config (json)")->required();
  auto* sa = app.add_subcommand("sample", "draw samples from a checkpoint");
  sa->add_option("--config", config_path, "run config (json)")->required();
  sa->add_option("--n", n_override, "override the sample count");
  auto* st = app.add_subcommand("stats", "posterior statistics and clustering");
  st->add_option("--config", config_path, "run config (json)")->required();
  st->add_option("--samples", samples_path, "samples csv (default: output_dir/samples.csv)");
  st->add_flag("--chi2", chi2_truth, "reduced chi^2 of the truth image only");
  auto* orc = app.add_subcommand("oracle", "analytic posterior and KL against samples");
  orc->add_option("--config", config_path, "run config (json)")->required();
  orc->add_option("--samples", samples_path, "samples csv for the KL comparison");
  auto* ts = app.add_subcommand("toy-sweep", "train across the beta grid, emit KL csv");
  ts->add_option("--config", config_path, "run config (json)")->required();
  auto* mri = app.add_subcommand("mri", "masked simulation, training, coverage report");
  mri->add_option("--config", config_path, "run config (json)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    RunConfig cfg = load_config(config_path);
    cfg.validate();
    if (sim->parsed()) return cmd_simulate(cfg);
    if (tr->parsed()) return cmd_train(cfg);
    if (sa->parsed()) return cmd_sample(cfg, n_override);
    if (st->parsed()) return cmd_stats(cfg, samples_path, chi2_truth);
    if (orc->parsed()) return cmd_oracle(cfg, samples_path);
    if (ts->parsed()) return cmd_toy_sweep(cfg);
    if (mri->parsed()) return cmd_mri(cfg);
    std::cerr << "no subcommand\n";
    return 2;
  } catch (const numeric_error& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 4;
  } catch (const parse_error& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 3;
  } catch (const usage_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 3;
  } catch (const shape_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
