#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpi/forward_models.hpp"
#include "dpi/priors.hpp"
#include "dpi/tensor.hpp"
#include "dpi/trainer.hpp"

namespace dpi {

constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Number formatting: 17 significant digits round-trip any double

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_double(const std::string& s, const std::string& file, int line_no) {
  try {
    size_t pos = 0;
    const double v = std::stod(s, &pos);
    while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw parse_error(file + ":" + std::to_string(line_no) + ": bad number '" + s + "'");
  }
}

inline int parse_int(const std::string& s, const std::string& file, int line_no) {
  try {
    size_t pos = 0;
    const int v = std::stoi(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw parse_error(file + ":" + std::to_string(line_no) + ": bad integer '" + s + "'");
  }
}

struct CsvReader {
  std::string file;
  std::ifstream in;
  int line_no = 0;

  explicit CsvReader(const std::string& path) : file(path), in(path) {
    if (!in) throw usage_error("cannot open " + path);
  }
  bool next(std::vector<std::string>* fields) {
    std::string line;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty() || line == "\r") continue;
      *fields = split_csv(line);
      return true;
    }
    return false;
  }
  void expect(const std::vector<std::string>& fields, size_t n) const {
    if (fields.size() != n)
      throw parse_error(file + ":" + std::to_string(line_no) + ": expected " + std::to_string(n) +
                        " columns, got " + std::to_string(fields.size()));
  }
  void expect_header(const std::vector<std::string>& fields, const std::string& header) const {
    std::string joined;
    for (size_t i = 0; i < fields.size(); ++i) joined += (i ? "," : "") + fields[i];
    if (joined != header)
      throw parse_error(file + ":" + std::to_string(line_no) + ": expected header '" + header +
                        "', got '" + joined + "'");
  }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// CSV schemas

inline void store_coverage(const UVCoverage& cov, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw usage_error("cannot open " + path);
  out << "t,st1,st2,u,v,sigma\n";
  for (const CoverageRow& r : cov)
    out << fmt17(r.t) << ',' << r.st1 << ',' << r.st2 << ',' << fmt17(r.u) << ',' << fmt17(r.v)
        << ',' << fmt17(r.sigma) << '\n';
}

inline UVCoverage load_coverage(const std::string& path) {
  detail::CsvReader rd(path);
  std::vector<std::string> f;
  if (!rd.next(&f)) throw parse_error(path + ": empty file");
  rd.expect_header(f, "t,st1,st2,u,v,sigma");
  UVCoverage cov;
  while (rd.next(&f)) {
    rd.expect(f, 6);
    CoverageRow r;
    r.t = detail::parse_double(f[0], path, rd.line_no);
    r.st1 = detail::parse_int(f[1], path, rd.line_no);
    r.st2 = detail::parse_int(f[2], path, rd.line_no);
    r.u = detail::parse_double(f[3], path, rd.line_no);
    r.v = detail::parse_double(f[4], path, rd.line_no);
    r.sigma = detail::parse_double(f[5], path, rd.line_no);
    cov.push_back(r);
  }
  return cov;
}

inline void store_visibilities(const VisibilitySet& vis, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw usage_error("cannot open " + path);
  out << "t,st1,st2,u,v,re,im,sigma\n";
  for (const VisRow& r : vis)
    out << fmt17(r.t) << ',' << r.st1 << ',' << r.st2 << ',' << fmt17(r.u) << ',' << fmt17(r.v)
        << ',' << fmt17(r.vis.real()) << ',' << fmt17(r.vis.imag()) << ',' << fmt17(r.sigma)
        << '\n';
}

inline VisibilitySet load_visibilities(const std::string& path) {
  detail::CsvReader rd(path);
  std::vector<std::string> f;
  if (!rd.next(&f)) throw parse_error(path + ": empty file");
  rd.expect_header(f, "t,st1,st2,u,v,re,im,sigma");
  VisibilitySet vis;
  while (rd.next(&f)) {
    rd.expect(f, 8);
    VisRow r;
    r.t = detail::parse_double(f[0], path, rd.line_no);
    r.st1 = detail::parse_int(f[1], path, rd.line_no);
    r.st2 = detail::parse_int(f[2], path, rd.line_no);
    r.u = detail::parse_double(f[3], path, rd.line_no);
    r.v = detail::parse_double(f[4], path, rd.line_no);
    r.vis = {detail::parse_double(f[5], path, rd.line_no),
             detail::parse_double(f[6], path, rd.line_no)};
    r.sigma = detail::parse_double(f[7], path, rd.line_no);
    vis.push_back(r);
  }
  return vis;
}

inline void store_closure_phases(const std::vector<ClosurePhaseRow>& rows,
                                 const std::string& path) {
  std::ofstream out(path);
  if (!out) throw usage_error("cannot open " + path);
  out << "t,a,b,c,value,sigma\n";
  for (const ClosurePhaseRow& r : rows)
    out << fmt17(r.t) << ',' << r.a << ',' << r.b << ',' << r.c << ',' << fmt17(r.value) << ','
        << fmt17(r.sigma) << '\n';
}

inline std::vector<ClosurePhaseRow> load_closure_phases(const std::string& path) {
  detail::CsvReader rd(path);
  std::vector<std::string> f;
  if (!rd.next(&f)) throw parse_error(path + ": empty file");
  rd.expect_header(f, "t,a,b,c,value,sigma");
  std::vector<ClosurePhaseRow> rows;
  while (rd.next(&f)) {
    rd.expect(f, 6);
    ClosurePhaseRow r;
    r.t = detail::parse_double(f[0], path, rd.line_no);
    r.a = detail::parse_int(f[1], path, rd.line_no);
    r.b = detail::parse_int(f[2], path, rd.line_no);
    r.c = detail::parse_int(f[3], path, rd.line_no);
    r.value = detail::parse_double(f[4], path, rd.line_no);
    r.sigma = detail::parse_double(f[5], path, rd.line_no);
    rows.push_back(r);
  }
  return rows;
}

inline void store_log_camps(const std::vector<LogCampRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw usage_error("cannot open " + path);
  out << "t,a,b,c,d,value,sigma\n";
  for (const LogCampRow& r : rows)
    out << fmt17(r.t) << ',' << r.a << ',' << r.b << ',' << r.c << ',' << r.d << ','
        << fmt17(r.value) << ',' << fmt17(r.sigma) << '\n';
}

inline std::vector<LogCampRow> load_log_camps(const std::string& path) {
  detail::CsvReader rd(path);
  std::vector<std::string> f;
  if (!rd.next(&f)) throw parse_error(path + ": empty file");
  rd.expect_header(f, "t,a,b,c,d,value,sigma");
  std::vector<LogCampRow> rows;
  while (rd.next(&f)) {
    rd.expect(f, 7);
    LogCampRow r;
    r.t = detail::parse_double(f[0], path, rd.line_no);
    r.a = detail::parse_int(f[1], path, rd.line_no);
    r.b = detail::parse_int(f[2], path, rd.line_no);
    r.c = detail::parse_int(f[3], path, rd.line_no);
    r.d = detail::parse_int(f[4], path, rd.line_no);
    r.value = detail::parse_double(f[5], path, rd.line_no);
    r.sigma = detail::parse_double(f[6], path, rd.line_no);
    rows.push_back(r);
  }
  return rows;
}

/// Image CSV: a headerless grid, one row per image row.
inline void store_image(const Tensor& img, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw usage_error("cannot open " + path);
  for (int r = 0; r < img.rows; ++r) {
    for (int c = 0; c < img.cols; ++c) out << (c ? "," : "") << fmt17(img.at(r, c));
    out << '\n';
  }
}

inline Tensor load_image(const std::string& path) {
  detail::CsvReader rd(path);
  std::vector<std::string> f;
  std::vector<std::vector<double>> rows;
  while (rd.next(&f)) {
    std::vector<double> row;
    for (const std::string& s : f) row.push_back(detail::parse_double(s, path, rd.line_no));
    if (!rows.empty() && row.size() != rows[0].size())
      throw parse_error(path + ":" + std::to_string(rd.line_no) + ": ragged row");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw parse_error(path + ": empty image");
  Tensor img(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()));
  for (size_t r = 0; r < rows.size(); ++r)
    for (size_t c = 0; c < rows[r].size(); ++c) img.at(static_cast<int>(r), static_cast<int>(c)) = rows[r][c];
  return img;
}

inline void store_mask(const MRIMask& mask, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw usage_error("cannot open " + path);
  for (int r = 0; r < mask.M; ++r) {
    for (int c = 0; c < mask.M; ++c) out << (c ? "," : "") << int(mask.mask[r * mask.M + c]);
    out << '\n';
  }
}

inline MRIMask load_mask(const std::string& path) {
  detail::CsvReader rd(path);
  std::vector<std::string> f;
  std::vector<std::vector<uint8_t>> rows;
  while (rd.next(&f)) {
    std::vector<uint8_t> row;
    for (const std::string& s : f) {
      const int v = detail::parse_int(s, path, rd.line_no);
      if (v != 0 && v != 1)
        throw parse_error(path + ":" + std::to_string(rd.line_no) + ": mask entries must be 0/1");
      row.push_back(static_cast<uint8_t>(v));
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw parse_error(path + ": empty mask");
  const int M = static_cast<int>(rows.size());
  MRIMask mk;
  mk.M = M;
  mk.mask.assign(static_cast<size_t>(M) * M, 0);
  for (int r = 0; r < M; ++r) {
    if (static_cast<int>(rows[r].size()) != M)
      throw parse_error(path + ": mask must be square, row " + std::to_string(r + 1) + " has " +
                        std::to_string(rows[r].size()) + " entries");
    for (int c = 0; c < M; ++c) mk.mask[r * M + c] = rows[r][c];
  }
  return mk;
}

inline void store_loss_history(const std::vector<LossBreakdown>& hist, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw usage_error("cannot open " + path);
  out << "epoch,total,data_fit,prior,neg_logdet\n";
  for (size_t i = 0; i < hist.size(); ++i)
    out << i << ',' << fmt17(hist[i].total) << ',' << fmt17(hist[i].data_fit) << ','
        << fmt17(hist[i].prior) << ',' << fmt17(hist[i].neg_logdet) << '\n';
}

inline std::vector<LossBreakdown> load_loss_history(const std::string& path) {
  detail::CsvReader rd(path);
  std::vector<std::string> f;
  if (!rd.next(&f)) throw parse_error(path + ": empty file");
  rd.expect_header(f, "epoch,total,data_fit,prior,neg_logdet");
  std::vector<LossBreakdown> hist;
  while (rd.next(&f)) {
    rd.expect(f, 5);
    LossBreakdown b;
    b.total = detail::parse_double(f[1], path, rd.line_no);
    b.data_fit = detail::parse_double(f[2], path, rd.line_no);
    b.prior = detail::parse_double(f[3], path, rd.line_no);
    b.neg_logdet = detail::parse_double(f[4], path, rd.line_no);
    hist.push_back(b);
  }
  return hist;
}

/// Samples CSV: one row per sample, log q followed by the D values.
inline void store_samples(const Tensor& samples, const Tensor& log_q, const std::string& path) {
  if (log_q.rows != samples.rows || log_q.cols != 1)
    throw shape_error("store_samples: log_q must be N x 1");
  std::ofstream out(path);
  if (!out) throw usage_error("cannot open " + path);
  out << "log_q";
  for (int j = 0; j < samples.cols; ++j) out << ",x" << j;
  out << '\n';
  for (int r = 0; r < samples.rows; ++r) {
    out << fmt17(log_q.data[r]);
    for (int j = 0; j < samples.cols; ++j) out << ',' << fmt17(samples.at(r, j));
    out << '\n';
  }
}

inline std::pair<Tensor, Tensor> load_samples(const std::string& path) {
  detail::CsvReader rd(path);
  std::vector<std::string> f;
  if (!rd.next(&f)) throw parse_error(path + ": empty file");
  if (f.empty() || f[0] != "log_q")
    throw parse_error(path + ":1: expected a 'log_q,x0,...' header");
  const size_t cols = f.size();
  std::vector<std::vector<double>> rows;
  while (rd.next(&f)) {
    rd.expect(f, cols);
    std::vector<double> row;
    for (const std::string& s : f) row.push_back(detail::parse_double(s, path, rd.line_no));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw parse_error(path + ": no samples");
  Tensor samples(static_cast<int>(rows.size()), static_cast<int>(cols - 1));
  Tensor log_q(static_cast<int>(rows.size()), 1);
  for (size_t r = 0; r < rows.size(); ++r) {
    log_q.data[r] = rows[r][0];
    for (size_t j = 1; j < cols; ++j) samples.at(static_cast<int>(r), static_cast<int>(j - 1)) = rows[r][j];
  }
  return {std::move(samples), std::move(log_q)};
}

// ---------------------------------------------------------------------------
// 16-bit PGM render (min-max normalized)

inline void store_pgm(const Tensor& img, const std::string& path) {
  double lo = img.data[0], hi = img.data[0];
  for (double v : img.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double span = hi > lo ? hi - lo : 1.0;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw usage_error("cannot open " + path);
  out << "P5\n" << img.cols << ' ' << img.rows << "\n65535\n";
  for (double v : img.data) {
    const auto g = static_cast<uint16_t>(std::lround(65535.0 * (v - lo) / span));
    const char bytes[2] = {static_cast<char>(g >> 8), static_cast<char>(g & 0xff)};
    out.write(bytes, 2);
  }
}

// ---------------------------------------------------------------------------
// Run configuration

struct RunConfig {
  std::string mode = "toy";  // toy | vis | closure | mri
  // grid
  int M = 16;
  double fov_uas = 160.0;
  double flux = 2.0;
  // model
  int layers = 32;
  int hidden_width = 0;  // 0: library default
  std::string output_map = "none";
  uint64_t model_seed = 0;
  // synthetic array (simulate)
  ArraySpec array;
  uint64_t noise_seed = 1;
  // mri
  double mri_acceleration = 3.5;
  double mri_noise_frac = 0.0004;
  uint64_t mask_seed = 2;
  // toy
  std::string toy_potential = "gmm";  // gmm | bowtie | sinusoidal
  std::vector<double> beta_grid{0.25, 0.5, 1.0, 2.0, 4.0};
  double toy_box = 10.0;
  int toy_grid = 800;
  // prior terms
  struct PriorTermConfig {
    std::string kind;  // gaussian | tv | tsv | l1 | mem
    double weight = 0.0;
    double kappa = 2.5;  // gaussian power-spectrum parameters
    double f0 = 1.0;
    double pixel_variance = 0.01;
    std::string mem_prior_path;  // mem
  };
  std::vector<PriorTermConfig> prior_terms;
  // training
  TrainConfig train;
  int n_samples = 2048;
  int cluster_k = 0;  // 0: skip clustering
  uint64_t sample_seed = 3;
  uint64_t cluster_seed = 4;
  // files
  std::string output_dir = "out";
  std::string truth_image;  // path; empty: built-in synthetic truth
  std::string coverage_path, vis_path, closure_phase_path, closure_amp_path, mask_path;
  std::string checkpoint_path;

  int dim() const { return mode == "toy" ? 2 : M * M; }

  void validate() const {
    if (mode != "toy" && mode != "vis" && mode != "closure" && mode != "mri")
      throw usage_error("config: unknown mode '" + mode + "'");
    if (mode != "toy" && M < 2) throw usage_error("config: M must be >= 2");
    if (layers < 1) throw usage_error("config: layers must be >= 1");
    if (output_map != "none" && output_map != "softplus")
      throw usage_error("config: output_map must be 'none' or 'softplus'");
    if (toy_potential != "gmm" && toy_potential != "bowtie" && toy_potential != "sinusoidal")
      throw usage_error("config: unknown toy potential '" + toy_potential + "'");
    if (n_samples < 2) throw usage_error("config: n_samples must be >= 2");
    if (mri_acceleration < 1.0) throw usage_error("config: mri_acceleration must be >= 1");
    for (const auto& t : prior_terms) {
      if (t.kind != "gaussian" && t.kind != "tv" && t.kind != "tsv" && t.kind != "l1" &&
          t.kind != "mem")
        throw usage_error("config: unknown prior kind '" + t.kind + "'");
      if (t.weight < 0.0) throw usage_error("config: prior weights must be non-negative");
    }
    train.validate();
  }
};

inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["mode"] = c.mode;
  j["grid"] = {{"M", c.M}, {"fov_uas", c.fov_uas}, {"flux", c.flux}};
  j["model"] = {{"layers", c.layers},
                {"hidden_width", c.hidden_width},
                {"output_map", c.output_map},
                {"seed", c.model_seed}};
  j["array"] = {{"n_stations", c.array.n_stations}, {"n_times", c.array.n_times},
                {"max_baseline", c.array.max_baseline}, {"rotation_rad", c.array.rotation_rad},
                {"sefd", c.array.sefd}, {"sigma_const", c.array.sigma_const},
                {"seed", c.array.seed}};
  j["noise_seed"] = c.noise_seed;
  j["mri"] = {{"acceleration", c.mri_acceleration}, {"noise_frac", c.mri_noise_frac},
              {"mask_seed", c.mask_seed}};
  j["toy"] = {{"potential", c.toy_potential}, {"beta_grid", c.beta_grid},
              {"box", c.toy_box}, {"grid", c.toy_grid}};
  j["prior"] = nlohmann::json::array();
  for (const auto& t : c.prior_terms) {
    nlohmann::json tj = {{"kind", t.kind}, {"weight", t.weight}};
    if (t.kind == "gaussian") {
      tj["kappa"] = t.kappa;
      tj["f0"] = t.f0;
      tj["pixel_variance"] = t.pixel_variance;
    }
    if (t.kind == "mem") tj["prior_image"] = t.mem_prior_path;
    j["prior"].push_back(tj);
  }
  j["train"] = {{"batch", c.train.batch}, {"epochs", c.train.epochs}, {"lr", c.train.lr},
                {"adam_beta1", c.train.adam_beta1}, {"adam_beta2", c.train.adam_beta2},
                {"adam_eps", c.train.adam_eps}, {"entropy_weight", c.train.entropy_weight},
                {"seed", c.train.seed}, {"clip_norm", c.train.clip_norm},
                {"checkpoint_every", c.train.checkpoint_every},
                {"anneal_beta", c.train.anneal_beta}, {"anneal_from", c.train.anneal_from}};
  j["samples"] = {{"n", c.n_samples}, {"seed", c.sample_seed},
                  {"cluster_k", c.cluster_k}, {"cluster_seed", c.cluster_seed}};
  j["files"] = {{"output_dir", c.output_dir}, {"truth_image", c.truth_image},
                {"coverage", c.coverage_path}, {"vis", c.vis_path},
                {"closure_phases", c.closure_phase_path}, {"closure_amps", c.closure_amp_path},
                {"mask", c.mask_path}, {"checkpoint", c.checkpoint_path}};
  return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  auto get = [](const nlohmann::json& obj, const char* key, auto& dst) {
    if (obj.contains(key)) dst = obj.at(key).get<std::decay_t<decltype(dst)>>();
  };
  get(j, "mode", c.mode);
  if (j.contains("grid")) {
    get(j["grid"], "M", c.M);
    get(j["grid"], "fov_uas", c.fov_uas);
    get(j["grid"], "flux", c.flux);
  }
  if (j.contains("model")) {
    get(j["model"], "layers", c.layers);
    get(j["model"], "hidden_width", c.hidden_width);
    get(j["model"], "output_map", c.output_map);
    get(j["model"], "seed", c.model_seed);
  }
  if (j.contains("array")) {
    get(j["array"], "n_stations", c.array.n_stations);
    get(j["array"], "n_times", c.array.n_times);
    get(j["array"], "max_baseline", c.array.max_baseline);
    get(j["array"], "rotation_rad", c.array.rotation_rad);
    get(j["array"], "sefd", c.array.sefd);
    get(j["array"], "sigma_const", c.array.sigma_const);
    get(j["array"], "seed", c.array.seed);
  }
  get(j, "noise_seed", c.noise_seed);
  if (j.contains("mri")) {
    get(j["mri"], "acceleration", c.mri_acceleration);
    get(j["mri"], "noise_frac", c.mri_noise_frac);
    get(j["mri"], "mask_seed", c.mask_seed);
  }
  if (j.contains("toy")) {
    get(j["toy"], "potential", c.toy_potential);
    get(j["toy"], "beta_grid", c.beta_grid);
    get(j["toy"], "box", c.toy_box);
    get(j["toy"], "grid", c.toy_grid);
  }
  if (j.contains("prior")) {
    for (const auto& tj : j["prior"]) {
      RunConfig::PriorTermConfig t;
      get(tj, "kind", t.kind);
      get(tj, "weight", t.weight);
      get(tj, "kappa", t.kappa);
      get(tj, "f0", t.f0);
      get(tj, "pixel_variance", t.pixel_variance);
      get(tj, "prior_image", t.mem_prior_path);
      c.prior_terms.push_back(t);
    }
  }
  if (j.contains("train")) {
    const auto& tj = j["train"];
    get(tj, "batch", c.train.batch);
    get(tj, "epochs", c.train.epochs);
    get(tj, "lr", c.train.lr);
    get(tj, "adam_beta1", c.train.adam_beta1);
    get(tj, "adam_beta2", c.train.adam_beta2);
    get(tj, "adam_eps", c.train.adam_eps);
    get(tj, "entropy_weight", c.train.entropy_weight);
    get(tj, "seed", c.train.seed);
    get(tj, "clip_norm", c.train.clip_norm);
    get(tj, "checkpoint_every", c.train.checkpoint_every);
    get(tj, "anneal_beta", c.train.anneal_beta);
    get(tj, "anneal_from", c.train.anneal_from);
  }
  if (j.contains("samples")) {
    get(j["samples"], "n", c.n_samples);
    get(j["samples"], "seed", c.sample_seed);
    get(j["samples"], "cluster_k", c.cluster_k);
    get(j["samples"], "cluster_seed", c.cluster_seed);
  }
  if (j.contains("files")) {
    get(j["files"], "output_dir", c.output_dir);
    get(j["files"], "truth_image", c.truth_image);
    get(j["files"], "coverage", c.coverage_path);
    get(j["files"], "vis", c.vis_path);
    get(j["files"], "closure_phases", c.closure_phase_path);
    get(j["files"], "closure_amps", c.closure_amp_path);
    get(j["files"], "mask", c.mask_path);
    get(j["files"], "checkpoint", c.checkpoint_path);
  }
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw usage_error("cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw parse_error(path + ": invalid JSON: " + e.what());
  }
  return config_from_json(j);
}

inline void store_config(const RunConfig& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw usage_error("cannot open " + path);
  out << config_to_json(c).dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Run manifest with per-file checksums

inline uint64_t fnv1a64_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw usage_error("checksum: cannot open " + path);
  uint64_t h = 14695981039346656037ull;
  char buf[65536];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    const std::streamsize n = in.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  return h;
}

struct Manifest {
  std::string command;
  nlohmann::json config;
  std::map<std::string, std::string> files;  // relative name -> fnv1a hex

  void add(const std::string& dir, const std::string& name) {
    char hex[20];
    std::snprintf(hex, sizeof hex, "%016llx",
                  static_cast<unsigned long long>(fnv1a64_file(dir + "/" + name)));
    files[name] = hex;
  }
  void write(const std::string& dir) const {
    nlohmann::json j;
    j["version"] = kVersion;
    j["command"] = command;
    j["config"] = config;
    j["files"] = files;
    std::ofstream out(dir + "/manifest.json");
    if (!out) throw usage_error("cannot open " + dir + "/manifest.json");
    out << j.dump(2) << '\n';
  }
};

// ---------------------------------------------------------------------------
// Config -> domain objects

inline ToyPotential make_toy_potential(const RunConfig& c) {
  ToyPotential p;
  if (c.toy_potential == "gmm") return default_gmm();
  p.kind = c.toy_potential == "bowtie" ? ToyPotential::Kind::Bowtie
                                       : ToyPotential::Kind::Sinusoidal;
  return p;
}

inline PriorSpec make_prior_spec(const RunConfig& c) {
  PriorSpec spec;
  spec.M = c.M;
  for (const auto& t : c.prior_terms) {
    PriorTerm term;
    term.weight = t.weight;
    if (t.kind == "gaussian") {
      term.kind = PriorTerm::Kind::Gaussian;
      term.gaussian = build_power_spectrum_cov(c.M, t.kappa, t.f0, t.pixel_variance);
      const double mu = c.flux / (c.M * c.M);
      term.gaussian.mu.fill(mu);
    } else if (t.kind == "tv") {
      term.kind = PriorTerm::Kind::TV;
    } else if (t.kind == "tsv") {
      term.kind = PriorTerm::Kind::TSV;
    } else if (t.kind == "l1") {
      term.kind = PriorTerm::Kind::L1;
    } else {
      term.kind = PriorTerm::Kind::MEM;
      if (t.mem_prior_path.empty())
        throw usage_error("config: mem prior term needs a prior_image path");
      Tensor p = load_image(t.mem_prior_path);
      term.mem_prior = Tensor(1, static_cast<int>(p.size()), std::move(p.data));
    }
    spec.terms.push_back(std::move(term));
  }
  return spec;
}

}  // namespace dpi
