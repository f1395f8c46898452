#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "lrmf/analytic.hpp"
#include "lrmf/generators.hpp"
#include "lrmf/io.hpp"
#include "lrmf/lrmf.hpp"
#include "lrmf/mmd.hpp"

using namespace lrmf;
using nlohmann::json;

namespace {

// Run options assembled from a JSON config file: TrainConfig plus the two
// architecture sections ("flow" for the transform T, "density_flow" for the
// flow density family M).
struct RunOptions {
  TrainConfig train;
  FlowSpec transform;
  DensityOptions density;
  json echo;  // the parsed file, for the checkpoint
};

RunOptions load_run_options(const std::string& path) {
  RunOptions r;
  r.transform.kind = FlowKind::kAffine;
  if (path.empty()) return r;
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  r.train = config_from_json(j);
  if (j.contains("flow")) r.transform = flowspec_from_json(j.at("flow"), r.transform);
  if (j.contains("density_flow")) {
    r.density.flow = flowspec_from_json(j.at("density_flow"), r.density.flow);
  }
  r.echo = j;
  return r;
}

Family parse_family(const std::string& name) {
  if (name == "gaussian") return Family::kGaussian;
  if (name == "mixture2") return Family::kMixture2;
  if (name == "flow") return Family::kFlow;
  throw std::runtime_error("unknown family: " + name);
}

// For pair-producing generators, "--out data.csv" writes data_a.csv/data_b.csv.
std::pair<std::string, std::string> pair_paths(const std::string& out) {
  const std::filesystem::path p(out);
  std::filesystem::path stem = p;
  stem.replace_extension();
  const std::string ext = p.extension().string();
  return {stem.string() + "_a" + (ext.empty() ? ".csv" : ext),
          stem.string() + "_b" + (ext.empty() ? ".csv" : ext)};
}

void emit(const json& j) { std::cout << j.dump(2) << std::endl; }

int cmd_gen_data(const std::string& kind, std::uint64_t seed, std::size_t n, double rotation,
                 double noise, double mu, double delta, double sigma0, const std::string& out) {
  if (kind == "blobs" || kind == "moons") {
    auto [a, b] = kind == "blobs" ? gen_blobs(seed, n) : gen_moons(seed, n, rotation, noise);
    auto [pa, pb] = pair_paths(out);
    save_dataset_csv(a, pa);
    save_dataset_csv(b, pb);
    emit(json{{"a", pa}, {"b", pb}, {"n", n}, {"seed", seed}});
    return 0;
  }
  if (kind == "mixture1d") {
    save_dataset_csv(gen_mixture1d(seed, n, mu, delta, sigma0), out);
    emit(json{{"out", out}, {"n", n}, {"seed", seed}});
    return 0;
  }
  throw std::runtime_error("unknown kind: " + kind);
}

int cmd_fit_density(const std::string& family_name, const std::string& data_path,
                    const std::string& config_path, const std::string& out) {
  const RunOptions opts = load_run_options(config_path);
  const Family family = parse_family(family_name);
  const Dataset data = load_dataset_csv(data_path);
  auto fit = fit_density(family, data, opts.train, opts.density);
  Checkpoint ck;
  ck.family = family_name;
  ck.shared = fit.params;
  ck.seed = opts.train.seed;
  ck.config = opts.train;
  ck.density_flow = opts.density.flow;
  save_checkpoint(ck, out);
  emit(json{{"avg_loglik", fit.avg_loglik},
            {"converged", fit.converged},
            {"iters", fit.iters},
            {"ckpt", out}});
  return 0;
}

int cmd_train_lrmf(const std::string& a_path, const std::string& b_path,
                   const std::string& family_name, const std::string& flow_kind,
                   const std::string& config_path, const std::string& out,
                   const std::string& trace_path) {
  RunOptions opts = load_run_options(config_path);
  opts.transform.kind = flow_kind == "coupling" ? FlowKind::kCoupling : FlowKind::kAffine;
  const Family family = parse_family(family_name);
  const Dataset a = load_dataset_csv(a_path);
  const Dataset b = load_dataset_csv(b_path);

  auto st = train_lrmf(a, b, family, opts.transform, opts.train, opts.density);

  Checkpoint ck;
  ck.family = family_name;
  ck.transform = st.flow;
  ck.shared = st.shared;
  ck.c_ab = st.c_ab;
  ck.seed = opts.train.seed;
  ck.config = opts.train;
  ck.density_flow = opts.density.flow;
  save_checkpoint(ck, out);
  if (!trace_path.empty()) save_trace_csv(st.trace, trace_path);

  json summary{{"final_loss", st.final_loss}, {"c_ab", st.c_ab},
               {"converged", st.succeeded},  {"iters", st.iters},
               {"ckpt", out},                {"trace", trace_path}};
  if (!st.error_note.empty()) summary["error"] = st.error_note;
  emit(summary);
  return st.succeeded ? 0 : 2;
}

int cmd_train_mmd(const std::string& a_path, const std::string& b_path,
                  const std::string& flow_kind, const std::string& config_path,
                  const std::string& out, const std::string& trace_path) {
  RunOptions opts = load_run_options(config_path);
  opts.transform.kind = flow_kind == "coupling" ? FlowKind::kCoupling : FlowKind::kAffine;
  const Dataset a = load_dataset_csv(a_path);
  const Dataset b = load_dataset_csv(b_path);

  auto r = train_mmd_align(a, b, opts.transform, opts.train);

  Checkpoint ck;
  ck.family = "none";
  ck.transform = r.flow;
  ck.seed = opts.train.seed;
  ck.config = opts.train;
  ck.density_flow = opts.density.flow;
  save_checkpoint(ck, out);
  if (!trace_path.empty()) {
    std::vector<TraceRow> trace;
    for (const auto& [it, v] : r.trace) {
      TraceRow row;
      row.iter = it;
      row.minibatch_loss = v;
      trace.push_back(row);
    }
    save_trace_csv(trace, trace_path);
  }
  emit(json{{"final_mmd2", r.final_mmd2},
            {"bandwidth", r.bandwidth},
            {"iters", r.iters},
            {"ckpt", out}});
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& a_path,
             const std::string& b_path) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  const Dataset a = load_dataset_csv(a_path);
  const Dataset b = load_dataset_csv(b_path);

  json out{{"lrmf_loss", nullptr},
           {"lrd_estimate", nullptr},
           {"bound_gap", nullptr},
           {"knn_accuracy", nullptr}};

  std::optional<Dataset> ta;
  if (ck.transform) {
    ta = Dataset(flow_forward(*ck.transform, a.x).first, a.labels);
  }
  if (ck.transform && ck.shared && ck.c_ab) {
    out["lrmf_loss"] = lrmf_loss(a, b, *ck.transform, *ck.shared, *ck.c_ab);
  }
  if (ck.family != "none" && !ck.family.empty()) {
    const Family family = parse_family(ck.family);
    DensityOptions dopts;
    dopts.flow = ck.density_flow;
    const Dataset& src = ta ? *ta : a;
    out["lrd_estimate"] = lrd_estimate(src, b, family, ck.config, dopts);
    if (ck.transform) {
      out["bound_gap"] = bound_gap(a, b, *ck.transform, family, ck.config, dopts).gap;
    }
  }
  if (ta && ta->has_labels() && b.has_labels()) {
    out["knn_accuracy"] = knn_transfer_accuracy(*ta, ta->labels, b, b.labels);
  }
  emit(out);
  return 0;
}

int cmd_check_gaussian(double mu_a, double sig_a, double mu_b, double sig_b) {
  const auto sol = gaussian_affine_solution({mu_a, sig_a}, {mu_b, sig_b});
  double best = std::numeric_limits<double>::infinity(), best_a = 0.0, best_b = 0.0;
  for (double av = 0.1; av <= 5.0 + 1e-12; av += 1e-3) {
    for (double bv = -5.0; bv <= 5.0 + 1e-12; bv += 1e-3) {
      const double l = sol.loss(av, bv);
      if (l < best) {
        best = l;
        best_a = av;
        best_b = bv;
      }
    }
  }
  const double diff = std::max(std::abs(best_a - sol.a_star), std::abs(best_b - sol.b_star));
  emit(json{{"a_star", sol.a_star},
            {"b_star", sol.b_star},
            {"grid_argmin", {best_a, best_b}},
            {"max_abs_diff", diff}});
  return 0;
}

int cmd_check_jsd(double mu_a, double sig_a, double mu_b, double sig_b) {
  const auto r = jsd_identity_check({mu_a, sig_a}, {mu_b, sig_b});
  emit(json{{"lhs", r.lhs}, {"rhs", r.rhs}, {"abs_diff", std::abs(r.lhs - r.rhs)}});
  return 0;
}

int cmd_sim_grad_decay(double delta, double sigma0, double mu_min, double mu_max, double mu_step,
                       std::size_t n, std::uint64_t seed, const std::string& out) {
  const auto grid = linear_grid(mu_min, mu_max, mu_step);
  const auto r = gradient_decay_sim(delta, sigma0, grid, n, seed);
  if (!out.empty()) {
    std::ostringstream csv;
    csv << "mu,grad_mag,dropped\n";
    for (const auto& pt : r.table) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%d\n", pt.mu, pt.grad_mag,
                    pt.dropped ? 1 : 0);
      csv << buf;
    }
    lrmf::detail::atomic_write(out, csv.str());
  }
  emit(json{{"slope", r.slope},
            {"intercept", r.intercept},
            {"r2", r.r2},
            {"predicted_slope", r.predicted_slope},
            {"dropped", r.dropped},
            {"out", out}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Log-likelihood ratio minimizing flows: dataset alignment with a "
               "convergence indicator"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset (or pair)");
  std::string kind, out;
  std::uint64_t seed = 0;
  std::size_t n = 2000;
  double rotation = 50.0, noise = 0.05, mu = 0.0, delta = kGradDecayDelta,
         sigma0 = kGradDecaySigma0;
  gen->add_option("--kind", kind, "blobs|moons|mixture1d")->required();
  gen->add_option("--seed", seed, "RNG seed");
  gen->add_option("--n", n, "samples per dataset");
  gen->add_option("--rotation", rotation, "moons: rotation of B in degrees");
  gen->add_option("--noise", noise, "moons: coordinate noise sigma");
  gen->add_option("--mu", mu, "mixture1d: center");
  gen->add_option("--delta", delta, "mixture1d: component offset");
  gen->add_option("--sigma0", sigma0, "mixture1d: component sigma");
  gen->add_option("--out", out, "output path (pairs get _a/_b suffixes)")->required();

  // fit-density
  auto* fit = app.add_subcommand("fit-density", "Fit one density model");
  std::string family_name, data_path, config_path, ckpt_path;
  fit->add_option("--family", family_name, "gaussian|mixture2|flow")->required();
  fit->add_option("--data", data_path, "dataset CSV")->required();
  fit->add_option("--config", config_path, "JSON config");
  fit->add_option("--out", ckpt_path, "checkpoint path")->required();

  // train-lrmf
  auto* tl = app.add_subcommand("train-lrmf", "Align A to B by minimizing the LRMF loss");
  std::string a_path, b_path, flow_kind = "affine", trace_path;
  tl->add_option("--a", a_path, "source dataset CSV")->required();
  tl->add_option("--b", b_path, "target dataset CSV")->required();
  tl->add_option("--family", family_name, "gaussian|mixture2|flow")->required();
  tl->add_option("--flow", flow_kind, "affine|coupling")->required();
  tl->add_option("--config", config_path, "JSON config");
  tl->add_option("--out", ckpt_path, "checkpoint path")->required();
  tl->add_option("--trace", trace_path, "trace CSV path");

  // train-mmd
  auto* tm = app.add_subcommand("train-mmd", "Align A to B by minimizing unbiased MMD^2");
  tm->add_option("--a", a_path, "source dataset CSV")->required();
  tm->add_option("--b", b_path, "target dataset CSV")->required();
  tm->add_option("--flow", flow_kind, "affine|coupling")->required();
  tm->add_option("--config", config_path, "JSON config");
  tm->add_option("--out", ckpt_path, "checkpoint path")->required();
  tm->add_option("--trace", trace_path, "trace CSV path");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset pair");
  ev->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  ev->add_option("--a", a_path, "source dataset CSV")->required();
  ev->add_option("--b", b_path, "target dataset CSV")->required();

  // check-gaussian-example
  auto* cg = app.add_subcommand("check-gaussian-example",
                                "Analytic Gaussian/affine optimum vs grid search");
  double mu_a = 0.0, sig_a = 1.0, mu_b = 2.0, sig_b = 3.0;
  cg->add_option("--muA", mu_a, "mean of A");
  cg->add_option("--sigA", sig_a, "sigma of A");
  cg->add_option("--muB", mu_b, "mean of B");
  cg->add_option("--sigB", sig_b, "sigma of B");

  // check-jsd
  auto* cj = app.add_subcommand("check-jsd", "Population distance vs the JSD identity");
  cj->add_option("--muA", mu_a, "mean of A");
  cj->add_option("--sigA", sig_a, "sigma of A");
  cj->add_option("--muB", mu_b, "mean of B");
  cj->add_option("--sigB", sig_b, "sigma of B");

  // sim-grad-decay
  auto* sg = app.add_subcommand("sim-grad-decay", "Gradient-decay simulation and linear fit");
  double mu_min = 7.0, mu_max = 16.0, mu_step = 0.5;
  std::size_t sim_n = 100000;
  sg->add_option("--delta", delta, "mixture component offset");
  sg->add_option("--sigma0", sigma0, "mixture component sigma");
  sg->add_option("--mu-min", mu_min, "fit window start");
  sg->add_option("--mu-max", mu_max, "fit window end");
  sg->add_option("--mu-step", mu_step, "grid step");
  sg->add_option("--n", sim_n, "sample size");
  sg->add_option("--seed", seed, "RNG seed");
  sg->add_option("--out", out, "table CSV path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      return cmd_gen_data(kind, seed, n, rotation, noise, mu, delta, sigma0, out);
    }
    if (fit->parsed()) return cmd_fit_density(family_name, data_path, config_path, ckpt_path);
    if (tl->parsed()) {
      return cmd_train_lrmf(a_path, b_path, family_name, flow_kind, config_path, ckpt_path,
                            trace_path);
    }
    if (tm->parsed()) {
      return cmd_train_mmd(a_path, b_path, flow_kind, config_path, ckpt_path, trace_path);
    }
    if (ev->parsed()) return cmd_eval(ckpt_path, a_path, b_path);
    if (cg->parsed()) return cmd_check_gaussian(mu_a, sig_a, mu_b, sig_b);
    if (cj->parsed()) return cmd_check_jsd(mu_a, sig_a, mu_b, sig_b);
    if (sg->parsed()) {
      return cmd_sim_grad_decay(delta, sigma0, mu_min, mu_max, mu_step, sim_n, seed, out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
