// osen: experiment runner and utilities.
//
//   osen run <config> [--output DIR]
//   osen gradcheck [--variant osen1|osen2] [--q 3] [--side 8] [--selfgop] ...
//   osen paramcount --variant osen1 --q 3 [--mr 0.05] [--side 28]
//   osen mask --side 64 --mr 0.25 --seed 0 --out mask.txt
//   osen recon --mask mask.txt --weights model.osen [--image img.pgm | --phantom SEED] [--oracle]
//
// Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <random>
#include <string>

#include "osen/config.hpp"
#include "osen/data.hpp"
#include "osen/experiment.hpp"
#include "osen/models.hpp"
#include "osen/recon.hpp"
#include "osen/training.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;

osen::Variant parse_variant(const std::string& v) {
  if (v == "osen1") return osen::Variant::osen1;
  if (v == "osen2") return osen::Variant::osen2;
  throw osen::ConfigError("variant must be osen1 or osen2");
}

void print_table(const osen::ExperimentReport& rep) {
  const auto means = osen::seed_means(rep);
  for (const auto& m : means) {
    std::printf("%s %s%s mr=%g q=%zu params=%zu", osen::to_string(m.pipeline), m.variant.c_str(),
                m.ncl ? "+ncl" : "", m.mr, m.q, m.param_count);
    for (const auto& [k, v] : m.metrics) std::printf(" %s=%.4g", k.c_str(), v);
    std::printf("\n");
  }
}

int cmd_run(const std::string& path, const std::string& output) {
  osen::ExperimentConfig cfg;
  try {
    cfg = osen::load_config(path);
    if (!output.empty()) cfg.output_dir = output;
  } catch (const osen::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigError;
  }
  try {
    const auto report = osen::run_experiment(cfg);
    osen::emit_report(report, cfg.output_dir);
    print_table(report);
    std::printf("report written to %s\n", cfg.output_dir.c_str());
    return kOk;
  } catch (const osen::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\nconfig:\n%s", e.what(), osen::echo_config(cfg).c_str());
    return kRuntimeError;
  }
}

struct GradcheckArgs {
  std::string variant = "osen1";
  std::size_t q = 3;
  std::size_t side = 8;
  bool selfgop = false;
  std::size_t m = 5;
  std::size_t n = 12;
  double h = 1e-5;
  double tol = 1e-5;
  int points = 3;
  std::uint64_t seed = 0;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  osen::Rng rng = osen::make_rng(a.seed, "gradcheck");
  std::normal_distribution<double> normal(0.0, 1.0);
  // Shifts stay clear of integers, where the bilinear stencil has kinks.
  std::uniform_real_distribution<double> shift(0.15, 0.85);
  std::bernoulli_distribution sign(0.5);
  const auto stencil = a.points == 5 ? osen::Stencil::five_point : osen::Stencil::three_point;
  osen::GradCheckReport rep;
  if (a.selfgop) {
    osen::SelfGOPParams p(a.m, a.n, a.q, osen::Activation::tanh);
    for (auto& v : p.W.values()) v = 0.5 * normal(rng);
    for (auto& v : p.b.values()) v = 0.1 * normal(rng);
    osen::Tensor y({a.m}), target({a.n});
    for (auto& v : y.values()) v = normal(rng);
    for (auto& v : target.values()) v = normal(rng);
    rep = osen::selfgop_grad_check(p, y, target, a.h, a.tol, stencil);
  } else {
    osen::ModelSpec spec;
    spec.variant = parse_variant(a.variant);
    spec.order = a.q;
    spec.height = spec.width = a.side;
    osen::ModelParams model = osen::build(spec, a.seed);
    for (auto& layer : model.layers) {
      for (auto& v : layer.shifts.values()) v = sign(rng) ? shift(rng) : -shift(rng);
      for (auto& v : layer.b.values()) v = 0.1 * normal(rng);
    }
    osen::Sample s;
    s.input = osen::Tensor({1, a.side, a.side});
    s.mask = osen::Tensor({1, a.side, a.side});
    for (auto& v : s.input.values()) v = 0.5 * normal(rng);
    for (auto& v : s.mask.values()) v = normal(rng) > 0.5 ? 1.0 : 0.0;
    std::vector<osen::Sample> batch{s};
    rep = osen::grad_check(model, batch, osen::LossSpec{}, a.h, a.tol, stencil);
  }
  std::printf("checked %zu parameters, max relative error %.3e (%s[%zu])\n", rep.checked,
              rep.max_rel_error, rep.worst.tensor.c_str(), rep.worst.index);
  for (const auto& v : rep.violations)
    std::printf("  violation %s[%zu]: analytic %.10e numeric %.10e rel %.3e\n", v.tensor.c_str(),
                v.index, v.analytic, v.numeric, v.rel_error);
  return rep.ok() ? kOk : kRuntimeError;
}

int cmd_paramcount(const std::string& variant, std::size_t q, double mr, std::size_t side) {
  osen::ModelSpec spec;
  spec.variant = parse_variant(variant);
  spec.order = q;
  spec.height = spec.width = side;
  if (mr > 0) {
    spec.ncl = true;
    spec.measurement_dim = static_cast<std::size_t>(std::llround(mr * static_cast<double>(side * side)));
  }
  spec.validate();
  std::printf("%zu\n", osen::param_count(spec));
  return kOk;
}

int cmd_mask(std::size_t side, double mr, std::uint64_t seed, const std::string& out) {
  const std::size_t m = static_cast<std::size_t>(std::llround(mr * static_cast<double>(side * side)));
  const auto mask = osen::semi_random_mask(side, m, seed);
  osen::write_mask(mask, out);
  std::printf("wrote %zu frequencies (%zu in the central disk) to %s\n", mask.m(), mask.ball_count,
              out.c_str());
  return kOk;
}

struct ReconArgs {
  std::string mask;
  std::string weights;
  std::string image;
  std::int64_t phantom = -1;
  bool oracle = false;
  double epsilon = 0.2;
  double grad_tau = 0.04;
  std::string out;
  osen::TVConfig tv;
};

int cmd_recon(const ReconArgs& a) {
  const auto mask = osen::read_mask(a.mask);
  const std::size_t n = mask.n_side;
  const osen::Tensor image = !a.image.empty()
                                 ? osen::load_pgm(a.image, n)
                                 : osen::piecewise_constant_phantom(n, static_cast<std::uint64_t>(std::max<std::int64_t>(a.phantom, 0)));
  const osen::CsItem item = osen::cs_item(image, mask, a.grad_tau);

  struct Row {
    std::string name;
    osen::Tensor img;
    std::size_t iterations;
    bool converged;
  };
  std::vector<Row> rows{{"zero_filling", item.zero_filled, 0, true}};
  auto solve = [&](const std::string& name, const osen::WeightMaps* w) {
    const auto r = osen::admm_weighted_tv(item.y, mask, w, a.tv);
    rows.push_back({name, r.image, r.iterations, r.converged});
  };
  solve("tv", nullptr);
  if (!a.weights.empty()) {
    const osen::ModelParams model = osen::load_params(a.weights);
    if (model.spec.in_channels != 2 || model.spec.out_channels != 2 || model.spec.height != n)
      throw osen::ShapeError("weights file is not a " + std::to_string(n) + "x" + std::to_string(n) +
                             " two-channel gradient model");
    const osen::Tensor p = osen::infer(model, item.sample.input).probability;
    const auto w = osen::weights_from_prob(osen::channel(p, 0), osen::channel(p, 1), a.epsilon);
    solve("weighted_tv", &w);
  }
  if (a.oracle) {
    const auto w = osen::weights_from_prob(osen::channel(item.sample.mask, 0),
                                           osen::channel(item.sample.mask, 1), a.epsilon);
    solve("oracle_weighted_tv", &w);
  }

  std::string csv = "method,psnr_db,nmse,iterations,converged\r\n";
  for (const auto& r : rows) {
    const auto q = osen::psnr_nmse(image, r.img, 1.0);
    std::printf("%-20s psnr %8.3f dB  nmse %.3e  iterations %zu%s\n", r.name.c_str(), q.psnr_db, q.nmse,
                r.iterations, r.converged ? "" : " (not converged)");
    csv += r.name + "," + osen::detail::csv_number(q.psnr_db) + "," + osen::detail::csv_number(q.nmse) +
           "," + std::to_string(r.iterations) + "," + (r.converged ? "true" : "false") + "\r\n";
  }
  if (!a.out.empty()) {
    std::filesystem::create_directories(a.out);
    osen::detail::write_text(std::filesystem::path(a.out) / "recon.csv", csv);
    osen::write_pgm((std::filesystem::path(a.out) / "reference.pgm").string(), image);
    for (const auto& r : rows) osen::write_pgm((std::filesystem::path(a.out) / (r.name + ".pgm")).string(), r.img);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Operational support estimator networks"};
  app.require_subcommand(1);

  std::string config_path, output;
  auto* run = app.add_subcommand("run", "Run an experiment configuration");
  run->add_option("config", config_path, "Experiment config file")->required();
  run->add_option("--output", output, "Override the report directory");

  GradcheckArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  gc->add_option("--variant", ga.variant, "osen1 or osen2");
  gc->add_option("--q", ga.q, "Taylor order");
  gc->add_option("--side", ga.side, "Input side length");
  gc->add_flag("--selfgop", ga.selfgop, "Check a standalone Self-GOP layer instead");
  gc->add_option("--m", ga.m, "Self-GOP input length");
  gc->add_option("--n", ga.n, "Self-GOP output length");
  gc->add_option("--step", ga.h, "Finite-difference step");
  gc->add_option("--tol", ga.tol, "Relative error tolerance");
  gc->add_option("--points", ga.points, "Central difference stencil size")
      ->check(CLI::IsMember({3, 5}));
  gc->add_option("--seed", ga.seed, "Seed");

  std::string pc_variant = "osen1";
  std::size_t pc_q = 1, pc_side = 28;
  double pc_mr = 0.0;
  auto* pc = app.add_subcommand("paramcount", "Trainable parameter count of a configuration");
  pc->add_option("--variant", pc_variant, "osen1 or osen2")->required();
  pc->add_option("--q", pc_q, "Taylor order")->required();
  pc->add_option("--mr", pc_mr, "Measurement rate; when given, counts the NCL variant");
  pc->add_option("--side", pc_side, "Image side length");

  std::size_t mk_side = 64;
  double mk_mr = 0.25;
  std::uint64_t mk_seed = 0;
  std::string mk_out;
  auto* mk = app.add_subcommand("mask", "Write a semi-random Fourier sampling mask");
  mk->add_option("--side", mk_side, "Image side length");
  mk->add_option("--mr", mk_mr, "Measurement rate");
  mk->add_option("--seed", mk_seed, "Seed");
  mk->add_option("--out", mk_out, "Output file")->required();

  ReconArgs ra;
  auto* rc = app.add_subcommand("recon", "Zero-filling, TV and weighted-TV reconstruction of one image");
  rc->add_option("--mask", ra.mask, "Mask file")->required();
  rc->add_option("--weights", ra.weights, "Trained two-channel gradient model");
  rc->add_option("--image", ra.image, "Graymap to reconstruct");
  rc->add_option("--phantom", ra.phantom, "Phantom seed (used when no image is given)");
  rc->add_flag("--oracle", ra.oracle, "Also run with weights from the true gradient support");
  rc->add_option("--epsilon", ra.epsilon, "Weight offset");
  rc->add_option("--grad-tau", ra.grad_tau, "Gradient support threshold");
  rc->add_option("--lambda", ra.tv.lambda, "TV weight");
  rc->add_option("--rho", ra.tv.rho, "ADMM penalty");
  rc->add_option("--max-it", ra.tv.max_it, "ADMM iteration cap");
  rc->add_option("--out", ra.out, "Directory for recon.csv and images");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*run) return cmd_run(config_path, output);
    if (*gc) return cmd_gradcheck(ga);
    if (*pc) return cmd_paramcount(pc_variant, pc_q, pc_mr, pc_side);
    if (*mk) return cmd_mask(mk_side, mk_mr, mk_seed, mk_out);
    if (*rc) return cmd_recon(ra);
  } catch (const osen::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigError;
  } catch (const osen::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return (*pc) ? kConfigError : kRuntimeError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntimeError;
  }
  return kOk;
}
