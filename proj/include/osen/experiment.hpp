#pragma once

// Configuration-driven experiment pipelines and CSV report emission.
//
//   se_spatial    Gaussian sensing of sparse 2-D signals, proxy (or NCL)
//                 input, support estimation swept over measurement noise.
//   rbc_classify  PCA-projected class dictionary laid out in blocks, hybrid
//                 loss, accuracy against the CRC baseline.
//   cs_tv         Semi-random Fourier sampling, gradient-domain support
//                 estimation, weighted-TV ADMM against unweighted TV and
//                 zero-filling.

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "osen/config.hpp"
#include "osen/data.hpp"
#include "osen/error.hpp"
#include "osen/models.hpp"
#include "osen/numerics.hpp"
#include "osen/recon.hpp"
#include "osen/rng.hpp"
#include "osen/sparse.hpp"
#include "osen/training.hpp"

namespace osen {

/// A pipeline stage failed; `stage` names it.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct NoisePoint {
  double snr_db = 0.0;
  SeMetrics metrics;
};

struct RunResult {
  Pipeline pipeline = Pipeline::se_spatial;
  std::string variant;
  bool ncl = false;
  double mr = 0.0;
  std::size_t q = 0;
  std::uint64_t seed = 0;
  std::size_t param_count = 0;
  /// Named metrics in a fixed, pipeline-specific order.
  std::vector<std::pair<std::string, double>> metrics;
  std::vector<NoisePoint> noise;        // se_spatial only
  std::vector<EpochRecord> history;
  std::size_t epochs_completed = 0;
  bool budget_exhausted = false;
  double wall_seconds = 0.0;

  double metric(const std::string& name) const {
    for (const auto& [k, v] : metrics)
      if (k == name) return v;
    throw DomainError("run has no metric '" + name + "'");
  }
};

struct ExperimentReport {
  ExperimentConfig config;
  std::vector<RunResult> runs;  // config order: mr, then q, then seed
};

namespace detail {

template <class F>
auto stage(const char* name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

inline std::size_t rounded_count(double fraction, std::size_t n) {
  return static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
}

inline std::vector<Tensor> take(const std::vector<Tensor>& all, std::size_t from, std::size_t count) {
  return {all.begin() + static_cast<long>(from), all.begin() + static_cast<long>(from + count)};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// LMMSE regularization search

/// Chooses lambda for (D^T D + lambda I)^-1 D^T y by minimizing the mean
/// squared proxy error over validation signals: a 12-point log grid on
/// [1e-10, 1e2] followed by a 9-point refinement around the best point.
inline double select_lmmse_lambda(const Tensor& D, const std::vector<Tensor>& signals) {
  if (signals.empty()) throw DomainError("lambda search needs validation signals");
  const auto d = as_matrix(D);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(d.transpose() * d);
  const Eigen::VectorXd lam = eig.eigenvalues().cwiseMax(0.0);
  const Eigen::MatrixXd& V = eig.eigenvectors();
  std::vector<Eigen::VectorXd> c, u;
  for (const auto& x : signals) {
    const Eigen::VectorXd xv = as_vector(x);
    c.push_back(V.transpose() * (d.transpose() * (d * xv)));
    u.push_back(V.transpose() * xv);
  }
  auto error = [&](double l) {
    double e = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i)
      e += (c[i].array() / (lam.array() + l) - u[i].array()).square().sum();
    return e;
  };
  const double lo = -10.0, hi = 2.0, step = (hi - lo) / 11.0;
  double best_exp = lo, best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 12; ++i) {
    const double ex = lo + step * i;
    const double e = error(std::pow(10.0, ex));
    if (e < best) best = e, best_exp = ex;
  }
  const double center = best_exp;
  for (int i = -4; i <= 4; ++i) {
    const double ex = center + step * i / 8.0;
    const double e = error(std::pow(10.0, ex));
    if (e < best) best = e, best_exp = ex;
  }
  return std::pow(10.0, best_exp);
}

// ---------------------------------------------------------------------------
// Pipelines

struct RunKey {
  double mr;
  std::size_t q;
  std::uint64_t seed;
};

/// Data loaded once per experiment and shared read-only across runs.
struct SharedData {
  std::optional<ImageSet> images;
};

inline ModelSpec base_spec(const ExperimentConfig& cfg, std::size_t q) {
  ModelSpec s;
  s.variant = cfg.variant == "osen2" ? Variant::osen2 : Variant::osen1;
  s.order = q;
  return s;
}

inline LossSpec loss_spec(const ExperimentConfig& cfg) {
  LossSpec l;
  l.kind = cfg.loss == "hybrid" ? LossKind::hybrid
                                : cfg.loss == "group_l2" ? LossKind::group_l2 : LossKind::mse_mask;
  l.lambda_g = cfg.lambda_g;
  l.lambda_c = cfg.lambda_c;
  return l;
}

inline TrainOptions train_options(const ExperimentConfig& cfg, std::uint64_t seed) {
  TrainOptions o;
  o.epochs = cfg.epochs;
  o.batch_size = cfg.batch_size;
  o.seed = derive_seed(seed, "training");
  o.learning_rate = cfg.learning_rate;
  o.freeze_shifts = cfg.freeze_shifts;
  o.threshold = cfg.threshold;
  o.time_budget_seconds = cfg.time_budget;
  return o;
}

inline std::string model_file_name(const ExperimentConfig& cfg, const RunKey& k) {
  std::ostringstream os;
  os << to_string(cfg.pipeline) << '_' << cfg.variant << (cfg.ncl ? "_ncl" : "") << "_mr" << k.mr
     << "_q" << k.q << "_seed" << k.seed << ".osen";
  return os.str();
}

inline void record_training(RunResult& r, const TrainResult& t) {
  r.history = t.history;
  r.epochs_completed = t.history.size();
  r.budget_exhausted = t.budget_exhausted;
}

inline void maybe_save(const ExperimentConfig& cfg, const RunKey& k, const ModelParams& p) {
  if (!cfg.save_models) return;
  detail::stage("save-model", [&] {
    const auto dir = std::filesystem::path(cfg.output_dir) / "models";
    std::filesystem::create_directories(dir);
    save_params(p, (dir / model_file_name(cfg, k)).string());
  });
}

/// Signals (flattened side x side images) for the spatial SE pipeline.
struct SignalSplit {
  std::vector<Tensor> train, validation, test;
  std::size_t side = 0;
};

inline SignalSplit se_signals(const ExperimentConfig& cfg, std::uint64_t seed, const SharedData& shared) {
  SignalSplit s;
  if (cfg.dataset == "synthetic") {
    s.side = cfg.side;
    const std::size_t n = s.side * s.side;
    const std::size_t k = detail::rounded_count(cfg.sparsity, n);
    const auto all = synth_sparse(n, k, cfg.train_count + cfg.val_count + cfg.test_count,
                                  derive_seed(seed, "signals"));
    s.train = detail::take(all, 0, cfg.train_count);
    s.validation = detail::take(all, cfg.train_count, cfg.val_count);
    s.test = detail::take(all, cfg.train_count + cfg.val_count, cfg.test_count);
    return s;
  }
  if (cfg.dataset != "idx") throw DomainError("se_spatial supports synthetic or idx datasets");
  const ImageSet& set = *shared.images;
  if (set.height != set.width) throw ShapeError("se_spatial needs square images");
  s.side = set.height;
  const SplitIndices split = split_5_1_1(set.size(), derive_seed(seed, "split"));
  auto gather = [&](const std::vector<std::size_t>& idx, std::size_t cap) {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < idx.size() && i < cap; ++i)
      out.push_back(set.images[idx[i]].reshaped({set.images[idx[i]].size()}));
    return out;
  };
  s.train = gather(split.train, cfg.train_count);
  s.validation = gather(split.validation, cfg.val_count);
  s.test = gather(split.test, cfg.test_count);
  return s;
}

inline RunResult run_se_spatial(const ExperimentConfig& cfg, const RunKey& key, const SharedData& shared) {
  RunResult r;
  const SignalSplit data = detail::stage("data", [&] { return se_signals(cfg, key.seed, shared); });
  const std::size_t side = data.side, n = side * side;
  const std::size_t m = detail::rounded_count(key.mr, n);

  double lambda = 0.0;
  const SensingProblem problem = detail::stage("sensing", [&] {
    Tensor A = gaussian_measurement_matrix(m, n, derive_seed(key.seed, "sensing"));
    ProxyKind kind = ProxyKind::mc();
    if (cfg.proxy == "lmmse") {
      lambda = cfg.lmmse_lambda > 0 ? cfg.lmmse_lambda
                                    : select_lmmse_lambda(A, data.validation.empty() ? data.train
                                                                                      : data.validation);
      kind = ProxyKind::lmmse(lambda);
    }
    return make_sensing_problem(std::move(A), kind);
  });

  auto make_sample = [&](const Tensor& x, const Tensor& y) {
    Sample s;
    s.input = cfg.ncl ? y : proxy(problem, y).reshaped({1, side, side});
    s.mask = support_mask_from_signal(x, 0.0).reshaped({1, side, side});
    return s;
  };
  auto clean_samples = [&](const std::vector<Tensor>& xs) {
    std::vector<Sample> out;
    for (const auto& x : xs) out.push_back(make_sample(x, matvec(problem.A, x)));
    return out;
  };
  const auto train = detail::stage("proxy", [&] { return clean_samples(data.train); });
  const auto val = detail::stage("proxy", [&] { return clean_samples(data.validation); });

  ModelSpec spec = base_spec(cfg, key.q);
  spec.height = spec.width = side;
  spec.ncl = cfg.ncl;
  spec.measurement_dim = cfg.ncl ? m : 0;
  const TrainResult trained = detail::stage("train", [&] {
    ModelParams init = build(spec, derive_seed(key.seed, "init"), cfg.ncl ? &problem.B : nullptr);
    return train_model(std::move(init), train, val, loss_spec(cfg), train_options(cfg, key.seed));
  });
  record_training(r, trained);
  maybe_save(cfg, key, trained.params);

  detail::stage("evaluate", [&] {
    for (std::size_t t = 0; t < cfg.snr_db.size(); ++t) {
      std::vector<Sample> test;
      for (std::size_t i = 0; i < data.test.size(); ++i) {
        const Tensor y = add_measurement_noise(matvec(problem.A, data.test[i]), cfg.snr_db[t],
                                               derive_seed(key.seed, "noise", t * data.test.size() + i));
        test.push_back(make_sample(data.test[i], y));
      }
      r.noise.push_back({cfg.snr_db[t], evaluate_support(trained.params, test, cfg.threshold)});
    }
  });

  const SeMetrics& m0 = r.noise.front().metrics;
  r.param_count = param_count(trained.params);
  r.metrics = {{"f1", m0.f1},
               {"f2", m0.f2},
               {"precision", m0.precision},
               {"sensitivity", m0.sensitivity},
               {"specificity", m0.specificity},
               {"accuracy", m0.accuracy},
               {"proxy_lambda", lambda},
               {"best_epoch", static_cast<double>(trained.best_epoch)}};
  return r;
}

/// Class atoms and queries for the classification pipeline.
struct ClassData {
  std::vector<Tensor> atoms;  // per class: atoms x d
  std::vector<std::pair<Tensor, int>> train, validation, test;
};

inline ClassData rbc_data(const ExperimentConfig& cfg, std::uint64_t seed, const SharedData& shared) {
  const std::size_t atoms = cfg.group_h * cfg.group_w;
  ClassData data;
  if (cfg.dataset == "synthetic") {
    const SubspaceClassGenerator gen(cfg.classes, cfg.signal_dim, cfg.class_rank, cfg.class_noise,
                                     derive_seed(seed, "classes"));
    for (std::size_t c = 0; c < cfg.classes; ++c) {
      Tensor a({atoms, cfg.signal_dim});
      for (std::size_t t = 0; t < atoms; ++t) {
        const Tensor s = gen.sample(c, t);
        std::copy(s.values().begin(), s.values().end(), a.values().begin() + static_cast<long>(t * cfg.signal_dim));
      }
      data.atoms.push_back(std::move(a));
    }
    std::uint64_t next = atoms;
    auto queries = [&](std::size_t count) {
      std::vector<std::pair<Tensor, int>> out;
      for (std::size_t i = 0; i < count; ++i) {
        const std::size_t c = i % cfg.classes;
        out.emplace_back(gen.sample(c, next + i / cfg.classes), static_cast<int>(c));
      }
      next += count / cfg.classes + 1;
      return out;
    };
    data.train = queries(cfg.train_count);
    data.validation = queries(cfg.val_count);
    data.test = queries(cfg.test_count);
    return data;
  }
  if (cfg.dataset != "idx") throw DomainError("rbc_classify supports synthetic or idx datasets");
  const ImageSet& set = *shared.images;
  if (set.labels.empty()) throw DomainError("rbc_classify on idx data needs labels_path");
  const std::size_t d = set.height * set.width;
  const int classes = *std::max_element(set.labels.begin(), set.labels.end()) + 1;
  std::vector<std::size_t> order(set.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed, "atom-selection");
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> chosen(static_cast<std::size_t>(classes));
  std::vector<std::size_t> rest;
  for (std::size_t i : order) {
    auto& bucket = chosen[static_cast<std::size_t>(set.labels[i])];
    if (bucket.size() < atoms) bucket.push_back(i);
    else rest.push_back(i);
  }
  for (int c = 0; c < classes; ++c) {
    if (chosen[static_cast<std::size_t>(c)].size() < atoms)
      throw DomainError("class " + std::to_string(c) + " has fewer than " + std::to_string(atoms) + " images");
    Tensor a({atoms, d});
    for (std::size_t t = 0; t < atoms; ++t) {
      const Tensor& img = set.images[chosen[static_cast<std::size_t>(c)][t]];
      std::copy(img.values().begin(), img.values().end(), a.values().begin() + static_cast<long>(t * d));
    }
    data.atoms.push_back(std::move(a));
  }
  const SplitIndices split = split_5_1_1(rest.size(), derive_seed(seed, "split"));
  auto gather = [&](const std::vector<std::size_t>& idx, std::size_t cap) {
    std::vector<std::pair<Tensor, int>> out;
    for (std::size_t i = 0; i < idx.size() && i < cap; ++i) {
      const std::size_t j = rest[idx[i]];
      out.emplace_back(set.images[j].reshaped({d}), set.labels[j]);
    }
    return out;
  };
  data.train = gather(split.train, cfg.train_count);
  data.validation = gather(split.validation, cfg.val_count);
  data.test = gather(split.test, cfg.test_count);
  return data;
}

inline RunResult run_rbc_classify(const ExperimentConfig& cfg, const RunKey& key, const SharedData& shared) {
  RunResult r;
  const ClassData data = detail::stage("data", [&] { return rbc_data(cfg, key.seed, shared); });
  const std::size_t classes = data.atoms.size(), atoms = cfg.group_h * cfg.group_w;
  const std::size_t d = data.atoms.front().extent(1);
  const std::size_t m = detail::rounded_count(key.mr, d);

  const Tensor A = detail::stage("pca", [&] {
    Tensor X({classes * atoms, d});
    for (std::size_t c = 0; c < classes; ++c)
      std::copy(data.atoms[c].values().begin(), data.atoms[c].values().end(),
                X.values().begin() + static_cast<long>(c * atoms * d));
    return pca_projection(X, m);
  });
  const ClassificationDictionary dict = detail::stage("dictionary", [&] {
    return build_classification_dictionary(data.atoms, A, cfg.group_h, cfg.group_w, cfg.block_rows);
  });
  const CrcClassifier crc = detail::stage("crc", [&] {
    return CrcClassifier(dict.D, cfg.crc_lambda, dict.column_class);
  });
  const Tensor B = denoiser(dict.D, ProxyKind::lmmse(cfg.crc_lambda));

  auto measure = [&](const Tensor& x) {
    Tensor y = matvec(A, x);
    const double nrm = std::sqrt(squared_norm(y.values()));
    if (nrm == 0.0) throw DomainError("query projects to zero");
    for (auto& v : y.values()) v /= nrm;
    return y;
  };
  auto samples = [&](const std::vector<std::pair<Tensor, int>>& qs) {
    std::vector<Sample> out;
    for (const auto& [x, label] : qs) {
      Sample s;
      s.input = matvec(B, measure(x)).reshaped({1, dict.height, dict.width});
      s.mask = dict.class_mask(static_cast<std::size_t>(label)).reshaped({1, dict.height, dict.width});
      s.label = label;
      out.push_back(std::move(s));
    }
    return out;
  };
  const auto train = detail::stage("proxy", [&] { return samples(data.train); });
  const auto val = detail::stage("proxy", [&] { return samples(data.validation); });
  const auto test = detail::stage("proxy", [&] { return samples(data.test); });

  ModelSpec spec = base_spec(cfg, key.q);
  spec.height = dict.height;
  spec.width = dict.width;
  spec.head = Head::hybrid;
  spec.group_h = cfg.group_h;
  spec.group_w = cfg.group_w;
  const TrainResult trained = detail::stage("train", [&] {
    return train_model(build(spec, derive_seed(key.seed, "init")), train, val, loss_spec(cfg),
                       train_options(cfg, key.seed));
  });
  record_training(r, trained);
  maybe_save(cfg, key, trained.params);

  double crc_hits = 0.0;
  SeMetrics mask_metrics;
  const double accuracy = detail::stage("evaluate", [&] {
    for (const auto& [x, label] : data.test)
      if (static_cast<int>(crc.classify(measure(x)).label) == label) crc_hits += 1.0;
    mask_metrics = evaluate_support(trained.params, test, cfg.threshold);
    return evaluate_accuracy(trained.params, test);
  });
  const double n_test = static_cast<double>(std::max<std::size_t>(1, data.test.size()));
  r.param_count = param_count(trained.params);
  r.metrics = {{"accuracy", accuracy},
               {"crc_accuracy", crc_hits / n_test},
               {"chance", 1.0 / static_cast<double>(classes)},
               {"mask_f1", mask_metrics.f1},
               {"measurement_dim", static_cast<double>(m)},
               {"best_epoch", static_cast<double>(trained.best_epoch)}};
  return r;
}

/// Measurement, zero-filling and gradient-domain sample of one image.
struct CsItem {
  Tensor image;
  ComplexTensor y;
  Tensor zero_filled;
  Sample sample;  // 2-channel gradient proxy -> 2-channel gradient support
};

inline CsItem cs_item(const Tensor& image, const FourierSamplingMask& mask, double grad_tau) {
  CsItem it;
  it.image = image;
  it.y = sample_fourier(image, mask);
  it.zero_filled = zero_filling(it.y, mask);
  const std::size_t n = mask.n_side, plane = n * n;
  const auto [gx, gy] = grad_ops(it.zero_filled);
  const auto [vx, vy] = gradient_support(image, grad_tau);
  it.sample.input = Tensor({2, n, n});
  it.sample.mask = Tensor({2, n, n});
  std::copy(gx.values().begin(), gx.values().end(), it.sample.input.values().begin());
  std::copy(gy.values().begin(), gy.values().end(), it.sample.input.values().begin() + static_cast<long>(plane));
  std::copy(vx.values().begin(), vx.values().end(), it.sample.mask.values().begin());
  std::copy(vy.values().begin(), vy.values().end(), it.sample.mask.values().begin() + static_cast<long>(plane));
  return it;
}

inline Tensor channel(const Tensor& t, std::size_t c) {
  const std::size_t n = t.extent(1), plane = n * t.extent(2);
  Tensor out({t.extent(1), t.extent(2)});
  std::copy_n(t.values().begin() + static_cast<long>(c * plane), plane, out.values().begin());
  return out;
}

inline RunResult run_cs_tv(const ExperimentConfig& cfg, const RunKey& key, const SharedData& shared) {
  RunResult r;
  const std::size_t n = cfg.side;
  const FourierSamplingMask mask = detail::stage("mask", [&] {
    if (!cfg.mask_path.empty()) {
      FourierSamplingMask mk = read_mask(cfg.mask_path);
      if (mk.n_side != n) throw ShapeError("mask n_side does not match side");
      return mk;
    }
    return semi_random_mask(n, detail::rounded_count(key.mr, n * n), derive_seed(key.seed, "mask"));
  });

  std::vector<Tensor> train_img, val_img, test_img;
  detail::stage("data", [&] {
    if (cfg.dataset == "synthetic") {
      std::size_t idx = 0;
      auto make = [&](std::vector<Tensor>& dst, std::size_t count) {
        for (std::size_t i = 0; i < count; ++i)
          dst.push_back(piecewise_constant_phantom(n, derive_seed(key.seed, "phantom", idx++)));
      };
      make(train_img, cfg.use_network ? cfg.train_count : 0);
      make(val_img, cfg.use_network ? cfg.val_count : 0);
      make(test_img, cfg.test_count);
      return;
    }
    if (cfg.dataset != "images") throw DomainError("cs_tv supports synthetic or images datasets");
    const ImageSet& set = *shared.images;
    const SplitIndices split = split_5_1_1(set.size(), derive_seed(key.seed, "split"));
    auto gather = [&](std::vector<Tensor>& dst, const std::vector<std::size_t>& idx, std::size_t cap) {
      for (std::size_t i = 0; i < idx.size() && i < cap; ++i) dst.push_back(set.images[idx[i]]);
    };
    if (cfg.use_network) {
      gather(train_img, split.train, cfg.train_count);
      gather(val_img, split.validation, cfg.val_count);
    }
    gather(test_img, split.test, cfg.test_count);
  });
  if (test_img.empty()) throw StageError("data", "no test images");

  auto items = [&](const std::vector<Tensor>& imgs) {
    std::vector<CsItem> out;
    for (const auto& img : imgs) out.push_back(cs_item(img, mask, cfg.grad_tau));
    return out;
  };
  const auto train_items = detail::stage("measure", [&] { return items(train_img); });
  const auto val_items = detail::stage("measure", [&] { return items(val_img); });
  const auto test_items = detail::stage("measure", [&] { return items(test_img); });

  ModelSpec spec = base_spec(cfg, key.q);
  spec.height = spec.width = n;
  spec.in_channels = spec.out_channels = 2;
  std::optional<ModelParams> model;
  if (cfg.use_network) {
    std::vector<Sample> train, val;
    for (const auto& it : train_items) train.push_back(it.sample);
    for (const auto& it : val_items) val.push_back(it.sample);
    const TrainResult trained = detail::stage("train", [&] {
      return train_model(build(spec, derive_seed(key.seed, "init")), train, val, loss_spec(cfg),
                         train_options(cfg, key.seed));
    });
    record_training(r, trained);
    maybe_save(cfg, key, trained.params);
    model = trained.params;
  }

  TVConfig tv;
  tv.lambda = cfg.tv_lambda;
  tv.rho = cfg.tv_rho;
  tv.relax_alpha = cfg.tv_relax_alpha;
  tv.abs_tol = cfg.tv_abs_tol;
  tv.rel_tol = cfg.tv_rel_tol;
  tv.max_it = cfg.tv_max_it;

  struct Acc {
    double psnr = 0.0, nmse = 0.0;
    void add(const QualityScores& q) { psnr += q.psnr_db, nmse += q.nmse; }
  };
  Acc zf, plain, weighted, oracle;
  double solves = 0.0, converged = 0.0, iterations = 0.0;
  std::vector<SeMetrics> grad_metrics;
  detail::stage("reconstruct", [&] {
    auto solve = [&](const CsItem& it, const WeightMaps* w, Acc& acc) {
      const TVResult res = admm_weighted_tv(it.y, mask, w, tv);
      acc.add(psnr_nmse(it.image, res.image, 1.0));
      solves += 1.0;
      converged += res.converged ? 1.0 : 0.0;
      iterations += static_cast<double>(res.iterations);
    };
    for (const auto& it : test_items) {
      zf.add(psnr_nmse(it.image, it.zero_filled, 1.0));
      solve(it, nullptr, plain);
      if (model) {
        const Tensor p = infer(*model, it.sample.input).probability;
        grad_metrics.push_back(se_metrics(it.sample.mask.values(), binarize(p, cfg.threshold).values()));
        const WeightMaps w = weights_from_prob(channel(p, 0), channel(p, 1), cfg.epsilon);
        solve(it, &w, weighted);
      }
      if (cfg.oracle_weights) {
        const WeightMaps w = weights_from_prob(channel(it.sample.mask, 0), channel(it.sample.mask, 1), cfg.epsilon);
        solve(it, &w, oracle);
      }
    }
  });

  const double count = static_cast<double>(test_items.size());
  r.param_count = param_count(spec);
  r.metrics = {{"psnr_zf", zf.psnr / count}, {"nmse_zf", zf.nmse / count},
               {"psnr_tv", plain.psnr / count}, {"nmse_tv", plain.nmse / count}};
  if (model) {
    const SeMetrics g = macro_average(grad_metrics);
    r.metrics.insert(r.metrics.end(), {{"psnr_wtv", weighted.psnr / count},
                                       {"nmse_wtv", weighted.nmse / count},
                                       {"grad_f1", g.f1},
                                       {"grad_f2", g.f2}});
  }
  if (cfg.oracle_weights)
    r.metrics.insert(r.metrics.end(), {{"psnr_oracle_wtv", oracle.psnr / count},
                                       {"nmse_oracle_wtv", oracle.nmse / count}});
  r.metrics.insert(r.metrics.end(), {{"converged_fraction", converged / solves},
                                     {"mean_iterations", iterations / solves},
                                     {"measurement_count", static_cast<double>(mask.m())}});
  return r;
}

// ---------------------------------------------------------------------------
// Runner

/// Worker count: OSEN_THREADS when set (a positive integer), otherwise the
/// hardware concurrency; never more than the number of runs.
inline std::size_t worker_count(std::size_t runs) {
  std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("OSEN_THREADS")) {
    const std::string s(env);
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos || std::stoul(s) == 0)
      throw ConfigError("OSEN_THREADS must be a positive integer, got '" + s + "'");
    workers = std::stoul(s);
  }
  return std::max<std::size_t>(1, std::min(workers, runs));
}

inline std::vector<RunKey> run_keys(const ExperimentConfig& cfg) {
  std::vector<RunKey> keys;
  for (double mr : cfg.mr)
    for (std::size_t q : cfg.q)
      for (std::uint64_t seed : cfg.seeds) keys.push_back({mr, q, seed});
  return keys;
}

inline RunResult run_one(const ExperimentConfig& cfg, const RunKey& key, const SharedData& shared) {
  const auto t0 = std::chrono::steady_clock::now();
  RunResult r;
  switch (cfg.pipeline) {
    case Pipeline::se_spatial: r = run_se_spatial(cfg, key, shared); break;
    case Pipeline::rbc_classify: r = run_rbc_classify(cfg, key, shared); break;
    case Pipeline::cs_tv: r = run_cs_tv(cfg, key, shared); break;
  }
  r.pipeline = cfg.pipeline;
  r.variant = cfg.variant;
  r.ncl = cfg.ncl;
  r.mr = key.mr;
  r.q = key.q;
  r.seed = key.seed;
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

/// Executes every (mr, q, seed) run of the configuration. Runs execute in
/// parallel worker slots; results are kept in config order. A failing run
/// raises StageError naming the stage and the run.
inline ExperimentReport run_experiment(const ExperimentConfig& cfg) {
  SharedData shared;
  detail::stage("ingest", [&] {
    if (cfg.dataset == "idx") shared.images = ingest_idx(cfg.dataset_path, cfg.labels_path);
    else if (cfg.dataset == "images") shared.images = ingest_image_dir(cfg.dataset_path, cfg.side);
  });
  const auto keys = run_keys(cfg);
  ExperimentReport report{cfg, std::vector<RunResult>(keys.size())};
  std::vector<std::exception_ptr> errors(keys.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < keys.size(); i = next++) {
      try {
        report.runs[i] = run_one(cfg, keys[i], shared);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t workers = worker_count(keys.size());
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
  }
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const StageError& e) {
      std::ostringstream os;
      os << "run mr=" << keys[i].mr << " q=" << keys[i].q << " seed=" << keys[i].seed << ": " << e.what();
      throw StageError(e.stage(), os.str());
    } catch (const std::exception& e) {
      throw StageError("run", e.what());
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Reports

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

inline std::string csv_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string csv_row(const std::vector<std::string>& fields) {
  std::string line;
  for (std::size_t i = 0; i < fields.size(); ++i) line += (i ? "," : "") + csv_field(fields[i]);
  return line + "\r\n";
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw FormatError("cannot write " + p.string());
  out << text;
  if (!out) throw FormatError("failed writing " + p.string());
}

inline std::vector<std::string> run_prefix(const RunResult& r, const std::string& seed) {
  return {to_string(r.pipeline), r.variant, r.ncl ? "true" : "false", csv_number(r.mr),
          std::to_string(r.q), seed, std::to_string(r.param_count)};
}

inline const std::vector<std::string> kPrefixHeader = {"pipeline", "variant", "ncl", "mr",
                                                       "q", "seed", "param_count"};

}  // namespace detail

/// Seed-averaged metrics of each (mr, q) group, in config order.
inline std::vector<RunResult> seed_means(const ExperimentReport& rep) {
  std::vector<RunResult> means;
  const std::size_t per = rep.config.seeds.size();
  for (std::size_t g = 0; g * per < rep.runs.size(); ++g) {
    RunResult m = rep.runs[g * per];
    for (auto& [k, v] : m.metrics) v = 0.0;
    for (auto& np : m.noise) np.metrics = SeMetrics{};
    for (std::size_t s = 0; s < per; ++s) {
      const RunResult& r = rep.runs[g * per + s];
      for (std::size_t i = 0; i < m.metrics.size(); ++i) m.metrics[i].second += r.metrics[i].second;
      for (std::size_t t = 0; t < m.noise.size(); ++t) {
        auto& a = m.noise[t].metrics;
        const auto& b = r.noise[t].metrics;
        a.precision += b.precision, a.specificity += b.specificity, a.sensitivity += b.sensitivity;
        a.f1 += b.f1, a.f2 += b.f2, a.accuracy += b.accuracy;
      }
    }
    const double d = static_cast<double>(per);
    for (auto& [k, v] : m.metrics) v /= d;
    for (auto& np : m.noise) {
      auto& a = np.metrics;
      a.precision /= d, a.specificity /= d, a.sensitivity /= d, a.f1 /= d, a.f2 /= d, a.accuracy /= d;
    }
    means.push_back(std::move(m));
  }
  return means;
}

inline std::string metrics_csv(const std::vector<RunResult>& runs, bool mean_rows) {
  if (runs.empty()) return "";
  std::vector<std::string> header = detail::kPrefixHeader;
  for (const auto& [k, v] : runs.front().metrics) header.push_back(k);
  std::string out = detail::csv_row(header);
  for (const auto& r : runs) {
    auto row = detail::run_prefix(r, mean_rows ? "mean" : std::to_string(r.seed));
    for (const auto& [k, v] : r.metrics) row.push_back(detail::csv_number(v));
    out += detail::csv_row(row);
  }
  return out;
}

/// F1 (and companions) against noise level, one row per run and SNR.
inline std::string noise_sweep_csv(const std::vector<RunResult>& runs, bool mean_rows) {
  std::vector<std::string> header = detail::kPrefixHeader;
  for (const char* h : {"snr_db", "f1", "f2", "precision", "sensitivity", "specificity", "accuracy"})
    header.push_back(h);
  std::string out = detail::csv_row(header);
  for (const auto& r : runs)
    for (const auto& np : r.noise) {
      auto row = detail::run_prefix(r, mean_rows ? "mean" : std::to_string(r.seed));
      for (double v : {np.snr_db, np.metrics.f1, np.metrics.f2, np.metrics.precision,
                       np.metrics.sensitivity, np.metrics.specificity, np.metrics.accuracy})
        row.push_back(detail::csv_number(v));
      out += detail::csv_row(row);
    }
  return out;
}

/// Writes metrics.csv, metrics_mean.csv, history.csv, timing.csv,
/// config.txt and (for se_spatial) noise_sweep.csv / noise_sweep_mean.csv.
/// Everything except timing.csv is a deterministic function of the config.
inline void emit_report(const ExperimentReport& rep, const std::string& dir) {
  namespace fs = std::filesystem;
  try {
    fs::create_directories(dir);
  } catch (const std::exception& e) {
    throw FormatError("cannot create report directory " + dir + ": " + e.what());
  }
  const fs::path root(dir);
  const auto means = seed_means(rep);
  detail::write_text(root / "config.txt", echo_config(rep.config));
  detail::write_text(root / "metrics.csv", metrics_csv(rep.runs, false));
  detail::write_text(root / "metrics_mean.csv", metrics_csv(means, true));
  if (rep.config.pipeline == Pipeline::se_spatial) {
    detail::write_text(root / "noise_sweep.csv", noise_sweep_csv(rep.runs, false));
    detail::write_text(root / "noise_sweep_mean.csv", noise_sweep_csv(means, true));
  }

  std::vector<std::string> hh = detail::kPrefixHeader;
  for (const char* h : {"epoch", "train_loss", "val_loss", "val_f1"}) hh.push_back(h);
  std::string history = detail::csv_row(hh);
  std::vector<std::string> th = detail::kPrefixHeader;
  for (const char* h : {"wall_seconds", "epochs_completed", "budget_exhausted"}) th.push_back(h);
  std::string timing = detail::csv_row(th);
  for (const auto& r : rep.runs) {
    for (const auto& e : r.history) {
      auto row = detail::run_prefix(r, std::to_string(r.seed));
      for (double v : {static_cast<double>(e.epoch), e.train_loss, e.val_loss, e.val_f1})
        row.push_back(detail::csv_number(v));
      history += detail::csv_row(row);
    }
    auto row = detail::run_prefix(r, std::to_string(r.seed));
    row.push_back(detail::csv_number(r.wall_seconds));
    row.push_back(std::to_string(r.epochs_completed));
    row.push_back(r.budget_exhausted ? "true" : "false");
    timing += detail::csv_row(row);
  }
  detail::write_text(root / "history.csv", history);
  detail::write_text(root / "timing.csv", timing);
}

}  // namespace osen
