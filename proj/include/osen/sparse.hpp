#pragma once

// Compressive sensing problems, linear proxies, noise, support masks,
// evaluation metrics, the collaborative-representation classifier and an
// ISTA lasso reference solver.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "osen/error.hpp"
#include "osen/numerics.hpp"
#include "osen/rng.hpp"
#include "osen/tensor.hpp"

namespace osen {

// ---------------------------------------------------------------------------
// Sensing problems and proxies

enum class SparsifyingDomain { identity, gradient, explicit_matrix };

struct ProxyKind {
  enum class Method { mc, lmmse };
  Method method = Method::mc;
  double lambda = 0.0;

  static ProxyKind mc() { return {Method::mc, 0.0}; }
  static ProxyKind lmmse(double lambda) { return {Method::lmmse, lambda}; }
};

/// y = A x = A Phi s = D s, with a precomputed denoiser B (n x m).
struct SensingProblem {
  Tensor A;
  SparsifyingDomain phi = SparsifyingDomain::identity;
  Tensor D;
  Tensor B;
  ProxyKind proxy_kind;
  double mr = 0.0;

  std::size_t m() const { return D.extent(0); }
  std::size_t n() const { return D.extent(1); }
};

/// Gaussian matrix with i.i.d. N(0, 1/m) entries, deterministic per seed.
inline Tensor gaussian_measurement_matrix(std::size_t m, std::size_t n, std::uint64_t seed) {
  if (m == 0 || m >= n)
    throw DomainError("gaussian_measurement_matrix: need 0 < m < n, got m=" + std::to_string(m) +
                      " n=" + std::to_string(n));
  Rng rng = make_rng(seed, "measurement-matrix");
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(m)));
  Tensor A({m, n});
  for (auto& v : A.values()) v = normal(rng);
  return A;
}

/// Denoiser B: D^T for matched correlation, (D^T D + lambda I)^-1 D^T for LMMSE.
inline Tensor denoiser(const Tensor& D, ProxyKind kind) {
  if (kind.method == ProxyKind::Method::mc) return transpose(D);
  const auto n = static_cast<Eigen::Index>(D.extent(1));
  const auto d = as_matrix(D);
  Tensor gram = from_matrix(d.transpose() * d + kind.lambda * RowMatrix::Identity(n, n));
  return solve_spd(gram, transpose(D));
}

/// Builds a problem from A and an optional explicit sparsifying matrix Phi.
inline SensingProblem make_sensing_problem(Tensor A, ProxyKind kind,
                                           SparsifyingDomain phi = SparsifyingDomain::identity,
                                           const Tensor* phi_matrix = nullptr) {
  SensingProblem p;
  p.phi = phi;
  if (phi == SparsifyingDomain::explicit_matrix) {
    if (!phi_matrix) throw DomainError("explicit sparsifying domain needs a matrix");
    p.D = matmul(A, *phi_matrix);
  } else {
    p.D = A;
  }
  p.A = std::move(A);
  if (p.m() >= p.n()) throw DomainError("sensing problem requires m < n");
  p.mr = static_cast<double>(p.m()) / static_cast<double>(p.n());
  p.proxy_kind = kind;
  p.B = denoiser(p.D, kind);
  return p;
}

/// Linear proxy B y.
inline Tensor proxy(const SensingProblem& problem, const Tensor& y) {
  if (y.size() != problem.m())
    throw ShapeError("proxy: measurement length " + std::to_string(y.size()) + ", expected " +
                     std::to_string(problem.m()));
  return matvec(problem.B, y.reshaped({y.size()}));
}

/// Binary support mask: v_i = 1 iff |x_i| > tau.
inline Tensor support_mask_from_signal(const Tensor& x, double tau) {
  if (tau < 0) throw DomainError("support threshold must be non-negative");
  Tensor v(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) v[i] = std::abs(x[i]) > tau ? 1.0 : 0.0;
  return v;
}

/// Adds white Gaussian noise scaled so the realized SNR equals snr_db
/// exactly. An infinite snr_db returns y unchanged.
inline Tensor add_measurement_noise(const Tensor& y, double snr_db, std::uint64_t seed) {
  if (std::isinf(snr_db) && snr_db > 0) return y;
  const double energy = squared_norm(y.values());
  if (energy == 0.0) throw DomainError("add_measurement_noise: zero measurement");
  Rng rng = make_rng(seed, "measurement-noise");
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor z(y.shape());
  for (auto& v : z.values()) v = normal(rng);
  const double scale = std::sqrt(energy * std::pow(10.0, -snr_db / 10.0) / squared_norm(z.values()));
  Tensor out = y;
  for (std::size_t i = 0; i < y.size(); ++i) out[i] += scale * z[i];
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

struct SeMetrics {
  double precision = 0.0;
  double specificity = 0.0;
  double sensitivity = 0.0;
  double f1 = 0.0;
  double f2 = 0.0;
  double accuracy = 0.0;
};

struct ConfusionCounts {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
};

inline ConfusionCounts confusion(std::span<const double> v, std::span<const double> v_hat) {
  if (v.size() != v_hat.size())
    throw ShapeError("se_metrics: mask lengths differ (" + std::to_string(v.size()) + " vs " +
                     std::to_string(v_hat.size()) + ")");
  ConfusionCounts c;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const bool t = v[i] > 0.5, p = v_hat[i] > 0.5;
    if (t && p) ++c.tp;
    else if (!t && !p) ++c.tn;
    else if (!t && p) ++c.fp;
    else ++c.fn;
  }
  return c;
}

inline double safe_ratio(double num, double den) { return den > 0 ? num / den : 0.0; }

inline double f_beta(double precision, double sensitivity, double beta) {
  const double b2 = beta * beta;
  return safe_ratio((1.0 + b2) * precision * sensitivity, b2 * precision + sensitivity);
}

/// Support-estimation metrics for one sample; zero denominators yield 0.
inline SeMetrics se_metrics(std::span<const double> v, std::span<const double> v_hat) {
  const ConfusionCounts c = confusion(v, v_hat);
  const auto tp = static_cast<double>(c.tp), tn = static_cast<double>(c.tn);
  const auto fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
  SeMetrics m;
  m.precision = safe_ratio(tp, tp + fp);
  m.specificity = safe_ratio(tn, tn + fp);
  m.sensitivity = safe_ratio(tp, tp + fn);
  m.f1 = f_beta(m.precision, m.sensitivity, 1.0);
  m.f2 = f_beta(m.precision, m.sensitivity, 2.0);
  m.accuracy = safe_ratio(tp + tn, tp + tn + fp + fn);
  return m;
}

/// Per-sample metrics averaged over the batch (macro average).
inline SeMetrics macro_average(std::span<const SeMetrics> items) {
  SeMetrics avg;
  if (items.empty()) return avg;
  for (const auto& m : items) {
    avg.precision += m.precision;
    avg.specificity += m.specificity;
    avg.sensitivity += m.sensitivity;
    avg.f1 += m.f1;
    avg.f2 += m.f2;
    avg.accuracy += m.accuracy;
  }
  const double inv = 1.0 / static_cast<double>(items.size());
  avg.precision *= inv;
  avg.specificity *= inv;
  avg.sensitivity *= inv;
  avg.f1 *= inv;
  avg.f2 *= inv;
  avg.accuracy *= inv;
  return avg;
}

struct QualityScores {
  double psnr_db = 0.0;
  double nmse = 0.0;
};

/// PSNR = 10 log10(peak^2 N / ||ref - est||^2) and NMSE = ||ref - est||^2 / ||ref||^2.
/// Identical inputs give +inf PSNR and zero NMSE.
inline QualityScores psnr_nmse(const Tensor& ref, const Tensor& est, double peak) {
  if (ref.shape() != est.shape()) throw ShapeError("psnr_nmse: shape mismatch");
  if (peak <= 0) throw DomainError("psnr_nmse: peak must be positive");
  const double ref_energy = squared_norm(ref.values());
  if (ref_energy == 0.0) throw DomainError("psnr_nmse: zero reference");
  double err = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) err += (ref[i] - est[i]) * (ref[i] - est[i]);
  QualityScores q;
  q.nmse = err / ref_energy;
  q.psnr_db = err == 0.0 ? std::numeric_limits<double>::infinity()
                         : 10.0 * std::log10(peak * peak * static_cast<double>(ref.size()) / err);
  return q;
}

// ---------------------------------------------------------------------------
// Collaborative representation classification

struct CrcResult {
  std::size_t label = 0;
  std::vector<double> residuals;
};

inline void require_unit_norm(std::span<const double> v, const char* what) {
  double s = 0.0;
  for (double x : v) s += x * x;
  if (std::abs(std::sqrt(s) - 1.0) > 1e-6)
    throw DomainError(std::string("crc_classify: ") + what + " is not unit l2-normalized");
}

/// Ridge coding x = (D^T D + lambda I)^-1 D^T y, per-class residuals
/// ||y - D_i x_i||, arg-min label with ties to the lower class index.
/// `column_class[j]` is the class of dictionary column j.
class CrcClassifier {
 public:
  CrcClassifier(const Tensor& D, double lambda, std::vector<std::size_t> column_class)
      : D_(D), column_class_(std::move(column_class)) {
    if (D.rank() != 2 || column_class_.size() != D.extent(1))
      throw ShapeError("crc: one class label per dictionary column required");
    const auto d = as_matrix(D);
    for (Eigen::Index j = 0; j < d.cols(); ++j) {
      const double nrm = d.col(j).norm();
      if (std::abs(nrm - 1.0) > 1e-6)
        throw DomainError("crc_classify: dictionary column " + std::to_string(j) +
                          " is not unit l2-normalized");
    }
    classes_ = column_class_.empty()
                   ? 0
                   : *std::max_element(column_class_.begin(), column_class_.end()) + 1;
    projector_ = denoiser(D, ProxyKind::lmmse(lambda));
  }

  std::size_t num_classes() const { return classes_; }

  CrcResult classify(const Tensor& y) const {
    if (y.size() != D_.extent(0)) throw ShapeError("crc_classify: query length mismatch");
    require_unit_norm(y.values(), "query");
    const Eigen::VectorXd x = as_matrix(projector_) * as_vector(y);
    const auto d = as_matrix(D_);
    CrcResult r;
    r.residuals.assign(classes_, 0.0);
    std::vector<Eigen::VectorXd> recon(classes_, Eigen::VectorXd::Zero(d.rows()));
    for (std::size_t j = 0; j < column_class_.size(); ++j)
      recon[column_class_[j]] += d.col(static_cast<Eigen::Index>(j)) * x(static_cast<Eigen::Index>(j));
    const ConstVectorMap yv(y.data(), static_cast<Eigen::Index>(y.size()));
    for (std::size_t c = 0; c < classes_; ++c) {
      r.residuals[c] = (yv - recon[c]).norm();
      if (r.residuals[c] < r.residuals[r.label]) r.label = c;
    }
    return r;
  }

 private:
  Tensor D_;
  std::vector<std::size_t> column_class_;
  std::size_t classes_ = 0;
  Tensor projector_;
};

inline CrcResult crc_classify(const Tensor& D, const Tensor& y, double lambda,
                              std::vector<std::size_t> column_class) {
  return CrcClassifier(D, lambda, std::move(column_class)).classify(y);
}

// ---------------------------------------------------------------------------
// Lasso by iterative shrinkage

/// sign(v) * max(|v| - theta, 0).
inline double soft_threshold(double v, double theta) {
  const double mag = std::abs(v) - theta;
  return mag > 0 ? std::copysign(mag, v) : 0.0;
}

/// Largest eigenvalue of D^T D by power iteration.
inline double spectral_norm_sq(const Tensor& D, std::size_t max_iters = 1000) {
  const auto d = as_matrix(D);
  Eigen::VectorXd v = Eigen::VectorXd::Ones(d.cols()).normalized();
  double lambda = 0.0;
  for (std::size_t it = 0; it < max_iters; ++it) {
    Eigen::VectorXd w = d.transpose() * (d * v);
    const double nw = w.norm();
    if (nw == 0.0) return 0.0;
    const double next = v.dot(w);
    v = w / nw;
    if (std::abs(next - lambda) <= 1e-13 * std::abs(next)) {
      lambda = next;
      break;
    }
    lambda = next;
  }
  // Rayleigh quotients approach the top eigenvalue from below.
  return lambda * (1.0 + 1e-10);
}

struct LassoResult {
  Tensor x;
  std::vector<double> objective;
};

/// 0.5 ||D x - y||^2 + lambda * sum_i gamma_i |x_i|
inline double weighted_lasso_objective(const Tensor& D, const Tensor& y, const Tensor& x,
                                       std::span<const double> gamma, double lambda) {
  const Eigen::VectorXd r = as_matrix(D) * as_vector(x) - as_vector(y);
  double l1 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) l1 += gamma[i] * std::abs(x[i]);
  return 0.5 * r.squaredNorm() + lambda * l1;
}

/// ISTA with per-coordinate thresholds lambda * gamma_i / L. Throws when
/// the objective increases (beyond round-off), which signals a step-size bug.
inline LassoResult weighted_ista(const Tensor& D, const Tensor& y, std::span<const double> gamma,
                                 double lambda, std::size_t iters) {
  if (D.rank() != 2 || y.size() != D.extent(0))
    throw ShapeError("ista: dictionary and measurement sizes disagree");
  const std::size_t n = D.extent(1);
  if (gamma.size() != n) throw ShapeError("ista: one weight per coefficient required");
  if (lambda < 0) throw DomainError("ista: lambda must be non-negative");
  for (double g : gamma)
    if (g < 0) throw DomainError("ista: weights must be non-negative");

  const double L = spectral_norm_sq(D);
  LassoResult r{Tensor({n}), {}};
  if (L == 0.0) return r;
  const auto d = as_matrix(D);
  const ConstVectorMap yv(y.data(), static_cast<Eigen::Index>(y.size()));
  Eigen::VectorXd x = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  std::vector<double> theta(n);
  for (std::size_t i = 0; i < n; ++i) theta[i] = lambda * gamma[i] / L;

  r.objective.push_back(weighted_lasso_objective(D, y, r.x, gamma, lambda));
  for (std::size_t it = 0; it < iters; ++it) {
    const Eigen::VectorXd z = x - (d.transpose() * (d * x - yv)) / L;
    for (std::size_t i = 0; i < n; ++i)
      x(static_cast<Eigen::Index>(i)) = soft_threshold(z(static_cast<Eigen::Index>(i)), theta[i]);
    for (std::size_t i = 0; i < n; ++i) r.x[i] = x(static_cast<Eigen::Index>(i));
    const double obj = weighted_lasso_objective(D, y, r.x, gamma, lambda);
    if (obj > r.objective.back() + 1e-9 * std::max(1.0, std::abs(r.objective.back())))
      throw NonFiniteError("ista: objective increased at iteration " + std::to_string(it) +
                           " (step size too large)");
    r.objective.push_back(obj);
  }
  return r;
}

/// Plain ISTA for 0.5 ||D x - y||^2 + lambda ||x||_1.
inline LassoResult ista_lasso(const Tensor& D, const Tensor& y, double lambda, std::size_t iters) {
  const std::vector<double> ones(D.rank() == 2 ? D.extent(1) : 0, 1.0);
  return weighted_ista(D, y, ones, lambda, iters);
}

// ---------------------------------------------------------------------------
// Classification dictionary

/// Dictionary whose columns follow the row-major pixel order of a 2-D proxy
/// image in which every class owns one contiguous (group_h x group_w) block.
struct ClassificationDictionary {
  Tensor D;                              // m x n, unit-norm columns
  std::vector<std::size_t> column_class; // class of each column / proxy pixel
  std::size_t height = 0, width = 0;     // proxy image extents
  std::size_t group_h = 0, group_w = 0;
  std::size_t num_classes = 0;

  /// Binary proxy-image mask marking the block of `cls`.
  Tensor class_mask(std::size_t cls) const {
    Tensor v({height * width});
    for (std::size_t j = 0; j < column_class.size(); ++j) v[j] = column_class[j] == cls ? 1.0 : 0.0;
    return v;
  }
};

/// Column index (proxy pixel) of atom `atom` of class `cls`.
inline std::size_t block_column(std::size_t cls, std::size_t atom, std::size_t group_h,
                                std::size_t group_w, std::size_t blocks_per_row) {
  const std::size_t br = cls / blocks_per_row, bc = cls % blocks_per_row;
  const std::size_t i = br * group_h + atom / group_w, j = bc * group_w + atom % group_w;
  return i * (blocks_per_row * group_w) + j;
}

/// Projects each class's samples (rows of an atoms x d tensor) through A,
/// l2-normalizes them and lays the classes out as a `block_rows` x
/// (classes / block_rows) grid of (group_h x group_w) blocks.
inline ClassificationDictionary build_classification_dictionary(
    const std::vector<Tensor>& class_samples, const Tensor& A, std::size_t group_h,
    std::size_t group_w, std::size_t block_rows) {
  const std::size_t classes = class_samples.size();
  if (classes == 0) throw DomainError("classification dictionary: no classes");
  if (block_rows == 0 || classes % block_rows)
    throw DomainError("classification dictionary: block rows must divide the class count");
  const std::size_t atoms = group_h * group_w;
  const std::size_t per_row = classes / block_rows;
  ClassificationDictionary dict;
  dict.height = block_rows * group_h;
  dict.width = per_row * group_w;
  dict.group_h = group_h;
  dict.group_w = group_w;
  dict.num_classes = classes;
  const std::size_t n = classes * atoms, m = A.extent(0), d = A.extent(1);
  dict.D = Tensor({m, n});
  dict.column_class.assign(n, 0);
  const auto a = as_matrix(A);
  for (std::size_t c = 0; c < classes; ++c) {
    const Tensor& s = class_samples[c];
    if (s.rank() != 2 || s.extent(0) != atoms || s.extent(1) != d)
      throw DomainError("classification dictionary: class " + std::to_string(c) + " has " +
                        shape_str(s.shape()) + " samples, block shape needs " +
                        std::to_string(atoms) + " x " + std::to_string(d));
    const auto sm = as_matrix(s);
    for (std::size_t t = 0; t < atoms; ++t) {
      Eigen::VectorXd col = a * sm.row(static_cast<Eigen::Index>(t)).transpose();
      const double nrm = col.norm();
      if (nrm == 0.0) throw DomainError("classification dictionary: atom projects to zero");
      col /= nrm;
      const std::size_t j = block_column(c, t, group_h, group_w, per_row);
      dict.column_class[j] = c;
      for (std::size_t r = 0; r < m; ++r) dict.D(r, j) = col(static_cast<Eigen::Index>(r));
    }
  }
  return dict;
}

}  // namespace osen
