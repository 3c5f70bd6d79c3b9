#pragma once

// Learning-aided compressive reconstruction from undersampled 2-D Fourier
// data: periodic finite differences, semi-random sampling masks,
// zero-filling, probability-map weights and an ADMM solver for the
// weighted anisotropic TV problem
//
//   min_S  0.5 ||y - P F S||^2 + lambda ( ||Gx . dx S||_1 + ||Gy . dy S||_1 )
//
// where F is the unitary 2-D DFT and P selects the sampled frequencies.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "osen/error.hpp"
#include "osen/numerics.hpp"
#include "osen/rng.hpp"
#include "osen/sparse.hpp"
#include "osen/tensor.hpp"

namespace osen {

// ---------------------------------------------------------------------------
// Periodic forward differences

/// dx S (p, r) = S(p+1, r) - S(p, r) with wrap-around.
inline Tensor gradient_x(const Tensor& S) {
  const std::size_t H = S.extent(0), W = S.extent(1);
  Tensor g({H, W});
  for (std::size_t p = 0; p < H; ++p)
    for (std::size_t r = 0; r < W; ++r) g(p, r) = S((p + 1) % H, r) - S(p, r);
  return g;
}

/// dy S (p, r) = S(p, r+1) - S(p, r) with wrap-around.
inline Tensor gradient_y(const Tensor& S) {
  const std::size_t H = S.extent(0), W = S.extent(1);
  Tensor g({H, W});
  for (std::size_t p = 0; p < H; ++p)
    for (std::size_t r = 0; r < W; ++r) g(p, r) = S(p, (r + 1) % W) - S(p, r);
  return g;
}

inline std::pair<Tensor, Tensor> grad_ops(const Tensor& S) {
  if (S.rank() != 2) throw ShapeError("grad_ops: image must be H x W");
  return {gradient_x(S), gradient_y(S)};
}

/// Adjoint of (dx, dy): the negative divergence, <grad S, z> = <S, grad_adjoint(z)>.
inline Tensor grad_adjoint(const Tensor& zx, const Tensor& zy) {
  if (zx.shape() != zy.shape() || zx.rank() != 2) throw ShapeError("grad_adjoint: shape mismatch");
  const std::size_t H = zx.extent(0), W = zx.extent(1);
  Tensor out({H, W});
  for (std::size_t p = 0; p < H; ++p)
    for (std::size_t r = 0; r < W; ++r)
      out(p, r) = zx((p + H - 1) % H, r) - zx(p, r) + zy(p, (r + W - 1) % W) - zy(p, r);
  return out;
}

/// Eigenvalues of dx^T dx + dy^T dy on the DFT grid.
inline Tensor laplacian_spectrum(std::size_t H, std::size_t W) {
  Tensor lam({H, W});
  for (std::size_t k = 0; k < H; ++k) {
    const double sk = std::sin(std::numbers::pi * static_cast<double>(k) / static_cast<double>(H));
    for (std::size_t l = 0; l < W; ++l) {
      const double sl = std::sin(std::numbers::pi * static_cast<double>(l) / static_cast<double>(W));
      lam(k, l) = 4.0 * sk * sk + 4.0 * sl * sl;
    }
  }
  return lam;
}

// ---------------------------------------------------------------------------
// Sampling masks

/// Sampled frequencies, as centered integer indices in
/// {-n/4, ..., n/4}^2, kept in lexicographic order.
struct FourierSamplingMask {
  std::size_t n_side = 0;
  std::uint64_t seed = 0;
  std::vector<std::pair<int, int>> omega;
  /// Number of entries that came from the low-frequency disk.
  std::size_t ball_count = 0;

  std::size_t m() const { return omega.size(); }

  static std::size_t to_bin(int i, std::size_t n) {
    const long nn = static_cast<long>(n);
    return static_cast<std::size_t>(((i % nn) + nn) % nn);
  }

  /// 0/1 indicator of the sampled DFT bins (n_side x n_side).
  Tensor indicator() const {
    Tensor mk({n_side, n_side});
    for (const auto& [i, j] : omega) mk(to_bin(i, n_side), to_bin(j, n_side)) = 1.0;
    return mk;
  }
};

inline int mask_half_width(std::size_t n_side) { return static_cast<int>(n_side / 4); }

inline std::size_t admissible_count(std::size_t n_side) {
  const std::size_t w = 2 * static_cast<std::size_t>(mask_half_width(n_side)) + 1;
  return w * w;
}

/// Radius of the fully-sampled disk holding a third of the measurements.
inline double ball_radius(std::size_t m) {
  return std::sqrt((static_cast<double>(m) / 3.0) / std::numbers::pi);
}

/// Semi-random mask: every lattice point strictly inside the disk of radius
/// sqrt((m/3)/pi), completed with distinct rounded Gaussian draws
/// (sigma = n_side/8) inside the admissible square.
inline FourierSamplingMask semi_random_mask(std::size_t n_side, std::size_t m, std::uint64_t seed) {
  if (n_side < 4) throw DomainError("semi_random_mask: image side must be at least 4");
  if (m == 0) throw DomainError("semi_random_mask: need at least one measurement");
  if (m > admissible_count(n_side))
    throw DomainError("semi_random_mask: m=" + std::to_string(m) + " exceeds the " +
                      std::to_string(admissible_count(n_side)) + " admissible frequencies");
  const int half = mask_half_width(n_side);
  const double r = ball_radius(m);
  std::set<std::pair<int, int>> chosen;
  for (int i = -half; i <= half; ++i)
    for (int j = -half; j <= half; ++j)
      if (static_cast<double>(i * i + j * j) < r * r) chosen.insert({i, j});
  if (chosen.size() > m)
    throw DomainError("semi_random_mask: disk holds more points than m");

  FourierSamplingMask mask;
  mask.n_side = n_side;
  mask.seed = seed;
  mask.ball_count = chosen.size();
  Rng rng = make_rng(seed, "fourier-mask");
  std::normal_distribution<double> normal(0.0, static_cast<double>(n_side) / 8.0);
  while (chosen.size() < m) {
    const long i = std::lround(normal(rng));
    const long j = std::lround(normal(rng));
    if (std::abs(i) > half || std::abs(j) > half) continue;
    chosen.insert({static_cast<int>(i), static_cast<int>(j)});
  }
  mask.omega.assign(chosen.begin(), chosen.end());
  return mask;
}

/// Text form: header "n_side m seed", then one "i j" pair per line.
inline void write_mask(const FourierSamplingMask& mask, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open mask file for writing: " + path);
  out << mask.n_side << ' ' << mask.m() << ' ' << mask.seed << '\n';
  for (const auto& [i, j] : mask.omega) out << i << ' ' << j << '\n';
  if (!out) throw FormatError("failed writing mask file: " + path);
}

inline FourierSamplingMask read_mask(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open mask file: " + path);
  FourierSamplingMask mask;
  std::size_t m = 0;
  if (!(in >> mask.n_side >> m >> mask.seed)) throw FormatError("bad mask header in " + path);
  const int half = mask_half_width(mask.n_side);
  std::set<std::pair<int, int>> seen;
  for (std::size_t k = 0; k < m; ++k) {
    int i = 0, j = 0;
    if (!(in >> i >> j)) throw FormatError("truncated mask file " + path);
    if (std::abs(i) > half || std::abs(j) > half)
      throw FormatError("mask index outside the admissible square in " + path);
    if (!seen.insert({i, j}).second) throw FormatError("duplicate mask index in " + path);
  }
  mask.omega.assign(seen.begin(), seen.end());
  const double r = ball_radius(m);
  for (const auto& [i, j] : mask.omega)
    if (static_cast<double>(i * i + j * j) < r * r) ++mask.ball_count;
  return mask;
}

// ---------------------------------------------------------------------------
// Measurement and zero-filling

/// y = P F S in the mask's lexicographic order.
inline ComplexTensor sample_fourier(const Tensor& S, const FourierSamplingMask& mask) {
  if (S.rank() != 2 || S.extent(0) != mask.n_side || S.extent(1) != mask.n_side)
    throw ShapeError("sample_fourier: image does not match the mask side");
  const ComplexTensor spec = fft2(S);
  ComplexTensor y({mask.m()});
  for (std::size_t k = 0; k < mask.m(); ++k) {
    const auto [i, j] = mask.omega[k];
    y[k] = spec(FourierSamplingMask::to_bin(i, mask.n_side), FourierSamplingMask::to_bin(j, mask.n_side));
  }
  return y;
}

/// Measured coefficients placed on the full DFT grid, zeros elsewhere.
inline ComplexTensor scatter_spectrum(const ComplexTensor& y, const FourierSamplingMask& mask) {
  if (y.size() != mask.m())
    throw ShapeError("measurement length " + std::to_string(y.size()) + " does not match mask size " +
                     std::to_string(mask.m()));
  ComplexTensor grid({mask.n_side, mask.n_side});
  for (std::size_t k = 0; k < mask.m(); ++k) {
    const auto [i, j] = mask.omega[k];
    grid(FourierSamplingMask::to_bin(i, mask.n_side), FourierSamplingMask::to_bin(j, mask.n_side)) = y[k];
  }
  return grid;
}

/// Real part of the inverse unitary DFT of the zero-filled spectrum.
inline Tensor zero_filling(const ComplexTensor& y, const FourierSamplingMask& mask) {
  return real_part(ifft2(scatter_spectrum(y, mask)));
}

// ---------------------------------------------------------------------------
// Weights and shrinkage

struct WeightMaps {
  Tensor gamma_x;
  Tensor gamma_y;
};

/// gamma = 1 / (p + epsilon), elementwise, for both gradient directions.
inline WeightMaps weights_from_prob(const Tensor& px, const Tensor& py, double epsilon = 0.2) {
  if (!(epsilon > 0)) throw DomainError("weights_from_prob: epsilon must be positive");
  if (px.shape() != py.shape()) throw ShapeError("weights_from_prob: probability maps differ in shape");
  WeightMaps w{Tensor(px.shape()), Tensor(py.shape())};
  for (std::size_t i = 0; i < px.size(); ++i) {
    if (px[i] < 0 || px[i] > 1 || py[i] < 0 || py[i] > 1)
      throw DomainError("weights_from_prob: probabilities must lie in [0, 1]");
    w.gamma_x[i] = 1.0 / (px[i] + epsilon);
    w.gamma_y[i] = 1.0 / (py[i] + epsilon);
  }
  return w;
}

/// sign(v) * max(|v| - theta, 0) with a threshold per element.
inline Tensor weighted_soft_threshold(const Tensor& v, const Tensor& theta) {
  if (v.shape() != theta.shape()) throw ShapeError("weighted_soft_threshold: shape mismatch");
  Tensor out(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (theta[i] < 0) throw DomainError("weighted_soft_threshold: negative threshold");
    out[i] = soft_threshold(v[i], theta[i]);
  }
  return out;
}

/// Weighted lasso 0.5 ||D x - y||^2 + lambda ||gamma . x||_1 by ISTA.
inline Tensor weighted_lasso_ista(const Tensor& D, const Tensor& y, const Tensor& gamma,
                                  double lambda, std::size_t iters) {
  return weighted_ista(D, y, gamma.values(), lambda, iters).x;
}

// ---------------------------------------------------------------------------
// ADMM for weighted TV

struct TVConfig {
  double lambda = 0.01;
  double rho = 1.0;
  double relax_alpha = 0.7;
  double abs_tol = 1e-4;
  double rel_tol = 1e-2;
  std::size_t max_it = 2000;
};

struct TVResult {
  Tensor image;
  std::size_t iterations = 0;
  bool converged = false;
  std::vector<double> primal_residual;
  std::vector<double> dual_residual;
};

/// Data-consistency plus TV system (Re(F^H M F) + rho grad^T grad) S = rhs,
/// diagonal in the Fourier domain under periodic boundaries.
///
/// For real S, Re(F^H M F) acts on the spectrum as the symmetrized mask
/// (M(k) + M(-k)) / 2, so the real minimizer is obtained exactly by one
/// pointwise division.
class TvSystem {
 public:
  TvSystem(const ComplexTensor& y, const FourierSamplingMask& mask, double rho)
      : n_(mask.n_side), rho_(rho), denom_({n_, n_}), data_rhs_({n_, n_}) {
    if (!(rho > 0)) throw DomainError("ADMM: rho must be positive");
    const Tensor ind = mask.indicator();
    const Tensor lap = laplacian_spectrum(n_, n_);
    const ComplexTensor grid = scatter_spectrum(y, mask);
    for (std::size_t k = 0; k < n_; ++k)
      for (std::size_t l = 0; l < n_; ++l) {
        const std::size_t mk = (n_ - k) % n_, ml = (n_ - l) % n_;
        denom_(k, l) = 0.5 * (ind(k, l) + ind(mk, ml)) + rho_ * lap(k, l);
        data_rhs_(k, l) = 0.5 * (grid(k, l) + std::conj(grid(mk, ml)));
      }
  }

  /// Minimizer over real S of 0.5||y - P F S||^2 + rho/2 ||grad S - v||^2,
  /// given grad^T v.
  Tensor solve(const Tensor& grad_adjoint_v) const {
    ComplexTensor spec = fft2(grad_adjoint_v);
    for (std::size_t i = 0; i < spec.size(); ++i) {
      const std::complex<double> num = data_rhs_[i] + rho_ * spec[i];
      spec[i] = denom_[i] > 0 ? num / denom_[i] : std::complex<double>(0.0, 0.0);
    }
    return real_part(ifft2(spec));
  }

 private:
  std::size_t n_;
  double rho_;
  Tensor denom_;
  ComplexTensor data_rhs_;
};

/// 0.5 ||y - P F S||^2 + lambda * sum(Gx |dx S| + Gy |dy S|); Gamma = 1 when absent.
inline double tv_objective(const Tensor& S, const ComplexTensor& y, const FourierSamplingMask& mask,
                           const WeightMaps* gamma, double lambda) {
  const ComplexTensor ys = sample_fourier(S, mask);
  double data = 0.0;
  for (std::size_t k = 0; k < y.size(); ++k) data += std::norm(y[k] - ys[k]);
  const auto [gx, gy] = grad_ops(S);
  double tv = 0.0;
  for (std::size_t i = 0; i < gx.size(); ++i) {
    const double wx = gamma ? gamma->gamma_x[i] : 1.0;
    const double wy = gamma ? gamma->gamma_y[i] : 1.0;
    tv += wx * std::abs(gx[i]) + wy * std::abs(gy[i]);
  }
  return 0.5 * data + lambda * tv;
}

namespace detail {

inline double norm2(const Tensor& a, const Tensor& b) {
  return std::sqrt(squared_norm(a.values()) + squared_norm(b.values()));
}

}  // namespace detail

/// Scaled-form ADMM with over-relaxation on the splitting z = grad S.
/// `gamma` = nullptr runs the unweighted problem. Starts from the
/// zero-filling image; never silently hides non-convergence
/// (`converged` is false when max_it is reached).
inline TVResult admm_weighted_tv(const ComplexTensor& y, const FourierSamplingMask& mask,
                                 const WeightMaps* gamma, const TVConfig& cfg) {
  const std::size_t n = mask.n_side;
  if (gamma && (gamma->gamma_x.shape() != Shape{n, n} || gamma->gamma_y.shape() != Shape{n, n}))
    throw ShapeError("admm_weighted_tv: weight maps must match the image");
  if (cfg.lambda < 0) throw DomainError("admm_weighted_tv: lambda must be non-negative");
  const TvSystem system(y, mask, cfg.rho);

  TVResult res;
  Tensor S = zero_filling(y, mask);
  auto [zx, zy] = grad_ops(S);
  Tensor ux({n, n}), uy({n, n});
  const double kappa = cfg.lambda / cfg.rho;
  const double sqrt_p = std::sqrt(2.0 * static_cast<double>(n * n));
  const double sqrt_n = std::sqrt(static_cast<double>(n * n));

  for (std::size_t it = 0; it < cfg.max_it; ++it) {
    Tensor vx = zx, vy = zy;
    for (std::size_t i = 0; i < vx.size(); ++i) {
      vx[i] -= ux[i];
      vy[i] -= uy[i];
    }
    S = system.solve(grad_adjoint(vx, vy));
    const auto [gx, gy] = grad_ops(S);

    const Tensor zx_old = zx, zy_old = zy;
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double hx = cfg.relax_alpha * gx[i] + (1.0 - cfg.relax_alpha) * zx_old[i];
      const double hy = cfg.relax_alpha * gy[i] + (1.0 - cfg.relax_alpha) * zy_old[i];
      const double tx = gamma ? kappa * gamma->gamma_x[i] : kappa;
      const double ty = gamma ? kappa * gamma->gamma_y[i] : kappa;
      zx[i] = soft_threshold(hx + ux[i], tx);
      zy[i] = soft_threshold(hy + uy[i], ty);
      ux[i] += hx - zx[i];
      uy[i] += hy - zy[i];
    }

    Tensor rx = gx, ry = gy, dzx = zx, dzy = zy;
    for (std::size_t i = 0; i < rx.size(); ++i) {
      rx[i] -= zx[i];
      ry[i] -= zy[i];
      dzx[i] -= zx_old[i];
      dzy[i] -= zy_old[i];
    }
    const double r_norm = detail::norm2(rx, ry);
    const double s_norm = cfg.rho * std::sqrt(squared_norm(grad_adjoint(dzx, dzy).values()));
    const double eps_pri =
        sqrt_p * cfg.abs_tol + cfg.rel_tol * std::max(detail::norm2(gx, gy), detail::norm2(zx, zy));
    const double eps_dual =
        sqrt_n * cfg.abs_tol + cfg.rel_tol * cfg.rho * std::sqrt(squared_norm(grad_adjoint(ux, uy).values()));
    res.primal_residual.push_back(r_norm);
    res.dual_residual.push_back(s_norm);
    res.iterations = it + 1;
    if (!all_finite(S.values())) throw NonFiniteError("admm_weighted_tv: iterate diverged");
    if (r_norm < eps_pri && s_norm < eps_dual) {
      res.converged = true;
      break;
    }
  }
  res.image = std::move(S);
  return res;
}

// ---------------------------------------------------------------------------
// Phantoms

/// Piecewise-constant test image in [0, 1]: a body ellipse with randomly
/// placed rectangles and ellipses inside, deterministic per seed.
inline Tensor piecewise_constant_phantom(std::size_t n, std::uint64_t seed) {
  Rng rng = make_rng(seed, "phantom");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Tensor img({n, n});
  const double c = (static_cast<double>(n) - 1.0) / 2.0;
  const double body_a = 0.42 * static_cast<double>(n) * (0.85 + 0.15 * unit(rng));
  const double body_b = 0.36 * static_cast<double>(n) * (0.85 + 0.15 * unit(rng));
  const double body_val = 0.3 + 0.2 * unit(rng);
  auto inside_ellipse = [](double i, double j, double ci, double cj, double a, double b) {
    const double u = (i - ci) / a, v = (j - cj) / b;
    return u * u + v * v <= 1.0;
  };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (inside_ellipse(static_cast<double>(i), static_cast<double>(j), c, c, body_a, body_b))
        img(i, j) = body_val;

  const int shapes = 4 + static_cast<int>(unit(rng) * 3.0);
  const double span = static_cast<double>(n);
  for (int s = 0; s < shapes; ++s) {
    const double ci = c + (unit(rng) - 0.5) * 0.8 * body_a;
    const double cj = c + (unit(rng) - 0.5) * 0.8 * body_b;
    const double a = span * (0.05 + 0.1 * unit(rng));
    const double b = span * (0.05 + 0.1 * unit(rng));
    const double val = 0.1 + 0.9 * unit(rng);
    const bool rect = unit(rng) < 0.5;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double di = static_cast<double>(i), dj = static_cast<double>(j);
        const bool in = rect ? (std::abs(di - ci) <= a && std::abs(dj - cj) <= b)
                             : inside_ellipse(di, dj, ci, cj, a, b);
        if (in) img(i, j) = val;
      }
  }
  return img;
}

/// Per-direction ground-truth gradient supports |d S| > tau.
inline std::pair<Tensor, Tensor> gradient_support(const Tensor& S, double tau) {
  const auto [gx, gy] = grad_ops(S);
  return {support_mask_from_signal(gx, tau), support_mask_from_signal(gy, tau)};
}

}  // namespace osen
