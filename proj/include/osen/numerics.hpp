#pragma once

// Dense numeric primitives shared by every other part of the library:
// same-padded cross-correlation, Hadamard powers, sub-pixel bilinear
// shifting, unitary 2-D FFT and a few linear-algebra helpers.
//
// All routines are pure functions of their arguments.

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <string>
#include <vector>

#include "osen/error.hpp"
#include "osen/tensor.hpp"

namespace osen {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using VectorMap = Eigen::Map<Eigen::VectorXd>;
using ConstVectorMap = Eigen::Map<const Eigen::VectorXd>;

inline ConstMatrixMap as_matrix(const Tensor& t) {
  if (t.rank() != 2) throw ShapeError("expected a 2-D tensor, got " + shape_str(t.shape()));
  return ConstMatrixMap(t.data(), static_cast<Eigen::Index>(t.extent(0)),
                        static_cast<Eigen::Index>(t.extent(1)));
}

inline MatrixMap as_matrix(Tensor& t) {
  if (t.rank() != 2) throw ShapeError("expected a 2-D tensor, got " + shape_str(t.shape()));
  return MatrixMap(t.data(), static_cast<Eigen::Index>(t.extent(0)),
                   static_cast<Eigen::Index>(t.extent(1)));
}

inline ConstVectorMap as_vector(const Tensor& t) {
  return ConstVectorMap(t.data(), static_cast<Eigen::Index>(t.size()));
}

inline VectorMap as_vector(Tensor& t) {
  return VectorMap(t.data(), static_cast<Eigen::Index>(t.size()));
}

inline Tensor from_matrix(const RowMatrix& m) {
  Tensor out({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  as_matrix(out) = m;
  return out;
}

inline Tensor from_vector(const Eigen::VectorXd& v) {
  Tensor out({static_cast<std::size_t>(v.size())});
  as_vector(out) = v;
  return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  return from_matrix(as_matrix(a) * as_matrix(b));
}

/// Matrix-vector product for a 2-D `a` and 1-D `x`.
inline Tensor matvec(const Tensor& a, const Tensor& x) {
  if (a.rank() != 2 || a.extent(1) != x.size())
    throw ShapeError("matvec: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(x.shape()));
  return from_vector(as_matrix(a) * as_vector(x));
}

inline Tensor transpose(const Tensor& a) {
  return from_matrix(as_matrix(a).transpose());
}

// ---------------------------------------------------------------------------
// Convolution and powers

namespace detail {

inline void require_plane(const Tensor& x, const char* op) {
  if (x.rank() != 2) throw ShapeError(std::string(op) + ": expected H x W tensor");
  if (x.empty()) throw ShapeError(std::string(op) + ": empty tensor");
}

}  // namespace detail

/// Same-padded 2-D cross-correlation with zero padding of (f-1)/2 per side.
inline Tensor conv2d_same(const Tensor& x, const Tensor& k) {
  detail::require_plane(x, "conv2d_same");
  if (k.rank() != 2 || k.extent(0) != k.extent(1))
    throw ShapeError("conv2d_same: kernel must be square f x f");
  const std::size_t f = k.extent(0);
  if (f % 2 == 0) throw DomainError("conv2d_same: kernel size must be odd, got " + std::to_string(f));

  const long H = static_cast<long>(x.extent(0));
  const long W = static_cast<long>(x.extent(1));
  const long h = static_cast<long>(f / 2);
  Tensor out({x.extent(0), x.extent(1)});
  for (long i = 0; i < static_cast<long>(f); ++i) {
    for (long j = 0; j < static_cast<long>(f); ++j) {
      const double w = k(i, j);
      if (w == 0.0) continue;
      const long di = i - h, dj = j - h;
      const long p0 = std::max(0L, -di), p1 = std::min(H, H - di);
      const long r0 = std::max(0L, -dj), r1 = std::min(W, W - dj);
      for (long p = p0; p < p1; ++p) {
        const double* src = x.data() + (p + di) * W + dj;
        double* dst = out.data() + p * W;
        for (long r = r0; r < r1; ++r) dst[r] += w * src[r];
      }
    }
  }
  require_finite(out, "conv2d_same");
  return out;
}

/// Elementwise x^q. q = 0 yields the all-ones tensor; negative q is rejected.
inline Tensor hadamard_pow(const Tensor& x, int q) {
  if (q < 0) throw DomainError("hadamard_pow: negative exponent " + std::to_string(q));
  if (q == 0) return Tensor(x.shape(), 1.0);
  Tensor out = x;
  for (auto& v : out.values()) {
    double acc = v;
    for (int e = 1; e < q; ++e) acc *= v;
    v = acc;
  }
  require_finite(out, "hadamard_pow");
  return out;
}

// ---------------------------------------------------------------------------
// Bilinear shift
//
// out(p, r) samples the plane at (p + alpha, r + beta). With a = floor(alpha)
// and fa = alpha - a (same for beta), the sample is the fixed 2x2 stencil
//   (1-fa)(1-fb) x[p+a][r+b] + (1-fa) fb x[p+a][r+b+1]
//   + fa (1-fb) x[p+a+1][r+b] + fa fb x[p+a+1][r+b+1]
// with zero outside the grid. Derivatives in alpha/beta are taken on the
// floor side, which makes them right-sided at integer shifts.

struct ShiftStencil {
  long a = 0, b = 0;
  double fa = 0.0, fb = 0.0;

  ShiftStencil(double alpha, double beta) {
    const double fla = std::floor(alpha), flb = std::floor(beta);
    a = static_cast<long>(fla);
    b = static_cast<long>(flb);
    fa = alpha - fla;
    fb = beta - flb;
  }

  double w00() const { return (1.0 - fa) * (1.0 - fb); }
  double w01() const { return (1.0 - fa) * fb; }
  double w10() const { return fa * (1.0 - fb); }
  double w11() const { return fa * fb; }
};

namespace detail {

// Adds `weight * in[p + di][r + dj]` into out[p][r] for all valid (p, r).
inline void add_translated(const double* in, double* out, long H, long W, long di, long dj,
                           double weight) {
  if (weight == 0.0) return;
  const long p0 = std::max(0L, -di), p1 = std::min(H, H - di);
  const long r0 = std::max(0L, -dj), r1 = std::min(W, W - dj);
  for (long p = p0; p < p1; ++p) {
    const double* src = in + (p + di) * W + dj;
    double* dst = out + p * W;
    for (long r = r0; r < r1; ++r) dst[r] += weight * src[r];
  }
}

}  // namespace detail

/// Raw-plane form of bilinear_shift; `out` is overwritten.
inline void shift_plane(const double* in, double* out, long H, long W, const ShiftStencil& s) {
  std::fill(out, out + H * W, 0.0);
  detail::add_translated(in, out, H, W, s.a, s.b, s.w00());
  detail::add_translated(in, out, H, W, s.a, s.b + 1, s.w01());
  detail::add_translated(in, out, H, W, s.a + 1, s.b, s.w10());
  detail::add_translated(in, out, H, W, s.a + 1, s.b + 1, s.w11());
}

/// Adjoint of shift_plane: accumulates the input gradient into `grad_in`.
inline void shift_plane_adjoint(const double* grad_out, double* grad_in, long H, long W,
                                const ShiftStencil& s) {
  detail::add_translated(grad_out, grad_in, H, W, -s.a, -s.b, s.w00());
  detail::add_translated(grad_out, grad_in, H, W, -s.a, -(s.b + 1), s.w01());
  detail::add_translated(grad_out, grad_in, H, W, -(s.a + 1), -s.b, s.w10());
  detail::add_translated(grad_out, grad_in, H, W, -(s.a + 1), -(s.b + 1), s.w11());
}

/// Partial derivatives of <grad_out, shift(in)> with respect to alpha and beta.
inline std::pair<double, double> shift_plane_param_grad(const double* in, const double* grad_out,
                                                        long H, long W, const ShiftStencil& s) {
  auto sample = [&](long p, long r) -> double {
    return (p >= 0 && p < H && r >= 0 && r < W) ? in[p * W + r] : 0.0;
  };
  double ga = 0.0, gb = 0.0;
  for (long p = 0; p < H; ++p) {
    for (long r = 0; r < W; ++r) {
      const double g = grad_out[p * W + r];
      if (g == 0.0) continue;
      const double x00 = sample(p + s.a, r + s.b), x01 = sample(p + s.a, r + s.b + 1);
      const double x10 = sample(p + s.a + 1, r + s.b), x11 = sample(p + s.a + 1, r + s.b + 1);
      ga += g * ((1.0 - s.fb) * (x10 - x00) + s.fb * (x11 - x01));
      gb += g * ((1.0 - s.fa) * (x01 - x00) + s.fa * (x11 - x10));
    }
  }
  return {ga, gb};
}

/// Samples `x` at (p + alpha, r + beta) by bilinear interpolation with zero fill.
inline Tensor bilinear_shift(const Tensor& x, double alpha, double beta) {
  detail::require_plane(x, "bilinear_shift");
  if (!std::isfinite(alpha) || !std::isfinite(beta))
    throw NonFiniteError("bilinear_shift: non-finite shift");
  Tensor out(x.shape());
  shift_plane(x.data(), out.data(), static_cast<long>(x.extent(0)),
              static_cast<long>(x.extent(1)), ShiftStencil(alpha, beta));
  require_finite(out, "bilinear_shift");
  return out;
}

// ---------------------------------------------------------------------------
// Unitary 2-D DFT

namespace detail {

inline ComplexTensor fft2_impl(const ComplexTensor& x, bool inverse) {
  if (x.rank() != 2) throw ShapeError("fft2: expected H x W tensor");
  const std::size_t H = x.extent(0), W = x.extent(1);
  ComplexTensor out(x.shape());
  if (x.empty()) return out;

  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::Unscaled);
  std::vector<std::complex<double>> in_buf, out_buf;

  std::vector<std::complex<double>> tmp(x.storage());
  in_buf.resize(W);
  for (std::size_t r = 0; r < H; ++r) {
    std::copy_n(tmp.begin() + static_cast<long>(r * W), W, in_buf.begin());
    if (inverse) fft.inv(out_buf, in_buf); else fft.fwd(out_buf, in_buf);
    std::copy_n(out_buf.begin(), W, tmp.begin() + static_cast<long>(r * W));
  }
  in_buf.resize(H);
  for (std::size_t c = 0; c < W; ++c) {
    for (std::size_t r = 0; r < H; ++r) in_buf[r] = tmp[r * W + c];
    if (inverse) fft.inv(out_buf, in_buf); else fft.fwd(out_buf, in_buf);
    for (std::size_t r = 0; r < H; ++r) out(r, c) = out_buf[r];
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(H * W));
  for (auto& v : out.values()) v *= scale;
  return out;
}

}  // namespace detail

inline ComplexTensor to_complex(const Tensor& x) {
  ComplexTensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i];
  return out;
}

inline Tensor real_part(const ComplexTensor& z) {
  Tensor out(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i].real();
  return out;
}

/// Unitary forward DFT (1/sqrt(HW) scaling).
inline ComplexTensor fft2(const ComplexTensor& x) { return detail::fft2_impl(x, false); }
inline ComplexTensor fft2(const Tensor& x) { return fft2(to_complex(x)); }

/// Unitary inverse DFT.
inline ComplexTensor ifft2(const ComplexTensor& x) { return detail::fft2_impl(x, true); }

// ---------------------------------------------------------------------------
// Linear algebra

/// Solves M X = rhs for symmetric positive definite M by Cholesky.
/// Throws ShapeError on dimension mismatch and NotSpdError on breakdown.
inline Tensor solve_spd(const Tensor& M, const Tensor& rhs) {
  if (M.rank() != 2 || M.extent(0) != M.extent(1))
    throw ShapeError("solve_spd: matrix must be square, got " + shape_str(M.shape()));
  const bool vec = rhs.rank() == 1;
  if ((vec && rhs.extent(0) != M.extent(0)) || (!vec && (rhs.rank() != 2 || rhs.extent(0) != M.extent(0))))
    throw ShapeError("solve_spd: rhs " + shape_str(rhs.shape()) + " incompatible with " +
                     shape_str(M.shape()));
  Eigen::LLT<RowMatrix> llt(as_matrix(M));
  if (llt.info() != Eigen::Success)
    throw NotSpdError("solve_spd: matrix is not symmetric positive definite");
  if (vec) return from_vector(llt.solve(as_vector(rhs)));
  return from_matrix(llt.solve(as_matrix(rhs)));
}

/// Leading principal axes of the rows of X (N samples x d features).
///
/// Returns an m x d matrix whose rows are orthonormal eigenvectors of the
/// sample covariance ordered by descending eigenvalue, each with its
/// largest-magnitude component positive.
inline Tensor pca_projection(const Tensor& X, std::size_t m) {
  if (X.rank() != 2) throw ShapeError("pca_projection: X must be N x d");
  const std::size_t N = X.extent(0), d = X.extent(1);
  if (N < 2) throw DomainError("pca_projection: need at least two samples");
  if (m == 0 || m > std::min(N, d))
    throw DomainError("pca_projection: m=" + std::to_string(m) + " exceeds min(N, d)=" +
                      std::to_string(std::min(N, d)));

  RowMatrix centered = as_matrix(X);
  centered.rowwise() -= centered.colwise().mean();
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(N - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw Error("pca_projection: eigensolver failed");

  const Eigen::VectorXd& evals = eig.eigenvalues();  // ascending
  const double top = std::max(evals.cwiseAbs().maxCoeff(), 1.0);
  const double tol = 1e-12 * top * static_cast<double>(d);
  std::size_t rank = 0;
  for (Eigen::Index i = 0; i < evals.size(); ++i)
    if (evals(i) > tol) ++rank;
  if (m > rank)
    throw DomainError("pca_projection: requested " + std::to_string(m) +
                      " components but the centered data has rank " + std::to_string(rank));

  Tensor out({m, d});
  for (std::size_t k = 0; k < m; ++k) {
    Eigen::VectorXd v = eig.eigenvectors().col(static_cast<Eigen::Index>(d - 1 - k));
    Eigen::Index imax = 0;
    v.cwiseAbs().maxCoeff(&imax);
    if (v(imax) < 0) v = -v;
    for (std::size_t j = 0; j < d; ++j) out(k, j) = v(static_cast<Eigen::Index>(j));
  }
  return out;
}

}  // namespace osen
