#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <numbers>
#include <random>

#include "osen/numerics.hpp"
#include "osen/rng.hpp"

using namespace osen;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng = make_rng(seed, "test-tensor");
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = u(rng);
  return t;
}

// Direct cross-correlation with zero padding, written independently of the
// library's translated-slab formulation.
Tensor reference_correlation(const Tensor& x, const Tensor& k) {
  const long H = static_cast<long>(x.extent(0)), W = static_cast<long>(x.extent(1));
  const long f = static_cast<long>(k.extent(0)), h = f / 2;
  Tensor out(x.shape());
  for (long p = 0; p < H; ++p)
    for (long r = 0; r < W; ++r) {
      double s = 0.0;
      for (long i = 0; i < f; ++i)
        for (long j = 0; j < f; ++j) {
          const long pi = p + i - h, rj = r + j - h;
          if (pi >= 0 && pi < H && rj >= 0 && rj < W) s += k(i, j) * x(pi, rj);
        }
      out(p, r) = s;
    }
  return out;
}

ComplexTensor reference_dft(const Tensor& x) {
  const std::size_t H = x.extent(0), W = x.extent(1);
  ComplexTensor out(x.shape());
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t u = 0; u < H; ++u)
    for (std::size_t v = 0; v < W; ++v) {
      std::complex<double> s = 0.0;
      for (std::size_t p = 0; p < H; ++p)
        for (std::size_t r = 0; r < W; ++r) {
          const double ph = -two_pi * (static_cast<double>(u * p) / static_cast<double>(H) +
                                       static_cast<double>(v * r) / static_cast<double>(W));
          s += x(p, r) * std::complex<double>(std::cos(ph), std::sin(ph));
        }
      out(u, v) = s / std::sqrt(static_cast<double>(H * W));
    }
  return out;
}

double complex_norm(const ComplexTensor& z) {
  double s = 0.0;
  for (const auto& v : z.values()) s += std::norm(v);
  return std::sqrt(s);
}

}  // namespace

TEST(Conv2dSame, IdentityScaledKernelOnSinglePixel) {
  const Tensor x = Tensor::from_rows({{1.0}});
  const Tensor k = Tensor::from_rows({{0, 0, 0}, {0, 2, 0}, {0, 0, 0}});
  EXPECT_EQ(conv2d_same(x, k), Tensor::from_rows({{2.0}}));
}

TEST(Conv2dSame, ZeroInputGivesZeros) {
  const Tensor out = conv2d_same(Tensor({4, 4}), random_tensor({3, 3}, 1));
  EXPECT_EQ(out, Tensor({4, 4}));
}

TEST(Conv2dSame, MatchesNestedLoopReference) {
  const Tensor x = random_tensor({5, 5}, 2);
  const Tensor k = random_tensor({3, 3}, 3);
  EXPECT_LT(max_abs_diff(conv2d_same(x, k), reference_correlation(x, k)), 1e-12);

  const Tensor wide = random_tensor({6, 9}, 4);
  const Tensor k5 = random_tensor({5, 5}, 5);
  EXPECT_LT(max_abs_diff(conv2d_same(wide, k5), reference_correlation(wide, k5)), 1e-12);
}

TEST(Conv2dSame, IsLinear) {
  const Tensor x = random_tensor({7, 6}, 6), z = random_tensor({7, 6}, 7);
  const Tensor k = random_tensor({3, 3}, 8);
  const double a = 1.7, b = -0.4;
  Tensor mix(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) mix[i] = a * x[i] + b * z[i];
  const Tensor cx = conv2d_same(x, k), cz = conv2d_same(z, k), cm = conv2d_same(mix, k);
  for (std::size_t i = 0; i < cm.size(); ++i) EXPECT_NEAR(cm[i], a * cx[i] + b * cz[i], 1e-12);
}

TEST(Conv2dSame, RejectsEvenKernelAndEmptyInput) {
  EXPECT_THROW(conv2d_same(Tensor({3, 3}), Tensor({2, 2})), DomainError);
  EXPECT_THROW(conv2d_same(Tensor({0, 3}), Tensor({3, 3})), ShapeError);
}

TEST(HadamardPow, ScalarCases) {
  EXPECT_EQ(hadamard_pow(Tensor::from_rows({{2.0, -3.0}}), 2), Tensor::from_rows({{4.0, 9.0}}));
  EXPECT_EQ(hadamard_pow(Tensor::from_rows({{0.5}}), 3), Tensor::from_rows({{0.125}}));
  const Tensor x = random_tensor({3, 4}, 9);
  EXPECT_EQ(hadamard_pow(x, 1), x);
}

TEST(HadamardPow, ZeroExponentIsOnesAndNegativeIsRejected) {
  EXPECT_EQ(hadamard_pow(random_tensor({2, 2}, 10), 0), Tensor({2, 2}, 1.0));
  EXPECT_THROW(hadamard_pow(Tensor({2, 2}), -1), DomainError);
}

TEST(BilinearShift, ZeroShiftIsIdentity) {
  const Tensor x = random_tensor({5, 4}, 11);
  EXPECT_EQ(bilinear_shift(x, 0.0, 0.0), x);
}

TEST(BilinearShift, IntegerShiftTranslatesWithZeroFill) {
  const Tensor x = Tensor::from_rows({{1, 2, 3}, {4, 5, 6}, {7, 8, 9}});
  EXPECT_EQ(bilinear_shift(x, 1.0, 0.0), Tensor::from_rows({{4, 5, 6}, {7, 8, 9}, {0, 0, 0}}));
  EXPECT_EQ(bilinear_shift(x, 0.0, -1.0), Tensor::from_rows({{0, 1, 2}, {0, 4, 5}, {0, 7, 8}}));
}

TEST(BilinearShift, HalfPixelWithPadding) {
  const Tensor x = Tensor::from_rows({{0.0, 2.0}});
  EXPECT_EQ(bilinear_shift(x, 0.0, 0.5), Tensor::from_rows({{1.0, 1.0}}));
}

TEST(BilinearShift, FourPointFormulaAtInteriorPoint) {
  const Tensor x = random_tensor({6, 6}, 12);
  const double alpha = 1.3, beta = -0.6;
  const Tensor out = bilinear_shift(x, alpha, beta);
  // out(2,3) samples (3.3, 2.4): rows 3/4, columns 2/3.
  const double fa = 0.3, fb = 0.4;
  const double expected = (1 - fa) * (1 - fb) * x(3, 2) + (1 - fa) * fb * x(3, 3) +
                          fa * (1 - fb) * x(4, 2) + fa * fb * x(4, 3);
  EXPECT_NEAR(out(2, 3), expected, 1e-14);
}

TEST(BilinearShift, NeverExceedsInputMaximum) {
  const Tensor x = random_tensor({9, 7}, 13, -3.0, 3.0);
  Rng rng = make_rng(14, "shifts");
  std::uniform_real_distribution<double> u(-4.0, 4.0);
  for (int t = 0; t < 50; ++t) {
    const Tensor out = bilinear_shift(x, u(rng), u(rng));
    EXPECT_LE(max_abs(out.values()), max_abs(x.values()) + 1e-15);
  }
}

TEST(BilinearShift, IntegerShiftsMatchExactTranslation) {
  const Tensor x = random_tensor({6, 5}, 15);
  for (int a = -3; a <= 3; ++a)
    for (int b = -2; b <= 2; ++b) {
      const Tensor out = bilinear_shift(x, a, b);
      for (long p = 0; p < 6; ++p)
        for (long r = 0; r < 5; ++r) {
          const long sp = p + a, sr = r + b;
          const double want = (sp >= 0 && sp < 6 && sr >= 0 && sr < 5) ? x(sp, sr) : 0.0;
          EXPECT_EQ(out(p, r), want);
        }
    }
}

// A fractional shift followed by its negation resamples twice, which blurs
// arbitrary content. It is exact when each resampling is exact: integer
// shifts on any image, and any shift on an image that is affine along the
// shifted axis (on pixels far enough from the border).
TEST(BilinearShift, ForwardBackwardCompositionOnExactCases) {
  const Tensor x = random_tensor({10, 8}, 16);
  for (double a : {-2.0, -1.0, 1.0, 2.0}) {
    const Tensor back = bilinear_shift(bilinear_shift(x, a, 0.0), -a, 0.0);
    const long m = static_cast<long>(std::ceil(std::abs(a)));
    for (long p = m; p < 10 - m; ++p)
      for (long r = 0; r < 8; ++r) EXPECT_NEAR(back(p, r), x(p, r), 1e-10);
  }

  Tensor ramp({12, 6});
  for (std::size_t p = 0; p < 12; ++p)
    for (std::size_t r = 0; r < 6; ++r) ramp(p, r) = 0.25 * static_cast<double>(p) - 0.1 * static_cast<double>(r);
  for (double a : {-1.7, -0.35, 0.5, 1.25, 2.0}) {
    const Tensor back = bilinear_shift(bilinear_shift(ramp, a, 0.0), -a, 0.0);
    const long m = 2 * static_cast<long>(std::ceil(std::abs(a)));
    for (long p = m; p < 12 - m; ++p)
      for (long r = 0; r < 6; ++r) EXPECT_NEAR(back(p, r), ramp(p, r), 1e-10);
  }
}

TEST(BilinearShift, FractionalCompositionSmoothsGeneralImages) {
  // Documented limitation of the literal invariant: a random image is not
  // reproduced by a +0.5 / -0.5 round trip.
  const Tensor x = random_tensor({10, 10}, 17);
  const Tensor back = bilinear_shift(bilinear_shift(x, 0.5, 0.0), -0.5, 0.0);
  double worst = 0.0;
  for (long p = 1; p < 9; ++p)
    for (long r = 0; r < 10; ++r) worst = std::max(worst, std::abs(back(p, r) - x(p, r)));
  EXPECT_GT(worst, 1e-3);
}

TEST(BilinearShift, ParameterGradientMatchesImageGradientOnRamp) {
  // On x(p, r) = 3p + 2r the sample at (p + alpha, r + beta) moves at rate 3
  // per unit alpha and 2 per unit beta, away from the zero-filled border.
  const long H = 8, W = 8;
  Tensor x({8, 8});
  for (long p = 0; p < H; ++p)
    for (long r = 0; r < W; ++r) x(p, r) = 3.0 * p + 2.0 * r;
  Tensor g({8, 8});
  for (long p = 1; p < 6; ++p)
    for (long r = 1; r < 6; ++r) g(p, r) = 1.0;
  const auto [ga, gb] = shift_plane_param_grad(x.data(), g.data(), H, W, ShiftStencil(0.25, 0.4));
  EXPECT_NEAR(ga, 3.0 * 25.0, 1e-6);
  EXPECT_NEAR(gb, 2.0 * 25.0, 1e-6);
}

TEST(BilinearShift, AdjointIdentity) {
  const Tensor x = random_tensor({7, 9}, 18), y = random_tensor({7, 9}, 19);
  const ShiftStencil st(-1.35, 0.8);
  Tensor sx(x.shape()), aty(x.shape());
  shift_plane(x.data(), sx.data(), 7, 9, st);
  shift_plane_adjoint(y.data(), aty.data(), 7, 9, st);
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    lhs += sx[i] * y[i];
    rhs += x[i] * aty[i];
  }
  EXPECT_NEAR(lhs, rhs, 1e-12);
}

TEST(Fft2, ConstantImageHasSingleDcBin) {
  const double c = 1.5;
  const ComplexTensor z = fft2(Tensor({4, 6}, c));
  EXPECT_NEAR(std::abs(z(0, 0)), c * std::sqrt(24.0), 1e-12);
  for (std::size_t i = 1; i < z.size(); ++i) EXPECT_LT(std::abs(z[i]), 1e-12);
}

TEST(Fft2, ImpulseHasFlatSpectrum) {
  Tensor x({8, 8});
  x(0, 0) = 1.0;
  for (const auto& v : fft2(x).values()) EXPECT_NEAR(std::abs(v), 1.0 / 8.0, 1e-14);
}

TEST(Fft2, MatchesDirectDftIncludingOddSizes) {
  for (const Shape& s : {Shape{4, 4}, Shape{5, 7}, Shape{6, 3}}) {
    const Tensor x = random_tensor(s, 20 + s[0]);
    const ComplexTensor fast = fft2(x), slow = reference_dft(x);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LT(std::abs(fast[i] - slow[i]), 1e-12);
  }
}

TEST(Fft2, RoundTripAndParseval) {
  for (std::size_t n : {16u, 33u, 256u}) {
    const Tensor x = random_tensor({n, n}, 30 + n);
    const ComplexTensor z = fft2(x);
    EXPECT_NEAR(complex_norm(z), std::sqrt(squared_norm(x.values())), 1e-10);
    const ComplexTensor back = ifft2(z);
    double err = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) err = std::max(err, std::abs(back[i] - x[i]));
    EXPECT_LT(err, 1e-10);
  }
}

TEST(SolveSpd, IdentityAndDiagonal) {
  const Tensor b = Tensor::vector({1.0, -2.0, 3.0});
  Tensor I({3, 3});
  for (std::size_t i = 0; i < 3; ++i) I(i, i) = 1.0;
  EXPECT_LT(max_abs_diff(solve_spd(I, b), b), 1e-15);
  const Tensor D = Tensor::from_rows({{2.0, 0.0}, {0.0, 4.0}});
  EXPECT_LT(max_abs_diff(solve_spd(D, Tensor::vector({2.0, 8.0})), Tensor::vector({1.0, 2.0})),
            1e-15);
}

TEST(SolveSpd, MultiplyBackResidual) {
  const Tensor G = random_tensor({10, 10}, 40);
  Tensor M = matmul(transpose(G), G);
  for (std::size_t i = 0; i < 10; ++i) M(i, i) += 1.0;
  const Tensor rhs = random_tensor({10, 3}, 41);
  const Tensor X = solve_spd(M, rhs);
  const Tensor back = matmul(M, X);
  EXPECT_LE(max_abs_diff(back, rhs), 1e-8 * max_abs(rhs.values()));
}

TEST(SolveSpd, DistinguishesIndefiniteFromMismatch) {
  const Tensor M = Tensor::from_rows({{1.0, 2.0}, {2.0, 1.0}});
  EXPECT_THROW(solve_spd(M, Tensor::vector({1.0, 1.0})), NotSpdError);
  EXPECT_THROW(solve_spd(M, Tensor::vector({1.0, 1.0, 1.0})), ShapeError);
  EXPECT_THROW(solve_spd(Tensor({2, 3}), Tensor::vector({1.0, 1.0})), ShapeError);
}

TEST(PcaProjection, IdenticalRowsHaveNoRank) {
  Tensor X({5, 3});
  for (std::size_t i = 0; i < 5; ++i) X(i, 0) = X(i, 1) = X(i, 2) = 2.0;
  try {
    pca_projection(X, 1);
    FAIL() << "expected rank error";
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("rank 0"), std::string::npos) << e.what();
  }
}

TEST(PcaProjection, DiagonalPointCloud) {
  Rng rng = make_rng(42, "cloud");
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor X({200, 2});
  for (std::size_t i = 0; i < 200; ++i) {
    const double t = 3.0 * n(rng), e = 0.05 * n(rng);
    X(i, 0) = t + e;
    X(i, 1) = t - e;
  }
  const Tensor A = pca_projection(X, 1);
  EXPECT_NEAR(A(0, 0), 1.0 / std::sqrt(2.0), 1e-3);
  EXPECT_NEAR(A(0, 1), 1.0 / std::sqrt(2.0), 1e-3);
}

TEST(PcaProjection, FullBasisPreservesCenteredInnerProducts) {
  const Tensor X = random_tensor({50, 8}, 43);
  const Tensor A = pca_projection(X, 8);
  RowMatrix C = as_matrix(X);
  C.rowwise() -= C.colwise().mean();
  const RowMatrix P = C * as_matrix(A).transpose();
  EXPECT_LT(((P * P.transpose()) - (C * C.transpose())).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(PcaProjection, RowsOrthonormalOrderedAndSignFixed) {
  const Tensor X = random_tensor({40, 12}, 44);
  const Tensor A = pca_projection(X, 5);
  const RowMatrix gram = as_matrix(A) * as_matrix(A).transpose();
  EXPECT_LT((gram - RowMatrix::Identity(5, 5)).cwiseAbs().maxCoeff(), 1e-8);

  RowMatrix C = as_matrix(X);
  C.rowwise() -= C.colwise().mean();
  double prev = INFINITY;
  for (std::size_t k = 0; k < 5; ++k) {
    const Eigen::VectorXd v = as_matrix(A).row(static_cast<Eigen::Index>(k)).transpose();
    const double var = (C * v).squaredNorm();
    EXPECT_LE(var, prev + 1e-9);
    prev = var;
    Eigen::Index imax = 0;
    v.cwiseAbs().maxCoeff(&imax);
    EXPECT_GT(v(imax), 0.0);
  }
}

TEST(PcaProjection, RankErrorNamesAchievableRank) {
  // Points on a line in 3-D: rank 1.
  Tensor X({6, 3});
  for (std::size_t i = 0; i < 6; ++i) {
    X(i, 0) = static_cast<double>(i);
    X(i, 1) = 2.0 * static_cast<double>(i);
    X(i, 2) = -static_cast<double>(i);
  }
  try {
    pca_projection(X, 2);
    FAIL() << "expected rank error";
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("rank 1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(pca_projection(X, 4), DomainError);
}

TEST(DeriveSeed, StreamsAreIndependentAndStable) {
  EXPECT_EQ(derive_seed(1, "a", 0), derive_seed(1, "a", 0));
  EXPECT_NE(derive_seed(1, "a", 0), derive_seed(1, "a", 1));
  EXPECT_NE(derive_seed(1, "a", 0), derive_seed(1, "b", 0));
  EXPECT_NE(derive_seed(1, "a", 0), derive_seed(2, "a", 0));
}
