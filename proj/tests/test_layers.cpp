#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "osen/layers.hpp"
#include "osen/rng.hpp"

using namespace osen;

namespace {

void fill_uniform(Tensor& t, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng = make_rng(seed, "layer-test");
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.values()) v = u(rng);
}

OperationalLayerParams random_layer(std::size_t cin, std::size_t cout, std::size_t Q,
                                    std::size_t f, Activation act, std::uint64_t seed) {
  OperationalLayerParams p(cin, cout, Q, f, act);
  fill_uniform(p.W, seed, -0.5, 0.5);
  fill_uniform(p.b, seed + 1, -0.2, 0.2);
  return p;
}

// Bilinear lookup of plane c at the real position (u, v), zero off-grid.
double lookup(const Tensor& x, std::size_t c, double u, double v) {
  const long H = static_cast<long>(x.extent(1)), W = static_cast<long>(x.extent(2));
  const long u0 = static_cast<long>(std::floor(u)), v0 = static_cast<long>(std::floor(v));
  const double fu = u - static_cast<double>(u0), fv = v - static_cast<double>(v0);
  auto at = [&](long i, long j) {
    return (i >= 0 && i < H && j >= 0 && j < W) ? x(c, static_cast<std::size_t>(i), static_cast<std::size_t>(j)) : 0.0;
  };
  return (1 - fu) * (1 - fv) * at(u0, v0) + (1 - fu) * fv * at(u0, v0 + 1) +
         fu * (1 - fv) * at(u0 + 1, v0) + fu * fv * at(u0 + 1, v0 + 1);
}

// Per-pixel evaluation of the operational neuron: every tap reads the
// shifted sample at (p + i - h + alpha, r + j - h + beta), raised to q.
Tensor reference_operational(const Tensor& x, const OperationalLayerParams& p) {
  const std::size_t C = x.extent(0), H = x.extent(1), W = x.extent(2);
  const std::size_t Q = p.order(), f = p.kernel();
  const long h = static_cast<long>(f / 2);
  Tensor out({p.out_channels(), H, W});
  for (std::size_t k = 0; k < p.out_channels(); ++k)
    for (std::size_t r0 = 0; r0 < H; ++r0)
      for (std::size_t c0 = 0; c0 < W; ++c0) {
        double acc = 0.0;
        for (std::size_t q = 0; q < Q; ++q) acc += p.b(k, q);
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t q = 0; q < Q; ++q)
            for (std::size_t i = 0; i < f; ++i)
              for (std::size_t j = 0; j < f; ++j) {
                const long pi = static_cast<long>(r0 + i) - h, rj = static_cast<long>(c0 + j) - h;
                if (pi < 0 || pi >= static_cast<long>(H) || rj < 0 || rj >= static_cast<long>(W)) continue;
                const double s = lookup(x, c, static_cast<double>(pi) + p.alpha(k),
                                        static_cast<double>(rj) + p.beta(k));
                const std::size_t widx = (((k * C + c) * Q + q) * f + i) * f + j;
                acc += p.W[widx] * std::pow(s, static_cast<double>(q + 1));
              }
        out(k, r0, c0) = activate(p.activation, acc);
      }
  return out;
}

}  // namespace

TEST(OperationalForward, OrderOneWithoutShiftIsConvolutionLayer) {
  OperationalLayerParams p = random_layer(3, 2, 1, 3, Activation::tanh, 1);
  Tensor x({3, 6, 5});
  fill_uniform(x, 2);
  const Tensor out = operational_forward(x, p);
  for (std::size_t k = 0; k < 2; ++k) {
    Tensor acc({6, 5}, p.b(k, 0));
    for (std::size_t c = 0; c < 3; ++c) {
      Tensor plane({6, 5}), kern({3, 3});
      std::copy_n(x.data() + c * 30, 30, plane.data());
      std::copy_n(p.W.data() + (k * 3 + c) * 9, 9, kern.data());
      const Tensor y = conv2d_same(plane, kern);
      for (std::size_t i = 0; i < 30; ++i) acc[i] += y[i];
    }
    for (std::size_t i = 0; i < 30; ++i) EXPECT_NEAR(out[k * 30 + i], std::tanh(acc[i]), 1e-12);
  }
}

TEST(OperationalForward, ScalarTaylorSum) {
  OperationalLayerParams p(1, 1, 2, 1, Activation::none);
  p.W[0] = 1.0;
  p.W[1] = 2.0;
  const Tensor x({1, 1, 1}, 0.5);
  EXPECT_DOUBLE_EQ(operational_forward(x, p)[0], 1.0);
}

TEST(OperationalForward, MatchesPerPixelOracleWithFractionalShift) {
  OperationalLayerParams p = random_layer(1, 2, 3, 3, Activation::none, 3);
  p.shifts(0, 0) = 0.3;
  p.shifts(0, 1) = -0.7;
  p.shifts(1, 0) = -1.4;
  p.shifts(1, 1) = 2.25;
  Tensor x({1, 8, 8});
  fill_uniform(x, 4);
  EXPECT_LT(max_abs_diff(operational_forward(x, p), reference_operational(x, p)), 1e-10);

  OperationalLayerParams multi = random_layer(3, 4, 2, 5, Activation::tanh, 5);
  fill_uniform(multi.shifts, 6, -2.0, 2.0);
  Tensor x3({3, 7, 6});
  fill_uniform(x3, 7);
  EXPECT_LT(max_abs_diff(operational_forward(x3, multi), reference_operational(x3, multi)), 1e-10);
}

TEST(OperationalForward, PermutingNeuronsPermutesChannels) {
  OperationalLayerParams p = random_layer(2, 3, 2, 3, Activation::tanh, 8);
  fill_uniform(p.shifts, 9, -1.0, 1.0);
  Tensor x({2, 5, 5});
  fill_uniform(x, 10);
  const std::size_t perm[3] = {2, 0, 1};
  OperationalLayerParams q = p;
  const std::size_t wslab = p.W.size() / 3, bslab = p.b.size() / 3;
  for (std::size_t k = 0; k < 3; ++k) {
    std::copy_n(p.W.data() + perm[k] * wslab, wslab, q.W.data() + k * wslab);
    std::copy_n(p.b.data() + perm[k] * bslab, bslab, q.b.data() + k * bslab);
    q.shifts(k, 0) = p.shifts(perm[k], 0);
    q.shifts(k, 1) = p.shifts(perm[k], 1);
  }
  const Tensor a = operational_forward(x, p), b = operational_forward(x, q);
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t i = 0; i < 25; ++i) EXPECT_EQ(b[k * 25 + i], a[perm[k] * 25 + i]);
}

TEST(OperationalForward, ZeroHigherOrdersReduceToLinearLayer) {
  OperationalLayerParams p = random_layer(2, 2, 3, 3, Activation::tanh, 11);
  fill_uniform(p.shifts, 12, -1.0, 1.0);
  OperationalLayerParams lin(2, 2, 1, 3, Activation::tanh);
  lin.shifts = p.shifts;
  for (std::size_t k = 0; k < 2; ++k) {
    double bias = 0.0;
    for (std::size_t q = 0; q < 3; ++q) bias += p.b(k, q);
    lin.b(k, 0) = bias;
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t q = 0; q < 3; ++q)
        for (std::size_t t = 0; t < 9; ++t) {
          double& w = p.W[((k * 2 + c) * 3 + q) * 9 + t];
          if (q > 0) w = 0.0;
          else lin.W[(k * 2 + c) * 9 + t] = w;
        }
  }
  Tensor x({2, 6, 6});
  fill_uniform(x, 13);
  EXPECT_LT(max_abs_diff(operational_forward(x, p), operational_forward(x, lin)), 1e-12);
}

TEST(OperationalForward, RejectsChannelMismatchAndNonFiniteParameters) {
  OperationalLayerParams p = random_layer(2, 1, 1, 3, Activation::tanh, 14);
  EXPECT_THROW(operational_forward(Tensor({3, 4, 4}), p), ShapeError);
  p.W[0] = NAN;
  EXPECT_THROW(operational_forward(Tensor({2, 4, 4}), p), NonFiniteError);
  EXPECT_THROW(OperationalLayerParams(1, 1, 0, 3, Activation::none), DomainError);
  EXPECT_THROW(OperationalLayerParams(1, 1, 1, 4, Activation::none), DomainError);
}

TEST(TransposedOperational, IdentityKernelUpsamplesWithZeros) {
  OperationalLayerParams p(1, 1, 1, 3, Activation::none);
  p.W[4] = 1.0;
  Tensor x({1, 2, 3});
  fill_uniform(x, 15);
  const Tensor out = transposed_operational_forward(x, p);
  ASSERT_EQ(out.shape(), (Shape{1, 4, 6}));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 6; ++j)
      EXPECT_EQ(out(0, i, j), (i % 2 == 0 && j % 2 == 0) ? x(0, i / 2, j / 2) : 0.0);
}

TEST(TransposedOperational, ZeroInputGivesActivatedBias) {
  OperationalLayerParams p = random_layer(2, 2, 2, 3, Activation::sigmoid, 16);
  const Tensor out = transposed_operational_forward(Tensor({2, 3, 3}), p);
  ASSERT_EQ(out.shape(), (Shape{2, 6, 6}));
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t i = 0; i < 36; ++i)
      EXPECT_DOUBLE_EQ(out[k * 36 + i], activate(Activation::sigmoid, p.b(k, 0) + p.b(k, 1)));
}

TEST(TransposedOperational, MatchesScatterFormTransposedConvolution) {
  // Scatter form: every input pixel (p, r) deposits x^q * W_q at the output
  // positions whose window covers 2p, 2r.
  OperationalLayerParams p = random_layer(2, 3, 3, 3, Activation::none, 17);
  Tensor x({2, 3, 4});
  fill_uniform(x, 18);
  const std::size_t H = 3, W = 4, Q = 3, f = 3;
  Tensor ref({3, 2 * H, 2 * W});
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t i = 0; i < 4 * H * W; ++i) ref[k * 4 * H * W + i] = p.b(k, 0) + p.b(k, 1) + p.b(k, 2);
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t q = 0; q < Q; ++q)
        for (long pp = 0; pp < static_cast<long>(H); ++pp)
          for (long rr = 0; rr < static_cast<long>(W); ++rr) {
            const double v = std::pow(x(c, pp, rr), static_cast<double>(q + 1));
            for (long P = 0; P < static_cast<long>(2 * H); ++P)
              for (long R = 0; R < static_cast<long>(2 * W); ++R) {
                const long i = 2 * pp - P + 1, j = 2 * rr - R + 1;
                if (i < 0 || i >= static_cast<long>(f) || j < 0 || j >= static_cast<long>(f)) continue;
                ref(k, P, R) += v * p.W[(((k * 2 + c) * Q + q) * f + i) * f + j];
              }
          }
  }
  EXPECT_LT(max_abs_diff(transposed_operational_forward(x, p), ref), 1e-10);
}

TEST(MaxPool2, SmallBlockAndIndex) {
  const PoolResult r = maxpool2(Tensor({1, 2, 2}, std::vector<double>{1, 2, 3, 4}));
  EXPECT_EQ(r.output[0], 4.0);
  EXPECT_EQ(r.argmax[0], 3u);  // (1, 1) row-major in the 2x2 plane
}

TEST(MaxPool2, TiesResolveToFirstOccurrence) {
  const PoolResult r = maxpool2(Tensor({2, 4, 4}, 0.7));
  for (double v : r.output.values()) EXPECT_EQ(v, 0.7);
  const std::size_t expected[4] = {0, 2, 8, 10};
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t o = 0; o < 4; ++o) EXPECT_EQ(r.argmax[c * 4 + o], expected[o]);
}

TEST(MaxPool2, MatchesExhaustiveBlockMaximum) {
  Tensor x({3, 4, 6});
  fill_uniform(x, 19);
  const PoolResult r = maxpool2(x);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        double best = -INFINITY;
        std::size_t at = 0;
        for (std::size_t a = 0; a < 2; ++a)
          for (std::size_t b = 0; b < 2; ++b)
            if (x(c, 2 * i + a, 2 * j + b) > best) {
              best = x(c, 2 * i + a, 2 * j + b);
              at = (2 * i + a) * 6 + 2 * j + b;
            }
        EXPECT_EQ(r.output(c, i, j), best);
        EXPECT_EQ(r.argmax[(c * 2 + i) * 3 + j], at);
      }
}

TEST(MaxPool2, RejectsOddExtents) {
  EXPECT_THROW(maxpool2(Tensor({1, 3, 4})), ShapeError);
}

TEST(SelfGop, FirstOrderIsLinearMap) {
  SelfGOPParams p(3, 5, 1, Activation::none);
  fill_uniform(p.W, 20);
  Tensor y({3});
  fill_uniform(y, 21);
  const Tensor out = selfgop_forward(y, p);
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 3; ++j) s += p.W[i * 3 + j] * y[j];
    EXPECT_NEAR(out[i], s, 1e-14);
  }
}

TEST(SelfGop, ZeroInputGivesActivationOfZero) {
  SelfGOPParams p(2, 4, 3, Activation::sigmoid);
  fill_uniform(p.W, 22);
  for (double v : selfgop_forward(Tensor({2}), p).values()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(SelfGop, MatchesHandExpandedPolynomial) {
  SelfGOPParams p(2, 3, 2, Activation::tanh);
  fill_uniform(p.W, 23);
  fill_uniform(p.b, 24);
  const Tensor y = Tensor::vector({0.7, -1.2});
  const Tensor out = selfgop_forward(y, p);
  auto w = [&](std::size_t q, std::size_t i, std::size_t j) { return p.W[(q * 3 + i) * 2 + j]; };
  for (std::size_t i = 0; i < 3; ++i) {
    const double z = w(0, i, 0) * 0.7 + w(0, i, 1) * -1.2 + w(1, i, 0) * 0.49 + w(1, i, 1) * 1.44 +
                     p.b(0, i) + p.b(1, i);
    EXPECT_NEAR(out[i], std::tanh(z), 1e-12);
  }
}

TEST(SelfGop, FirstOrderSuperposition) {
  SelfGOPParams p(4, 7, 1, Activation::none);
  fill_uniform(p.W, 25);
  Tensor a({4}), b({4});
  fill_uniform(a, 26);
  fill_uniform(b, 27);
  Tensor mix({4});
  for (std::size_t i = 0; i < 4; ++i) mix[i] = 2.0 * a[i] - 0.5 * b[i];
  const Tensor fa = selfgop_forward(a, p), fb = selfgop_forward(b, p), fm = selfgop_forward(mix, p);
  for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(fm[i], 2.0 * fa[i] - 0.5 * fb[i], 1e-12);
}

TEST(SelfGop, RejectsLengthMismatchAndContraction) {
  SelfGOPParams p(3, 5, 2, Activation::none);
  EXPECT_THROW(selfgop_forward(Tensor({4}), p), ShapeError);
  EXPECT_THROW(SelfGOPParams(5, 5, 1, Activation::none), DomainError);
}

TEST(GroupedSoftmax, YaleLayoutGivesThirtyEightClasses) {
  Tensor v({16, 76});
  fill_uniform(v, 28);
  const Tensor c = grouped_avgpool_softmax(v, 8, 4);
  ASSERT_EQ(c.size(), 38u);
  EXPECT_NEAR(std::accumulate(c.values().begin(), c.values().end(), 0.0), 1.0, 1e-12);
}

TEST(GroupedSoftmax, SaturatedBlockWinsAndUniformMapIsUniform) {
  Tensor v({16, 76}, -1e3);
  for (std::size_t i = 8; i < 16; ++i)
    for (std::size_t j = 12; j < 16; ++j) v(i, j) = 1.0;
  const Tensor c = grouped_avgpool_softmax(v, 8, 4);
  EXPECT_NEAR(c[19 + 3], 1.0, 1e-12);

  for (double p : grouped_avgpool_softmax(Tensor({16, 76}, 0.3), 8, 4).values())
    EXPECT_NEAR(p, 1.0 / 38.0, 1e-15);
}

TEST(GroupedSoftmax, ShiftInvariantAndRejectsBadTiling) {
  Tensor v({4, 6});
  fill_uniform(v, 29);
  Tensor shifted = v;
  for (auto& x : shifted.values()) x += 17.5;
  EXPECT_LT(max_abs_diff(grouped_avgpool_softmax(v, 2, 3), grouped_avgpool_softmax(shifted, 2, 3)),
            1e-14);
  EXPECT_THROW(grouped_avgpool_softmax(v, 3, 3), ShapeError);
}
