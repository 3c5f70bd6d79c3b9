#pragma once

// Forward semantics of the layer types used by the support estimators:
// operational layers with shared real-valued kernel shifts ("super
// neurons"), their stride-2 transposed counterpart, 2x2 max pooling,
// Self-GOP dense layers and the grouped average-pool + softmax head.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "osen/error.hpp"
#include "osen/numerics.hpp"
#include "osen/tensor.hpp"

namespace osen {

enum class Activation { none, tanh, sigmoid };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::none: return "none";
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
  }
  return "?";
}

inline double activate(Activation a, double x) {
  switch (a) {
    case Activation::tanh: return std::tanh(x);
    case Activation::sigmoid: return 1.0 / (1.0 + std::exp(-x));
    case Activation::none: break;
  }
  return x;
}

/// Derivative expressed through the activation output y = activate(a, x).
inline double activation_slope(Activation a, double y) {
  switch (a) {
    case Activation::tanh: return 1.0 - y * y;
    case Activation::sigmoid: return y * (1.0 - y);
    case Activation::none: break;
  }
  return 1.0;
}

/// Parameters of one operational layer.
///
/// W is C_out x C_in x Q x f x f, b is C_out x Q (one bias per Taylor order)
/// and shifts is C_out x 2 holding (alpha, beta) per output neuron; the
/// shift is shared by every input connection of that neuron.
struct OperationalLayerParams {
  Tensor W;
  Tensor b;
  Tensor shifts;
  Activation activation = Activation::tanh;

  OperationalLayerParams() = default;
  OperationalLayerParams(std::size_t in_channels, std::size_t out_channels, std::size_t order,
                         std::size_t kernel, Activation act)
      : W({out_channels, in_channels, order, kernel, kernel}),
        b({out_channels, order}),
        shifts({out_channels, 2}),
        activation(act) {
    validate();
  }

  std::size_t out_channels() const { return W.extent(0); }
  std::size_t in_channels() const { return W.extent(1); }
  std::size_t order() const { return W.extent(2); }
  std::size_t kernel() const { return W.extent(3); }

  std::size_t param_count() const { return W.size() + b.size() + shifts.size(); }

  double alpha(std::size_t k) const { return shifts(k, 0); }
  double beta(std::size_t k) const { return shifts(k, 1); }

  void validate() const {
    if (W.rank() != 5) throw ShapeError("operational layer: W must be 5-D");
    if (order() < 1) throw DomainError("operational layer: Taylor order must be >= 1");
    if (kernel() % 2 == 0 || W.extent(3) != W.extent(4))
      throw DomainError("operational layer: kernel must be square with odd size");
    if (b.shape() != Shape{out_channels(), order()})
      throw ShapeError("operational layer: bias shape " + shape_str(b.shape()));
    if (shifts.shape() != Shape{out_channels(), 2})
      throw ShapeError("operational layer: shift shape " + shape_str(shifts.shape()));
    if (!all_finite(W.values()) || !all_finite(b.values()) || !all_finite(shifts.values()))
      throw NonFiniteError("operational layer: non-finite parameters");
  }
};

/// Parameters of a Self-GOP (generative perceptron) dense layer mapping
/// R^m to R^n: W is Q x n x m, b is Q x n.
struct SelfGOPParams {
  Tensor W;
  Tensor b;
  Activation activation = Activation::none;

  SelfGOPParams() = default;
  SelfGOPParams(std::size_t in_dim, std::size_t out_dim, std::size_t order, Activation act)
      : W({order, out_dim, in_dim}), b({order, out_dim}), activation(act) {
    validate();
  }

  std::size_t order() const { return W.extent(0); }
  std::size_t out_dim() const { return W.extent(1); }
  std::size_t in_dim() const { return W.extent(2); }
  std::size_t param_count() const { return W.size() + b.size(); }

  void validate() const {
    if (W.rank() != 3) throw ShapeError("self-GOP: W must be Q x n x m");
    if (order() < 1) throw DomainError("self-GOP: Taylor order must be >= 1");
    if (out_dim() <= in_dim())
      throw DomainError("self-GOP: output dimension must exceed input dimension");
    if (b.shape() != Shape{order(), out_dim()})
      throw ShapeError("self-GOP: bias shape " + shape_str(b.shape()));
    if (!all_finite(W.values()) || !all_finite(b.values()))
      throw NonFiniteError("self-GOP: non-finite parameters");
  }
};

// ---------------------------------------------------------------------------
// Operational layer kernels.
//
// For output neuron k the input stack is shifted once by (alpha_k, beta_k),
// raised to the powers 1..Q and stacked into P (C_in*Q rows, H*W columns).
// The kernel slab of neuron k, viewed as a (C_in*Q) x f^2 matrix, gives the
// per-tap responses Z = slab^T P; summing the taps at their spatial offsets
// yields the same-padded cross-correlation of every power with its kernel.

namespace detail {

struct NeuronWorkspace {
  RowMatrix shifted;  // C_in x HW
  RowMatrix powers;   // C_in*Q x HW
  RowMatrix taps;     // f^2 x HW
};

inline ConstMatrixMap kernel_slab(const OperationalLayerParams& p, std::size_t k) {
  const std::size_t rows = p.in_channels() * p.order();
  const std::size_t cols = p.kernel() * p.kernel();
  return ConstMatrixMap(p.W.data() + k * rows * cols, static_cast<Eigen::Index>(rows),
                        static_cast<Eigen::Index>(cols));
}

inline void build_powers(const Tensor& x, const OperationalLayerParams& p, std::size_t k,
                         NeuronWorkspace& ws) {
  const long H = static_cast<long>(x.extent(1)), W = static_cast<long>(x.extent(2));
  const std::size_t C = p.in_channels(), Q = p.order();
  const long HW = H * W;
  ws.shifted.resize(static_cast<Eigen::Index>(C), HW);
  ws.powers.resize(static_cast<Eigen::Index>(C * Q), HW);
  const ShiftStencil st(p.alpha(k), p.beta(k));
  const bool no_shift = p.alpha(k) == 0.0 && p.beta(k) == 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    double* s = ws.shifted.row(static_cast<Eigen::Index>(c)).data();
    if (no_shift)
      std::copy_n(x.data() + c * HW, HW, s);
    else
      shift_plane(x.data() + c * HW, s, H, W, st);
    double* prev = ws.powers.row(static_cast<Eigen::Index>(c * Q)).data();
    std::copy_n(s, HW, prev);
    for (std::size_t q = 1; q < Q; ++q) {
      double* cur = ws.powers.row(static_cast<Eigen::Index>(c * Q + q)).data();
      for (long i = 0; i < HW; ++i) cur[i] = prev[i] * s[i];
      prev = cur;
    }
  }
}

/// Pre-activation response of neuron k written into `out` (H*W values).
inline void neuron_preactivation(const Tensor& x, const OperationalLayerParams& p,
                                 std::size_t k, NeuronWorkspace& ws, double* out) {
  const long H = static_cast<long>(x.extent(1)), W = static_cast<long>(x.extent(2));
  const long f = static_cast<long>(p.kernel()), h = f / 2;
  build_powers(x, p, k, ws);
  ws.taps.noalias() = kernel_slab(p, k).transpose() * ws.powers;
  double bias = 0.0;
  for (std::size_t q = 0; q < p.order(); ++q) bias += p.b(k, q);
  std::fill(out, out + H * W, bias);
  for (long i = 0; i < f; ++i)
    for (long j = 0; j < f; ++j)
      add_translated(ws.taps.row(i * f + j).data(), out, H, W, i - h, j - h, 1.0);
}

inline void require_input(const Tensor& x, const OperationalLayerParams& p, const char* op) {
  if (x.rank() != 3) throw ShapeError(std::string(op) + ": input must be C x H x W");
  if (x.extent(0) != p.in_channels())
    throw ShapeError(std::string(op) + ": input has " + std::to_string(x.extent(0)) +
                     " channels, layer expects " + std::to_string(p.in_channels()));
  if (x.extent(1) == 0 || x.extent(2) == 0) throw ShapeError(std::string(op) + ": empty input");
}

}  // namespace detail

/// Pre-activation output of an operational layer (C_out x H x W).
inline Tensor operational_preactivation(const Tensor& x, const OperationalLayerParams& p) {
  p.validate();
  detail::require_input(x, p, "operational_forward");
  const std::size_t HW = x.extent(1) * x.extent(2);
  Tensor out({p.out_channels(), x.extent(1), x.extent(2)});
  detail::NeuronWorkspace ws;
  for (std::size_t k = 0; k < p.out_channels(); ++k)
    detail::neuron_preactivation(x, p, k, ws, out.data() + k * HW);
  return out;
}

inline Tensor apply_activation(Tensor t, Activation a) {
  if (a != Activation::none)
    for (auto& v : t.values()) v = activate(a, v);
  return t;
}

/// Operational layer: per neuron, shift, Taylor-expand, correlate, add the
/// per-order biases, activate.
inline Tensor operational_forward(const Tensor& x, const OperationalLayerParams& p) {
  Tensor out = apply_activation(operational_preactivation(x, p), p.activation);
  require_finite(out, "operational_forward");
  return out;
}

/// Inserts zeros between samples: u(2p, 2r) = x(p, r), other entries zero.
inline Tensor zero_interleave(const Tensor& x, std::size_t stride = 2) {
  if (x.rank() != 3) throw ShapeError("zero_interleave: input must be C x H x W");
  const std::size_t C = x.extent(0), H = x.extent(1), W = x.extent(2);
  Tensor out({C, H * stride, W * stride});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) out(c, i * stride, j * stride) = x(c, i, j);
  return out;
}

/// Stride-2 transposed operational layer: zero-interleaved upsampling
/// followed by a same-padded operational layer.
inline Tensor transposed_operational_forward(const Tensor& x, const OperationalLayerParams& p,
                                             std::size_t stride = 2) {
  if (stride != 2) throw DomainError("transposed operational layer supports stride 2 only");
  return operational_forward(zero_interleave(x, stride), p);
}

struct PoolResult {
  Tensor output;
  /// Flat in-plane index (row-major, input extents) of each selected maximum.
  std::vector<std::size_t> argmax;
};

/// Non-overlapping 2x2 max pooling; ties resolve to the first element in
/// row-major order.
inline PoolResult maxpool2(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("maxpool2: input must be C x H x W");
  const std::size_t C = x.extent(0), H = x.extent(1), W = x.extent(2);
  if (H % 2 || W % 2) throw ShapeError("maxpool2: extents must be even, got " + shape_str(x.shape()));
  PoolResult r{Tensor({C, H / 2, W / 2}), std::vector<std::size_t>(C * (H / 2) * (W / 2))};
  std::size_t o = 0;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < H / 2; ++i) {
      for (std::size_t j = 0; j < W / 2; ++j, ++o) {
        std::size_t best = (2 * i) * W + 2 * j;
        double bv = x(c, 2 * i, 2 * j);
        for (std::size_t di = 0; di < 2; ++di)
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const double v = x(c, 2 * i + di, 2 * j + dj);
            if (v > bv) {
              bv = v;
              best = (2 * i + di) * W + 2 * j + dj;
            }
          }
        r.output[o] = bv;
        r.argmax[o] = best;
      }
    }
  }
  return r;
}

/// Pre-activation of a Self-GOP layer: sum_q W_q y^q + b_q.
inline Tensor selfgop_preactivation(const Tensor& y, const SelfGOPParams& p) {
  p.validate();
  if (y.size() != p.in_dim())
    throw ShapeError("selfgop_forward: input length " + std::to_string(y.size()) +
                     ", layer expects " + std::to_string(p.in_dim()));
  const auto n = static_cast<Eigen::Index>(p.out_dim());
  const auto m = static_cast<Eigen::Index>(p.in_dim());
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd pw = as_vector(y);
  const Eigen::VectorXd yv = pw;
  for (std::size_t q = 0; q < p.order(); ++q) {
    if (q > 0) pw = pw.cwiseProduct(yv);
    acc.noalias() += ConstMatrixMap(p.W.data() + q * p.out_dim() * p.in_dim(), n, m) * pw;
    acc += ConstVectorMap(p.b.data() + q * p.out_dim(), n);
  }
  return from_vector(acc);
}

inline Tensor selfgop_forward(const Tensor& y, const SelfGOPParams& p) {
  Tensor out = apply_activation(selfgop_preactivation(y, p), p.activation);
  require_finite(out, "selfgop_forward");
  return out;
}

/// Non-overlapping (g_h x g_w) average pooling flattened row-major.
inline Tensor grouped_avgpool(const Tensor& v, std::size_t gh, std::size_t gw) {
  if (v.rank() != 2) throw ShapeError("grouped_avgpool: map must be H x W");
  const std::size_t H = v.extent(0), W = v.extent(1);
  if (gh == 0 || gw == 0 || H % gh || W % gw)
    throw ShapeError("grouped_avgpool: group " + std::to_string(gh) + "x" + std::to_string(gw) +
                     " does not tile " + shape_str(v.shape()));
  const std::size_t BH = H / gh, BW = W / gw;
  Tensor out({BH * BW});
  const double inv = 1.0 / static_cast<double>(gh * gw);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) out[(i / gh) * BW + j / gw] += v(i, j) * inv;
  return out;
}

/// Numerically stable softmax of a 1-D tensor.
inline Tensor softmax(const Tensor& z) {
  Tensor out = z;
  const double zmax = *std::max_element(z.values().begin(), z.values().end());
  double sum = 0.0;
  for (auto& v : out.values()) sum += (v = std::exp(v - zmax));
  for (auto& v : out.values()) v /= sum;
  return out;
}

/// Class-probability head: average pooling over each class block, then softmax.
inline Tensor grouped_avgpool_softmax(const Tensor& v, std::size_t gh, std::size_t gw) {
  return softmax(grouped_avgpool(v, gh, gw));
}

}  // namespace osen
