#pragma once

// Losses, reverse-mode gradients over the layer graph, Adam, and a
// finite-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "osen/error.hpp"
#include "osen/layers.hpp"
#include "osen/network.hpp"
#include "osen/numerics.hpp"
#include "osen/tensor.hpp"

namespace osen {

// ---------------------------------------------------------------------------
// Losses

enum class LossKind { mse_mask, group_l2, hybrid };

inline const char* to_string(LossKind k) {
  switch (k) {
    case LossKind::mse_mask: return "mse_mask";
    case LossKind::group_l2: return "group_l2";
    case LossKind::hybrid: return "hybrid";
  }
  return "?";
}

using IndexGroups = std::vector<std::vector<std::size_t>>;

struct LossSpec {
  LossKind kind = LossKind::mse_mask;
  double lambda_g = 0.01;
  double lambda_c = 0.1;
  /// Partition of mask indices into classes; group_l2 only. When empty and
  /// the model has a class head, the head's block layout is used.
  IndexGroups class_groups;
};

inline constexpr double kLogClamp = 1e-12;

namespace detail {

inline void require_same_length(std::span<const double> a, std::span<const double> b,
                                const char* op) {
  if (a.size() != b.size())
    throw ShapeError(std::string(op) + ": length mismatch " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
}

inline void require_partition(const IndexGroups& groups, std::size_t n) {
  std::vector<char> seen(n, 0);
  std::size_t count = 0;
  for (const auto& g : groups)
    for (std::size_t i : g) {
      if (i >= n || seen[i]) throw DomainError("class groups do not partition the mask indices");
      seen[i] = 1;
      ++count;
    }
  if (count != n) throw DomainError("class groups do not cover every mask index");
}

}  // namespace detail

/// Sum of squared differences between predicted and true masks.
inline double loss_mse_mask(std::span<const double> v_hat, std::span<const double> v) {
  detail::require_same_length(v_hat, v, "loss_mse_mask");
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) s += (v_hat[i] - v[i]) * (v_hat[i] - v[i]);
  return s;
}

/// Squared error plus lambda_g times the sum of per-class l2 norms of v_hat.
inline double loss_group_l2(std::span<const double> v_hat, std::span<const double> v,
                            const IndexGroups& groups, double lambda_g) {
  const double mse = loss_mse_mask(v_hat, v);
  detail::require_partition(groups, v.size());
  double reg = 0.0;
  for (const auto& g : groups) {
    double s = 0.0;
    for (std::size_t i : g) s += v_hat[i] * v_hat[i];
    reg += std::sqrt(s);
  }
  return mse + lambda_g * reg;
}

/// Squared error plus lambda_c times the cross-entropy -sum c log(c_hat).
/// c_hat entries are clamped at 1e-12 before the logarithm.
inline double loss_hybrid(std::span<const double> v_hat, std::span<const double> v,
                          std::span<const double> c_hat, std::span<const double> c,
                          double lambda_c) {
  const double mse = loss_mse_mask(v_hat, v);
  detail::require_same_length(c_hat, c, "loss_hybrid");
  double ones = 0.0;
  for (double ci : c) {
    if (ci != 0.0 && ci != 1.0) throw DomainError("loss_hybrid: class target must be one-hot");
    ones += ci;
  }
  if (ones != 1.0) throw DomainError("loss_hybrid: class target must be one-hot");
  double ce = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i)
    if (c[i] != 0.0) ce -= c[i] * std::log(std::max(c_hat[i], kLogClamp));
  return mse + lambda_c * ce;
}

/// Row-major class blocks of a (H x W) map tiled by (gh x gw) groups.
inline IndexGroups block_groups(std::size_t H, std::size_t W, std::size_t gh, std::size_t gw) {
  const std::size_t BW = W / gw;
  IndexGroups groups((H / gh) * BW);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) groups[(i / gh) * BW + j / gw].push_back(i * W + j);
  return groups;
}

// ---------------------------------------------------------------------------
// Training samples

struct Sample {
  /// Proxy image (C_in*H*W values) or raw measurement y for NCL models.
  Tensor input;
  /// Ground-truth support mask, C_out*H*W binary values.
  Tensor mask;
  /// Class index for classification heads, -1 otherwise.
  int label = -1;
};

struct LossValue {
  double loss = 0.0;
  Tensor d_output;       // dL / d(sigmoid output)
  Tensor d_class_logits; // dL / d(pooled pre-softmax scores), class heads only
};

inline IndexGroups effective_groups(const ModelSpec& s, const LossSpec& loss) {
  if (!loss.class_groups.empty()) return loss.class_groups;
  if (s.has_class_head()) return block_groups(s.height, s.width, s.group_h, s.group_w);
  throw DomainError("group_l2 loss requires class groups");
}

/// Loss of one traced sample and its gradient with respect to the network
/// outputs.
inline LossValue evaluate_loss(const ModelSpec& s, const ForwardTrace& t, const Sample& sample,
                               const LossSpec& loss) {
  const auto v_hat = t.output.values();
  const auto v = sample.mask.values();
  detail::require_same_length(v_hat, v, "loss");
  LossValue r;
  r.d_output = Tensor(t.output.shape());
  for (std::size_t i = 0; i < v.size(); ++i) r.d_output[i] = 2.0 * (v_hat[i] - v[i]);

  switch (loss.kind) {
    case LossKind::mse_mask:
      r.loss = loss_mse_mask(v_hat, v);
      break;
    case LossKind::group_l2: {
      const IndexGroups groups = effective_groups(s, loss);
      r.loss = loss_group_l2(v_hat, v, groups, loss.lambda_g);
      for (const auto& g : groups) {
        double ss = 0.0;
        for (std::size_t i : g) ss += v_hat[i] * v_hat[i];
        const double norm = std::sqrt(ss);
        if (norm == 0.0) continue;
        for (std::size_t i : g) r.d_output[i] += loss.lambda_g * v_hat[i] / norm;
      }
      break;
    }
    case LossKind::hybrid: {
      if (!s.has_class_head()) throw DomainError("hybrid loss requires a classification head");
      const std::size_t C = t.class_probs.size();
      if (sample.label < 0 || static_cast<std::size_t>(sample.label) >= C)
        throw DomainError("hybrid loss: sample label out of range");
      Tensor onehot({C});
      onehot[static_cast<std::size_t>(sample.label)] = 1.0;
      r.loss = loss_hybrid(v_hat, v, t.class_probs.values(), onehot.values(), loss.lambda_c);
      // d/dc_hat of -lambda_c * log(max(c_hat, clamp)), then through softmax.
      Tensor d_probs({C});
      const std::size_t y = static_cast<std::size_t>(sample.label);
      if (t.class_probs[y] > kLogClamp) d_probs[y] = -loss.lambda_c / t.class_probs[y];
      double dot = 0.0;
      for (std::size_t i = 0; i < C; ++i) dot += d_probs[i] * t.class_probs[i];
      r.d_class_logits = Tensor({C});
      for (std::size_t i = 0; i < C; ++i)
        r.d_class_logits[i] = t.class_probs[i] * (d_probs[i] - dot);
      break;
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Layer backward kernels

/// Gradient of an operational layer given dL/d(pre-activation). Parameter
/// gradients are accumulated into `g`; returns dL/dx when `need_input_grad`.
inline Tensor operational_backward(const Tensor& x, const Tensor& d_pre,
                                   const OperationalLayerParams& p, OperationalLayerParams& g,
                                   bool need_input_grad = true) {
  const long H = static_cast<long>(x.extent(1)), W = static_cast<long>(x.extent(2));
  const long HW = H * W;
  const std::size_t C = p.in_channels(), Q = p.order();
  const long f = static_cast<long>(p.kernel()), h = f / 2;
  const auto taps = static_cast<Eigen::Index>(f * f);
  Tensor dx(x.shape());
  detail::NeuronWorkspace ws;
  RowMatrix d_taps(taps, HW);
  RowMatrix d_powers;
  std::vector<double> d_shifted(static_cast<std::size_t>(HW));

  for (std::size_t k = 0; k < p.out_channels(); ++k) {
    const double* dA = d_pre.data() + k * HW;
    double bias_grad = 0.0;
    for (long i = 0; i < HW; ++i) bias_grad += dA[i];
    for (std::size_t q = 0; q < Q; ++q) g.b(k, q) += bias_grad;

    detail::build_powers(x, p, k, ws);
    d_taps.setZero();
    for (long i = 0; i < f; ++i)
      for (long j = 0; j < f; ++j)
        detail::add_translated(dA, d_taps.row(i * f + j).data(), H, W, -(i - h), -(j - h), 1.0);

    const std::size_t rows = C * Q;
    MatrixMap g_slab(g.W.data() + k * rows * static_cast<std::size_t>(taps),
                     static_cast<Eigen::Index>(rows), taps);
    g_slab.noalias() += ws.powers * d_taps.transpose();
    d_powers.noalias() = detail::kernel_slab(p, k) * d_taps;

    const ShiftStencil st(p.alpha(k), p.beta(k));
    double ga = 0.0, gb = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      // d/dS of sum_q P_q with P_q = S^q: sum_q q S^(q-1) dP_q.
      std::copy_n(d_powers.row(static_cast<Eigen::Index>(c * Q)).data(), HW, d_shifted.begin());
      for (std::size_t q = 1; q < Q; ++q) {
        const double* dp = d_powers.row(static_cast<Eigen::Index>(c * Q + q)).data();
        const double* prev = ws.powers.row(static_cast<Eigen::Index>(c * Q + q - 1)).data();
        const double coef = static_cast<double>(q + 1);
        for (long i = 0; i < HW; ++i) d_shifted[static_cast<std::size_t>(i)] += coef * prev[i] * dp[i];
      }
      const double* xc = x.data() + c * HW;
      const auto [dga, dgb] = shift_plane_param_grad(xc, d_shifted.data(), H, W, st);
      ga += dga;
      gb += dgb;
      if (need_input_grad) shift_plane_adjoint(d_shifted.data(), dx.data() + c * HW, H, W, st);
    }
    g.shifts(k, 0) += ga;
    g.shifts(k, 1) += gb;
  }
  return dx;
}

/// Self-GOP backward given dL/d(pre-activation); returns dL/dy.
inline Tensor selfgop_backward(const Tensor& y, const Tensor& d_pre, const SelfGOPParams& p,
                               SelfGOPParams& g) {
  const auto n = static_cast<Eigen::Index>(p.out_dim());
  const auto m = static_cast<Eigen::Index>(p.in_dim());
  const ConstVectorMap dz(d_pre.data(), n);
  const Eigen::VectorXd yv = as_vector(y);
  Eigen::VectorXd pw = yv;            // y^q
  Eigen::VectorXd pw_prev = Eigen::VectorXd::Ones(m);  // y^(q-1)
  Eigen::VectorXd dy = Eigen::VectorXd::Zero(m);
  for (std::size_t q = 0; q < p.order(); ++q) {
    if (q > 0) {
      pw_prev = pw;
      pw = pw.cwiseProduct(yv);
    }
    MatrixMap gW(g.W.data() + q * p.out_dim() * p.in_dim(), n, m);
    gW.noalias() += dz * pw.transpose();
    VectorMap(g.b.data() + q * p.out_dim(), n) += dz;
    const ConstMatrixMap Wq(p.W.data() + q * p.out_dim() * p.in_dim(), n, m);
    dy.noalias() += (static_cast<double>(q + 1) * pw_prev).cwiseProduct(Wq.transpose() * dz);
  }
  return from_vector(dy);
}

// ---------------------------------------------------------------------------
// Model backward

struct GradientResult {
  double loss = 0.0;
  ModelParams grads;
};

/// Accumulates gradients of one sample's loss into `grads`; returns the loss.
inline double accumulate_sample_gradient(const ModelParams& params, const Sample& sample,
                                         const LossSpec& loss, ModelParams& grads) {
  const ModelSpec& s = params.spec;
  const ForwardTrace t = forward_trace(params, sample.input);
  const LossValue lv = evaluate_loss(s, t, sample, loss);
  if (!std::isfinite(lv.loss)) throw NonFiniteError("non-finite loss value");

  const std::size_t L = params.layers.size();
  // dL/d(pre-sigmoid output map)
  Tensor d = lv.d_output;
  for (std::size_t i = 0; i < d.size(); ++i)
    d[i] *= activation_slope(params.layers[L - 1].activation, t.output[i]);
  if (s.has_class_head() && !lv.d_class_logits.empty()) {
    const std::size_t BW = s.width / s.group_w;
    const double inv = 1.0 / static_cast<double>(s.group_h * s.group_w);
    for (std::size_t i = 0; i < s.height; ++i)
      for (std::size_t j = 0; j < s.width; ++j)
        d[i * s.width + j] += lv.d_class_logits[(i / s.group_h) * BW + j / s.group_w] * inv;
  }

  for (std::size_t li = L; li-- > 0;) {
    const auto& layer = params.layers[li];
    if (li + 1 < L) {
      const Tensor& out = t.layer_outputs[li];
      for (std::size_t i = 0; i < d.size(); ++i) d[i] *= activation_slope(layer.activation, out[i]);
    }
    const bool need_dx = li > 0 || s.ncl;
    Tensor dx = operational_backward(t.layer_inputs[li], d, layer, grads.layers[li], need_dx);
    if (!all_finite(dx.values()))
      throw NonFiniteError("non-finite gradient at operational layer " + std::to_string(li));
    if (s.variant == Variant::osen2 && li == 2) {
      // Undo the zero interleaving: only the even positions carried input.
      const std::size_t C = dx.extent(0), H2 = dx.extent(1) / 2, W2 = dx.extent(2) / 2;
      Tensor dd({C, H2, W2});
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < H2; ++i)
          for (std::size_t j = 0; j < W2; ++j) dd(c, i, j) = dx(c, 2 * i, 2 * j);
      dx = std::move(dd);
    }
    if (s.variant == Variant::osen2 && li == 1) {
      const Tensor& pre_pool = t.layer_outputs[0];
      Tensor dd(pre_pool.shape());
      const std::size_t plane = pre_pool.extent(1) * pre_pool.extent(2);
      const std::size_t pooled_plane = dx.extent(1) * dx.extent(2);
      for (std::size_t c = 0; c < dx.extent(0); ++c)
        for (std::size_t o = 0; o < pooled_plane; ++o)
          dd[c * plane + t.pool_argmax[c * pooled_plane + o]] += dx[c * pooled_plane + o];
      dx = std::move(dd);
    }
    d = std::move(dx);
  }

  if (s.ncl) {
    const auto& pl = *params.proxy_layer;
    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= activation_slope(pl.activation, t.proxy[i]);
    selfgop_backward(t.scaled_input.reshaped({s.measurement_dim}), d.reshaped({d.size()}), pl,
                     *grads.proxy_layer);
  }
  return lv.loss;
}

/// Exact gradients of the batch-summed loss with respect to every parameter.
inline GradientResult backward(const ModelParams& params, std::span<const Sample> batch,
                               const LossSpec& loss) {
  GradientResult r{0.0, zeros_like(params)};
  for (const auto& sample : batch) r.loss += accumulate_sample_gradient(params, sample, loss, r.grads);
  return r;
}

/// Batch-summed loss without gradients.
inline double batch_loss(const ModelParams& params, std::span<const Sample> batch,
                         const LossSpec& loss) {
  double total = 0.0;
  for (const auto& sample : batch) {
    const ForwardTrace t = forward_trace(params, sample.input);
    total += evaluate_loss(params.spec, t, sample, loss).loss;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::size_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

/// One bias-corrected Adam update over matching lists of tensors.
inline void adam_update(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
                        AdamState& st) {
  if (params.size() != grads.size()) throw ShapeError("adam: parameter/gradient count mismatch");
  if (st.m.empty()) {
    for (const Tensor* p : params) {
      st.m.emplace_back(p->shape());
      st.v.emplace_back(p->shape());
    }
  }
  if (st.m.size() != params.size()) throw ShapeError("adam: state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i]->shape() != grads[i]->shape() || st.m[i].shape() != params[i]->shape())
      throw ShapeError("adam: shape mismatch on tensor " + std::to_string(i));

  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    Tensor& m = st.m[i];
    Tensor& v = st.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * g[j];
      v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      p[j] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
    }
  }
}

/// Spatial extent seen by operational layer `index` (used for shift clamping).
inline std::size_t layer_extent(const ModelSpec& s, std::size_t index) {
  const std::size_t side = std::min(s.height, s.width);
  return (s.variant == Variant::osen2 && index == 1) ? side / 2 : side;
}

/// Clamps every shift to +-(min(H, W) / 2) of its layer's input.
inline void clamp_shifts(ModelParams& p) {
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const double bound = static_cast<double>(layer_extent(p.spec, i)) / 2.0;
    for (auto& v : p.layers[i].shifts.values()) v = std::clamp(v, -bound, bound);
  }
}

/// Adam step on the whole model followed by shift clamping. With
/// `freeze_shifts` the shift tensors receive no update.
inline void adam_step(ModelParams& params, const ModelParams& grads, AdamState& st,
                      bool freeze_shifts = false) {
  auto prefs = parameter_tensors(params);
  ModelParams g = grads;
  auto grefs = parameter_tensors(g);
  if (prefs.size() != grefs.size()) throw ShapeError("adam_step: gradient structure mismatch");
  std::vector<Tensor*> ps;
  std::vector<const Tensor*> gs;
  for (std::size_t i = 0; i < prefs.size(); ++i) {
    if (freeze_shifts && prefs[i].kind == ParamKind::shift)
      std::fill(grefs[i].tensor->values().begin(), grefs[i].tensor->values().end(), 0.0);
    ps.push_back(prefs[i].tensor);
    gs.push_back(grefs[i].tensor);
  }
  // Zero gradients leave Adam moments at zero, so frozen shifts stay put.
  adam_update(ps, gs, st);
  clamp_shifts(params);
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckEntry {
  std::string tensor;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  GradCheckEntry worst;
  std::vector<GradCheckEntry> violations;
  bool ok() const { return violations.empty(); }
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

enum class Stencil { three_point, five_point };

/// L(plus) - L(minus) for two evaluations of the same sample, accumulated
/// term by term so nearly equal outputs do not cancel in a large total.
inline double loss_difference(const ModelSpec& s, const ForwardTrace& plus,
                              const ForwardTrace& minus, const Sample& sample,
                              const LossSpec& loss) {
  const auto a = plus.output.values(), b = minus.output.values(), v = sample.mask.values();
  detail::require_same_length(a, v, "loss");
  detail::require_same_length(b, v, "loss");
  double d = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) d += (a[i] - b[i]) * (a[i] + b[i] - 2.0 * v[i]);
  switch (loss.kind) {
    case LossKind::mse_mask:
      break;
    case LossKind::group_l2:
      for (const auto& g : effective_groups(s, loss)) {
        double sa = 0.0, sb = 0.0, ds = 0.0;
        for (std::size_t i : g) {
          sa += a[i] * a[i];
          sb += b[i] * b[i];
          ds += (a[i] - b[i]) * (a[i] + b[i]);
        }
        const double denom = std::sqrt(sa) + std::sqrt(sb);
        if (denom > 0.0) d += loss.lambda_g * ds / denom;
      }
      break;
    case LossKind::hybrid: {
      if (sample.label < 0 || static_cast<std::size_t>(sample.label) >= plus.class_probs.size())
        throw DomainError("hybrid loss: sample label out of range");
      const auto y = static_cast<std::size_t>(sample.label);
      const double ca = std::max(plus.class_probs[y], kLogClamp);
      const double cb = std::max(minus.class_probs[y], kLogClamp);
      d -= loss.lambda_c * std::log1p((ca - cb) / cb);
      break;
    }
  }
  return d;
}

namespace detail {

/// Central-difference estimate from a symmetric difference oracle
/// delta(a) = L(x + a) - L(x - a).
template <typename DeltaFn>
double central_difference(DeltaFn&& delta, double h, Stencil stencil) {
  if (stencil == Stencil::three_point) return delta(h) / (2.0 * h);
  return (8.0 * delta(h) - delta(2.0 * h)) / (12.0 * h);
}

}  // namespace detail

/// Compares analytic gradients with finite differences for every entry of
/// the listed tensors. `delta(t, j, a)` returns L(p + a e_j) - L(p - a e_j)
/// for entry j of tensor t and must leave the parameters unchanged.
template <typename DeltaFn>
GradCheckReport grad_check_tensors(const std::vector<ParamRef>& params,
                                   const std::vector<const Tensor*>& analytic, DeltaFn&& delta,
                                   double h, double tol, Stencil stencil = Stencil::three_point) {
  if (!(h > 0.0)) throw DomainError("grad_check: step must be positive");
  GradCheckReport report;
  for (std::size_t ti = 0; ti < params.size(); ++ti) {
    for (std::size_t j = 0; j < params[ti].tensor->size(); ++j) {
      const double numeric = detail::central_difference(
          [&](double a) { return delta(ti, j, a); }, h, stencil);
      const double a = (*analytic[ti])[j];
      GradCheckEntry e{params[ti].name, j, a, numeric, relative_error(a, numeric)};
      ++report.checked;
      if (e.rel_error > report.max_rel_error) {
        report.max_rel_error = e.rel_error;
        report.worst = e;
      }
      if (e.rel_error > tol) report.violations.push_back(e);
    }
  }
  return report;
}

/// Finite-difference verification of `backward` for every model parameter.
/// A perturbed operational-layer entry only touches its own neuron, so each
/// evaluation recomputes that neuron and the layers after it.
inline GradCheckReport grad_check(ModelParams model, std::span<const Sample> batch,
                                  const LossSpec& loss, double h = 1e-5, double tol = 1e-5,
                                  Stencil stencil = Stencil::three_point) {
  const GradientResult g = backward(model, batch, loss);
  ModelParams grads = g.grads;
  std::vector<const Tensor*> analytic;
  for (auto& ref : parameter_tensors(grads)) analytic.push_back(ref.tensor);
  const std::vector<ParamRef> refs = parameter_tensors(model);

  std::vector<ForwardTrace> base;
  for (const auto& sample : batch) base.push_back(forward_trace(model, sample.input));
  // Pre-activations of every layer, per sample.
  std::vector<std::vector<Tensor>> pre(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b)
    for (std::size_t i = 0; i < model.layers.size(); ++i)
      pre[b].push_back(operational_preactivation(base[b].layer_inputs[i], model.layers[i]));

  const std::size_t front = model.proxy_layer ? 2 : 0;
  detail::NeuronWorkspace ws;
  auto evaluate = [&](std::size_t ti, std::size_t j, std::size_t b) {
    ForwardTrace t;
    if (ti < front) return forward_trace(model, batch[b].input);
    const std::size_t li = (ti - front) / 3;
    const auto& layer = model.layers[li];
    const std::size_t k = j / (refs[ti].tensor->size() / layer.out_channels());
    const std::size_t HW = pre[b][li].extent(1) * pre[b][li].extent(2);
    Tensor p = pre[b][li];
    detail::neuron_preactivation(base[b].layer_inputs[li], layer, k, ws, p.data() + k * HW);
    detail::forward_from(model, li, std::move(p), t, false);
    return t;
  };
  auto delta = [&](std::size_t ti, std::size_t j, double a) {
    double& x = (*refs[ti].tensor)[j];
    const double orig = x;
    double d = 0.0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      x = orig + a;
      const ForwardTrace tp = evaluate(ti, j, b);
      x = orig - a;
      const ForwardTrace tm = evaluate(ti, j, b);
      x = orig;
      d += loss_difference(model.spec, tp, tm, batch[b], loss);
    }
    return d;
  };
  return grad_check_tensors(refs, analytic, delta, h, tol, stencil);
}

/// Finite-difference verification of the Self-GOP backward pass (weights,
/// biases and input) under the loss ||phi(y) - target||^2.
inline GradCheckReport selfgop_grad_check(SelfGOPParams p, Tensor y, const Tensor& target,
                                          double h = 1e-5, double tol = 1e-5,
                                          Stencil stencil = Stencil::three_point) {
  const Tensor out = selfgop_forward(y, p);
  if (target.size() != out.size()) throw ShapeError("selfgop_grad_check: target length mismatch");
  Tensor d_pre(out.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    d_pre[i] = 2.0 * (out[i] - target[i]) * activation_slope(p.activation, out[i]);
  SelfGOPParams g = p;
  std::fill(g.W.values().begin(), g.W.values().end(), 0.0);
  std::fill(g.b.values().begin(), g.b.values().end(), 0.0);
  const Tensor dy = selfgop_backward(y, d_pre, p, g);
  std::vector<ParamRef> refs{{"W", &p.W, ParamKind::weight}, {"b", &p.b, ParamKind::bias},
                             {"y", &y, ParamKind::weight}};
  auto delta = [&](std::size_t ti, std::size_t j, double a) {
    double& x = (*refs[ti].tensor)[j];
    const double orig = x;
    x = orig + a;
    const Tensor op = selfgop_forward(y, p);
    x = orig - a;
    const Tensor om = selfgop_forward(y, p);
    x = orig;
    double d = 0.0;
    for (std::size_t i = 0; i < op.size(); ++i)
      d += (op[i] - om[i]) * (op[i] + om[i] - 2.0 * target[i]);
    return d;
  };
  return grad_check_tensors(refs, {&g.W, &g.b, &dy}, delta, h, tol, stencil);
}

}  // namespace osen
