#pragma once

// Model description, parameter container and the traced forward pass of the
// two support-estimator topologies:
//
//   osen1: op(C_in -> 48) -> op(48 -> 24) -> op(24 -> C_out, sigmoid)
//   osen2: op(C_in -> 48) -> maxpool2 -> op(48 -> 24)
//          -> transposed op(24 -> 24, stride 2) -> op(24 -> C_out, sigmoid)
//
// With `ncl` set, a Self-GOP layer maps the raw measurement y (length m) to
// the H*W proxy image in front of the first operational layer.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "osen/error.hpp"
#include "osen/layers.hpp"
#include "osen/tensor.hpp"

namespace osen {

enum class Variant { osen1, osen2 };
enum class Head { segmentation, classification, hybrid };

inline const char* to_string(Variant v) { return v == Variant::osen1 ? "osen1" : "osen2"; }

inline const char* to_string(Head h) {
  switch (h) {
    case Head::segmentation: return "segmentation";
    case Head::classification: return "classification";
    case Head::hybrid: return "hybrid";
  }
  return "?";
}

struct ModelSpec {
  Variant variant = Variant::osen1;
  std::size_t order = 3;
  bool ncl = false;
  std::size_t height = 28;
  std::size_t width = 28;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  /// Measurement length m; only meaningful when `ncl` is set.
  std::size_t measurement_dim = 0;
  std::size_t hidden1 = 48;
  std::size_t hidden2 = 24;
  std::size_t kernel = 3;
  Head head = Head::segmentation;
  /// Class block extents for the classification heads.
  std::size_t group_h = 0;
  std::size_t group_w = 0;

  bool has_class_head() const { return head != Head::segmentation; }
  std::size_t image_size() const { return height * width; }
  std::size_t num_classes() const {
    return has_class_head() ? (height / group_h) * (width / group_w) : 0;
  }

  void validate() const {
    if (order < 1) throw DomainError("model: Taylor order must be >= 1");
    if (kernel % 2 == 0) throw DomainError("model: kernel size must be odd");
    if (height == 0 || width == 0 || in_channels == 0 || out_channels == 0)
      throw ShapeError("model: empty input or output geometry");
    if (hidden1 == 0 || hidden2 == 0) throw ShapeError("model: hidden widths must be positive");
    if (variant == Variant::osen2 && (height % 2 || width % 2))
      throw ShapeError("model: osen2 needs even spatial extents for max pooling");
    if (ncl) {
      if (in_channels != 1) throw ShapeError("model: NCL front end feeds a single channel");
      if (measurement_dim == 0 || measurement_dim >= image_size())
        throw ShapeError("model: NCL needs 0 < m < H*W");
    }
    if (has_class_head()) {
      if (group_h == 0 || group_w == 0 || height % group_h || width % group_w)
        throw ShapeError("model: class blocks must tile the output map");
      if (out_channels != 1) throw ShapeError("model: class head expects a single output channel");
    }
  }

  bool operator==(const ModelSpec&) const = default;
};

/// Trainable state of a model plus the input normalization scalar.
struct ModelParams {
  ModelSpec spec;
  std::optional<SelfGOPParams> proxy_layer;
  /// Operational layers in forward order (3 for osen1, 4 for osen2; for
  /// osen2 index 2 is the transposed layer).
  std::vector<OperationalLayerParams> layers;
  /// Multiplies the network input (proxy image or measurement) before the
  /// first layer.
  double input_scale = 1.0;
};

enum class ParamKind { weight, bias, shift };

struct ParamRef {
  std::string name;
  Tensor* tensor;
  ParamKind kind;
};

/// Every trainable tensor of the model in a fixed order.
inline std::vector<ParamRef> parameter_tensors(ModelParams& p) {
  std::vector<ParamRef> refs;
  if (p.proxy_layer) {
    refs.push_back({"ncl.W", &p.proxy_layer->W, ParamKind::weight});
    refs.push_back({"ncl.b", &p.proxy_layer->b, ParamKind::bias});
  }
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const std::string prefix = "op" + std::to_string(i);
    refs.push_back({prefix + ".W", &p.layers[i].W, ParamKind::weight});
    refs.push_back({prefix + ".b", &p.layers[i].b, ParamKind::bias});
    refs.push_back({prefix + ".shifts", &p.layers[i].shifts, ParamKind::shift});
  }
  return refs;
}

/// Same structure with every tensor zeroed; used as a gradient buffer.
inline ModelParams zeros_like(const ModelParams& p) {
  ModelParams z = p;
  for (auto& ref : parameter_tensors(z))
    std::fill(ref.tensor->values().begin(), ref.tensor->values().end(), 0.0);
  return z;
}

inline std::size_t param_count(const ModelParams& p) {
  std::size_t total = p.proxy_layer ? p.proxy_layer->param_count() : 0;
  for (const auto& l : p.layers) total += l.param_count();
  return total;
}

/// Closed-form trainable-parameter count for a spec, without building it.
inline std::size_t param_count(const ModelSpec& s) {
  auto op = [&](std::size_t cin, std::size_t cout) {
    return s.kernel * s.kernel * s.order * cin * cout + s.order * cout + 2 * cout;
  };
  std::size_t total = op(s.in_channels, s.hidden1) + op(s.hidden1, s.hidden2) +
                      op(s.hidden2, s.out_channels);
  if (s.variant == Variant::osen2) total += op(s.hidden2, s.hidden2);
  if (s.ncl) total += s.order * s.image_size() * s.measurement_dim + s.order * s.image_size();
  return total;
}

/// Intermediate values kept for the backward pass.
struct ForwardTrace {
  Tensor scaled_input;                 // input after the normalization scalar
  Tensor proxy;                        // Self-GOP output (NCL only)
  std::vector<Tensor> layer_inputs;    // input seen by each operational layer
  std::vector<Tensor> layer_outputs;   // post-activation output of each layer
  Tensor pooled;                       // osen2 max-pool output
  std::vector<std::size_t> pool_argmax;
  Tensor output_pre;                   // pre-sigmoid output map, C_out x H x W
  Tensor output;                       // sigmoid probability map
  Tensor class_probs;                  // grouped softmax (class heads only)
};

inline Tensor image_input(const ModelSpec& s, const Tensor& input) {
  if (input.size() != s.in_channels * s.image_size())
    throw ShapeError("model input has " + std::to_string(input.size()) + " values, expected " +
                     std::to_string(s.in_channels * s.image_size()));
  return input.reshaped({s.in_channels, s.height, s.width});
}

namespace detail {

inline void check_layer_output(const Tensor& t, std::size_t layer) {
  if (!all_finite(t.values()))
    throw NonFiniteError("non-finite activation at operational layer " + std::to_string(layer));
}

}  // namespace detail

namespace detail {

inline bool is_transposed(const ModelSpec& s, std::size_t layer) {
  return s.variant == Variant::osen2 && layer == 2;
}

/// Continues a forward pass from the pre-activation of layer `i`. With
/// `record` set, layer inputs/outputs and pooling indices are appended to the
/// trace; otherwise only the outputs and class probabilities are filled in.
inline void forward_from(const ModelParams& p, std::size_t i, Tensor pre, ForwardTrace& t,
                         bool record) {
  const ModelSpec& s = p.spec;
  const std::size_t L = p.layers.size();
  for (;;) {
    if (i + 1 == L) t.output_pre = pre;
    Tensor x = apply_activation(std::move(pre), p.layers[i].activation);
    check_layer_output(x, i);
    if (record) t.layer_outputs.push_back(x);
    if (s.variant == Variant::osen2 && i == 0) {
      PoolResult pr = maxpool2(x);
      x = std::move(pr.output);
      if (record) {
        t.pooled = x;
        t.pool_argmax = std::move(pr.argmax);
      }
    }
    if (++i == L) {
      t.output = std::move(x);
      break;
    }
    Tensor in = is_transposed(s, i) ? zero_interleave(x) : std::move(x);
    pre = operational_preactivation(in, p.layers[i]);
    if (record) t.layer_inputs.push_back(std::move(in));
  }
  if (s.has_class_head())
    t.class_probs = grouped_avgpool_softmax(t.output_pre.reshaped({s.height, s.width}), s.group_h,
                                            s.group_w);
}

}  // namespace detail

/// Input of the first operational layer: the scaled image, or the Self-GOP
/// proxy for NCL models. Fills `scaled_input` and `proxy` of the trace.
inline Tensor network_input(const ModelParams& p, const Tensor& input, ForwardTrace& t) {
  const ModelSpec& s = p.spec;
  t.scaled_input = input;
  for (auto& v : t.scaled_input.values()) v *= p.input_scale;
  if (!s.ncl) return image_input(s, t.scaled_input);
  if (input.size() != s.measurement_dim)
    throw ShapeError("NCL model expects a measurement of length " +
                     std::to_string(s.measurement_dim));
  t.proxy = selfgop_forward(t.scaled_input.reshaped({s.measurement_dim}), *p.proxy_layer);
  return t.proxy.reshaped({1, s.height, s.width});
}

/// Forward pass keeping every intermediate needed by `backward`.
inline ForwardTrace forward_trace(const ModelParams& p, const Tensor& input) {
  ForwardTrace t;
  Tensor x = network_input(p, input, t);
  Tensor pre = operational_preactivation(x, p.layers.front());
  t.layer_inputs.push_back(std::move(x));
  detail::forward_from(p, 0, std::move(pre), t, true);
  return t;
}

}  // namespace osen
