#pragma once

// Model assembly, inference, binarization, training and weight files.

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "osen/error.hpp"
#include "osen/layers.hpp"
#include "osen/network.hpp"
#include "osen/rng.hpp"
#include "osen/sparse.hpp"
#include "osen/tensor.hpp"
#include "osen/training.hpp"

namespace osen {

// ---------------------------------------------------------------------------
// Construction

namespace detail {

inline void init_operational(OperationalLayerParams& layer, Rng& rng) {
  const double fan_in = static_cast<double>(layer.in_channels() * layer.kernel() * layer.kernel());
  const double bound = std::sqrt(3.0 / (fan_in * static_cast<double>(layer.order())));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : layer.W.values()) v = dist(rng);
}

}  // namespace detail

/// Builds a freshly initialized model. Kernel coefficients are uniform with
/// variance 1 / (fan_in * Q); shifts and biases start at zero. NCL models
/// need the n x m denoiser `B`: it becomes the first-order Self-GOP weight
/// (higher orders zero) so the untrained front end reproduces B y.
inline ModelParams build(const ModelSpec& spec, std::uint64_t seed, const Tensor* B = nullptr) {
  spec.validate();
  ModelParams p;
  p.spec = spec;
  Rng rng = make_rng(seed, "model-init");
  const std::size_t Q = spec.order, f = spec.kernel;
  p.layers.emplace_back(spec.in_channels, spec.hidden1, Q, f, Activation::tanh);
  p.layers.emplace_back(spec.hidden1, spec.hidden2, Q, f, Activation::tanh);
  if (spec.variant == Variant::osen2)
    p.layers.emplace_back(spec.hidden2, spec.hidden2, Q, f, Activation::tanh);
  p.layers.emplace_back(spec.hidden2, spec.out_channels, Q, f, Activation::sigmoid);
  for (auto& layer : p.layers) detail::init_operational(layer, rng);

  if (spec.ncl) {
    if (!B) throw DomainError("build: NCL model needs the denoiser matrix B");
    if (B->shape() != Shape{spec.image_size(), spec.measurement_dim})
      throw ShapeError("build: denoiser must be " + std::to_string(spec.image_size()) + " x " +
                       std::to_string(spec.measurement_dim) + ", got " + shape_str(B->shape()));
    SelfGOPParams gop(spec.measurement_dim, spec.image_size(), Q, Activation::none);
    std::copy(B->values().begin(), B->values().end(), gop.W.values().begin());
    p.proxy_layer = std::move(gop);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Inference

struct Inference {
  Tensor probability;   // C_out x H x W, sigmoid outputs
  Tensor class_probs;   // class heads only
};

inline Inference infer(const ModelParams& params, const Tensor& input) {
  ForwardTrace t = forward_trace(params, input);
  return {std::move(t.output), std::move(t.class_probs)};
}

/// v_hat_i = 1 iff p_i > tau (strict).
inline Tensor binarize(const Tensor& p, double tau = 0.5) {
  Tensor v(p.shape());
  for (std::size_t i = 0; i < p.size(); ++i) v[i] = p[i] > tau ? 1.0 : 0.0;
  return v;
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::distance(v.begin(), std::max_element(v.begin(), v.end())));
}

/// Macro-averaged support metrics of binarized predictions.
inline SeMetrics evaluate_support(const ModelParams& params, std::span<const Sample> samples,
                                  double tau = 0.5) {
  std::vector<SeMetrics> per;
  per.reserve(samples.size());
  for (const auto& s : samples) {
    const Tensor v_hat = binarize(infer(params, s.input).probability, tau);
    per.push_back(se_metrics(s.mask.values(), v_hat.values()));
  }
  return macro_average(per);
}

/// Fraction of samples whose arg-max class probability equals the label.
inline double evaluate_accuracy(const ModelParams& params, std::span<const Sample> samples) {
  if (samples.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& s : samples) {
    const Inference r = infer(params, s.input);
    if (static_cast<int>(argmax(r.class_probs.values())) == s.label) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double learning_rate = 1e-3;
  bool freeze_shifts = false;
  /// Binarization threshold used for the validation F1 in the history.
  double threshold = 0.5;
  /// When false, the model's existing input_scale is kept.
  bool fit_input_scale = true;
  /// Wall-clock limit in seconds (0 = none). Training stops at the first
  /// batch boundary past the limit; the interrupted epoch is still validated.
  double time_budget_seconds = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_f1 = 0.0;
};

struct TrainResult {
  ModelParams params;                 // validation-best checkpoint
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  bool budget_exhausted = false;
};

/// Reciprocal of the 99th percentile of |value| over the given inputs
/// (after the untrained NCL front end, when present).
inline double fit_input_scale(const ModelParams& params, std::span<const Sample> train) {
  std::vector<double> mags;
  for (const auto& s : train) {
    if (params.proxy_layer) {
      const Tensor x = selfgop_forward(s.input.reshaped({s.input.size()}), *params.proxy_layer);
      for (double v : x.values()) mags.push_back(std::abs(v));
    } else {
      for (double v : s.input.values()) mags.push_back(std::abs(v));
    }
  }
  if (mags.empty()) return 1.0;
  const std::size_t k = std::min(mags.size() - 1,
                                 static_cast<std::size_t>(0.99 * static_cast<double>(mags.size())));
  std::nth_element(mags.begin(), mags.begin() + static_cast<long>(k), mags.end());
  const double p99 = mags[k];
  return p99 > 0 ? 1.0 / p99 : 1.0;
}

/// Adam training from an initialized model with validation-best
/// checkpointing (lowest validation loss; the final epoch when there is no
/// validation data). Sample order is reshuffled every epoch from the seed.
inline TrainResult train_model(ModelParams init, std::span<const Sample> train,
                               std::span<const Sample> validation, const LossSpec& loss,
                               const TrainOptions& opt) {
  if (train.empty()) throw DomainError("train_model: empty training set");
  if (opt.batch_size == 0) throw DomainError("train_model: batch size must be positive");
  TrainResult result;
  ModelParams params = std::move(init);
  if (opt.fit_input_scale) params.input_scale = fit_input_scale(params, train);
  AdamState adam;
  adam.lr = opt.learning_rate;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(opt.seed, "train-shuffle");
  double best_val = std::numeric_limits<double>::infinity();
  result.params = params;

  const auto t0 = std::chrono::steady_clock::now();
  auto out_of_time = [&] {
    return opt.time_budget_seconds > 0 &&
           std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() >
               opt.time_budget_seconds;
  };

  std::vector<Sample> batch;
  for (std::size_t epoch = 0; epoch < opt.epochs && !result.budget_exhausted; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      if (out_of_time()) {
        result.budget_exhausted = true;
        break;
      }
      const std::size_t stop = std::min(order.size(), start + opt.batch_size);
      batch.clear();
      for (std::size_t i = start; i < stop; ++i) batch.push_back(train[order[i]]);
      GradientResult g;
      try {
        g = backward(params, batch, loss);
      } catch (const NonFiniteError& e) {
        throw NonFiniteError("training epoch " + std::to_string(epoch + 1) + ": " + e.what());
      }
      epoch_loss += g.loss;
      seen += batch.size();
      adam_step(params, g.grads, adam, opt.freeze_shifts);
    }
    if (seen == 0 && epoch > 0) break;
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = seen ? epoch_loss / static_cast<double>(seen) : 0.0;
    if (!validation.empty()) {
      rec.val_loss = batch_loss(params, validation, loss) / static_cast<double>(validation.size());
      rec.val_f1 = evaluate_support(params, validation, opt.threshold).f1;
      if (rec.val_loss < best_val) {
        best_val = rec.val_loss;
        result.params = params;
        result.best_epoch = rec.epoch;
      }
    }
    result.history.push_back(rec);
  }
  if (validation.empty()) {
    result.params = params;
    result.best_epoch = result.history.size();
  }
  return result;
}

// ---------------------------------------------------------------------------
// Weight files
//
// Layout (all integers and doubles little-endian):
//   "OSEN" | u32 version | spec record | f64 input_scale | u32 layer count |
//   per layer: u8 kind (0 operational, 1 self-GOP) | u8 activation |
//              u32 tensor count | per tensor: u32 rank, u64 extents, f64 data |
//   u32 CRC32 of everything before it

inline constexpr std::uint32_t kWeightFormatVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(const char* s, std::size_t n) { bytes_.insert(bytes_.end(), s, s + n); }
  void tensor(const Tensor& t) {
    u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) u64(e);
    for (double v : t.values()) f64(v);
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  std::uint8_t u8() { need(1); return bytes_[pos_++]; }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  Tensor tensor() {
    const std::uint32_t rank = u32();
    if (rank > 8) throw FormatError("weight file: implausible tensor rank");
    Shape shape(rank);
    std::uint64_t volume = 1;
    for (auto& e : shape) {
      e = u64();
      volume *= e;
    }
    if (volume > (bytes_.size() - pos_) / 8) throw FormatError("weight file: truncated tensor data");
    Tensor t(shape);
    for (auto& v : t.values()) v = f64();
    return t;
  }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError("weight file: truncated");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

inline void write_spec(ByteWriter& w, const ModelSpec& s) {
  w.u8(static_cast<std::uint8_t>(s.variant));
  w.u32(static_cast<std::uint32_t>(s.order));
  w.u8(s.ncl ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(s.height));
  w.u32(static_cast<std::uint32_t>(s.width));
  w.u32(static_cast<std::uint32_t>(s.in_channels));
  w.u32(static_cast<std::uint32_t>(s.out_channels));
  w.u32(static_cast<std::uint32_t>(s.measurement_dim));
  w.u32(static_cast<std::uint32_t>(s.hidden1));
  w.u32(static_cast<std::uint32_t>(s.hidden2));
  w.u32(static_cast<std::uint32_t>(s.kernel));
  w.u8(static_cast<std::uint8_t>(s.head));
  w.u32(static_cast<std::uint32_t>(s.group_h));
  w.u32(static_cast<std::uint32_t>(s.group_w));
}

inline ModelSpec read_spec(ByteReader& r) {
  ModelSpec s;
  const auto variant = r.u8();
  if (variant > 1) throw FormatError("weight file: unknown variant");
  s.variant = static_cast<Variant>(variant);
  s.order = r.u32();
  s.ncl = r.u8() != 0;
  s.height = r.u32();
  s.width = r.u32();
  s.in_channels = r.u32();
  s.out_channels = r.u32();
  s.measurement_dim = r.u32();
  s.hidden1 = r.u32();
  s.hidden2 = r.u32();
  s.kernel = r.u32();
  const auto head = r.u8();
  if (head > 2) throw FormatError("weight file: unknown head");
  s.head = static_cast<Head>(head);
  s.group_h = r.u32();
  s.group_w = r.u32();
  return s;
}

inline Activation read_activation(ByteReader& r) {
  const auto a = r.u8();
  if (a > 2) throw FormatError("weight file: unknown activation");
  return static_cast<Activation>(a);
}

inline ModelParams parse_params(std::span<const std::uint8_t> body) {
  ByteReader r(body);
  char magic[4];
  for (char& c : magic) c = static_cast<char>(r.u8());
  if (std::memcmp(magic, "OSEN", 4) != 0) throw FormatError("weight file: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kWeightFormatVersion)
    throw FormatError("weight file: format version " + std::to_string(version) +
                      " is not supported (expected " + std::to_string(kWeightFormatVersion) + ")");
  ModelParams p;
  p.spec = read_spec(r);
  p.input_scale = r.f64();
  const std::uint32_t layers = r.u32();
  for (std::uint32_t li = 0; li < layers; ++li) {
    const auto kind = r.u8();
    const Activation act = read_activation(r);
    const std::uint32_t count = r.u32();
    if (kind == 0 && count == 3) {
      OperationalLayerParams op;
      op.W = r.tensor();
      op.b = r.tensor();
      op.shifts = r.tensor();
      op.activation = act;
      op.validate();
      p.layers.push_back(std::move(op));
    } else if (kind == 1 && count == 2) {
      SelfGOPParams g;
      g.W = r.tensor();
      g.b = r.tensor();
      g.activation = act;
      g.validate();
      p.proxy_layer = std::move(g);
    } else {
      throw FormatError("weight file: unknown layer record");
    }
  }
  if (r.position() != body.size()) throw FormatError("weight file: trailing bytes before checksum");
  return p;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_params(const ModelParams& p) {
  detail::ByteWriter w;
  w.raw("OSEN", 4);
  w.u32(kWeightFormatVersion);
  detail::write_spec(w, p.spec);
  w.f64(p.input_scale);
  w.u32(static_cast<std::uint32_t>(p.layers.size() + (p.proxy_layer ? 1 : 0)));
  if (p.proxy_layer) {
    w.u8(1);
    w.u8(static_cast<std::uint8_t>(p.proxy_layer->activation));
    w.u32(2);
    w.tensor(p.proxy_layer->W);
    w.tensor(p.proxy_layer->b);
  }
  for (const auto& l : p.layers) {
    w.u8(0);
    w.u8(static_cast<std::uint8_t>(l.activation));
    w.u32(3);
    w.tensor(l.W);
    w.tensor(l.b);
    w.tensor(l.shifts);
  }
  const std::uint32_t crc = detail::crc32_of(w.bytes());
  w.u32(crc);
  return std::move(w.bytes());
}

inline ModelParams deserialize_params(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12) throw FormatError("weight file: truncated");
  const auto body = bytes.first(bytes.size() - 4);
  const auto tail = bytes.last(4);
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(tail[static_cast<std::size_t>(i)]) << (8 * i);
  if (std::memcmp(bytes.data(), "OSEN", 4) != 0) throw FormatError("weight file: bad magic");
  if (stored != detail::crc32_of(body)) {
    // A short file fails to parse before it fails the checksum.
    detail::parse_params(body);
    throw FormatError("weight file: checksum mismatch");
  }
  return detail::parse_params(body);
}

inline void save_params(const ModelParams& p, const std::string& path) {
  const auto bytes = serialize_params(p);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open weight file for writing: " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing weight file: " + path);
}

inline ModelParams load_params(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open weight file: " + path);
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  return deserialize_params(bytes);
}

/// Loads and checks that the stored model was built for `expected`.
inline ModelParams load_params(const std::string& path, const ModelSpec& expected) {
  ModelParams p = load_params(path);
  if (!(p.spec == expected))
    throw FormatError("weight file " + path + " was saved for a different model configuration");
  return p;
}

}  // namespace osen
