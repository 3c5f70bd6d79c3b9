#pragma once

// Dataset ingestion (IDX archives, graymap directories), deterministic
// splits and synthetic signal generators.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "osen/error.hpp"
#include "osen/rng.hpp"
#include "osen/tensor.hpp"

namespace osen {

/// Grayscale images scaled to [0, 1], optionally labeled.
struct ImageSet {
  std::vector<Tensor> images;  // each H x W
  std::vector<int> labels;     // empty when unlabeled
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t size() const { return images.size(); }
};

// ---------------------------------------------------------------------------
// IDX

namespace detail {

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t at,
                               const std::string& path) {
  if (at + 4 > b.size()) throw FormatError(path + ": truncated IDX header");
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) |
         (std::uint32_t{b[at + 2]} << 8) | std::uint32_t{b[at + 3]};
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Reads an IDX unsigned-byte image file (and, if given, its label file).
inline ImageSet ingest_idx(const std::string& images_path, const std::string& labels_path = "") {
  const auto bytes = detail::read_file_bytes(images_path);
  const std::uint32_t magic = detail::read_be32(bytes, 0, images_path);
  if (magic != kIdxImagesMagic)
    throw FormatError(images_path + ": bad IDX image magic " + std::to_string(magic));
  const std::size_t count = detail::read_be32(bytes, 4, images_path);
  const std::size_t H = detail::read_be32(bytes, 8, images_path);
  const std::size_t W = detail::read_be32(bytes, 12, images_path);
  const std::size_t header = 16, plane = H * W;
  if (bytes.size() - header < count * plane)
    throw FormatError(images_path + ": truncated payload (" + std::to_string(bytes.size() - header) +
                      " bytes for " + std::to_string(count) + " images of " + std::to_string(H) +
                      "x" + std::to_string(W) + ")");
  ImageSet set;
  set.height = H;
  set.width = W;
  set.images.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Tensor img({H, W});
    const std::uint8_t* src = bytes.data() + header + i * plane;
    for (std::size_t p = 0; p < plane; ++p) img[p] = src[p] / 255.0;
    set.images.push_back(std::move(img));
  }
  if (!labels_path.empty()) {
    const auto lb = detail::read_file_bytes(labels_path);
    if (detail::read_be32(lb, 0, labels_path) != kIdxLabelsMagic)
      throw FormatError(labels_path + ": bad IDX label magic");
    const std::size_t n = detail::read_be32(lb, 4, labels_path);
    if (n != count) throw FormatError(labels_path + ": label count does not match image count");
    if (lb.size() - 8 < n) throw FormatError(labels_path + ": truncated payload");
    set.labels.assign(lb.begin() + 8, lb.begin() + 8 + static_cast<long>(n));
  }
  return set;
}

struct SplitIndices {
  std::vector<std::size_t> train, validation, test;
};

/// Seeded permutation cut in the ratio 5:1:1 (validation and test get
/// floor(count/7) each, training the rest).
inline SplitIndices split_5_1_1(std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed, "dataset-split");
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t part = count / 7;
  const std::size_t train = count - 2 * part;
  SplitIndices s;
  s.train.assign(order.begin(), order.begin() + static_cast<long>(train));
  s.validation.assign(order.begin() + static_cast<long>(train),
                      order.begin() + static_cast<long>(train + part));
  s.test.assign(order.begin() + static_cast<long>(train + part), order.end());
  return s;
}

// ---------------------------------------------------------------------------
// Portable graymaps

namespace detail {

/// Parses a binary (P5) or plain (P2) graymap into [0, 1] values.
inline Tensor read_pgm(const std::string& path) {
  const auto b = read_file_bytes(path);
  std::size_t pos = 0;
  auto token = [&]() -> std::string {
    while (pos < b.size()) {
      if (b[pos] == '#') {
        while (pos < b.size() && b[pos] != '\n') ++pos;
      } else if (std::isspace(b[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string t;
    while (pos < b.size() && !std::isspace(b[pos]) && b[pos] != '#') t.push_back(static_cast<char>(b[pos++]));
    if (t.empty()) throw FormatError("truncated header");
    return t;
  };
  const std::string magic = token();
  if (magic != "P5" && magic != "P2") throw FormatError("not a grayscale graymap (magic " + magic + ")");
  const std::size_t W = std::stoul(token()), H = std::stoul(token());
  const unsigned long maxval = std::stoul(token());
  if (W == 0 || H == 0 || maxval == 0 || maxval > 65535) throw FormatError("invalid header values");
  Tensor img({H, W});
  const double scale = 1.0 / static_cast<double>(maxval);
  if (magic == "P2") {
    for (auto& v : img.values()) v = std::stoul(token()) * scale;
    return img;
  }
  ++pos;  // single whitespace byte after maxval
  const std::size_t bps = maxval < 256 ? 1 : 2;
  if (b.size() < pos + H * W * bps) throw FormatError("truncated pixel data");
  for (std::size_t i = 0; i < H * W; ++i) {
    const std::uint8_t* p = b.data() + pos + i * bps;
    const unsigned v = bps == 1 ? p[0] : (unsigned{p[0]} << 8) | p[1];
    img[i] = v * scale;
  }
  return img;
}

/// Bilinear resampling to side x side with aligned corners.
inline Tensor resize_square(const Tensor& img, std::size_t side) {
  const std::size_t H = img.extent(0), W = img.extent(1);
  if (H == side && W == side) return img;
  Tensor out({side, side});
  auto coord = [&](std::size_t i, std::size_t n) {
    return side == 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(n - 1) / static_cast<double>(side - 1);
  };
  for (std::size_t i = 0; i < side; ++i) {
    const double u = coord(i, H);
    const std::size_t i0 = static_cast<std::size_t>(u), i1 = std::min(i0 + 1, H - 1);
    const double fu = u - static_cast<double>(i0);
    for (std::size_t j = 0; j < side; ++j) {
      const double v = coord(j, W);
      const std::size_t j0 = static_cast<std::size_t>(v), j1 = std::min(j0 + 1, W - 1);
      const double fv = v - static_cast<double>(j0);
      out(i, j) = (1 - fu) * ((1 - fv) * img(i0, j0) + fv * img(i0, j1)) +
                  fu * ((1 - fv) * img(i1, j0) + fv * img(i1, j1));
    }
  }
  return out;
}

inline Tensor center_crop_square(const Tensor& img) {
  const std::size_t H = img.extent(0), W = img.extent(1), s = std::min(H, W);
  if (H == W) return img;
  const std::size_t r0 = (H - s) / 2, c0 = (W - s) / 2;
  Tensor out({s, s});
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < s; ++j) out(i, j) = img(r0 + i, c0 + j);
  return out;
}

}  // namespace detail

/// Loads every *.pgm file of a directory (sorted by name), center-crops to a
/// square and resamples to side x side. All unreadable files are reported
/// together.
inline ImageSet ingest_image_dir(const std::string& dir, std::size_t side) {
  namespace fs = std::filesystem;
  if (side == 0) throw DomainError("ingest_image_dir: side must be positive");
  if (!fs::is_directory(dir)) throw FormatError("not a directory: " + dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw FormatError("no graymap (.pgm) files in " + dir);

  ImageSet set;
  set.height = set.width = side;
  std::string failures;
  for (const auto& f : files) {
    try {
      set.images.push_back(detail::resize_square(detail::center_crop_square(detail::read_pgm(f.string())), side));
    } catch (const Error& e) {
      failures += "\n  " + f.string() + ": " + e.what();
    } catch (const std::exception& e) {
      failures += "\n  " + f.string() + ": malformed header (" + e.what() + ")";
    }
  }
  if (!failures.empty()) throw FormatError("unreadable images in " + dir + ":" + failures);
  return set;
}

/// One graymap, center-cropped and resampled to side x side.
inline Tensor load_pgm(const std::string& path, std::size_t side) {
  try {
    return detail::resize_square(detail::center_crop_square(detail::read_pgm(path)), side);
  } catch (const Error& e) {
    throw FormatError(path + ": " + e.what());
  } catch (const std::exception& e) {
    throw FormatError(path + ": malformed header (" + e.what() + ")");
  }
}

/// Writes a binary 8-bit graymap, clamping values to [0, 1].
inline void write_pgm(const std::string& path, const Tensor& img) {
  if (img.rank() != 2) throw ShapeError("write_pgm: image must be H x W");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path);
  out << "P5\n" << img.extent(1) << ' ' << img.extent(0) << "\n255\n";
  for (double v : img.values())
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  if (!out) throw FormatError("failed writing " + path);
}

// ---------------------------------------------------------------------------
// Synthetic data

/// `count` signals of length n with exactly k non-zeros at uniformly random
/// positions and amplitudes uniform in [0.2, 1].
inline std::vector<Tensor> synth_sparse(std::size_t n, std::size_t k, std::size_t count,
                                        std::uint64_t seed) {
  if (k >= n) throw DomainError("synth_sparse: need k < n, got k=" + std::to_string(k) +
                                " n=" + std::to_string(n));
  std::vector<Tensor> out;
  out.reserve(count);
  std::vector<std::size_t> idx(n);
  for (std::size_t s = 0; s < count; ++s) {
    Rng rng = make_rng(seed, "synth-sparse", s);
    std::iota(idx.begin(), idx.end(), 0);
    std::uniform_real_distribution<double> amp(0.2, 1.0);
    Tensor x({n});
    for (std::size_t t = 0; t < k; ++t) {
      std::uniform_int_distribution<std::size_t> pick(t, n - 1);
      std::swap(idx[t], idx[pick(rng)]);
      x[idx[t]] = amp(rng);
    }
    out.push_back(std::move(x));
  }
  return out;
}

/// Class-structured signals: class c draws from a random `rank`-dimensional
/// subspace of R^d plus isotropic noise of standard deviation `noise`.
class SubspaceClassGenerator {
 public:
  SubspaceClassGenerator(std::size_t classes, std::size_t dim, std::size_t rank, double noise,
                         std::uint64_t seed)
      : dim_(dim), rank_(rank), noise_(noise), seed_(seed) {
    if (classes == 0 || dim == 0 || rank == 0 || rank > dim)
      throw DomainError("class generator: need classes, dim > 0 and 0 < rank <= dim");
    Rng rng = make_rng(seed, "class-bases");
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t c = 0; c < classes; ++c) {
      Tensor U({dim, rank});
      for (auto& v : U.values()) v = normal(rng);
      bases_.push_back(std::move(U));
    }
  }

  std::size_t num_classes() const { return bases_.size(); }

  /// Sample number `index` of class `cls` (deterministic per index).
  Tensor sample(std::size_t cls, std::uint64_t index) const {
    Rng rng = make_rng(seed_, "class-sample", index * bases_.size() + cls);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> g(rank_);
    for (auto& v : g) v = normal(rng);
    Tensor x({dim_});
    const Tensor& U = bases_[cls];
    for (std::size_t i = 0; i < dim_; ++i) {
      double s = 0.0;
      for (std::size_t r = 0; r < rank_; ++r) s += U(i, r) * g[r];
      x[i] = s + noise_ * normal(rng);
    }
    return x;
  }

 private:
  std::size_t dim_, rank_;
  double noise_;
  std::uint64_t seed_;
  std::vector<Tensor> bases_;
};

}  // namespace osen
