#pragma once

// MNIST ingestion (IDX, optionally gzip-compressed), augmentation, and
// on-the-fly MultiMNIST synthesis.

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "capsroute/errors.hpp"
#include "capsroute/tensor.hpp"

namespace capsroute::data {

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Raw unsigned-byte IDX array.
struct IdxArray {
  std::vector<std::size_t> dims;
  std::vector<std::uint8_t> bytes;
};

namespace detail {

inline std::vector<std::uint8_t> read_file_inflated(const std::filesystem::path& path) {
  // gzread passes uncompressed files through unchanged.
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw FormatError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> out;
  std::array<std::uint8_t, 1 << 16> buf{};
  int got = 0;
  while ((got = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0) out.insert(out.end(), buf.begin(), buf.begin() + got);
  int err = 0;
  const char* msg = gzerror(f, &err);
  gzclose(f);
  if (got < 0 || (err != Z_OK && err != Z_STREAM_END)) {
    throw FormatError("'" + path.string() + "': decompression failed: " + (msg ? msg : "unknown"));
  }
  return out;
}

inline std::uint32_t be32(const std::uint8_t* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

}  // namespace detail

/// Parses an in-memory IDX buffer: two zero bytes, type 0x08 (ubyte), rank,
/// big-endian 32-bit extents, then the payload.
inline IdxArray parse_idx(const std::vector<std::uint8_t>& raw, const std::string& origin = "<buffer>") {
  if (raw.size() < 4) throw FormatError(origin + ": truncated IDX header");
  if (raw[0] != 0 || raw[1] != 0 || raw[2] != 0x08) throw FormatError(origin + ": bad IDX magic");
  const std::size_t rank = raw[3];
  if (rank == 0) throw FormatError(origin + ": IDX rank 0");
  if (raw.size() < 4 + 4 * rank) throw FormatError(origin + ": truncated IDX dimensions");
  IdxArray arr;
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t d = detail::be32(raw.data() + 4 + 4 * i);
    if (d == 0) throw FormatError(origin + ": zero IDX extent");
    if (count > std::numeric_limits<std::size_t>::max() / d || count * d > (std::size_t{1} << 40)) {
      throw FormatError(origin + ": IDX dimensions overflow");
    }
    count *= d;
    arr.dims.push_back(d);
  }
  const std::size_t header = 4 + 4 * rank;
  if (raw.size() - header < count) throw FormatError(origin + ": truncated IDX payload");
  if (raw.size() - header > count) throw FormatError(origin + ": trailing bytes after IDX payload");
  arr.bytes.assign(raw.begin() + static_cast<std::ptrdiff_t>(header), raw.end());
  return arr;
}

inline IdxArray read_idx(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw FormatError("missing IDX file '" + path.string() + "'");
  return parse_idx(detail::read_file_inflated(path), path.string());
}

inline std::vector<std::uint8_t> encode_idx(const IdxArray& arr) {
  std::vector<std::uint8_t> out{0, 0, 0x08, static_cast<std::uint8_t>(arr.dims.size())};
  for (std::size_t d : arr.dims) detail::put_be32(out, static_cast<std::uint32_t>(d));
  out.insert(out.end(), arr.bytes.begin(), arr.bytes.end());
  return out;
}

inline void write_idx(const std::filesystem::path& path, const IdxArray& arr) {
  const auto bytes = encode_idx(arr);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write '" + path.string() + "'");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// Images file (magic 0x803) -> [N, H, W, 1] scaled into [0, 1].
template <typename T = float>
Tensor<T> images_from_idx(const IdxArray& arr) {
  if (arr.dims.size() != 3) throw FormatError("IDX images need rank 3 (magic 0x00000803)");
  Tensor<T> out({arr.dims[0], arr.dims[1], arr.dims[2], 1});
  for (std::size_t i = 0; i < arr.bytes.size(); ++i) out[i] = static_cast<T>(arr.bytes[i]) / T{255};
  return out;
}

inline std::vector<std::uint8_t> labels_from_idx(const IdxArray& arr) {
  if (arr.dims.size() != 1) throw FormatError("IDX labels need rank 1 (magic 0x00000801)");
  return arr.bytes;
}

template <typename T = float>
Tensor<T> load_idx_images(const std::filesystem::path& path) {
  return images_from_idx<T>(read_idx(path));
}

inline std::vector<std::uint8_t> load_idx_labels(const std::filesystem::path& path) {
  return labels_from_idx(read_idx(path));
}

/// Quantizes [N, H, W, 1] images in [0, 1] back to an IDX images array.
template <typename T>
IdxArray images_to_idx(const Tensor<T>& images) {
  IdxArray arr{{images.dim(0), images.dim(1), images.dim(2)}, std::vector<std::uint8_t>(images.size())};
  for (std::size_t i = 0; i < images.size(); ++i) {
    arr.bytes[i] = static_cast<std::uint8_t>(std::lround(std::clamp<double>(images[i], 0.0, 1.0) * 255.0));
  }
  return arr;
}

/// Images plus single-class labels.
struct Dataset {
  Tensor<float> images;  // [N, H, W, 1]
  std::vector<std::uint8_t> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t height() const { return images.dim(1); }
  std::size_t width() const { return images.dim(2); }
  std::size_t pixels() const { return images.dim(1) * images.dim(2) * images.dim(3); }
  const float* image(std::size_t i) const { return images.data() + i * pixels(); }

  Dataset head(std::size_t n) const {
    n = std::min(n, size());
    Dataset out;
    out.images = Tensor<float>({n, images.dim(1), images.dim(2), images.dim(3)},
                               std::vector<float>(images.data(), images.data() + n * pixels()));
    out.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n));
    return out;
  }
};

struct MnistFiles {
  std::filesystem::path train_images, train_labels, test_images, test_labels;
};

/// Locates the four MNIST files under dir, accepting plain or .gz names.
inline MnistFiles locate_mnist(const std::filesystem::path& dir) {
  auto find = [&](const std::string& stem) {
    for (const std::string name : {stem, stem + ".gz", std::string(stem).replace(stem.find("-idx"), 4, ".idx")}) {
      const auto p = dir / name;
      if (std::filesystem::exists(p)) return p;
    }
    throw FormatError("MNIST file '" + stem + "' not found in '" + dir.string() + "'");
  };
  return {find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"), find("t10k-images-idx3-ubyte"),
          find("t10k-labels-idx1-ubyte")};
}

inline Dataset load_dataset(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto img = read_idx(images);
  const auto lab = read_idx(labels);
  Dataset ds{images_from_idx<float>(img), labels_from_idx(lab)};
  if (ds.images.dim(0) != ds.labels.size()) {
    throw FormatError("image/label count mismatch: " + images.string() + " vs " + labels.string());
  }
  for (auto l : ds.labels) {
    if (l > 9) throw FormatError("label out of range in " + labels.string());
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  int max_shift = 2;            // pixels, both axes
  double max_rotation_deg = 10;  // degrees
};

/// Rotation about the image center (bilinear, zero fill) followed by an
/// integer translation. image is one [H, W] plane.
inline void rotate_translate(const float* src, float* dst, std::size_t h, std::size_t w, double degrees, int dx,
                             int dy) {
  const double theta = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(theta), s = std::sin(theta);
  const double cy = (static_cast<double>(h) - 1.0) / 2.0, cx = (static_cast<double>(w) - 1.0) / 2.0;
  const bool pure_shift = degrees == 0.0;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double ty = static_cast<double>(y) - dy, tx = static_cast<double>(x) - dx;
      float v = 0.0f;
      if (pure_shift) {
        if (ty >= 0 && tx >= 0 && ty < static_cast<double>(h) && tx < static_cast<double>(w)) {
          v = src[static_cast<std::size_t>(ty) * w + static_cast<std::size_t>(tx)];
        }
      } else {
        // inverse rotation of the destination coordinate
        const double ry = ty - cy, rx = tx - cx;
        const double sy = c * ry - s * rx + cy;
        const double sx = s * ry + c * rx + cx;
        const double fy = std::floor(sy), fx = std::floor(sx);
        const double wy = sy - fy, wx = sx - fx;
        const long y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
        auto px = [&](long yy, long xx) -> double {
          if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) return 0.0;
          return src[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)];
        };
        v = static_cast<float>((1 - wy) * ((1 - wx) * px(y0, x0) + wx * px(y0, x0 + 1)) +
                               wy * ((1 - wx) * px(y0 + 1, x0) + wx * px(y0 + 1, x0 + 1)));
      }
      dst[y * w + x] = std::clamp(v, 0.0f, 1.0f);
    }
  }
}

/// Random translation in [-max_shift, max_shift] and rotation in
/// [-max_rotation, max_rotation] degrees.
template <typename Rng>
Tensor<float> augment(const Tensor<float>& image, Rng& rng, const AugmentConfig& cfg = {}) {
  if (image.rank() != 3 || image.dim(2) != 1) throw DimensionError("augment: expected [H, W, 1] image");
  std::uniform_int_distribution<int> shift(-cfg.max_shift, cfg.max_shift);
  std::uniform_real_distribution<double> angle(-cfg.max_rotation_deg, cfg.max_rotation_deg);
  const int dx = shift(rng), dy = shift(rng);
  const double deg = cfg.max_rotation_deg > 0 ? angle(rng) : 0.0;
  Tensor<float> out(image.shape());
  rotate_translate(image.data(), out.data(), image.dim(0), image.dim(1), deg, dx, dy);
  return out;
}

// ---------------------------------------------------------------------------
// MultiMNIST

inline constexpr std::size_t kMultiCanvas = 36;
inline constexpr int kMultiMaxShift = 4;

struct MultiSample {
  Tensor<float> image;  // [36, 36, 1]
  std::array<std::uint8_t, 2> classes{};
  Tensor<float> label;  // two-hot [10]
  Tensor<float> target_a;  // shifted padded digits, reconstruction targets
  Tensor<float> target_b;
  std::array<int, 4> shifts{};  // dx_a, dy_a, dx_b, dy_b
};

/// Centers a 28x28 digit on the 36x36 canvas and shifts it by (dx, dy).
inline Tensor<float> pad_and_shift(const float* digit, std::size_t h, std::size_t w, int dx, int dy,
                                   std::size_t canvas = kMultiCanvas) {
  Tensor<float> out({canvas, canvas, 1});
  const long oy = static_cast<long>((canvas - h) / 2) + dy, ox = static_cast<long>((canvas - w) / 2) + dx;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const long ty = oy + static_cast<long>(y), tx = ox + static_cast<long>(x);
      if (ty < 0 || tx < 0 || ty >= static_cast<long>(canvas) || tx >= static_cast<long>(canvas)) continue;
      out[static_cast<std::size_t>(ty) * canvas + static_cast<std::size_t>(tx)] = digit[y * w + x];
    }
  }
  return out;
}

/// Overlays two shifted digits of different classes by per-pixel maximum.
template <typename Rng>
MultiSample make_multimnist(const float* img_a, std::uint8_t label_a, const float* img_b, std::uint8_t label_b,
                            Rng& rng, std::size_t h = 28, std::size_t w = 28, int max_shift = kMultiMaxShift) {
  if (label_a == label_b) throw ArgumentError("make_multimnist: digits must belong to different classes");
  if (label_a > 9 || label_b > 9) throw ArgumentError("make_multimnist: label out of range");
  std::uniform_int_distribution<int> shift(-max_shift, max_shift);
  MultiSample s;
  for (auto& v : s.shifts) v = shift(rng);
  s.target_a = pad_and_shift(img_a, h, w, s.shifts[0], s.shifts[1]);
  s.target_b = pad_and_shift(img_b, h, w, s.shifts[2], s.shifts[3]);
  s.image = Tensor<float>(s.target_a.shape());
  for (std::size_t i = 0; i < s.image.size(); ++i) {
    s.image[i] = std::clamp(std::max(s.target_a[i], s.target_b[i]), 0.0f, 1.0f);
  }
  s.classes = {label_a, label_b};
  s.label = Tensor<float>({10});
  s.label[label_a] = 1.0f;
  s.label[label_b] = 1.0f;
  return s;
}

struct BoundingBox {
  long y0 = 0, x0 = 0, y1 = -1, x1 = -1;  // inclusive; empty when y1 < y0
  long area() const { return y1 < y0 ? 0 : (y1 - y0 + 1) * (x1 - x0 + 1); }
};

inline BoundingBox ink_box(const Tensor<float>& img, float threshold = 0.0f) {
  const std::size_t h = img.dim(0), w = img.dim(1);
  BoundingBox b{static_cast<long>(h), static_cast<long>(w), -1, -1};
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (img[y * w + x] > threshold) {
        b.y0 = std::min(b.y0, static_cast<long>(y));
        b.x0 = std::min(b.x0, static_cast<long>(x));
        b.y1 = std::max(b.y1, static_cast<long>(y));
        b.x1 = std::max(b.x1, static_cast<long>(x));
      }
    }
  }
  if (b.y1 < 0) return {};
  return b;
}

/// Fraction of the smaller digit's bounding box covered by the other's.
inline double bbox_overlap(const Tensor<float>& a, const Tensor<float>& b) {
  const auto ba = ink_box(a), bb = ink_box(b);
  const long smaller = std::min(ba.area(), bb.area());
  if (smaller == 0) return 0.0;
  const BoundingBox inter{std::max(ba.y0, bb.y0), std::max(ba.x0, bb.x0), std::min(ba.y1, bb.y1),
                          std::min(ba.x1, bb.x1)};
  if (inter.y1 < inter.y0 || inter.x1 < inter.x0) return 0.0;
  return static_cast<double>(inter.area()) / static_cast<double>(smaller);
}

/// Shared fraction of the two digits' h x w frames after shifting; the
/// overlap statistic of a sample.
inline double frame_overlap(const MultiSample& s, std::size_t h = 28, std::size_t w = 28) {
  const long ox = static_cast<long>(w) - std::abs(s.shifts[0] - s.shifts[2]);
  const long oy = static_cast<long>(h) - std::abs(s.shifts[1] - s.shifts[3]);
  if (ox <= 0 || oy <= 0) return 0.0;
  return static_cast<double>(ox * oy) / static_cast<double>(h * w);
}

// ---------------------------------------------------------------------------
// Batches and epoch streams

template <typename T = float>
struct Batch {
  Tensor<T> images;   // [B, H, W, 1]
  Tensor<T> targets;  // [B, classes] multi-hot
  std::vector<std::vector<std::size_t>> classes;  // per mask slot: class index per sample
  std::vector<Tensor<T>> recon_targets;           // per mask slot: [B, H*W]
  std::vector<std::size_t> ids;                   // sample index within the epoch
};

/// Per-sample generator: sample i of epoch e depends only on (seed, e, i).
inline std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t epoch, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

enum class StreamMode { mnist, multimnist };

struct StreamConfig {
  StreamMode mode = StreamMode::mnist;
  std::size_t batch_size = 16;
  bool augment = true;
  bool shuffle = true;
  AugmentConfig augmentation;
  std::size_t multi_per_digit = 10;  // synthesized samples per base digit per epoch
};

/**
 * Deterministic epoch iterator. MNIST mode yields shuffled (optionally
 * augmented) digits; MultiMNIST mode yields multi_per_digit overlays per base
 * digit, the partner drawn uniformly from digits of the other classes.
 */
class EpochStream {
 public:
  EpochStream(const Dataset& ds, StreamConfig cfg, std::uint64_t seed, std::uint64_t epoch)
      : ds_(&ds), cfg_(cfg), seed_(seed), epoch_(epoch) {
    if (cfg_.batch_size == 0) throw ConfigError("epoch stream: batch size must be >= 1");
    const std::size_t per = cfg_.mode == StreamMode::mnist ? 1 : cfg_.multi_per_digit;
    order_.resize(ds.size() * per);
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    if (cfg_.shuffle) {
      std::mt19937_64 rng = sample_rng(seed_, epoch_, std::numeric_limits<std::uint64_t>::max());
      std::shuffle(order_.begin(), order_.end(), rng);
    }
    if (cfg_.mode == StreamMode::multimnist) {
      for (std::size_t i = 0; i < ds.size(); ++i) by_class_[ds.labels[i]].push_back(i);
    }
  }

  std::size_t size() const { return order_.size(); }
  std::size_t batches() const { return (order_.size() + cfg_.batch_size - 1) / cfg_.batch_size; }

  /// Sample id (position in the unshuffled epoch) -> MultiMNIST overlay.
  MultiSample multi_sample(std::size_t id) const {
    const std::size_t base = id / cfg_.multi_per_digit;
    auto rng = sample_rng(seed_, epoch_, id);
    const std::uint8_t la = ds_->labels[base];
    std::size_t others = 0;
    for (std::size_t c = 0; c < 10; ++c) {
      if (c != la) others += by_class_[c].size();
    }
    if (others == 0) throw ArgumentError("multimnist: dataset holds a single class");
    std::size_t pick = std::uniform_int_distribution<std::size_t>(0, others - 1)(rng);
    std::size_t partner = 0;
    for (std::size_t c = 0; c < 10; ++c) {
      if (c == la) continue;
      if (pick < by_class_[c].size()) {
        partner = by_class_[c][pick];
        break;
      }
      pick -= by_class_[c].size();
    }
    return make_multimnist(ds_->image(base), la, ds_->image(partner), ds_->labels[partner], rng, ds_->height(),
                           ds_->width());
  }

  template <typename T = float>
  Batch<T> batch(std::size_t b) const {
    const std::size_t begin = b * cfg_.batch_size;
    const std::size_t end = std::min(order_.size(), begin + cfg_.batch_size);
    const std::size_t n = end - begin;
    Batch<T> out;
    out.ids.assign(order_.begin() + static_cast<std::ptrdiff_t>(begin), order_.begin() + static_cast<std::ptrdiff_t>(end));
    if (cfg_.mode == StreamMode::mnist) {
      const std::size_t h = ds_->height(), w = ds_->width(), p = h * w;
      out.images = Tensor<T>({n, h, w, 1});
      out.targets = Tensor<T>({n, 10});
      out.classes.assign(1, std::vector<std::size_t>(n));
      out.recon_targets.assign(1, Tensor<T>({n, p}));
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t id = out.ids[k];
        Tensor<float> img({h, w, 1}, std::vector<float>(ds_->image(id), ds_->image(id) + p));
        if (cfg_.augment) {
          auto rng = sample_rng(seed_, epoch_, id);
          img = capsroute::data::augment(img, rng, cfg_.augmentation);
        }
        for (std::size_t q = 0; q < p; ++q) {
          out.images[k * p + q] = static_cast<T>(img[q]);
          out.recon_targets[0][k * p + q] = static_cast<T>(img[q]);
        }
        out.targets[k * 10 + ds_->labels[id]] = T{1};
        out.classes[0][k] = ds_->labels[id];
      }
    } else {
      const std::size_t c = kMultiCanvas, p = c * c;
      out.images = Tensor<T>({n, c, c, 1});
      out.targets = Tensor<T>({n, 10});
      out.classes.assign(2, std::vector<std::size_t>(n));
      out.recon_targets.assign(2, Tensor<T>({n, p}));
      for (std::size_t k = 0; k < n; ++k) {
        const MultiSample s = multi_sample(out.ids[k]);
        for (std::size_t q = 0; q < p; ++q) {
          out.images[k * p + q] = static_cast<T>(s.image[q]);
          out.recon_targets[0][k * p + q] = static_cast<T>(s.target_a[q]);
          out.recon_targets[1][k * p + q] = static_cast<T>(s.target_b[q]);
        }
        for (std::size_t q = 0; q < 10; ++q) out.targets[k * 10 + q] = static_cast<T>(s.label[q]);
        out.classes[0][k] = s.classes[0];
        out.classes[1][k] = s.classes[1];
      }
    }
    return out;
  }

 private:
  const Dataset* ds_;
  StreamConfig cfg_;
  std::uint64_t seed_;
  std::uint64_t epoch_;
  std::vector<std::size_t> order_;
  std::array<std::vector<std::size_t>, 10> by_class_;
};

/// Fixed MultiMNIST evaluation set: per_digit overlays for every base digit.
inline EpochStream multimnist_test_stream(const Dataset& ds, std::size_t per_digit, std::uint64_t seed,
                                          std::size_t batch_size = 64) {
  StreamConfig cfg;
  cfg.mode = StreamMode::multimnist;
  cfg.batch_size = batch_size;
  cfg.augment = false;
  cfg.shuffle = false;
  cfg.multi_per_digit = per_digit;
  return EpochStream(ds, cfg, seed, 0);
}

}  // namespace capsroute::data
