#pragma once

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "capsroute/data.hpp"
#include "capsroute/errors.hpp"
#include "capsroute/execution.hpp"
#include "capsroute/model.hpp"
#include "capsroute/trainer.hpp"

namespace capsroute::analysis {

// ---------------------------------------------------------------------------
// Operation count

/// One MAC is 2 OPs; normalization, activations, softmax and squash are one
/// OP per element.
struct OpsRow {
  std::string layer;
  std::uint64_t macs = 0;
  std::uint64_t elementwise = 0;
  bool decoder = false;
  std::uint64_t ops() const { return 2 * macs + elementwise; }
};

struct OpsReport {
  std::vector<OpsRow> rows;
  std::uint64_t macs = 0;         // headline, decoder excluded
  std::uint64_t ops = 0;          // headline, decoder excluded
  std::uint64_t decoder_ops = 0;
  ParamCensus params;

  double gops() const { return static_cast<double>(ops) / 1e9; }
};

inline std::uint64_t conv_macs(std::size_t k, std::size_t cin, std::size_t cout, std::size_t ho, std::size_t wo) {
  return static_cast<std::uint64_t>(k) * k * cin * cout * ho * wo;
}

inline std::uint64_t depthwise_macs(std::size_t k, std::size_t c, std::size_t ho, std::size_t wo) {
  return static_cast<std::uint64_t>(k) * k * c * ho * wo;
}

/// Batch-1 forward cost of the classification path, with the decoder listed
/// separately.
inline OpsReport count_ops(const ModelSpec& spec) {
  spec.validate();
  OpsReport rep;
  rep.params = count_params(spec);
  auto add = [&](std::string layer, std::uint64_t macs, std::uint64_t elem, bool dec = false) {
    rep.rows.push_back({std::move(layer), macs, elem, dec});
  };
  std::size_t h = spec.height, w = spec.width, cin = spec.channels;
  for (std::size_t i = 0; i < spec.conv.size(); ++i) {
    const auto& c = spec.conv[i];
    const std::string id = std::to_string(i + 1);
    h = ops::conv_out_extent(h, c.kernel, c.stride);
    w = ops::conv_out_extent(w, c.kernel, c.stride);
    const std::uint64_t elems = static_cast<std::uint64_t>(h) * w * c.filters;
    add("conv" + id, conv_macs(c.kernel, cin, c.filters, h, w), 0);
    if (c.norm) add("norm" + id, 0, elems);
    add("relu" + id, 0, elems);
    cin = c.filters;
  }
  add("primary", depthwise_macs(h, cin, 1, 1), 0);
  add("primary.squash", 0, spec.primary.n * spec.primary.d);
  CapsLayerSpec lower = spec.primary;
  for (std::size_t i = 0; i < spec.caps_dense.size(); ++i) {
    const auto& up = spec.caps_dense[i];
    const std::string id = "caps" + std::to_string(i + 1);
    const std::uint64_t nl = lower.n, nu = up.n, dl = lower.d, du = up.d;
    add(id + ".predict", nl * nu * dl * du, 0);
    add(id + ".attention", nl * nl * nu * du, 0);
    // row sum over the second lower axis, then softmax over upper capsules
    add(id + ".coupling", 0, nl * nl * nu + nl * nu);
    add(id + ".sum", nl * nu * du, 0);
    add(id + ".squash", 0, nu * du);
    lower = up;
  }
  add("lengths", 0, lower.n * lower.d);
  if (spec.decoder.enabled) {
    std::size_t in = lower.n * lower.d;
    std::vector<std::size_t> widths = spec.decoder.hidden;
    widths.push_back(spec.decoder.output);
    for (std::size_t i = 0; i < widths.size(); ++i) {
      add("decoder" + std::to_string(i + 1), static_cast<std::uint64_t>(in) * widths[i], widths[i], true);
      in = widths[i];
    }
  }
  for (const auto& r : rep.rows) {
    if (r.decoder) {
      rep.decoder_ops += r.ops();
    } else {
      rep.macs += r.macs;
      rep.ops += r.ops();
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Perturbation reconstructions

inline std::vector<double> default_deltas() {
  std::vector<double> d;
  for (int i = -5; i <= 5; ++i) d.push_back(i * 0.05);
  return d;
}

struct PerturbGrid {
  Tensor<float> images;   // [K, H, W, C]
  std::vector<double> deltas;
  std::size_t dim = 0;
  std::size_t capsule = 0;  // the longest output capsule
  std::vector<float> vector;
};

/// Adds each delta to component `dim` of the longest output capsule and
/// decodes the perturbed vector.
template <typename T>
PerturbGrid perturb_reconstruct(const ModelSpec& spec, const ModelParams<T>& params, const Tensor<float>& image,
                                std::size_t dim, const std::vector<double>& deltas = default_deltas()) {
  const std::size_t d = spec.output_caps().d, n = spec.classes();
  if (dim >= d) throw ArgumentError("perturb: dim " + std::to_string(dim) + " out of range [0, " + std::to_string(d) + ")");
  if (!spec.decoder.enabled) throw ConfigError("perturb: model has no decoder");
  if (deltas.empty()) throw ArgumentError("perturb: no deltas");
  if (image.shape() != Shape{spec.height, spec.width, spec.channels}) {
    throw DimensionError("perturb: image shape " + shape_str(image.shape()));
  }
  ForwardOptions opt;
  opt.decode = false;
  const auto res = forward(spec, params, image.cast<T>().reshaped({1, spec.height, spec.width, spec.channels}), opt);
  std::vector<float> len(n);
  for (std::size_t c = 0; c < n; ++c) len[c] = static_cast<float>(res.lengths[c]);
  PerturbGrid out;
  out.deltas = deltas;
  out.dim = dim;
  out.capsule = top_k(len.data(), n, 1).front();
  for (std::size_t i = 0; i < d; ++i) out.vector.push_back(static_cast<float>(res.caps[out.capsule * d + i]));

  const std::size_t k = deltas.size();
  Tensor<T> flat({k, n * d});
  for (std::size_t r = 0; r < k; ++r) {
    for (std::size_t i = 0; i < d; ++i) flat[r * n * d + out.capsule * d + i] = res.caps[out.capsule * d + i];
    flat[r * n * d + out.capsule * d + dim] += static_cast<T>(deltas[r]);
  }
  const auto dec = detail::decode(spec, params, std::move(flat), static_cast<std::vector<Tensor<T>>*>(nullptr));
  out.images = dec.template cast<float>().reshaped({k, spec.height, spec.width, spec.channels});
  return out;
}

struct PathSmoothness {
  double mean_adjacent = 0;  // mean L2 between neighbouring grid images
  double endpoints = 0;      // L2 between first and last image
};

inline PathSmoothness path_smoothness(const Tensor<float>& grid) {
  const std::size_t k = grid.dim(0), p = grid.size() / k;
  auto l2 = [&](std::size_t a, std::size_t b) {
    double s = 0;
    for (std::size_t i = 0; i < p; ++i) {
      const double d = static_cast<double>(grid[a * p + i]) - grid[b * p + i];
      s += d * d;
    }
    return std::sqrt(s);
  };
  PathSmoothness out;
  if (k < 2) return out;
  for (std::size_t i = 0; i + 1 < k; ++i) out.mean_adjacent += l2(i, i + 1);
  out.mean_adjacent /= static_cast<double>(k - 1);
  out.endpoints = l2(0, k - 1);
  return out;
}

// ---------------------------------------------------------------------------
// Transformations and PCA

enum class Family { translate_x, translate_y, rotate, random_baseline };

inline std::string family_name(Family f) {
  switch (f) {
    case Family::translate_x: return "translate_x";
    case Family::translate_y: return "translate_y";
    case Family::rotate: return "rotate";
    case Family::random_baseline: return "random";
  }
  return "?";
}

inline Family parse_family(const std::string& s) {
  if (s == "translate_x") return Family::translate_x;
  if (s == "translate_y") return Family::translate_y;
  if (s == "rotate") return Family::rotate;
  if (s == "random" || s == "random_baseline") return Family::random_baseline;
  throw ArgumentError("unknown transform family '" + s + "'");
}

inline constexpr int kMaxTranslation = 5;
inline constexpr int kMaxRotationDeg = 25;

/// Number of transformed copies a family produces (11 shifts, 51 rotations).
inline std::size_t family_size(Family f) {
  return f == Family::rotate ? 2 * kMaxRotationDeg + 1 : 2 * kMaxTranslation + 1;
}

/// Integer shifts in [-5, 5] or whole-degree rotations in [-25, 25], zero fill.
inline Tensor<float> transform_sweep(const Tensor<float>& image, Family family) {
  if (image.rank() != 3 || image.dim(2) != 1) throw DimensionError("transform_sweep: expected [H, W, 1] image");
  if (family == Family::random_baseline) throw ArgumentError("transform_sweep: random baseline has no images");
  const std::size_t h = image.dim(0), w = image.dim(1), k = family_size(family);
  Tensor<float> out({k, h, w, 1});
  for (std::size_t i = 0; i < k; ++i) {
    const int step = static_cast<int>(i) - static_cast<int>(k / 2);
    const int dx = family == Family::translate_x ? step : 0;
    const int dy = family == Family::translate_y ? step : 0;
    const double deg = family == Family::rotate ? step : 0.0;
    data::rotate_translate(image.data(), out.data() + i * h * w, h, w, deg, dx, dy);
  }
  return out;
}

struct PcaResult {
  double r = 0;                       // first eigenvalue over the trace
  std::vector<double> cumulative;     // explained variance by component count
  std::vector<double> eigenvalues;    // descending, clamped at zero
};

/// PCA of K points [K, d]: covariance (1/K) sum z z^T of the centered points.
inline PcaResult pca_ratio(const Eigen::MatrixXd& points) {
  const Eigen::Index k = points.rows();
  if (k < 2) throw ArgumentError("pca: need at least two points");
  const Eigen::RowVectorXd mean = points.colwise().mean();
  const Eigen::MatrixXd z = points.rowwise() - mean;
  const Eigen::MatrixXd cov = (z.transpose() * z) / static_cast<double>(k);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov, Eigen::EigenvaluesOnly);
  if (eig.info() != Eigen::Success) throw NumericError("pca: eigendecomposition failed");
  std::vector<double> ev(eig.eigenvalues().data(), eig.eigenvalues().data() + eig.eigenvalues().size());
  std::sort(ev.begin(), ev.end(), std::greater<>());
  const double scale = std::max(std::abs(ev.front()), 1e-300);
  for (auto& v : ev) {
    // round-off may leave tiny negative eigenvalues
    if (v < 0 && v > -1e-9 * scale) v = 0;
  }
  const double total = std::accumulate(ev.begin(), ev.end(), 0.0);
  if (!(total > 0) || !std::isfinite(total)) throw NumericError("pca: zero covariance (degenerate input)");
  PcaResult out;
  out.eigenvalues = ev;
  out.r = ev.front() / total;
  double acc = 0;
  for (double v : ev) {
    acc += v;
    out.cumulative.push_back(acc / total);
  }
  out.cumulative.back() = 1.0;
  return out;
}

/// Which capsule vector represents an image: the correct-class output
/// capsule (d_L values) or all output capsules concatenated.
enum class CapsuleView { correct_class, concatenated };

struct EquivarianceResult {
  Family family = Family::translate_x;
  double r = 0;
  std::vector<double> cumulative_variance;
  std::size_t images = 0;      // images averaged
  std::size_t degenerate = 0;  // excluded for zero covariance
};

inline EquivarianceResult average_results(Family family, const std::vector<PcaResult>& results,
                                          std::size_t degenerate) {
  EquivarianceResult out;
  out.family = family;
  out.degenerate = degenerate;
  out.images = results.size();
  if (results.empty()) return out;
  out.cumulative_variance.assign(results.front().cumulative.size(), 0.0);
  for (const auto& r : results) {
    out.r += r.r;
    for (std::size_t i = 0; i < r.cumulative.size(); ++i) out.cumulative_variance[i] += r.cumulative[i];
  }
  const double n = static_cast<double>(results.size());
  out.r /= n;
  for (auto& v : out.cumulative_variance) v /= n;
  return out;
}

/// Mean first-eigenvalue ratio of i.i.d. standard-normal point clouds.
inline EquivarianceResult random_baseline(std::size_t dim, std::size_t k, std::size_t repetitions,
                                          std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::vector<PcaResult> results;
  for (std::size_t rep = 0; rep < repetitions; ++rep) {
    Eigen::MatrixXd pts(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(dim));
    for (Eigen::Index i = 0; i < pts.rows(); ++i)
      for (Eigen::Index j = 0; j < pts.cols(); ++j) pts(i, j) = normal(rng);
    results.push_back(pca_ratio(pts));
  }
  return average_results(Family::random_baseline, results, 0);
}

/// Average PCA statistics of the capsule response to each test image's
/// transform sweep. Images with identical responses are counted and skipped.
template <typename T>
EquivarianceResult pca_equivariance(const ModelSpec& spec, const ModelParams<T>& params, const data::Dataset& testset,
                                    Family family, std::size_t limit = 0,
                                    CapsuleView view = CapsuleView::correct_class) {
  if (family == Family::random_baseline) {
    return random_baseline(spec.output_caps().d, family_size(Family::translate_x), 1000, 0);
  }
  const std::size_t count = limit ? std::min(limit, testset.size()) : testset.size();
  const std::size_t n = spec.classes(), d = spec.output_caps().d, k = family_size(family);
  const std::size_t h = testset.height(), w = testset.width();
  std::vector<PcaResult> per_image(count);
  std::vector<char> ok(count, 0);
  ForwardOptions opt;
  opt.decode = false;
  parallel_shards(count, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const Tensor<float> img({h, w, 1}, std::vector<float>(testset.image(i), testset.image(i) + h * w));
      const auto sweep = transform_sweep(img, family);
      const auto res = forward(spec, params, sweep.cast<T>(), opt);
      const std::size_t label = testset.labels[i];
      const std::size_t cols = view == CapsuleView::correct_class ? d : n * d;
      Eigen::MatrixXd pts(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(cols));
      for (std::size_t r = 0; r < k; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          const std::size_t src = view == CapsuleView::correct_class ? (r * n + label) * d + c : r * n * d + c;
          pts(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = static_cast<double>(res.caps[src]);
        }
      }
      try {
        per_image[i] = pca_ratio(pts);
        ok[i] = 1;
      } catch (const NumericError&) {
      }
    }
  });
  std::vector<PcaResult> kept;
  std::size_t degenerate = 0;
  for (std::size_t i = 0; i < count; ++i) {
    if (ok[i]) {
      kept.push_back(std::move(per_image[i]));
    } else {
      ++degenerate;
    }
  }
  return average_results(family, kept, degenerate);
}

// ---------------------------------------------------------------------------
// Misclassifications

struct Misclassified {
  std::size_t id = 0;
  std::size_t truth = 0;
  std::size_t predicted = 0;
  std::vector<float> lengths;
  double margin = 0;  // gap between the two longest capsules
};

/// Top-1 errors, most ambiguous (smallest top-2 gap) first.
inline std::vector<Misclassified> misclassification_report(const LengthTable& table) {
  std::vector<Misclassified> out;
  const std::size_t classes = table.lengths.dim(1);
  for (std::size_t i = 0; i < table.rows(); ++i) {
    const float* len = table.lengths.data() + i * classes;
    const std::size_t pred = top_k(len, classes, 1).front();
    const std::size_t truth = table.labels[i].front();
    if (pred == truth) continue;
    Misclassified m{i, truth, pred, std::vector<float>(len, len + classes), 0.0};
    std::vector<float> sorted = m.lengths;
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    m.margin = classes > 1 ? static_cast<double>(sorted[0]) - sorted[1] : 0.0;
    out.push_back(std::move(m));
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.margin < b.margin; });
  return out;
}

template <typename T>
std::vector<Misclassified> misclassification_report(const ModelSpec& spec, const ModelParams<T>& params,
                                                    const data::Dataset& testset) {
  return misclassification_report(collect_lengths(spec, params, eval_stream(testset)));
}

// ---------------------------------------------------------------------------
// Output writers

/// Tiles [K, H, W, 1] images left to right, `columns` per row, as binary PGM.
inline void write_pgm(const std::string& path, const Tensor<float>& images, std::size_t columns = 0) {
  if (images.rank() != 4 || images.dim(3) != 1) throw DimensionError("write_pgm: expected [K, H, W, 1]");
  const std::size_t k = images.dim(0), h = images.dim(1), w = images.dim(2);
  if (columns == 0) columns = k;
  const std::size_t rows = (k + columns - 1) / columns;
  const std::size_t width = columns * w, height = rows * h;
  std::vector<unsigned char> px(width * height, 0);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t oy = (i / columns) * h, ox = (i % columns) * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const float v = std::clamp(images[(i * h + y) * w + x], 0.0f, 1.0f);
        px[(oy + y) * width + ox + x] = static_cast<unsigned char>(std::lround(v * 255.0f));
      }
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path);
  f << "P5\n" << width << " " << height << "\n255\n";
  f.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

inline void write_ops_csv(std::ostream& os, const OpsReport& rep) {
  os << "layer,macs,elementwise,ops,decoder\n";
  for (const auto& r : rep.rows) {
    os << r.layer << "," << r.macs << "," << r.elementwise << "," << r.ops() << "," << (r.decoder ? 1 : 0) << "\n";
  }
  os << "total," << rep.macs << ",," << rep.ops << ",0\n";
}

inline void write_equivariance_csv(std::ostream& os, const EquivarianceResult& r) {
  os << "family,components,cumulative_variance,r,images,degenerate\n";
  for (std::size_t i = 0; i < r.cumulative_variance.size(); ++i) {
    os << family_name(r.family) << "," << i + 1 << "," << r.cumulative_variance[i] << "," << r.r << "," << r.images
       << "," << r.degenerate << "\n";
  }
}

inline void write_misclassified_csv(std::ostream& os, const std::vector<Misclassified>& recs) {
  os << "id,true,predicted,margin";
  const std::size_t classes = recs.empty() ? 0 : recs.front().lengths.size();
  for (std::size_t c = 0; c < classes; ++c) os << ",len" << c;
  os << "\n";
  for (const auto& m : recs) {
    os << m.id << "," << m.truth << "," << m.predicted << "," << m.margin;
    for (float v : m.lengths) os << "," << v;
    os << "\n";
  }
}

}  // namespace capsroute::analysis
