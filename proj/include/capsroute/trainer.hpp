#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "capsroute/data.hpp"
#include "capsroute/errors.hpp"
#include "capsroute/execution.hpp"
#include "capsroute/model.hpp"

namespace capsroute {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 16;
  double lr0 = 5e-4;
  double decay = 0.98;  // per epoch
  std::uint64_t seed = 1;
  AdamConfig adam;
  std::filesystem::path checkpoint_dir;
  data::AugmentConfig augmentation;
  bool augment = true;

  void validate() const {
    if (!(lr0 > 0)) throw ConfigError("train config: lr0 must be > 0");
    if (!(decay > 0 && decay <= 1)) throw ConfigError("train config: decay must be in (0, 1]");
    if (batch_size == 0) throw ConfigError("train config: batch_size must be >= 1");
  }
};

/// lr0 * decay^epoch, decayed once per epoch.
inline double lr_schedule(const TrainConfig& cfg, std::size_t epoch) {
  return cfg.lr0 * std::pow(cfg.decay, static_cast<double>(epoch));
}

template <typename T>
struct OptimizerState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::uint64_t step = 0;

  static OptimizerState zeros_for(const ModelParams<T>& params) {
    OptimizerState s;
    for (const auto& p : params.params) {
      s.m.emplace_back(p.value.shape());
      s.v.emplace_back(p.value.shape());
    }
    return s;
  }
};

/// Bias-corrected Adam update. Returns the number of scalars updated. Any
/// non-finite gradient aborts before a single parameter changes.
template <typename T>
std::size_t adam_step(ModelParams<T>& params, const std::vector<Tensor<T>>& grads, OptimizerState<T>& state,
                      double lr, const AdamConfig& cfg = {}, std::size_t batch_index = 0) {
  if (grads.size() != params.params.size()) throw DimensionError("adam_step: gradient count mismatch");
  if (state.m.empty()) state = OptimizerState<T>::zeros_for(params);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    require_same_shape(params.params[i].value, grads[i], "adam_step");
    if (!grads[i].all_finite()) {
      throw NumericError("non-finite gradient for parameter '" + params.params[i].name + "' at batch " +
                         std::to_string(batch_index));
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T step_size = static_cast<T>(lr / bc1);
  const T inv_bc2 = static_cast<T>(1.0 / bc2);
  const T eps = static_cast<T>(cfg.epsilon);
  std::size_t touched = 0;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    T* p = params.params[i].value.data();
    T* m = state.m[i].data();
    T* v = state.v[i].data();
    const T* g = grads[i].data();
    const std::size_t n = grads[i].size();
    for (std::size_t k = 0; k < n; ++k) {
      m[k] = b1 * m[k] + (T{1} - b1) * g[k];
      v[k] = b2 * v[k] + (T{1} - b2) * g[k] * g[k];
      p[k] -= step_size * m[k] / (std::sqrt(v[k] * inv_bc2) + eps);
    }
    touched += n;
  }
  return touched;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr char kCheckpointMagic[8] = {'C', 'A', 'P', 'S', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelSpec spec;
  ModelParams<float> params;
  std::optional<OptimizerState<float>> optimizer;
};

namespace detail {

enum class TensorKind : std::uint8_t { param = 0, buffer = 1, adam_m = 2, adam_v = 3 };

template <typename U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));  // little-endian hosts only
}

template <typename U>
U get(std::istream& is, const std::string& path) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(U))) throw FormatError("checkpoint '" + path + "' is truncated");
  return v;
}

inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, const std::string& path, std::size_t limit = 1 << 20) {
  const auto n = get<std::uint32_t>(is, path);
  if (n > limit) throw FormatError("checkpoint '" + path + "': oversized string");
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw FormatError("checkpoint '" + path + "' is truncated");
  return s;
}

inline void put_tensor(std::ostream& os, TensorKind kind, const std::string& name, const Tensor<float>& t) {
  put<std::uint8_t>(os, static_cast<std::uint8_t>(kind));
  put_string(os, name);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) put<std::uint64_t>(os, e);
  os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
}

}  // namespace detail

/// Self-describing binary container: magic, version, spec text, named
/// float32 tensors (params, buffers, optional Adam moments), Adam step.
inline void save_checkpoint(const std::filesystem::path& path, const ModelSpec& spec, const ModelParams<float>& params,
                            const OptimizerState<float>* opt = nullptr) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot write checkpoint '" + tmp.string() + "'");
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put<std::uint32_t>(os, kCheckpointVersion);
    detail::put_string(os, serialize_spec(spec));
    std::uint32_t count = static_cast<std::uint32_t>(params.params.size() + params.buffers.size());
    if (opt) count += static_cast<std::uint32_t>(2 * opt->m.size());
    detail::put<std::uint32_t>(os, count);
    for (const auto& p : params.params) detail::put_tensor(os, detail::TensorKind::param, p.name, p.value);
    for (const auto& b : params.buffers) detail::put_tensor(os, detail::TensorKind::buffer, b.name, b.value);
    if (opt) {
      for (std::size_t i = 0; i < opt->m.size(); ++i) {
        detail::put_tensor(os, detail::TensorKind::adam_m, params.params[i].name, opt->m[i]);
        detail::put_tensor(os, detail::TensorKind::adam_v, params.params[i].name, opt->v[i]);
      }
    }
    detail::put<std::uint8_t>(os, opt ? 1 : 0);
    detail::put<std::uint64_t>(os, opt ? opt->step : 0);
    if (!os) throw FormatError("failed writing checkpoint '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string p = path.string();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint '" + p + "'");
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw FormatError("'" + p + "' is not a checkpoint");
  }
  const auto version = detail::get<std::uint32_t>(is, p);
  if (version != kCheckpointVersion) throw FormatError("'" + p + "': unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.spec = parse_spec(detail::get_string(is, p));
  const auto count = detail::get<std::uint32_t>(is, p);
  OptimizerState<float> opt;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto kind = detail::get<std::uint8_t>(is, p);
    std::string name = detail::get_string(is, p, 4096);
    const auto rank = detail::get<std::uint32_t>(is, p);
    if (rank > 8) throw FormatError("'" + p + "': tensor rank " + std::to_string(rank));
    Shape shape;
    std::size_t numel = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const auto e = detail::get<std::uint64_t>(is, p);
      if (e == 0 || e > (1u << 30) || numel > (std::size_t{1} << 32) / e) throw FormatError("'" + p + "': bad extent");
      numel *= e;
      shape.push_back(e);
    }
    std::vector<float> values(numel);
    if (!is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(numel * sizeof(float)))) {
      throw FormatError("checkpoint '" + p + "' is truncated");
    }
    Tensor<float> t(shape, std::move(values));
    switch (static_cast<detail::TensorKind>(kind)) {
      case detail::TensorKind::param: ck.params.params.push_back({std::move(name), std::move(t)}); break;
      case detail::TensorKind::buffer: ck.params.buffers.push_back({std::move(name), std::move(t)}); break;
      case detail::TensorKind::adam_m: opt.m.push_back(std::move(t)); break;
      case detail::TensorKind::adam_v: opt.v.push_back(std::move(t)); break;
      default: throw FormatError("'" + p + "': unknown tensor kind");
    }
  }
  const auto has_opt = detail::get<std::uint8_t>(is, p);
  opt.step = detail::get<std::uint64_t>(is, p);
  if (has_opt) ck.optimizer = std::move(opt);
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("'" + p + "': trailing bytes");

  // shape check against the declared spec
  const auto expected = init_params<float>(ck.spec, 0);
  if (expected.params.size() != ck.params.params.size() || expected.buffers.size() != ck.params.buffers.size()) {
    throw FormatError("'" + p + "': tensor set does not match its model spec");
  }
  for (std::size_t i = 0; i < expected.params.size(); ++i) {
    if (expected.params[i].name != ck.params.params[i].name ||
        expected.params[i].value.shape() != ck.params.params[i].value.shape()) {
      throw FormatError("'" + p + "': parameter '" + ck.params.params[i].name + "' does not match the spec");
    }
  }
  if (!ck.params.all_finite()) throw FormatError("'" + p + "': non-finite parameters");
  return ck;
}

// ---------------------------------------------------------------------------
// Evaluation

/// Capsule lengths for a whole evaluation set with the ground-truth class sets.
struct LengthTable {
  Tensor<float> lengths;                        // [N, classes]
  std::vector<std::vector<std::size_t>> labels;  // true classes per sample
  std::size_t rows() const { return labels.size(); }
};

/// Indices of the k longest capsules, ties broken by lower index.
inline std::vector<std::size_t> top_k(const float* lengths, std::size_t classes, std::size_t k) {
  std::vector<std::size_t> idx(classes);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return lengths[a] > lengths[b]; });
  idx.resize(std::min(k, classes));
  std::sort(idx.begin(), idx.end());
  return idx;
}

struct EvalResult {
  std::size_t errors = 0;
  std::size_t total = 0;
  double error_rate() const { return total ? static_cast<double>(errors) / static_cast<double>(total) : 0.0; }
  double accuracy() const { return 1.0 - error_rate(); }
};

/// A sample is wrong unless its top-k set equals its label set.
inline EvalResult score_lengths(const LengthTable& table, std::size_t k) {
  EvalResult r;
  const std::size_t classes = table.lengths.dim(1);
  for (std::size_t i = 0; i < table.rows(); ++i) {
    auto pred = top_k(table.lengths.data() + i * classes, classes, k);
    auto truth = table.labels[i];
    std::sort(truth.begin(), truth.end());
    if (pred != truth) ++r.errors;
    ++r.total;
  }
  return r;
}

/// Forward passes in inference mode (no decoder) over every batch of an
/// un-augmented, unshuffled stream. Batches shard across worker threads.
template <typename T>
LengthTable collect_lengths(const ModelSpec& spec, const ModelParams<T>& params, const data::EpochStream& stream) {
  const std::size_t classes = spec.classes();
  LengthTable table{Tensor<float>({std::max<std::size_t>(stream.size(), 1), classes}),
                    std::vector<std::vector<std::size_t>>(stream.size())};
  ForwardOptions opt;
  opt.decode = false;
  parallel_shards(stream.batches(), [&](std::size_t b0, std::size_t b1) {
    for (std::size_t b = b0; b < b1; ++b) {
      const auto batch = stream.batch<T>(b);
      const auto res = forward(spec, params, batch.images, opt);
      for (std::size_t k = 0; k < batch.ids.size(); ++k) {
        const std::size_t row = batch.ids[k];
        for (std::size_t c = 0; c < classes; ++c) table.lengths[row * classes + c] = static_cast<float>(res.lengths[k * classes + c]);
        std::vector<std::size_t> truth;
        for (const auto& slot : batch.classes) truth.push_back(slot[k]);
        table.labels[row] = std::move(truth);
      }
    }
  });
  return table;
}

inline data::EpochStream eval_stream(const data::Dataset& ds, std::size_t batch_size = 100) {
  data::StreamConfig cfg;
  cfg.batch_size = batch_size;
  cfg.augment = false;
  cfg.shuffle = false;
  return data::EpochStream(ds, cfg, 0, 0);
}

/// Error rate with prediction = top-k capsule lengths (k = 1 for MNIST,
/// k = 2 for MultiMNIST).
template <typename T>
EvalResult evaluate(const ModelSpec& spec, const ModelParams<T>& params, const data::EpochStream& testset,
                    std::size_t k = 1) {
  return score_lengths(collect_lengths(spec, params, testset), k);
}

struct EnsembleResult {
  EvalResult result;
  std::vector<std::size_t> admitted;       // indices into the model list
  std::vector<double> member_accuracy;     // per model, on the same set
};

/// Averages length vectors over the models whose own accuracy exceeds
/// threshold, then scores top-k. Admission uses the evaluation set itself.
inline EnsembleResult ensemble_predict(const std::vector<LengthTable>& members, double threshold, std::size_t k) {
  EnsembleResult out;
  for (std::size_t m = 0; m < members.size(); ++m) {
    const double acc = score_lengths(members[m], k).accuracy();
    out.member_accuracy.push_back(acc);
    if (acc > threshold) out.admitted.push_back(m);
  }
  if (out.admitted.empty()) {
    throw ArgumentError("ensemble: no model exceeds accuracy threshold " + std::to_string(threshold));
  }
  LengthTable mean{Tensor<float>(members[out.admitted[0]].lengths.shape()), members[out.admitted[0]].labels};
  // fixed summation order: admitted models in index order
  std::vector<double> acc(mean.lengths.size(), 0.0);
  for (std::size_t m : out.admitted) {
    const auto& l = members[m].lengths;
    if (l.shape() != mean.lengths.shape()) throw DimensionError("ensemble: members scored different sets");
    for (std::size_t i = 0; i < l.size(); ++i) acc[i] += l[i];
  }
  for (std::size_t i = 0; i < acc.size(); ++i) mean.lengths[i] = static_cast<float>(acc[i] / out.admitted.size());
  out.result = score_lengths(mean, k);
  return out;
}

template <typename T>
EnsembleResult ensemble_predict(const ModelSpec& spec, const std::vector<ModelParams<T>>& models, double threshold,
                                const data::EpochStream& testset, std::size_t k = 1) {
  if (models.empty()) throw ArgumentError("ensemble: empty model list");
  std::vector<LengthTable> tables;
  for (const auto& m : models) tables.push_back(collect_lengths(spec, m, testset));
  return ensemble_predict(tables, threshold, k);
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_total_loss = 0;
  double mean_margin_loss = 0;
  double mean_recon_loss = 0;
  double test_error = 0;
  double lr = 0;
  double seconds = 0;
};

inline std::string log_header() { return "epoch,mean_total_loss,mean_margin_loss,mean_recon_loss,test_error,lr"; }

inline std::string log_row(const EpochRecord& r) {
  std::ostringstream os;
  os << std::setprecision(10) << r.epoch << ',' << r.mean_total_loss << ',' << r.mean_margin_loss << ','
     << r.mean_recon_loss << ',' << r.test_error << ',' << r.lr;
  return os.str();
}

struct FitResult {
  ModelParams<float> params;       // final
  ModelParams<float> best_params;  // lowest test error
  OptimizerState<float> optimizer;
  std::vector<EpochRecord> log;
  double best_error = 1.0;
  std::size_t best_epoch = 0;
};

struct FitData {
  const data::Dataset* train = nullptr;
  data::StreamMode mode = data::StreamMode::mnist;
  const data::EpochStream* test = nullptr;  // fixed evaluation stream
  std::size_t eval_k = 1;
  std::size_t multi_per_digit = 10;  // MultiMNIST overlays per base digit per epoch
};

/// Mini-batch Adam with per-epoch exponential learning-rate decay. Training
/// masks the decoder input by the target class(es); evaluation uses the
/// longest capsules. Writes train_log.csv, best.ckpt and final.ckpt under
/// cfg.checkpoint_dir when it is set.
inline FitResult fit(const ModelSpec& spec, const TrainConfig& cfg, const FitData& data, std::ostream* progress = nullptr,
                     std::optional<ModelParams<float>> init = std::nullopt) {
  cfg.validate();
  spec.validate();
  if (!data.train || !data.test) throw ArgumentError("fit: missing train or test data");
  FitResult out;
  out.params = init ? std::move(*init) : init_params<float>(spec, cfg.seed);
  out.best_params = out.params;
  out.optimizer = OptimizerState<float>::zeros_for(out.params);

  std::ofstream log_file;
  if (!cfg.checkpoint_dir.empty()) {
    std::filesystem::create_directories(cfg.checkpoint_dir);
    const auto log_path = cfg.checkpoint_dir / "train_log.csv";
    log_file.open(log_path, std::ios::trunc);
    if (!log_file) throw FormatError("cannot write training log '" + log_path.string() + "'");
    log_file << log_header() << '\n' << std::flush;
  }

  data::StreamConfig sc;
  sc.mode = data.mode;
  sc.batch_size = cfg.batch_size;
  sc.augment = cfg.augment;
  sc.augmentation = cfg.augmentation;
  sc.multi_per_digit = data.multi_per_digit;

  std::size_t global_batch = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_schedule(cfg, epoch);
    data::EpochStream stream(*data.train, sc, cfg.seed, epoch);
    double sum_total = 0, sum_margin = 0, sum_recon = 0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < stream.batches(); ++b, ++global_batch) {
      const auto batch = stream.batch<float>(b);
      std::vector<MaskSelect> masks;
      for (const auto& cls : batch.classes) masks.push_back(MaskSelect::target(cls));
      auto lg = loss_and_grads(spec, out.params, batch.images, batch.targets, batch.recon_targets, masks, true);
      if (!std::isfinite(lg.loss.total)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b));
      }
      adam_step(out.params, lg.grads, out.optimizer, lr, cfg.adam, global_batch);
      update_running_stats(spec, out.params, lg.cache);
      const double n = static_cast<double>(batch.ids.size());
      sum_total += lg.loss.total * n;
      sum_margin += lg.loss.margin * n;
      sum_recon += lg.loss.reconstruction * n;
      seen += batch.ids.size();
      if (progress && (b + 1) % 500 == 0) {
        *progress << "  epoch " << epoch + 1 << " batch " << b + 1 << "/" << stream.batches()
                  << " loss " << sum_total / static_cast<double>(seen) << std::endl;
      }
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.mean_total_loss = sum_total / static_cast<double>(seen);
    rec.mean_margin_loss = sum_margin / static_cast<double>(seen);
    rec.mean_recon_loss = sum_recon / static_cast<double>(seen);
    rec.lr = lr;
    rec.test_error = evaluate(spec, out.params, *data.test, data.eval_k).error_rate();
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.log.push_back(rec);
    if (log_file.is_open()) log_file << log_row(rec) << '\n' << std::flush;
    const bool best = out.log.size() == 1 || rec.test_error < out.best_error;
    if (best) {
      out.best_error = rec.test_error;
      out.best_epoch = rec.epoch;
      out.best_params = out.params;
      if (!cfg.checkpoint_dir.empty()) save_checkpoint(cfg.checkpoint_dir / "best.ckpt", spec, out.params);
    }
    if (progress) {
      *progress << "epoch " << rec.epoch << "/" << cfg.epochs << " loss " << rec.mean_total_loss << " (margin "
                << rec.mean_margin_loss << ", recon " << rec.mean_recon_loss << ") test_error " << rec.test_error
                << " lr " << rec.lr << " [" << std::fixed << std::setprecision(1) << rec.seconds << "s]"
                << std::defaultfloat << std::setprecision(6) << std::endl;
    }
  }
  if (!cfg.checkpoint_dir.empty()) save_checkpoint(cfg.checkpoint_dir / "final.ckpt", spec, out.params, &out.optimizer);
  return out;
}

}  // namespace capsroute
