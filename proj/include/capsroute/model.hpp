#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "capsroute/caps.hpp"
#include "capsroute/errors.hpp"
#include "capsroute/objective.hpp"
#include "capsroute/ops.hpp"
#include "capsroute/tensor.hpp"

namespace capsroute {

struct ConvLayerSpec {
  std::size_t kernel = 3;
  std::size_t filters = 32;
  std::size_t stride = 1;
  std::optional<ops::NormMode> norm = ops::NormMode::batch;
};

struct CapsLayerSpec {
  std::size_t n = 0;
  std::size_t d = 0;
};

struct DecoderSpec {
  bool enabled = true;
  std::vector<std::size_t> hidden{512, 1024};
  std::size_t output = 784;
};

/// Declarative description of a capsule network: conv stack, primary
/// capsules, fully connected capsule layers and reconstruction decoder.
struct ModelSpec {
  std::string name = "custom";
  std::size_t height = 28;
  std::size_t width = 28;
  std::size_t channels = 1;
  std::vector<ConvLayerSpec> conv;
  CapsLayerSpec primary;
  std::vector<CapsLayerSpec> caps_dense;
  DecoderSpec decoder;
  MarginConfig loss;

  std::size_t classes() const { return caps_dense.empty() ? primary.n : caps_dense.back().n; }
  const CapsLayerSpec& output_caps() const { return caps_dense.empty() ? primary : caps_dense.back(); }
  std::size_t pixels() const { return height * width * channels; }

  /// Spatial extent of the conv stack output (valid padding).
  std::pair<std::size_t, std::size_t> feature_map() const {
    std::size_t h = height, w = width;
    for (const auto& c : conv) {
      if (c.kernel > h || c.kernel > w || c.stride == 0) {
        throw ConfigError("model spec '" + name + "': conv kernel " + std::to_string(c.kernel) +
                          " does not fit a " + std::to_string(h) + "x" + std::to_string(w) + " map");
      }
      h = ops::conv_out_extent(h, c.kernel, c.stride);
      w = ops::conv_out_extent(w, c.kernel, c.stride);
    }
    return {h, w};
  }

  std::size_t feature_channels() const { return conv.empty() ? channels : conv.back().filters; }

  void validate() const {
    if (height == 0 || width == 0 || channels == 0) throw ConfigError("model spec: empty input shape");
    feature_map();
    if (primary.n == 0 || primary.d == 0) throw ConfigError("model spec: primary capsules need n, d >= 1");
    if (feature_channels() != primary.n * primary.d) {
      throw ConfigError("model spec: last conv has " + std::to_string(feature_channels()) +
                        " filters but primary capsules need " + std::to_string(primary.n * primary.d));
    }
    for (const auto& c : caps_dense) {
      if (c.n == 0 || c.d == 0) throw ConfigError("model spec: capsule layer needs n, d >= 1");
    }
    if (decoder.enabled && decoder.output != pixels()) {
      throw ConfigError("model spec: decoder output " + std::to_string(decoder.output) + " != pixel count " +
                        std::to_string(pixels()));
    }
    loss.validate();
  }
};

inline ModelSpec build_mnist_spec() {
  ModelSpec s;
  s.name = "mnist";
  s.height = 28;
  s.width = 28;
  s.channels = 1;
  // Stride 2 on the last conv gives the 9x9 map behind the 161,824-parameter count.
  s.conv = {{5, 32, 1, ops::NormMode::batch},
            {3, 64, 1, ops::NormMode::batch},
            {3, 64, 1, ops::NormMode::batch},
            {3, 128, 2, ops::NormMode::batch}};
  s.primary = {16, 8};
  s.caps_dense = {{10, 16}};
  s.decoder = {true, {512, 1024}, 784};
  s.loss = MarginConfig{0.9, 0.1, 0.5, 0.392};
  return s;
}

/// 36x36 two-digit input. Strides 2 on the last two convs keep the depthwise
/// kernel at 6x6 (156,064 parameters); the reconstruction weight is halved
/// because every sample is decoded twice.
inline ModelSpec build_multimnist_spec() {
  ModelSpec s = build_mnist_spec();
  s.name = "multimnist";
  s.height = 36;
  s.width = 36;
  s.conv[2].stride = 2;
  s.decoder.output = 36 * 36;
  s.loss.recon_weight = 0.392 / 2.0;
  return s;
}

// ---------------------------------------------------------------------------
// Spec (de)serialization as flat key=value text

namespace detail {

inline std::string norm_name(const std::optional<ops::NormMode>& m) {
  if (!m) return "none";
  return *m == ops::NormMode::batch ? "batch" : "instance";
}

inline std::optional<ops::NormMode> parse_norm(const std::string& s) {
  if (s == "none") return std::nullopt;
  if (s == "batch") return ops::NormMode::batch;
  if (s == "instance") return ops::NormMode::instance;
  throw ConfigError("unknown norm mode '" + s + "'");
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  return out;
}

inline std::size_t to_size(const std::string& s) {
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(s, &pos);
    if (pos != s.size()) throw ConfigError("bad integer '" + s + "'");
    return static_cast<std::size_t>(v);
  } catch (const std::logic_error&) {
    throw ConfigError("bad integer '" + s + "'");
  }
}

inline double to_double(const std::string& s) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw ConfigError("bad number '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw ConfigError("bad number '" + s + "'");
  }
}

}  // namespace detail

inline std::string serialize_spec(const ModelSpec& s) {
  std::ostringstream os;
  os.precision(17);
  os << "name=" << s.name << '\n';
  os << "input=" << s.height << ',' << s.width << ',' << s.channels << '\n';
  os << "conv=";
  for (std::size_t i = 0; i < s.conv.size(); ++i) {
    const auto& c = s.conv[i];
    os << (i ? ";" : "") << c.kernel << ':' << c.filters << ':' << c.stride << ':' << detail::norm_name(c.norm);
  }
  os << '\n';
  os << "primary=" << s.primary.n << ':' << s.primary.d << '\n';
  os << "caps=";
  for (std::size_t i = 0; i < s.caps_dense.size(); ++i) {
    os << (i ? ";" : "") << s.caps_dense[i].n << ':' << s.caps_dense[i].d;
  }
  os << '\n';
  os << "decoder=" << (s.decoder.enabled ? 1 : 0) << ':';
  for (std::size_t i = 0; i < s.decoder.hidden.size(); ++i) os << (i ? "," : "") << s.decoder.hidden[i];
  os << ':' << s.decoder.output << '\n';
  os << "m_plus=" << s.loss.m_plus << '\n';
  os << "m_minus=" << s.loss.m_minus << '\n';
  os << "lambda=" << s.loss.lambda << '\n';
  os << "recon_weight=" << s.loss.recon_weight << '\n';
  return os.str();
}

inline ModelSpec parse_spec(const std::string& text) {
  using namespace detail;
  ModelSpec s;
  s.conv.clear();
  s.caps_dense.clear();
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("spec line without '=': " + line);
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "name") {
      s.name = val;
    } else if (key == "input") {
      const auto p = split(val, ',');
      if (p.size() != 3) throw ConfigError("spec input needs H,W,C");
      s.height = to_size(p[0]);
      s.width = to_size(p[1]);
      s.channels = to_size(p[2]);
    } else if (key == "conv") {
      for (const auto& layer : split(val, ';')) {
        const auto p = split(layer, ':');
        if (p.size() != 4) throw ConfigError("spec conv layer needs k:f:stride:norm");
        s.conv.push_back({to_size(p[0]), to_size(p[1]), to_size(p[2]), parse_norm(p[3])});
      }
    } else if (key == "primary") {
      const auto p = split(val, ':');
      if (p.size() != 2) throw ConfigError("spec primary needs n:d");
      s.primary = {to_size(p[0]), to_size(p[1])};
    } else if (key == "caps") {
      for (const auto& layer : split(val, ';')) {
        const auto p = split(layer, ':');
        if (p.size() != 2) throw ConfigError("spec caps layer needs n:d");
        s.caps_dense.push_back({to_size(p[0]), to_size(p[1])});
      }
    } else if (key == "decoder") {
      const auto p = split(val + " ", ':');
      if (p.size() != 3) throw ConfigError("spec decoder needs enabled:hidden:output");
      s.decoder.enabled = to_size(p[0]) != 0;
      s.decoder.hidden.clear();
      for (const auto& h : split(p[1], ',')) s.decoder.hidden.push_back(to_size(h));
      std::string out = p[2];
      out.pop_back();
      s.decoder.output = to_size(out);
    } else if (key == "m_plus") {
      s.loss.m_plus = to_double(val);
    } else if (key == "m_minus") {
      s.loss.m_minus = to_double(val);
    } else if (key == "lambda") {
      s.loss.lambda = to_double(val);
    } else if (key == "recon_weight") {
      s.loss.recon_weight = to_double(val);
    } else {
      throw ConfigError("unknown spec key '" + key + "'");
    }
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Parameters

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

/// Trainable tensors in a fixed order plus non-trainable buffers (running
/// normalization statistics).
template <typename T>
struct ModelParams {
  std::vector<NamedTensor<T>> params;
  std::vector<NamedTensor<T>> buffers;

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].name == name) return i;
    }
    throw ArgumentError("no parameter named '" + name + "'");
  }
  Tensor<T>& get(const std::string& name) { return params[index_of(name)].value; }
  const Tensor<T>& get(const std::string& name) const { return params[index_of(name)].value; }

  Tensor<T>& buffer(const std::string& name) {
    for (auto& b : buffers) {
      if (b.name == name) return b.value;
    }
    throw ArgumentError("no buffer named '" + name + "'");
  }
  const Tensor<T>& buffer(const std::string& name) const {
    return const_cast<ModelParams*>(this)->buffer(name);
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.value.size();
    return n;
  }

  bool all_finite() const {
    for (const auto& p : params) {
      if (!p.value.all_finite()) return false;
    }
    return true;
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    for (const auto& p : params) out.params.push_back({p.name, p.value.template cast<U>()});
    for (const auto& b : buffers) out.buffers.push_back({b.name, b.value.template cast<U>()});
    return out;
  }
};

inline bool is_decoder_param(const std::string& name) { return name.rfind("decoder", 0) == 0; }

template <typename T>
ModelParams<T> init_params(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  ModelParams<T> p;
  auto he = [&](Shape shape, std::size_t fan_in) {
    return random_normal<T>(std::move(shape), rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
  };
  std::size_t cin = spec.channels;
  for (std::size_t i = 0; i < spec.conv.size(); ++i) {
    const auto& c = spec.conv[i];
    const std::string id = std::to_string(i + 1);
    p.params.push_back({"conv" + id + ".kernel", he({c.kernel, c.kernel, cin, c.filters}, c.kernel * c.kernel * cin)});
    p.params.push_back({"conv" + id + ".bias", Tensor<T>({c.filters})});
    if (c.norm) {
      p.params.push_back({"norm" + id + ".gamma", Tensor<T>({c.filters}, T{1})});
      p.params.push_back({"norm" + id + ".beta", Tensor<T>({c.filters})});
      if (*c.norm == ops::NormMode::batch) {
        p.buffers.push_back({"norm" + id + ".running_mean", Tensor<T>({c.filters})});
        p.buffers.push_back({"norm" + id + ".running_var", Tensor<T>({c.filters}, T{1})});
      }
    }
    cin = c.filters;
  }
  const auto [fh, fw] = spec.feature_map();
  p.params.push_back({"primary.kernel", he({fh, fw, cin}, fh * fw)});
  p.params.push_back({"primary.bias", Tensor<T>({cin})});
  CapsLayerSpec lower = spec.primary;
  for (std::size_t i = 0; i < spec.caps_dense.size(); ++i) {
    const auto& up = spec.caps_dense[i];
    const std::string id = std::to_string(i + 1);
    const double sd = 1.0 / std::sqrt(static_cast<double>(lower.n * lower.d));
    p.params.push_back({"caps" + id + ".W", random_normal<T>({lower.n, up.n, lower.d, up.d}, rng, sd)});
    p.params.push_back({"caps" + id + ".B", Tensor<T>({lower.n, up.n})});
    lower = up;
  }
  if (spec.decoder.enabled) {
    std::size_t in = lower.n * lower.d;
    std::vector<std::size_t> widths = spec.decoder.hidden;
    widths.push_back(spec.decoder.output);
    for (std::size_t i = 0; i < widths.size(); ++i) {
      const std::string id = std::to_string(i + 1);
      p.params.push_back({"decoder" + id + ".weight", he({in, widths[i]}, in)});
      p.params.push_back({"decoder" + id + ".bias", Tensor<T>({widths[i]})});
      in = widths[i];
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Parameter census

struct CensusRow {
  std::string layer;
  std::size_t params = 0;
  bool decoder = false;
};

struct ParamCensus {
  std::vector<CensusRow> rows;
  std::size_t headline = 0;  // excludes the reconstruction decoder
  std::size_t decoder = 0;
  std::size_t total() const { return headline + decoder; }
};

/// Analytic trainable-parameter count, independent of init_params.
inline ParamCensus count_params(const ModelSpec& spec) {
  spec.validate();
  ParamCensus census;
  auto add = [&](std::string layer, std::size_t n, bool dec) {
    census.rows.push_back({std::move(layer), n, dec});
    (dec ? census.decoder : census.headline) += n;
  };
  std::size_t cin = spec.channels;
  for (std::size_t i = 0; i < spec.conv.size(); ++i) {
    const auto& c = spec.conv[i];
    add("conv" + std::to_string(i + 1), c.kernel * c.kernel * cin * c.filters + c.filters, false);
    if (c.norm) add("norm" + std::to_string(i + 1), 2 * c.filters, false);
    cin = c.filters;
  }
  const auto [fh, fw] = spec.feature_map();
  add("primary", fh * fw * cin + cin, false);
  CapsLayerSpec lower = spec.primary;
  for (std::size_t i = 0; i < spec.caps_dense.size(); ++i) {
    const auto& up = spec.caps_dense[i];
    add("caps" + std::to_string(i + 1) + ".W", lower.n * up.n * lower.d * up.d, false);
    add("caps" + std::to_string(i + 1) + ".B", lower.n * up.n, false);
    lower = up;
  }
  if (spec.decoder.enabled) {
    std::size_t in = lower.n * lower.d;
    std::vector<std::size_t> widths = spec.decoder.hidden;
    widths.push_back(spec.decoder.output);
    for (std::size_t i = 0; i < widths.size(); ++i) {
      add("decoder" + std::to_string(i + 1), in * widths[i] + widths[i], true);
      in = widths[i];
    }
  }
  return census;
}

// ---------------------------------------------------------------------------
// Forward / backward

struct ForwardOptions {
  bool training = false;
  bool decode = true;
  /// One reconstruction per entry; empty means a single by-longest mask.
  std::vector<MaskSelect> masks;
};

template <typename T>
struct ForwardResult {
  Tensor<T> lengths;  // [N, classes]
  Tensor<T> caps;     // [N, classes, d_L]
  caps::RoutingTrace<T> trace;
  std::vector<Tensor<T>> reconstructions;  // each [N, P]
  std::vector<std::vector<std::size_t>> selected;
};

template <typename T>
struct ForwardCache {
  std::vector<Tensor<T>> conv_inputs;
  std::vector<ops::NormCache<T>> norms;
  std::vector<Tensor<T>> conv_outputs;  // post-activation
  caps::PrimaryCapsOutput<T> primary;
  std::vector<Tensor<T>> caps_inputs;
  std::vector<caps::CapsDenseOutput<T>> caps_layers;
  // decoder: per reconstruction, the layer inputs then final output
  std::vector<std::vector<Tensor<T>>> decoder_acts;
};

namespace detail {

template <typename T>
caps::CapsDenseParams<T> caps_params(const ModelParams<T>& p, std::size_t layer) {
  const std::string id = std::to_string(layer + 1);
  return {p.get("caps" + id + ".W"), p.get("caps" + id + ".B")};
}

template <typename T>
Tensor<T> decode(const ModelSpec& spec, const ModelParams<T>& p, Tensor<T> x, std::vector<Tensor<T>>* acts) {
  const std::size_t layers = spec.decoder.hidden.size() + 1;
  for (std::size_t i = 0; i < layers; ++i) {
    const std::string id = std::to_string(i + 1);
    if (acts) acts->push_back(x);
    x = ops::linear(x, p.get("decoder" + id + ".weight"), p.get("decoder" + id + ".bias"));
    x = i + 1 < layers ? ops::relu(x) : ops::sigmoid(x);
  }
  if (acts) acts->push_back(x);
  return x;
}

}  // namespace detail

/**
 * Full forward pass. In training mode batch normalization uses batch
 * statistics (returned through the cache for running-average updates);
 * otherwise the running statistics stored in params.buffers.
 */
template <typename T>
ForwardResult<T> forward(const ModelSpec& spec, const ModelParams<T>& params, const Tensor<T>& batch,
                         const ForwardOptions& opt = {}, ForwardCache<T>* cache = nullptr) {
  if (batch.rank() != 4 || batch.dim(1) != spec.height || batch.dim(2) != spec.width ||
      batch.dim(3) != spec.channels) {
    throw DimensionError("forward: batch " + shape_str(batch.shape()) + " does not match model input " +
                         std::to_string(spec.height) + "x" + std::to_string(spec.width) + "x" +
                         std::to_string(spec.channels));
  }
  Tensor<T> x = batch;
  for (std::size_t i = 0; i < spec.conv.size(); ++i) {
    const auto& c = spec.conv[i];
    const std::string id = std::to_string(i + 1);
    if (cache) cache->conv_inputs.push_back(x);
    x = ops::conv2d(x, params.get("conv" + id + ".kernel"), params.get("conv" + id + ".bias"), c.stride);
    ops::NormCache<T> nc;
    if (c.norm) {
      ops::RunningStats<T> running;
      const bool batch_mode = *c.norm == ops::NormMode::batch;
      if (batch_mode) running = {params.buffer("norm" + id + ".running_mean"), params.buffer("norm" + id + ".running_var")};
      x = ops::normalize(x, params.get("norm" + id + ".gamma"), params.get("norm" + id + ".beta"), *c.norm,
                         batch_mode ? &running : nullptr, opt.training, cache ? &nc : nullptr);
    }
    x = ops::relu(x);
    if (cache) {
      cache->norms.push_back(std::move(nc));
      cache->conv_outputs.push_back(x);
    }
  }
  auto primary = caps::primary_caps(x, params.get("primary.kernel"), params.get("primary.bias"), spec.primary.n,
                                    spec.primary.d);
  Tensor<T> u = primary.caps;
  ForwardResult<T> res;
  for (std::size_t l = 0; l < spec.caps_dense.size(); ++l) {
    auto out = caps::caps_dense_forward(u, detail::caps_params(params, l));
    if (cache) cache->caps_inputs.push_back(u);
    u = out.caps;
    if (l + 1 == spec.caps_dense.size()) res.trace = out.trace;
    if (cache) cache->caps_layers.push_back(std::move(out));
  }
  if (cache) cache->primary = std::move(primary);
  res.caps = u;
  res.lengths = caps::lengths(u);
  if (opt.decode && spec.decoder.enabled) {
    const std::vector<MaskSelect> masks = opt.masks.empty() ? std::vector<MaskSelect>{MaskSelect::longest()} : opt.masks;
    for (const auto& m : masks) {
      auto masked = mask_capsules(u, m);
      std::vector<Tensor<T>>* acts = nullptr;
      if (cache) acts = &cache->decoder_acts.emplace_back();
      res.reconstructions.push_back(detail::decode(spec, params, std::move(masked.flat), acts));
      res.selected.push_back(std::move(masked.selected));
    }
  }
  return res;
}

/// Gradients of a scalar objective given its gradients w.r.t. the lengths and
/// each reconstruction. Returned tensors align with params.params.
template <typename T>
std::vector<Tensor<T>> backward(const ModelSpec& spec, const ModelParams<T>& params, const ForwardCache<T>& cache,
                                const ForwardResult<T>& res, const Tensor<T>& grad_lengths,
                                const std::vector<Tensor<T>>& grad_recons) {
  std::vector<Tensor<T>> grads(params.params.size());
  auto put = [&](const std::string& name, Tensor<T> g) { grads[params.index_of(name)] = std::move(g); };

  Tensor<T> du = caps::lengths_backward(res.caps, res.lengths, grad_lengths);

  const std::size_t dec_layers = spec.decoder.hidden.size() + 1;
  std::vector<Tensor<T>> dec_w(dec_layers), dec_b(dec_layers);
  for (std::size_t r = 0; r < grad_recons.size(); ++r) {
    const auto& acts = cache.decoder_acts[r];
    Tensor<T> g = ops::sigmoid_backward(acts.back(), grad_recons[r]);
    for (std::size_t i = dec_layers; i-- > 0;) {
      const std::string id = std::to_string(i + 1);
      auto lg = ops::linear_backward(acts[i], params.get("decoder" + id + ".weight"), g);
      if (r == 0) {
        dec_w[i] = std::move(lg.weight);
        dec_b[i] = std::move(lg.bias);
      } else {
        dec_w[i] += lg.weight;
        dec_b[i] += lg.bias;
      }
      g = i > 0 ? ops::elementwise_backward(acts[i], acts[i], lg.input, ops::Unary::relu) : std::move(lg.input);
    }
    du += mask_capsules_backward(res.caps.shape(), res.selected[r], g);
  }
  if (spec.decoder.enabled) {
    for (std::size_t i = 0; i < dec_layers; ++i) {
      const std::string id = std::to_string(i + 1);
      const auto& w = params.get("decoder" + id + ".weight");
      const auto& b = params.get("decoder" + id + ".bias");
      put("decoder" + id + ".weight", grad_recons.empty() ? Tensor<T>(w.shape()) : std::move(dec_w[i]));
      put("decoder" + id + ".bias", grad_recons.empty() ? Tensor<T>(b.shape()) : std::move(dec_b[i]));
    }
  }

  for (std::size_t l = spec.caps_dense.size(); l-- > 0;) {
    const std::string id = std::to_string(l + 1);
    auto g = caps::caps_dense_backward(cache.caps_inputs[l], detail::caps_params(params, l), cache.caps_layers[l], du);
    put("caps" + id + ".W", std::move(g.W));
    put("caps" + id + ".B", std::move(g.B));
    du = std::move(g.u);
  }

  const Tensor<T> ds = caps::squash_backward(cache.primary.pre_squash, du);
  const Tensor<T>& fmap = spec.conv.empty() ? cache.conv_inputs.front() : cache.conv_outputs.back();
  auto pg = ops::depthwise_conv2d_backward(fmap, params.get("primary.kernel"), caps::caps_to_channels(ds), 1,
                                           !spec.conv.empty());
  put("primary.kernel", std::move(pg.kernel));
  put("primary.bias", std::move(pg.bias));

  Tensor<T> g = std::move(pg.input);
  for (std::size_t i = spec.conv.size(); i-- > 0;) {
    const auto& c = spec.conv[i];
    const std::string id = std::to_string(i + 1);
    const auto& out = cache.conv_outputs[i];
    g = ops::elementwise_backward(out, out, g, ops::Unary::relu);
    if (c.norm) {
      auto ng = ops::normalize_backward(cache.norms[i], params.get("norm" + id + ".gamma"), *c.norm, g);
      put("norm" + id + ".gamma", std::move(ng.gamma));
      put("norm" + id + ".beta", std::move(ng.beta));
      g = std::move(ng.input);
    }
    auto cg = ops::conv2d_backward(cache.conv_inputs[i], params.get("conv" + id + ".kernel"), g, c.stride, i > 0);
    put("conv" + id + ".kernel", std::move(cg.kernel));
    put("conv" + id + ".bias", std::move(cg.bias));
    g = std::move(cg.input);
  }
  return grads;
}

template <typename T>
struct LossAndGrads {
  LossBreakdown loss;
  std::vector<Tensor<T>> grads;
  ForwardResult<T> result;
  ForwardCache<T> cache;
};

/// One training-objective evaluation: forward with the given masks, total
/// loss against targets [N, classes] and recon_targets (one [N, P] per mask),
/// then backward.
template <typename T>
LossAndGrads<T> loss_and_grads(const ModelSpec& spec, const ModelParams<T>& params, const Tensor<T>& batch,
                               const Tensor<T>& targets, const std::vector<Tensor<T>>& recon_targets,
                               const std::vector<MaskSelect>& masks, bool training = true) {
  LossAndGrads<T> out;
  ForwardOptions opt;
  opt.training = training;
  opt.decode = spec.decoder.enabled && !recon_targets.empty();
  opt.masks = masks;
  if (opt.decode && masks.size() != recon_targets.size()) {
    throw DimensionError("loss_and_grads: need one mask per reconstruction target");
  }
  out.result = forward(spec, params, batch, opt, &out.cache);
  const std::vector<Tensor<T>> none;
  const auto& targets_used = opt.decode ? recon_targets : none;
  out.loss = total_loss(out.result.lengths, targets, out.result.reconstructions, targets_used, spec.loss);
  Tensor<T> dlen = margin_loss_grad(out.result.lengths, targets, spec.loss);
  std::vector<Tensor<T>> drec;
  for (std::size_t r = 0; r < out.result.reconstructions.size(); ++r) {
    Tensor<T> g = reconstruction_loss_grad(out.result.reconstructions[r], targets_used[r]);
    for (auto& v : g.values()) v = static_cast<T>(v * spec.loss.recon_weight);
    drec.push_back(std::move(g));
  }
  out.grads = backward(spec, params, out.cache, out.result, dlen, drec);
  return out;
}

/// Folds the batch statistics of a training forward pass into the running
/// averages.
template <typename T>
void update_running_stats(const ModelSpec& spec, ModelParams<T>& params, const ForwardCache<T>& cache,
                          double momentum = ops::kRunningMomentum) {
  for (std::size_t i = 0; i < spec.conv.size(); ++i) {
    const auto& c = spec.conv[i];
    if (!c.norm || *c.norm != ops::NormMode::batch) continue;
    const std::string id = std::to_string(i + 1);
    ops::RunningStats<T> running{params.buffer("norm" + id + ".running_mean"), params.buffer("norm" + id + ".running_var")};
    ops::update_running_stats(running, cache.norms[i], momentum);
    params.buffer("norm" + id + ".running_mean") = std::move(running.mean);
    params.buffer("norm" + id + ".running_var") = std::move(running.var);
  }
}

}  // namespace capsroute
