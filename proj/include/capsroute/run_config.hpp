#pragma once

// Flat key=value run configuration shared by the command-line tool and the
// acceptance harness. Precedence: explicit overrides > config file > preset.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "capsroute/data.hpp"
#include "capsroute/errors.hpp"
#include "capsroute/model.hpp"
#include "capsroute/trainer.hpp"

namespace capsroute {

class RunConfig {
 public:
  using Map = std::map<std::string, std::string>;

  /// Defaults for a model preset ("mnist" or "multimnist").
  static RunConfig preset(const std::string& name) {
    if (name != "mnist" && name != "multimnist") throw ConfigError("unknown preset '" + name + "'");
    RunConfig c;
    c.values_ = {
        {"preset", name},
        {"data_dir", ""},
        {"epochs", "100"},
        {"batch_size", "16"},
        {"lr0", "0.0005"},
        {"decay", "0.98"},
        {"seed", "1"},
        {"augment", "1"},
        {"max_shift", "2"},
        {"max_rotation", "10"},
        {"limit", "0"},
        {"test_limit", "0"},
        {"multi_per_digit", "10"},
        {"multi_test_per_digit", "10"},
        {"eval_batch", "100"},
        {"strict", "0"},
        {"threads", "0"},
        {"out", "runs"},
    };
    if (name == "multimnist") {
      c.values_["augment"] = "0";
      c.values_["batch_size"] = "64";
      c.values_["decay"] = "0.97";
      c.values_["multi_test_per_digit"] = "1000";
      c.values_["eval_batch"] = "64";
    }
    return c;
  }

  static Map parse_text(const std::string& text, const std::string& origin) {
    Map m;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos) continue;
      const auto last = line.find_last_not_of(" \t\r");
      line = line.substr(first, last - first + 1);
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value");
      }
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t");
        const auto e = s.find_last_not_of(" \t");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      m[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return m;
  }

  static Map read_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config file '" + path.string() + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_text(ss.str(), path.string());
  }

  /// Overrides known keys; an unknown key is an error. Nothing changes if
  /// any key or the result is rejected.
  void apply(const Map& m) {
    RunConfig next = *this;
    for (const auto& [k, v] : m) {
      if (k == "preset") {
        if (v != get("preset")) throw ConfigError("preset cannot be changed by a config file or override");
        continue;
      }
      if (!values_.count(k)) throw ConfigError("unknown config key '" + k + "'");
      next.values_[k] = v;
    }
    next.validate();
    values_ = std::move(next.values_);
  }

  void set(const std::string& key, const std::string& value) { apply({{key, value}}); }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  std::size_t get_size(const std::string& key) const {
    const auto& v = get(key);
    try {
      std::size_t pos = 0;
      const long long n = std::stoll(v, &pos);
      if (pos != v.size() || n < 0) throw std::invalid_argument("range");
      return static_cast<std::size_t>(n);
    } catch (const std::logic_error&) {
      throw ConfigError("config key '" + key + "' needs a non-negative integer, got '" + v + "'");
    }
  }

  double get_double(const std::string& key) const {
    const auto& v = get(key);
    try {
      std::size_t pos = 0;
      const double d = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("trailing");
      return d;
    } catch (const std::logic_error&) {
      throw ConfigError("config key '" + key + "' needs a number, got '" + v + "'");
    }
  }

  bool get_bool(const std::string& key) const {
    const auto& v = get(key);
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw ConfigError("config key '" + key + "' needs a boolean, got '" + v + "'");
  }

  void validate() const {
    for (const char* k : {"epochs", "batch_size", "seed", "max_shift", "limit", "test_limit", "multi_per_digit",
                          "multi_test_per_digit", "eval_batch", "threads"}) {
      get_size(k);
    }
    for (const char* k : {"lr0", "decay", "max_rotation"}) get_double(k);
    for (const char* k : {"augment", "strict"}) get_bool(k);
    if (get_size("batch_size") == 0) throw ConfigError("batch_size must be >= 1");
    if (get_size("eval_batch") == 0) throw ConfigError("eval_batch must be >= 1");
    train_config().validate();
  }

  bool multimnist() const { return get("preset") == "multimnist"; }

  ModelSpec model_spec() const { return multimnist() ? build_multimnist_spec() : build_mnist_spec(); }

  TrainConfig train_config() const {
    TrainConfig t;
    t.epochs = get_size("epochs");
    t.batch_size = get_size("batch_size");
    t.lr0 = get_double("lr0");
    t.decay = get_double("decay");
    t.seed = get_size("seed");
    t.augment = get_bool("augment");
    t.augmentation.max_shift = static_cast<int>(get_size("max_shift"));
    t.augmentation.max_rotation_deg = get_double("max_rotation");
    return t;
  }

  /// Sorted key=value lines.
  std::string serialize() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << '=' << v << '\n';
    return os.str();
  }

  /// Keys that do not change what a run computes.
  static bool incidental(const std::string& key) {
    return key == "out" || key == "data_dir" || key == "threads" || key == "strict";
  }

  /// FNV-1a over the configuration, ignoring incidental keys.
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& [k, v] : values_) {
      if (incidental(k)) continue;
      for (char c : k + "=" + v + "\n") {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
      }
    }
    return h;
  }

  /// <out>/<command>-<hash>-s<seed>
  std::filesystem::path run_dir(const std::string& command) const {
    std::ostringstream name;
    name << command << '-' << std::hex << std::setw(16) << std::setfill('0') << hash() << std::dec << "-s"
         << get("seed");
    return std::filesystem::path(get("out")) / name.str();
  }

  /// Explicit data_dir, else $CAPSROUTE_DATA_DIR.
  std::filesystem::path data_dir() const {
    if (!get("data_dir").empty()) return get("data_dir");
    if (const char* env = std::getenv("CAPSROUTE_DATA_DIR"); env && *env) return env;
    throw ConfigError("no dataset directory: pass --data-dir or set CAPSROUTE_DATA_DIR");
  }

  const Map& values() const { return values_; }

 private:
  Map values_;
};

/// Writes config.txt into dir and returns its path.
inline std::filesystem::path write_resolved_config(const RunConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto path = dir / "config.txt";
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw FormatError("cannot write '" + path.string() + "'");
  f << cfg.serialize();
  return path;
}

/// Lists the regular files of dir (except the manifest itself) with sizes.
inline void write_manifest(const std::filesystem::path& dir) {
  std::vector<std::pair<std::string, std::uintmax_t>> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().filename() == "manifest.txt") continue;
    files.emplace_back(e.path().filename().string(), e.file_size());
  }
  std::sort(files.begin(), files.end());
  std::ofstream f(dir / "manifest.txt", std::ios::trunc);
  for (const auto& [name, size] : files) f << name << ' ' << size << '\n';
}

/// Train and test splits as a run configuration selects them.
struct RunData {
  data::Dataset train;
  data::Dataset test;
};

inline RunData load_run_data(const RunConfig& cfg, bool need_train = true) {
  const auto dir = cfg.data_dir();
  if (!std::filesystem::is_directory(dir)) throw ConfigError("dataset directory '" + dir.string() + "' not found");
  const auto files = data::locate_mnist(dir);
  RunData d;
  if (need_train) {
    d.train = data::load_dataset(files.train_images, files.train_labels);
    if (cfg.get_size("limit")) d.train = d.train.head(cfg.get_size("limit"));
  }
  d.test = data::load_dataset(files.test_images, files.test_labels);
  if (cfg.get_size("test_limit")) d.test = d.test.head(cfg.get_size("test_limit"));
  return d;
}

/// The fixed evaluation stream for a run: plain test digits, or seeded
/// MultiMNIST overlays of them.
inline data::EpochStream run_test_stream(const RunConfig& cfg, const data::Dataset& test) {
  if (cfg.multimnist()) {
    return data::multimnist_test_stream(test, cfg.get_size("multi_test_per_digit"), cfg.get_size("seed"),
                                        cfg.get_size("eval_batch"));
  }
  return eval_stream(test, cfg.get_size("eval_batch"));
}

/// A finished training run: the manifest is written last.
inline bool train_run_complete(const RunConfig& cfg) {
  const auto dir = cfg.run_dir("train");
  return std::filesystem::exists(dir / "final.ckpt") && std::filesystem::exists(dir / "manifest.txt");
}

/// Trains into cfg.run_dir("train"): config.txt, train_log.csv, best.ckpt,
/// final.ckpt and manifest.txt.
inline FitResult train_run(const RunConfig& cfg, std::ostream* progress = nullptr) {
  const ModelSpec spec = cfg.model_spec();
  RunData rd = load_run_data(cfg);
  const auto test = run_test_stream(cfg, rd.test);
  TrainConfig tc = cfg.train_config();
  tc.checkpoint_dir = cfg.run_dir("train");
  std::filesystem::remove(tc.checkpoint_dir / "manifest.txt");
  write_resolved_config(cfg, tc.checkpoint_dir);
  if (progress) {
    *progress << "run directory " << tc.checkpoint_dir.string() << "\n"
              << "training " << spec.name << " on " << rd.train.size() << " digits, " << tc.epochs << " epochs, "
              << test.size() << " test samples" << std::endl;
  }
  FitData fd;
  fd.train = &rd.train;
  fd.mode = cfg.multimnist() ? data::StreamMode::multimnist : data::StreamMode::mnist;
  fd.test = &test;
  fd.eval_k = cfg.multimnist() ? 2 : 1;
  fd.multi_per_digit = cfg.get_size("multi_per_digit");
  auto res = fit(spec, tc, fd, progress);
  write_manifest(tc.checkpoint_dir);
  return res;
}

}  // namespace capsroute
