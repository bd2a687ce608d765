// Acceptance harness: one PASS/FAIL line per criterion.
//
//   acceptance --data-dir DIR --runs DIR [--only N ...] [--no-train]
//
// Long training runs are kept under --runs and reused when complete.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "capsroute/analysis.hpp"
#include "capsroute/gradcheck_suite.hpp"
#include "capsroute/run_config.hpp"

using namespace capsroute;
namespace fs = std::filesystem;

namespace {

// Tolerances
constexpr double kGradTol = 1e-4;
constexpr double kGradBudgetSeconds = 300;
constexpr double kRoutingTol = 1e-6;
constexpr double kHandTol = 1e-4;
constexpr std::uint64_t kMnistParams = 161824;
constexpr double kMultiParamsLo = 150000, kMultiParamsHi = 158000;
constexpr double kGopsLo = 0.04, kGopsHi = 0.08;
constexpr double kMnistErrorMax = 0.009;
constexpr double kBaselineK11 = 0.2557, kBaselineK11Tol = 0.03;
constexpr double kBaselineK51 = 0.1349, kBaselineK51Tol = 0.02;
constexpr double kEquivarianceMin = 0.6, kTwoComponentMin = 0.9;
constexpr std::size_t kPcaImages = 1000;
constexpr double kOverlapLo = 0.7, kOverlapHi = 0.9;
constexpr double kMultiTop2Max = 0.5;
constexpr double kLossTol = 1e-9;

struct Options {
  std::string data_dir;
  fs::path runs = "acceptance_runs";
  bool train = true;
};

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

std::string pct(double x) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << 100 * x << '%';
  return os.str();
}

RunConfig mnist_run(const Options& o, std::size_t seed) {
  auto cfg = RunConfig::preset("mnist");
  cfg.set("epochs", "15");
  cfg.set("seed", std::to_string(seed));
  cfg.set("out", o.runs.string());
  if (!o.data_dir.empty()) cfg.set("data_dir", o.data_dir);
  return cfg;
}

RunConfig multimnist_smoke(const Options& o) {
  auto cfg = RunConfig::preset("multimnist");
  cfg.set("epochs", "2");
  cfg.set("limit", "6000");
  cfg.set("test_limit", "1000");
  cfg.set("multi_test_per_digit", "10");
  cfg.set("out", o.runs.string());
  if (!o.data_dir.empty()) cfg.set("data_dir", o.data_dir);
  return cfg;
}

/// final.ckpt of a completed run, training it first if allowed.
fs::path ensure_trained(const RunConfig& cfg, const Options& o) {
  const auto dir = cfg.run_dir("train");
  if (!train_run_complete(cfg)) {
    if (!o.train) throw ConfigError("run " + dir.string() + " is incomplete and training is disabled");
    std::cerr << "training " << dir.string() << '\n';
    train_run(cfg, &std::cerr);
  }
  return dir / "final.ckpt";
}

// ---------------------------------------------------------------------------

void gradient_suite(Outcome& out, const Options&) {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0;
  std::string worst_name;
  std::size_t min_probes = ~std::size_t{0}, cases = 0;
  for (const auto& c : gradcheck_suite()) {
    const auto r = c.run(SuiteOptions{});
    ++cases;
    out.check(r.passed(kGradTol), c.name + " rel " + std::to_string(r.max_rel_error));
    out.check(r.probe_count >= 20, c.name + " probes " + std::to_string(r.probe_count));
    min_probes = std::min(min_probes, r.probe_count);
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_name = c.name;
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out.check(secs < kGradBudgetSeconds, "runtime");
  out.detail << cases << " cases, worst " << worst_name << " " << std::scientific << std::setprecision(2) << worst
             << std::defaultfloat << ", min probes " << min_probes << ", " << std::fixed << std::setprecision(1)
             << secs << " s";
}

void routing_invariants(Outcome& out, const Options&) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> size(1, 16);
  std::uniform_real_distribution<double> val(-1.0, 1.0);
  double sym = 0, rowsum = 0, max_norm = 0, dir = 0;
  bool norms_ok = true;
  for (int inst = 0; inst < 1000; ++inst) {
    const std::size_t nl = size(rng), nl1 = size(rng), dl = size(rng), dl1 = size(rng);
    Tensor<double> u({1, nl, dl}), W({nl, nl1, dl, dl1}), B({nl, nl1});
    for (auto& x : u.values()) x = val(rng);
    for (auto& x : W.values()) x = val(rng);
    for (auto& x : B.values()) x = 0.1 * val(rng);
    const auto res = caps::caps_dense_forward(u, caps::CapsDenseParams<double>{W, B});
    const auto& A = res.trace.A;
    const auto& C = res.trace.C;
    for (std::size_t j = 0; j < nl; ++j)
      for (std::size_t m = 0; m < nl; ++m)
        for (std::size_t k = 0; k < nl1; ++k) sym = std::max(sym, std::abs(A.at(0, j, m, k) - A.at(0, m, j, k)));
    for (std::size_t j = 0; j < nl; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < nl1; ++k) s += C.at(0, j, k);
      rowsum = std::max(rowsum, std::abs(s - 1.0));
    }
    for (std::size_t k = 0; k < nl1; ++k) {
      double vv = 0, ss = 0, vs = 0;
      for (std::size_t d = 0; d < dl1; ++d) {
        const double v = res.caps.at(0, k, d), s = res.pre_squash.at(0, k, d);
        vv += v * v;
        ss += s * s;
        vs += v * s;
      }
      const double n = std::sqrt(vv);
      if (!(n >= 0.0 && n < 1.0)) norms_ok = false;
      max_norm = std::max(max_norm, n);
      if (ss > 0 && vv > 0) dir = std::max(dir, 1.0 - vs / std::sqrt(vv * ss));
    }
  }
  out.check(sym <= kRoutingTol, "A symmetry");
  out.check(rowsum <= kRoutingTol, "coupling row sums");
  out.check(norms_ok, "squash norms in [0,1)");
  out.check(dir <= kRoutingTol, "squash direction");

  // upper 0: both lower capsules agree; upper 1: they disagree
  const Tensor<double> u({1, 2, 1}, {1, 1});
  const Tensor<double> W({2, 2, 1, 1}, {1, 1, 1, -1});
  const auto hand = caps::caps_dense_forward(u, caps::CapsDenseParams<double>{W, Tensor<double>({2, 2})});
  double hand_err = 0;
  for (std::size_t j = 0; j < 2; ++j) {
    hand_err = std::max(hand_err, std::abs(hand.trace.C.at(0, j, 0) - 0.88080));
    hand_err = std::max(hand_err, std::abs(hand.trace.C.at(0, j, 1) - 0.11920));
  }
  out.check(hand_err <= kHandTol, "hand instance");
  out.detail << std::scientific << std::setprecision(1) << "A asym " << sym << ", row sum dev " << rowsum
             << ", 1-cos " << dir << ", 1-max norm " << 1 - max_norm << std::defaultfloat << std::setprecision(6)
             << ", hand C " << hand.trace.C.at(0, 0, 0) << "/" << hand.trace.C.at(0, 0, 1);
}

void census(Outcome& out, const Options&) {
  const auto mnist = count_params(build_mnist_spec()).headline;
  const auto multi = count_params(build_multimnist_spec()).headline;
  const double gops = analysis::count_ops(build_mnist_spec()).gops();
  out.check(mnist == kMnistParams, "mnist params");
  out.check(multi >= kMultiParamsLo && multi <= kMultiParamsHi, "multimnist params");
  out.check(gops >= kGopsLo && gops <= kGopsHi, "G-OPs");
  out.detail << "mnist " << mnist << ", multimnist " << multi << ", " << gops << " G-OPs";
}

void mnist_training(Outcome& out, const Options& o) {
  std::vector<LengthTable> tables;
  std::optional<data::EpochStream> stream;
  data::Dataset test;
  double best_single = 1.0;
  for (std::size_t seed : {1, 2, 3}) {
    const auto cfg = mnist_run(o, seed);
    const auto ckpt = ensure_trained(cfg, o);
    if (!stream) {
      test = load_run_data(cfg, false).test;
      stream.emplace(run_test_stream(cfg, test));
    }
    const auto ck = load_checkpoint(ckpt);
    tables.push_back(collect_lengths(ck.spec, ck.params, *stream));
    const double err = score_lengths(tables.back(), 1).error_rate();
    best_single = std::min(best_single, err);
    out.detail << "seed " << seed << " " << pct(err) << ", ";
    if (seed == 1) out.check(err <= kMnistErrorMax, "seed 1 test error");
  }
  const double ens = ensemble_predict(tables, 0.0, 1).result.error_rate();
  out.check(ens <= best_single, "ensemble vs best single");
  out.detail << "ensemble " << pct(ens);
}

void pca_equivariance(Outcome& out, const Options& o) {
  const auto k11 = analysis::random_baseline(16, 11, 1000, 0);
  const auto k51 = analysis::random_baseline(16, 51, 1000, 0);
  out.check(std::abs(k11.r - kBaselineK11) <= kBaselineK11Tol, "baseline K=11");
  out.check(std::abs(k51.r - kBaselineK51) <= kBaselineK51Tol, "baseline K=51");
  out.detail << "baseline K=11 " << pct(k11.r) << ", K=51 " << pct(k51.r);

  const auto cfg = mnist_run(o, 1);
  const auto ck = load_checkpoint(ensure_trained(cfg, o));
  const auto test = load_run_data(cfg, false).test;
  for (auto f : {analysis::Family::translate_x, analysis::Family::translate_y, analysis::Family::rotate}) {
    const auto r = analysis::pca_equivariance(ck.spec, ck.params, test, f, kPcaImages);
    const std::string name = analysis::family_name(f);
    out.check(r.r > kEquivarianceMin, name + " r");
    out.check(r.cumulative_variance.size() > 1 && r.cumulative_variance[1] > kTwoComponentMin,
              name + " 2-component variance");
    out.detail << "; " << name << " r " << pct(r.r) << " cum2 " << pct(r.cumulative_variance[1]);
  }
}

void multimnist(Outcome& out, const Options& o) {
  const auto cfg = multimnist_smoke(o);
  auto full = cfg;
  full.set("test_limit", "0");
  const auto digits = load_run_data(full, false).test;
  data::StreamConfig sc;
  sc.mode = data::StreamMode::multimnist;
  sc.augment = false;
  sc.shuffle = false;
  sc.multi_per_digit = 1;
  const data::EpochStream gen(digits, sc, 7, 0);
  const std::size_t n = std::min<std::size_t>(10000, digits.size());
  double overlap = 0;
  bool shape = true, shifts = true, distinct = true, labels = true;
  for (std::size_t id = 0; id < n; ++id) {
    const auto s = gen.multi_sample(id);
    shape = shape && s.image.shape() == Shape{36, 36, 1};
    for (int d : s.shifts) shifts = shifts && std::abs(d) <= 4;
    distinct = distinct && s.classes[0] != s.classes[1];
    double sum = 0;
    for (std::size_t c = 0; c < 10; ++c) {
      const bool hot = c == s.classes[0] || c == s.classes[1];
      labels = labels && s.label[c] == (hot ? 1.0f : 0.0f);
      sum += s.label[c];
    }
    labels = labels && sum == 2.0;
    overlap += data::frame_overlap(s);
  }
  overlap /= static_cast<double>(n);
  out.check(n == 10000, "10^4 samples");
  out.check(shape, "36x36 shape");
  out.check(shifts, "shifts <= 4");
  out.check(distinct, "distinct classes");
  out.check(labels, "two-hot labels");
  out.check(overlap >= kOverlapLo && overlap <= kOverlapHi, "mean overlap");
  out.detail << n << " samples, mean overlap " << std::setprecision(4) << overlap;

  const auto ck = load_checkpoint(ensure_trained(cfg, o));
  const auto test = digits.head(cfg.get_size("test_limit"));
  const auto stream = run_test_stream(cfg, test);
  const double err = evaluate(ck.spec, ck.params, stream, 2).error_rate();
  out.check(err < kMultiTop2Max, "smoke top-2 error");
  out.detail << "; smoke top-2 error " << pct(err) << " on " << stream.size();
}

void loss_values(Outcome& out, const Options&) {
  const MarginConfig cfg;
  auto row = [](std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor<double>({1, n}, std::move(v));
  };
  const double a = margin_loss(row({0.9}), row({1}), cfg);
  const double b = margin_loss(row({0.3}), row({1}), cfg);
  const double c = margin_loss(row({0.8}), row({0}), cfg);
  out.check(std::abs(a - 0.0) <= kLossTol, "margin 0");
  out.check(std::abs(b - 0.36) <= kLossTol, "margin 0.36");
  out.check(std::abs(c - 0.245) <= kLossTol, "margin 0.245");
  // margin 0.605 + 0.392 * mean((0.1)^2)
  const auto img = Tensor<double>({1, 4}, std::vector<double>{0.2, 0.4, 0.6, 0.8});
  const auto dec = Tensor<double>({1, 4}, std::vector<double>{0.3, 0.5, 0.7, 0.9});
  const auto tl = total_loss(row({0.3, 0.8}), row({1, 0}), {dec}, {img}, cfg);
  out.check(std::abs(tl.total - 0.60892) <= kLossTol, "total composition");
  out.detail << "margins " << a << "/" << b << "/" << c << ", total " << std::setprecision(12) << tl.total;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void determinism(Outcome& out, const Options& o) {
  const ExecutionPolicy saved = execution();
  execution().strict = true;
  auto cfg = RunConfig::preset("mnist");
  cfg.set("epochs", "1");
  cfg.set("limit", "1000");
  cfg.set("test_limit", "1000");
  cfg.set("seed", "5");
  cfg.set("strict", "1");
  if (!o.data_dir.empty()) cfg.set("data_dir", o.data_dir);
  const auto scratch = fs::temp_directory_path() / "capsroute_acceptance_strict";
  fs::remove_all(scratch);
  std::vector<FitResult> fits;
  for (const char* sub : {"a", "b"}) {
    cfg.set("out", (scratch / sub).string());
    fits.push_back(train_run(cfg));
  }
  execution() = saved;
  const auto pa = cfg.run_dir("train").filename();
  const auto a = slurp(scratch / "a" / pa / "final.ckpt"), b = slurp(scratch / "b" / pa / "final.ckpt");
  out.check(!a.empty() && a == b, "bit-identical checkpoints");

  const auto test = load_run_data(cfg, false).test;
  const auto stream = run_test_stream(cfg, test);
  const auto ck = load_checkpoint(scratch / "a" / pa / "final.ckpt");
  const auto mem = evaluate(cfg.model_spec(), fits[0].params, stream);
  const auto disk = evaluate(ck.spec, ck.params, stream);
  out.check(mem.errors == disk.errors && mem.total == disk.total, "round-trip evaluation");
  out.check(collect_lengths(ck.spec, ck.params, stream).lengths ==
                collect_lengths(cfg.model_spec(), fits[0].params, stream).lengths,
            "round-trip lengths");
  out.detail << a.size() << "-byte checkpoints " << (a == b ? "identical" : "differ") << ", error " << mem.errors
             << "/" << mem.total << " before and " << disk.errors << "/" << disk.total << " after reload";
  fs::remove_all(scratch);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"capsroute acceptance criteria"};
  Options o;
  std::vector<int> only;
  bool no_train = false;
  app.add_option("--data-dir", o.data_dir, "MNIST directory (default $CAPSROUTE_DATA_DIR)");
  app.add_option("--runs", o.runs, "Directory for reusable training runs");
  app.add_option("--only", only, "Run only these criteria")->check(CLI::Range(1, 8));
  app.add_flag("--no-train", no_train, "Fail instead of training when a run is missing");
  CLI11_PARSE(app, argc, argv);
  o.train = !no_train;

  const std::vector<std::pair<std::string, std::function<void(Outcome&, const Options&)>>> criteria{
      {"gradient suite", gradient_suite},       {"routing invariants", routing_invariants},
      {"census", census},                       {"mnist training", mnist_training},
      {"pca equivariance", pca_equivariance},   {"multimnist", multimnist},
      {"loss values", loss_values},             {"determinism", determinism},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome out;
    try {
      criteria[i].second(out, o);
    } catch (const std::exception& e) {
      out.pass = false;
      out.detail << "error: " << e.what();
    }
    failures += !out.pass;
    std::cout << "criterion " << id << " " << criteria[i].first << ": " << (out.pass ? "PASS" : "FAIL") << " ("
              << out.detail.str() << ")" << std::endl;
  }
  return failures ? 1 : 0;
}
