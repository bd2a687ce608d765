// capsroute: train, evaluate and inspect capsule classifiers.
//
// Exit codes: 0 success, 1 check failure, 2 usage or environment error.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "capsroute/analysis.hpp"
#include "capsroute/gradcheck_suite.hpp"
#include "capsroute/run_config.hpp"
#include "capsroute/trainer.hpp"

namespace fs = std::filesystem;
using namespace capsroute;

namespace {

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kUsage = 2;

// Options every run-producing command shares. Empty strings / nullopt mean
// "not given on the command line".
struct CommonFlags {
  std::string preset = "mnist";
  std::string config_file;
  std::string data_dir;
  std::string out;
  std::optional<std::size_t> epochs, limit, test_limit, seed, batch_size;
  bool strict = false;
  std::vector<std::string> set;

  void attach(CLI::App* app) {
    app->add_option("--preset", preset, "Model preset: mnist or multimnist")
        ->check(CLI::IsMember({"mnist", "multimnist"}));
    app->add_option("--config", config_file, "key=value config file");
    app->add_option("--data-dir", data_dir, "Directory holding the MNIST IDX files (else $CAPSROUTE_DATA_DIR)");
    app->add_option("--out", out, "Output root directory");
    app->add_option("--epochs", epochs);
    app->add_option("--limit", limit, "Use the first N training digits");
    app->add_option("--test-limit", test_limit, "Use the first N test digits");
    app->add_option("--seed", seed);
    app->add_option("--batch-size", batch_size);
    app->add_flag("--strict", strict, "Single-threaded, bit-reproducible numerics");
    app->add_option("--set", set, "Extra key=value overrides")->take_all();
  }

  RunConfig resolve() const {
    RunConfig cfg = RunConfig::preset(preset);
    if (!config_file.empty()) cfg.apply(RunConfig::read_file(config_file));
    RunConfig::Map flags;
    for (const auto& kv : set) {
      const auto m = RunConfig::parse_text(kv, "--set");
      flags.insert(m.begin(), m.end());
    }
    if (!data_dir.empty()) flags["data_dir"] = data_dir;
    if (!out.empty()) flags["out"] = out;
    if (epochs) flags["epochs"] = std::to_string(*epochs);
    if (limit) flags["limit"] = std::to_string(*limit);
    if (test_limit) flags["test_limit"] = std::to_string(*test_limit);
    if (seed) flags["seed"] = std::to_string(*seed);
    if (batch_size) flags["batch_size"] = std::to_string(*batch_size);
    if (strict) flags["strict"] = "1";
    cfg.apply(flags);
    execution().strict = cfg.get_bool("strict");
    execution().threads = static_cast<unsigned>(cfg.get_size("threads"));
    return cfg;
  }
};

std::string fmt_pct(double rate) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << rate * 100.0 << "%";
  return os.str();
}

int cmd_train(const CommonFlags& flags) {
  const auto res = train_run(flags.resolve(), &std::cout);
  std::cout << "final test_error " << fmt_pct(res.log.back().test_error) << "\n"
            << "best test_error " << fmt_pct(res.best_error) << " (epoch " << res.best_epoch << ")" << std::endl;
  return kOk;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct EvalFlags {
  std::string ckpt;
  std::string ensemble;
  double threshold = 0.0;
  std::size_t k = 0;
};

int cmd_eval(const CommonFlags& flags, const EvalFlags& ef) {
  if (ef.ckpt.empty() == ef.ensemble.empty()) throw ArgumentError("eval: give exactly one of --ckpt or --ensemble");
  RunConfig cfg = flags.resolve();
  const auto paths = ef.ckpt.empty() ? split_list(ef.ensemble) : std::vector<std::string>{ef.ckpt};
  std::vector<Checkpoint> ckpts;
  for (const auto& p : paths) ckpts.push_back(load_checkpoint(p));
  const ModelSpec& spec = ckpts.front().spec;
  for (const auto& c : ckpts) {
    if (serialize_spec(c.spec) != serialize_spec(spec)) throw ArgumentError("eval: ensemble members differ in architecture");
  }
  const bool multi = spec.height == data::kMultiCanvas;
  if (multi != cfg.multimnist()) cfg = [&] {
    // the checkpoint decides the dataset, the flags the rest
    CommonFlags f = flags;
    f.preset = multi ? "multimnist" : "mnist";
    return f.resolve();
  }();
  const std::size_t k = ef.k ? ef.k : (multi ? 2 : 1);
  RunData rd = load_run_data(cfg, false);
  const auto test = run_test_stream(cfg, rd.test);
  if (ef.ensemble.empty()) {
    const auto r = evaluate(spec, ckpts.front().params, test, k);
    std::cout << "test_error " << fmt_pct(r.error_rate()) << " (" << r.errors << "/" << r.total << ", top-" << k
              << ")" << std::endl;
    return kOk;
  }
  std::vector<LengthTable> tables;
  for (const auto& c : ckpts) tables.push_back(collect_lengths(spec, c.params, test));
  const auto er = ensemble_predict(tables, ef.threshold, k);
  for (std::size_t i = 0; i < paths.size(); ++i) {
    const bool in = std::find(er.admitted.begin(), er.admitted.end(), i) != er.admitted.end();
    std::cout << paths[i] << " accuracy " << fmt_pct(er.member_accuracy[i]) << (in ? " admitted" : " excluded")
              << "\n";
  }
  std::cout << "ensemble test_error " << fmt_pct(er.result.error_rate()) << " (" << er.result.errors << "/"
            << er.result.total << ", " << er.admitted.size() << " models, top-" << k << ")" << std::endl;
  return kOk;
}

struct AnalyzeFlags {
  std::string action;
  std::string ckpt;
  std::size_t dim = 0;
  std::size_t index = 0;
  std::string family = "translate_x";
  std::size_t pca_limit = 1000;
  std::size_t repetitions = 1000;
  bool concatenated = false;
};

int cmd_analyze(const CommonFlags& flags, const AnalyzeFlags& af) {
  if (af.action != "ops" && af.action != "perturb" && af.action != "pca" && af.action != "errors") {
    throw ArgumentError("unknown analyze action '" + af.action + "' (ops, perturb, pca, errors)");
  }
  const RunConfig cfg = flags.resolve();
  const fs::path dir = cfg.run_dir("analyze-" + af.action);
  auto need_ckpt = [&]() {
    if (af.ckpt.empty()) throw ArgumentError("analyze " + af.action + ": --ckpt is required");
    return load_checkpoint(af.ckpt);
  };
  write_resolved_config(cfg, dir);
  if (af.action == "ops") {
    const ModelSpec spec = cfg.model_spec();
    const auto rep = analysis::count_ops(spec);
    std::ofstream csv(dir / "ops.csv");
    analysis::write_ops_csv(csv, rep);
    std::cout << spec.name << " parameters " << rep.params.headline << " (decoder " << rep.params.decoder
              << " more)\n"
              << "OPs per image " << rep.ops << " = " << std::setprecision(4) << rep.gops() << " G (MACs "
              << rep.macs << ", decoder OPs " << rep.decoder_ops << " excluded)" << std::endl;
  } else if (af.action == "perturb") {
    const auto ck = need_ckpt();
    const auto rd = load_run_data(cfg, false);
    if (af.index >= rd.test.size()) throw ArgumentError("analyze perturb: --index out of range");
    const std::size_t h = rd.test.height(), w = rd.test.width();
    if (ck.spec.height != h || ck.spec.width != w) throw ArgumentError("analyze perturb: needs an MNIST checkpoint");
    const Tensor<float> img({h, w, 1}, std::vector<float>(rd.test.image(af.index), rd.test.image(af.index) + h * w));
    const auto grid = analysis::perturb_reconstruct(ck.spec, ck.params, img, af.dim);
    analysis::write_pgm((dir / ("perturb_dim" + std::to_string(af.dim) + ".pgm")).string(), grid.images);
    const auto sm = analysis::path_smoothness(grid.images);
    std::cout << "image " << af.index << " capsule " << grid.capsule << " dim " << af.dim << ": " << grid.deltas.size()
              << " reconstructions, mean adjacent L2 " << sm.mean_adjacent << ", endpoint L2 " << sm.endpoints
              << std::endl;
  } else if (af.action == "pca") {
    const auto family = analysis::parse_family(af.family);
    analysis::EquivarianceResult r;
    if (family == analysis::Family::random_baseline) {
      std::ofstream csv(dir / "pca_random.csv");
      for (auto k : {analysis::family_size(analysis::Family::translate_x),
                     analysis::family_size(analysis::Family::rotate)}) {
        r = analysis::random_baseline(16, k, af.repetitions, cfg.get_size("seed"));
        analysis::write_equivariance_csv(csv, r);
        std::cout << "random baseline K=" << k << " dim=16 r=" << fmt_pct(r.r) << " over " << r.images
                  << " repetitions" << std::endl;
      }
    } else {
      const auto ck = need_ckpt();
      const auto rd = load_run_data(cfg, false);
      r = analysis::pca_equivariance(ck.spec, ck.params, rd.test, family, af.pca_limit,
                                     af.concatenated ? analysis::CapsuleView::concatenated
                                                     : analysis::CapsuleView::correct_class);
      std::ofstream csv(dir / ("pca_" + af.family + ".csv"));
      analysis::write_equivariance_csv(csv, r);
      std::cout << af.family << " r=" << fmt_pct(r.r) << " cumulative(2)="
                << fmt_pct(r.cumulative_variance.size() > 1 ? r.cumulative_variance[1] : 1.0) << " over " << r.images
                << " images (" << r.degenerate << " degenerate)" << std::endl;
    }
  } else if (af.action == "errors") {
    const auto ck = need_ckpt();
    const auto rd = load_run_data(cfg, false);
    if (ck.spec.height != rd.test.height()) throw ArgumentError("analyze errors: needs an MNIST checkpoint");
    const auto recs = analysis::misclassification_report(ck.spec, ck.params, rd.test);
    std::ofstream csv(dir / "misclassified.csv");
    analysis::write_misclassified_csv(csv, recs);
    std::cout << recs.size() << " misclassified of " << rd.test.size() << "\n";
    for (std::size_t i = 0; i < std::min<std::size_t>(recs.size(), 10); ++i) {
      std::cout << "  id " << recs[i].id << " true " << recs[i].truth << " predicted " << recs[i].predicted
                << " margin " << recs[i].margin << "\n";
    }
  }
  write_manifest(dir);
  std::cout << "outputs in " << dir.string() << std::endl;
  return kOk;
}

struct GradcheckFlags {
  std::string corrupt;
  std::vector<std::string> only;
  std::uint64_t seed = 0;
  double tolerance = 1e-4;
};

int cmd_gradcheck(const GradcheckFlags& gf) {
  SuiteOptions so;
  so.fd.seed = gf.seed;
  so.corrupt = gf.corrupt;
  bool all_ok = true;
  std::size_t ran = 0;
  for (const auto& c : gradcheck_suite()) {
    if (!gf.only.empty() && std::find(gf.only.begin(), gf.only.end(), c.name) == gf.only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = c.run(so);
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool ok = r.passed(gf.tolerance);
    all_ok = all_ok && ok;
    ++ran;
    std::cout << std::left << std::setw(22) << r.op_name << " max_rel_error " << std::scientific << std::setprecision(3)
              << r.max_rel_error << std::defaultfloat << " probes " << r.probe_count << " kinks_skipped " << r.kinks_skipped
              << " " << (ok ? "PASS" : "FAIL")
              << " (" << std::fixed << std::setprecision(1) << s << "s)" << std::defaultfloat << std::endl;
  }
  if (ran == 0) throw ArgumentError("gradcheck: --only matched no registered op");
  std::cout << (all_ok ? "all " : "FAILED: not all ") << ran << " checks within " << gf.tolerance << std::endl;
  return all_ok ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Capsule network training, evaluation and analysis"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  CommonFlags train_flags, eval_common, analyze_common;
  auto* train = app.add_subcommand("train", "Train a model and write logs and checkpoints");
  train_flags.attach(train);

  EvalFlags ef;
  auto* eval = app.add_subcommand("eval", "Test error of a checkpoint or an ensemble");
  eval_common.attach(eval);
  eval->add_option("--ckpt", ef.ckpt, "Checkpoint file");
  eval->add_option("--ensemble", ef.ensemble, "Comma-separated checkpoint files");
  eval->add_option("--threshold", ef.threshold, "Minimum member accuracy for ensemble admission");
  eval->add_option("--k", ef.k, "Top-k scoring (default 1 for MNIST, 2 for MultiMNIST)");

  AnalyzeFlags af;
  auto* analyze = app.add_subcommand("analyze", "ops | perturb | pca | errors");
  analyze_common.attach(analyze);
  analyze->add_option("action", af.action, "ops, perturb, pca or errors")->required();
  analyze->add_option("--ckpt", af.ckpt, "Checkpoint file");
  analyze->add_option("--dim", af.dim, "Capsule component to perturb");
  analyze->add_option("--index", af.index, "Test image index for perturb");
  analyze->add_option("--family", af.family, "translate_x, translate_y, rotate or random");
  analyze->add_option("--pca-limit", af.pca_limit, "Test images averaged by pca (0 = all)");
  analyze->add_option("--repetitions", af.repetitions, "Random-baseline repetitions");
  analyze->add_flag("--concatenated", af.concatenated, "PCA over all output capsules instead of the correct class");

  GradcheckFlags gf;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  gradcheck->add_option("--only", gf.only, "Run only these checks")->take_all();
  gradcheck->add_option("--seed", gf.seed);
  gradcheck->add_option("--corrupt", gf.corrupt)->group("");  // test fixture

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(train_flags);
    if (*eval) return cmd_eval(eval_common, ef);
    if (*analyze) return cmd_analyze(analyze_common, af);
    if (*gradcheck) return cmd_gradcheck(gf);
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kCheckFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kUsage;
  }
  return kUsage;
}
