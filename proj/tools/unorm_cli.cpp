// Experiment CLI: training, sweeps, gradient checks, normalization fusion,
// normality diagnostics, and the fused-vs-unfused microbenchmark.
//
// Exit codes: 0 success, 2 config error, 3 divergence, 4 verification failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "unorm/diagnostics.hpp"
#include "unorm/fuse.hpp"
#include "unorm/harness/model.hpp"
#include "unorm/harness/train.hpp"
#include "unorm/serialize.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitVerification = 4;

namespace fs = std::filesystem;
using namespace unorm;
using namespace unorm::harness;

struct GlobalArgs {
  std::string config_path;
  std::string out_override;
  std::int64_t seed_override = -1;
  std::size_t jobs = 0;
};

fs::path resolve_out_dir(const std::string& override_dir, const std::string& config_dir,
                         const std::string& command) {
  if (!override_dir.empty()) return override_dir;
  if (!config_dir.empty()) return config_dir;
  if (const char* root = std::getenv("UNORM_OUT_ROOT")) {
    return fs::path(root) / command;
  }
  return fs::path("unorm_out") / command;
}

RunConfig load_config_or_die(const GlobalArgs& args) {
  RunConfig cfg = load_run_config(args.config_path);
  if (args.seed_override >= 0) {
    cfg.seed = static_cast<std::uint64_t>(args.seed_override);
    cfg.model.seed = cfg.seed;
    cfg.task.seed = cfg.seed;
  }
  if (args.jobs > 0) cfg.jobs = args.jobs;
  return cfg;
}

void write_provenance(const RunConfig& cfg, const fs::path& out_dir) {
  std::ofstream out(out_dir / "resolved_config.json");
  out << run_config_to_json(cfg) << "\n";
}

int cmd_train(const GlobalArgs& args) {
  const RunConfig cfg = load_config_or_die(args);
  const fs::path out_dir = resolve_out_dir(args.out_override, cfg.out_dir, "train");
  fs::create_directories(out_dir);
  write_provenance(cfg, out_dir);

  Model model(cfg.model, cfg.task.kind);
  const TrainReport report = train(model, cfg.task, cfg.train);

  report.save_csv((out_dir / "report.csv").string());
  report.trace.save_csv((out_dir / "trace.csv").string());
  save_model_json(model, (out_dir / "model.json").string());
  if (cfg.model.norm.offline() && !report.diverged) {
    std::ofstream stats(out_dir / "frozen_stats.json");
    stats << frozen_stats_to_json(model) << "\n";
  }

  if (report.diverged) {
    std::cerr << "training diverged at step " << report.divergence_step << "\n";
    return kExitDivergence;
  }
  std::cout << "final loss " << report.loss_curve.back() << ", eval " << report.final_eval
            << ", artifacts in " << out_dir << "\n";
  return kExitOk;
}

int cmd_sweep(const GlobalArgs& args) {
  const RunConfig cfg = load_config_or_die(args);
  const fs::path out_dir = resolve_out_dir(args.out_override, cfg.out_dir, "sweep");
  fs::create_directories(out_dir);
  write_provenance(cfg, out_dir);

  if (cfg.sweep_values.empty()) {
    std::cerr << "sweep: no values configured\n";
    return kExitConfig;
  }
  SweepAxis axis;
  if (cfg.sweep_axis == "window_m") {
    axis = SweepAxis::WindowM;
  } else if (cfg.sweep_axis == "alpha") {
    axis = SweepAxis::Alpha;
  } else {
    std::cerr << "sweep: unknown axis '" << cfg.sweep_axis << "'\n";
    return kExitConfig;
  }
  const auto entries = sweep(axis, cfg.sweep_values, cfg.model, cfg.task, cfg.train, cfg.jobs);
  save_sweep_csv(axis, entries, (out_dir / "sweep.csv").string());
  std::cout << "sweep table in " << out_dir << "\n";
  return kExitOk;
}

int cmd_gradcheck(const GlobalArgs& args) {
  const RunConfig cfg = load_config_or_die(args);
  const fs::path out_dir = resolve_out_dir(args.out_override, cfg.out_dir, "gradcheck");
  fs::create_directories(out_dir);
  write_provenance(cfg, out_dir);

  if (!cfg.model.norm.offline()) {
    std::cerr << "gradcheck: offline methods only\n";
    return kExitConfig;
  }
  const auto fresh = [](std::size_t channels, SeededRng&) {
    return NormLayerState::init(channels);
  };
  NormMethodSpec spec = cfg.model.norm;
  const GradcheckReport fresh_report = gradcheck(fresh, spec, cfg.gradcheck_trials,
                                                 cfg.gradcheck_tol);

  const auto mid = [&spec](std::size_t channels, SeededRng& rng) {
    NormLayerState state = NormLayerState::init(channels);
    for (int step = 0; step < 10; ++step) {
      const TrainForwardResult r = train_forward(rng.normal_matrix(6, channels), state, spec);
      (void)train_backward(rng.normal_matrix(6, channels), r.cache, state, spec);
    }
    return state;
  };
  const GradcheckReport mid_report = gradcheck(mid, spec, cfg.gradcheck_trials,
                                               cfg.gradcheck_tol);

  std::ofstream out(out_dir / "gradcheck.csv");
  out << "regime,trials,max_rel_err_fd,max_err_reference,pass\n";
  out << "fresh," << fresh_report.trials << "," << fresh_report.max_rel_err_fd << ","
      << fresh_report.max_err_eq7 << "," << (fresh_report.pass ? 1 : 0) << "\n";
  out << "mid_training," << mid_report.trials << "," << mid_report.max_rel_err_fd << ","
      << mid_report.max_err_eq7 << "," << (mid_report.pass ? 1 : 0) << "\n";

  if (!fresh_report.pass || !mid_report.pass) {
    std::cerr << "gradcheck failed\n";
    return kExitVerification;
  }
  std::cout << "gradcheck pass, report in " << out_dir << "\n";
  return kExitOk;
}

int cmd_fuse(const std::string& model_path, const std::string& state_path,
             const std::string& out_path) {
  LoadedModel loaded = load_model_json(model_path);
  if (loaded.fused) {
    std::cerr << "fuse: model is already fused\n";
    return kExitConfig;
  }
  if (!loaded.config.norm.offline()) {
    std::cerr << "fuse: online method not fusable\n";
    return kExitConfig;
  }
  FrozenModel frozen = loaded.model.freeze();
  if (!state_path.empty()) {
    std::ifstream in(state_path);
    if (!in) {
      std::cerr << "fuse: cannot open " << state_path << "\n";
      return kExitConfig;
    }
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto stats = frozen_stats_from_json(text);
    std::size_t idx = 0;
    for (auto& block : frozen.blocks) {
      if (block.has_attention) {
        if (idx >= stats.size()) break;
        block.norm1.mu = stats[idx].mu;
        block.norm1.sigma2 = stats[idx].sigma2;
        ++idx;
      }
      if (idx >= stats.size()) break;
      block.norm2.mu = stats[idx].mu;
      block.norm2.sigma2 = stats[idx].sigma2;
      ++idx;
    }
    if (frozen.has_final_norm && idx < stats.size()) {
      frozen.final_norm.mu = stats[idx].mu;
      frozen.final_norm.sigma2 = stats[idx].sigma2;
    }
  }
  const FrozenModel fused = fuse_frozen(frozen);

  // Automatic equivalence check on random inputs in [-10, 10].
  SeededRng rng(loaded.config.seed + 1);
  std::vector<Matrix> inputs;
  const std::size_t tokens = 4;
  for (int k = 0; k < 20; ++k) {
    inputs.push_back(rng.uniform_matrix(8 * tokens, loaded.config.channels, -10.0, 10.0));
  }
  const double diff = verify_fusion(
      [&](const Matrix& x) { return frozen.predict(x, tokens); },
      [&](const Matrix& x) { return fused.predict(x, tokens); }, inputs);
  if (!(diff <= 1e-9)) {
    std::cerr << "fuse: verification failed, max diff " << diff << "\n";
    return kExitVerification;
  }
  save_frozen_model_json(fused, loaded.config, loaded.task_kind, out_path);
  std::cout << "fused model written to " << out_path << " (max diff " << diff << ")\n";
  return kExitOk;
}

int cmd_pnac(const GlobalArgs& args, const std::string& trace_override) {
  const RunConfig cfg = load_config_or_die(args);
  const fs::path out_dir = resolve_out_dir(args.out_override, cfg.out_dir, "pnac");
  fs::create_directories(out_dir);
  write_provenance(cfg, out_dir);

  const std::string trace_path =
      trace_override.empty() ? cfg.pnac_trace_path : trace_override;
  if (trace_path.empty()) {
    std::cerr << "pnac: no trace path configured\n";
    return kExitConfig;
  }
  const StatsTrace trace = StatsTrace::load_csv(trace_path);
  if (trace.records.empty()) {
    std::cerr << "pnac: empty trace\n";
    return kExitConfig;
  }
  const PnacStat which = cfg.pnac_which == "grad" ? PnacStat::Grad : PnacStat::Sigma2;

  std::size_t max_layer = 0;
  std::size_t max_step = 0;
  for (const auto& r : trace.records) {
    max_layer = std::max(max_layer, r.layer);
    max_step = std::max(max_step, r.step);
  }
  std::vector<PnacReport> reports;
  for (std::size_t layer = 0; layer <= max_layer; ++layer) {
    for (std::size_t start = 0; start + cfg.pnac_window <= max_step + 1;
         start += cfg.pnac_window) {
      reports.push_back(compute_pnac(trace, layer, start, start + cfg.pnac_window, which));
    }
  }
  if (reports.empty()) {
    std::cerr << "pnac: trace shorter than the window (" << cfg.pnac_window << " steps)\n";
    return kExitConfig;
  }
  save_pnac_csv(reports, (out_dir / "pnac.csv").string());
  std::cout << "pnac report in " << out_dir << "\n";
  return kExitOk;
}

int cmd_bench(const GlobalArgs& args) {
  const RunConfig cfg = load_config_or_die(args);
  const fs::path out_dir = resolve_out_dir(args.out_override, cfg.out_dir, "bench");
  fs::create_directories(out_dir);
  write_provenance(cfg, out_dir);

  FrozenModel frozen;
  if (!cfg.bench_model.empty()) {
    LoadedModel loaded = load_model_json(cfg.bench_model);
    if (loaded.fused) {
      std::cerr << "bench: expected an unfused model\n";
      return kExitConfig;
    }
    if (!loaded.config.norm.offline()) {
      std::cerr << "bench: online method not fusable\n";
      return kExitConfig;
    }
    frozen = loaded.model.freeze();
  } else {
    if (!cfg.model.norm.offline()) {
      std::cerr << "bench: online method not fusable\n";
      return kExitConfig;
    }
    Model model(cfg.model, cfg.task.kind);
    const TrainReport report = train(model, cfg.task, cfg.train);
    if (report.diverged) {
      std::cerr << "bench: preparatory training diverged\n";
      return kExitDivergence;
    }
    frozen = model.freeze();
  }

  const BenchResult bench =
      bench_inference(frozen, cfg.bench_batches, cfg.task.batch, cfg.task.tokens, cfg.seed);
  bench.save_csv((out_dir / "bench.csv").string());
  if (!(bench.max_output_diff <= 1e-9)) {
    std::cerr << "bench: fused outputs diverged from unfused (" << bench.max_output_diff
              << ")\n";
    return kExitVerification;
  }
  std::cout << "speedup " << bench.speedup << "x, report in " << out_dir << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"offline-normalization experiment driver"};
  app.require_subcommand(1);

  GlobalArgs args;
  std::string fuse_model, fuse_state, fuse_out, pnac_trace;

  auto add_common = [&](CLI::App* cmd, bool needs_config) {
    if (needs_config) {
      cmd->add_option("--config", args.config_path, "JSON run configuration")->required();
    }
    cmd->add_option("--seed", args.seed_override, "override the config seed");
    cmd->add_option("--out", args.out_override, "output directory");
  };

  CLI::App* train_cmd = app.add_subcommand("train", "train a model and record artifacts");
  add_common(train_cmd, true);
  CLI::App* sweep_cmd = app.add_subcommand("sweep", "hyperparameter sweep");
  add_common(sweep_cmd, true);
  sweep_cmd->add_option("--jobs", args.jobs, "parallel settings");
  CLI::App* gradcheck_cmd = app.add_subcommand("gradcheck", "gradient verification");
  add_common(gradcheck_cmd, true);
  CLI::App* fuse_cmd = app.add_subcommand("fuse", "fold normalization into linear layers");
  fuse_cmd->add_option("--model", fuse_model, "trained model JSON")->required();
  fuse_cmd->add_option("--state", fuse_state, "standalone frozen statistics JSON");
  fuse_cmd->add_option("--out", fuse_out, "output model path")->required();
  CLI::App* pnac_cmd = app.add_subcommand("pnac", "normality percentage analysis");
  add_common(pnac_cmd, true);
  pnac_cmd->add_option("--trace", pnac_trace, "trace CSV (overrides config)");
  CLI::App* bench_cmd = app.add_subcommand("bench", "fused vs unfused inference benchmark");
  add_common(bench_cmd, true);

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) return cmd_train(args);
    if (sweep_cmd->parsed()) return cmd_sweep(args);
    if (gradcheck_cmd->parsed()) return cmd_gradcheck(args);
    if (fuse_cmd->parsed()) return cmd_fuse(fuse_model, fuse_state, fuse_out);
    if (pnac_cmd->parsed()) return cmd_pnac(args, pnac_trace);
    if (bench_cmd->parsed()) return cmd_bench(args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}
