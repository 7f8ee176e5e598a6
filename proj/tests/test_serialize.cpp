#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "unorm/harness/train.hpp"
#include "unorm/rng.hpp"
#include "unorm/serialize.hpp"

using namespace unorm;
using namespace unorm::harness;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

NormMethodSpec un_spec() {
  NormMethodSpec spec;
  spec.method = Method::UN;
  spec.window_m = 3;
  spec.warmup_steps = 2;
  spec.filtration = true;
  return spec;
}

}  // namespace

TEST_CASE("layer state json round trips bit-exactly") {
  const NormMethodSpec spec = un_spec();
  NormLayerState state = NormLayerState::init(3);
  SeededRng rng(157);
  for (int step = 0; step < 9; ++step) {
    Matrix x = rng.normal_matrix(6, 3);
    if (step == 7) {
      for (auto& v : x.values()) v *= 500.0;  // provoke a filtration event
    }
    const TrainForwardResult r = train_forward(x, state, spec);
    (void)train_backward(rng.normal_matrix(6, 3), r.cache, state, spec);
  }
  REQUIRE_FALSE(state.outlier_events.empty());

  const std::string text = state_to_json(state, spec);
  const LoadedState loaded = state_from_json(text);
  CHECK(loaded.spec.method == Method::UN);
  CHECK(loaded.spec.filtration);
  CHECK(loaded.state.step == state.step);
  CHECK(max_abs_diff(loaded.state.gamma, state.gamma) == 0.0);
  CHECK(max_abs_diff(loaded.state.run_sigma2, state.run_sigma2) == 0.0);
  CHECK(max_abs_diff(loaded.state.psi, state.psi) == 0.0);
  CHECK(max_abs_diff(loaded.state.ema_sigma2, state.ema_sigma2) == 0.0);
  REQUIRE(loaded.state.sigma2_window.size() == state.sigma2_window.size());
  for (std::size_t i = 0; i < state.sigma2_window.size(); ++i) {
    CHECK(max_abs_diff(loaded.state.sigma2_window[i], state.sigma2_window[i]) == 0.0);
  }
  REQUIRE(loaded.state.outlier_events.size() == state.outlier_events.size());
  CHECK(loaded.state.outlier_events[0].step == state.outlier_events[0].step);

  // A reloaded state continues training identically.
  NormLayerState resumed = loaded.state;
  NormLayerState original = state;
  const Matrix probe = rng.normal_matrix(6, 3);
  const TrainForwardResult a = train_forward(probe, original, spec);
  const TrainForwardResult b = train_forward(probe, resumed, spec);
  CHECK(max_abs_diff(a.y, b.y) == 0.0);
}

TEST_CASE("model json round trips and reproduces predictions") {
  ModelConfig cfg;
  cfg.kind = ModelConfig::Kind::MiniTransformer;
  cfg.depth = 2;
  cfg.channels = 8;
  cfg.hidden_multiple = 2;
  cfg.norm = un_spec();
  cfg.seed = 5;
  Model model(cfg, SyntheticTask::Kind::SequenceMeanRegression);

  SyntheticTask task;
  task.channels = 8;
  task.batch = 4;
  task.tokens = 4;
  task.seed = 5;
  TrainOptions opts;
  opts.steps = 12;
  opts.record_trace = false;
  (void)train(model, task, opts);

  const auto path = temp_file("unorm_model.json");
  save_model_json(model, path.string());
  LoadedModel loaded = load_model_json(path.string());
  CHECK_FALSE(loaded.fused);
  CHECK(loaded.config.depth == 2);

  const SyntheticTask::BatchData batch = task.make_batch(500);
  Model original = model;
  const Matrix a = original.forward_train(batch.x, task.tokens);
  const Matrix b = loaded.model.forward_train(batch.x, task.tokens);
  CHECK(max_abs_diff(a, b) == 0.0);

  // Frozen view round trips through the fused-format file as well.
  const FrozenModel frozen = model.freeze();
  const auto fused_path = temp_file("unorm_fused.json");
  save_frozen_model_json(fuse_frozen(frozen), cfg,
                         SyntheticTask::Kind::SequenceMeanRegression, fused_path.string());
  LoadedModel fused = load_model_json(fused_path.string());
  CHECK(fused.fused);
  CHECK(max_abs_diff(fused.frozen.predict(batch.x, task.tokens),
                     frozen.predict(batch.x, task.tokens)) < 1e-9);

  std::filesystem::remove(path);
  std::filesystem::remove(fused_path);
}

TEST_CASE("frozen stats export matches freeze_statistics") {
  ModelConfig cfg;
  cfg.kind = ModelConfig::Kind::Mlp;
  cfg.depth = 2;
  cfg.channels = 4;
  cfg.norm = un_spec();
  Model model(cfg, SyntheticTask::Kind::SequenceMeanRegression);
  SyntheticTask task;
  task.channels = 4;
  task.batch = 4;
  task.tokens = 2;
  TrainOptions opts;
  opts.steps = 6;
  opts.record_trace = false;
  (void)train(model, task, opts);

  const auto stats = frozen_stats_from_json(frozen_stats_to_json(model));
  const auto sites = model.norm_sites();
  REQUIRE(stats.size() == sites.size());
  for (std::size_t i = 0; i < sites.size(); ++i) {
    const FrozenStats direct = freeze_statistics(sites[i]->state);
    CHECK(max_abs_diff(stats[i].mu, direct.mu) == 0.0);
    CHECK(max_abs_diff(stats[i].sigma2, direct.sigma2) == 0.0);
  }
}

TEST_CASE("run config parsing applies defaults and validates") {
  const auto path = temp_file("unorm_config.json");
  {
    std::ofstream out(path);
    out << R"({
      "seed": 7,
      "model": {"kind": "mini_transformer", "depth": 1, "channels": 8},
      "norm": {"method": "un", "window_m": 4, "warmup_steps": 10, "filtration": true},
      "task": {"kind": "sequence_mean_regression", "batch": 8, "tokens": 4},
      "train": {"steps": 50, "lr": 0.01}
    })";
  }
  const RunConfig cfg = load_run_config(path.string());
  CHECK(cfg.seed == 7);
  CHECK(cfg.model.kind == ModelConfig::Kind::MiniTransformer);
  CHECK(cfg.model.norm.method == Method::UN);
  CHECK(cfg.model.norm.filtration);
  CHECK(cfg.task.channels == 8);  // forced to the model width
  CHECK(cfg.task.seed == 7);
  CHECK(cfg.train.steps == 50);
  std::filesystem::remove(path);
}

TEST_CASE("run config rejects inconsistent filtration settings") {
  const auto path = temp_file("unorm_bad_config.json");
  {
    std::ofstream out(path);
    out << R"({
      "model": {"kind": "mlp", "depth": 1, "channels": 4},
      "norm": {"method": "un", "window_m": 1, "filtration": true}
    })";
  }
  CHECK_THROWS((void)load_run_config(path.string()));
  std::filesystem::remove(path);

  const auto path2 = temp_file("unorm_bad_eps.json");
  {
    std::ofstream out(path2);
    out << R"({
      "model": {"kind": "mlp", "depth": 1, "channels": 4},
      "norm": {"method": "un", "epsilon": 0.0}
    })";
  }
  CHECK_THROWS((void)load_run_config(path2.string()));
  std::filesystem::remove(path2);
}
