#include <stdexcept>
#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "unorm/harness/model.hpp"
#include "unorm/harness/task.hpp"
#include "unorm/harness/train.hpp"
#include "unorm/opcount.hpp"
#include "unorm/rng.hpp"

using namespace unorm;
using namespace unorm::harness;

namespace {

NormMethodSpec make_norm(Method m, std::size_t window_m = 4, std::size_t warmup = 20,
                         bool filtration = false) {
  NormMethodSpec spec;
  spec.method = m;
  spec.window_m = window_m;
  spec.warmup_steps = warmup;
  spec.filtration = filtration;
  return spec;
}

ModelConfig small_cfg(ModelConfig::Kind kind, Method m, std::uint64_t seed = 1) {
  ModelConfig cfg;
  cfg.kind = kind;
  cfg.depth = 2;
  cfg.channels = 8;
  cfg.hidden_multiple = 2;
  cfg.norm = make_norm(m);
  cfg.seed = seed;
  return cfg;
}

SyntheticTask small_task(std::uint64_t seed = 1) {
  SyntheticTask task;
  task.batch = 8;
  task.tokens = 4;
  task.channels = 8;
  task.seed = seed;
  return task;
}

double model_loss(Model model, const SyntheticTask& task, const SyntheticTask::BatchData& batch) {
  const Matrix out = model.forward_train(batch.x, task.tokens);
  return task_loss(task.kind, out, batch.targets).loss;
}

}  // namespace

TEST_CASE("depth zero builds the identity trunk with a bare readout") {
  ModelConfig cfg = small_cfg(ModelConfig::Kind::Mlp, Method::UN);
  cfg.depth = 0;
  Model model(cfg, SyntheticTask::Kind::SequenceMeanRegression);
  CHECK(model.param_count() == cfg.channels + 1);  // readout weights + bias
  const SyntheticTask task = small_task();
  const SyntheticTask::BatchData batch = task.make_batch(0);
  const Matrix out = model.forward_train(batch.x, task.tokens);
  // Readout applied to the pooled raw input.
  SeededRng check_rng(cfg.seed);
  const Matrix w = check_rng.normal_matrix(1, cfg.channels,
                                           1.0 / std::sqrt(static_cast<double>(cfg.channels)));
  for (std::size_t s = 0; s < task.batch; ++s) {
    double pooled_dot = 0.0;
    for (std::size_t j = 0; j < cfg.channels; ++j) {
      double pooled = 0.0;
      for (std::size_t t = 0; t < task.tokens; ++t) pooled += batch.x(s * task.tokens + t, j);
      pooled_dot += (pooled / task.tokens) * w(0, j);
    }
    CHECK(out(s, 0) == doctest::Approx(pooled_dot).epsilon(1e-12));
  }
}

TEST_CASE("parameter counts match the closed-form formula") {
  // mlp block: 2C (norm) + H*C + H (ff1) + C*H + C (ff2); plus the final
  // norm 2C and the readout C + 1.
  ModelConfig cfg = small_cfg(ModelConfig::Kind::Mlp, Method::UN);
  Model mlp(cfg, SyntheticTask::Kind::SequenceMeanRegression);
  const std::size_t c = cfg.channels;
  const std::size_t h = cfg.hidden_multiple * c;
  const std::size_t mlp_block = 2 * c + h * c + h + c * h + c;
  CHECK(mlp.param_count() == cfg.depth * mlp_block + 2 * c + c + 1);

  // transformer block adds 2C (norm) + 4 (C*C + C) for the attention linears.
  ModelConfig tcfg = small_cfg(ModelConfig::Kind::MiniTransformer, Method::UN);
  Model transformer(tcfg, SyntheticTask::Kind::SequenceMeanRegression);
  const std::size_t attn_part = 2 * c + 4 * (c * c + c);
  CHECK(transformer.param_count() == tcfg.depth * (mlp_block + attn_part) + 2 * c + c + 1);
}

TEST_CASE("full-model gradients match finite differences in the exact regime") {
  for (auto kind : {ModelConfig::Kind::Mlp, ModelConfig::Kind::MiniTransformer}) {
    for (Method m : {Method::BN, Method::UN, Method::LN}) {
      ModelConfig cfg = small_cfg(kind, m, 3);
      cfg.depth = 1;
      cfg.channels = 4;
      cfg.norm.warmup_steps = 100;  // exact regime for un
      Model model(cfg, SyntheticTask::Kind::SequenceMeanRegression);

      SyntheticTask task = small_task(3);
      task.channels = 4;
      task.batch = 3;
      task.tokens = 2;
      const SyntheticTask::BatchData batch = task.make_batch(0);

      Model work = model;
      const Matrix out = work.forward_train(batch.x, task.tokens);
      const LossResult loss = task_loss(task.kind, out, batch.targets);
      work.zero_grads();
      work.backward(loss.grad);

      const Matrix fd = finite_difference_gradient(
          [&](const Matrix& probe) {
            Model fresh = model;
            const Matrix o = fresh.forward_train(probe, task.tokens);
            return task_loss(task.kind, o, batch.targets).loss;
          },
          batch.x, 1e-5);

      // Input gradient is recovered by running backward through the stack;
      // compare against the analytic input gradient of the first block.
      Model probe_model = model;
      const Matrix o2 = probe_model.forward_train(batch.x, task.tokens);
      const LossResult l2 = task_loss(task.kind, o2, batch.targets);
      probe_model.zero_grads();

      // Recover grad wrt input by extending backward through the stack: the
      // harness does not expose it directly, so check parameter gradients
      // instead via directional finite differences on gamma of the first
      // norm site (offline methods) or the readout bias (ln).
      double scale = 0.0;
      for (double v : fd.values()) scale = std::max(scale, std::fabs(v));
      (void)scale;

      // Readout bias gradient via finite differences.
      {
        const double h = 1e-6;
        Model plus = model;
        plus.readout().p.bias[0] += h;
        Model minus = model;
        minus.readout().p.bias[0] -= h;
        const double fplus = model_loss(plus, task, batch);
        const double fminus = model_loss(minus, task, batch);
        const double fd_bias = (fplus - fminus) / (2 * h);
        CHECK(work.readout().grad_b[0] ==
              doctest::Approx(fd_bias).epsilon(1e-4).scale(std::max(1.0, std::fabs(fd_bias))));
      }

      // First-block ff1 weight entry.
      {
        const double h = 1e-6;
        Model plus = model;
        plus.blocks()[0].ff1.p.weight(0, 0) += h;
        Model minus = model;
        minus.blocks()[0].ff1.p.weight(0, 0) -= h;
        const double fd_w =
            (model_loss(plus, task, batch) - model_loss(minus, task, batch)) / (2 * h);
        CHECK(work.blocks()[0].ff1.grad_w(0, 0) ==
              doctest::Approx(fd_w).epsilon(1e-4).scale(std::max(1.0, std::fabs(fd_w))));
      }

      // Norm gamma entry.
      {
        const double h = 1e-6;
        Model plus = model;
        plus.blocks()[0].ffn_norm.state.gamma[1] += h;
        Model minus = model;
        minus.blocks()[0].ffn_norm.state.gamma[1] -= h;
        const double fd_g =
            (model_loss(plus, task, batch) - model_loss(minus, task, batch)) / (2 * h);
        CHECK(work.blocks()[0].ffn_norm.grad_gamma[1] ==
              doctest::Approx(fd_g).epsilon(1e-4).scale(std::max(1.0, std::fabs(fd_g))));
      }

      // Attention projection weight (transformer only).
      if (kind == ModelConfig::Kind::MiniTransformer) {
        const double h = 1e-6;
        Model plus = model;
        plus.blocks()[0].attn.wq.p.weight(1, 2) += h;
        Model minus = model;
        minus.blocks()[0].attn.wq.p.weight(1, 2) -= h;
        const double fd_w =
            (model_loss(plus, task, batch) - model_loss(minus, task, batch)) / (2 * h);
        CHECK(work.blocks()[0].attn.wq.grad_w(1, 2) ==
              doctest::Approx(fd_w).epsilon(1e-4).scale(std::max(1.0, std::fabs(fd_w))));
      }
    }
  }
}

TEST_CASE("input gradients of the full model match finite differences") {
  // Exercise the complete chain rule including residuals and attention by
  // checking the gradient that reaches the first normalization site.
  ModelConfig cfg = small_cfg(ModelConfig::Kind::MiniTransformer, Method::BN, 7);
  cfg.depth = 2;
  cfg.channels = 4;
  Model model(cfg, SyntheticTask::Kind::SequenceMeanRegression);
  SyntheticTask task = small_task(7);
  task.channels = 4;
  task.batch = 2;
  task.tokens = 3;
  const SyntheticTask::BatchData batch = task.make_batch(1);

  // Full-model loss as a function of every input entry.
  const Matrix fd = finite_difference_gradient(
      [&](const Matrix& probe) {
        Model fresh = model;
        const Matrix o = fresh.forward_train(probe, task.tokens);
        return task_loss(task.kind, o, batch.targets).loss;
      },
      batch.x, 1e-5);

  // The analytic input gradient: run backward and capture what flows out of
  // the first block by adding an identity "input" dense layer would change
  // the model; instead reuse the blocks' backward chain directly.
  Model work = model;
  const Matrix out = work.forward_train(batch.x, task.tokens);
  const LossResult loss = task_loss(task.kind, out, batch.targets);
  work.zero_grads();

  // Reimplement Model::backward but capture the gradient at the input.
  Matrix d = work.readout().backward(loss.grad);
  {
    const std::size_t tokens = task.tokens;
    Matrix expanded(batch.x.rows(), batch.x.cols());
    const double inv_t = 1.0 / static_cast<double>(tokens);
    for (std::size_t s = 0; s < d.rows(); ++s) {
      for (std::size_t t = 0; t < tokens; ++t) {
        for (std::size_t j = 0; j < d.cols(); ++j) {
          expanded(s * tokens + t, j) = d(s, j) * inv_t;
        }
      }
    }
    d = std::move(expanded);
  }
  if (work.has_final_norm()) d = work.final_norm().backward(d);
  for (auto it = work.blocks().rbegin(); it != work.blocks().rend(); ++it) {
    d = it->backward(d, task.tokens);
  }

  double scale = 0.0;
  for (double v : fd.values()) scale = std::max(scale, std::fabs(v));
  CHECK(max_abs_diff(d, fd) / std::max(scale, 1e-12) < 1e-4);
}

TEST_CASE("training reduces the regression loss well below its start") {
  ModelConfig cfg = small_cfg(ModelConfig::Kind::Mlp, Method::UN, 11);
  cfg.channels = 16;
  cfg.norm.warmup_steps = 200;
  Model model(cfg, SyntheticTask::Kind::SequenceMeanRegression);
  SyntheticTask task = small_task(11);
  task.channels = 16;
  task.batch = 32;
  task.tokens = 8;
  TrainOptions opts;
  opts.steps = 2000;
  opts.lr = 0.05;
  opts.record_trace = false;
  const TrainReport report = train(model, task, opts);
  CHECK_FALSE(report.diverged);
  CHECK(report.loss_curve.back() < 0.1 * report.loss_curve.front());

  // The task is linearly solvable: the pooled-feature least-squares bound is
  // essentially zero, so the 10% threshold is attainable by construction.
}

TEST_CASE("zero learning rate freezes the loss curve") {
  ModelConfig cfg = small_cfg(ModelConfig::Kind::Mlp, Method::BN, 13);
  Model model(cfg, SyntheticTask::Kind::SequenceMeanRegression);
  SyntheticTask task = small_task(13);
  TrainOptions opts;
  opts.steps = 5;
  opts.lr = 0.0;
  opts.record_trace = false;
  const TrainReport report = train(model, task, opts);
  // Each batch differs, but re-running any batch must give the same loss.
  Model again(cfg, SyntheticTask::Kind::SequenceMeanRegression);
  const TrainReport repeat = train(again, task, opts);
  for (std::size_t i = 0; i < report.loss_curve.size(); ++i) {
    CHECK(report.loss_curve[i] == repeat.loss_curve[i]);
  }
}

TEST_CASE("training is bit-deterministic given config and seed") {
  for (Method m : {Method::UN, Method::BN, Method::LN}) {
    ModelConfig cfg = small_cfg(ModelConfig::Kind::MiniTransformer, m, 17);
    if (m == Method::UN) cfg.norm.filtration = true;
    SyntheticTask task = small_task(17);
    task.outlier_period = 20;
    task.outlier_magnitude = 100.0;
    TrainOptions opts;
    opts.steps = 60;
    opts.lr = 0.01;

    Model a(cfg, SyntheticTask::Kind::SequenceMeanRegression);
    Model b(cfg, SyntheticTask::Kind::SequenceMeanRegression);
    const TrainReport ra = train(a, task, opts);
    const TrainReport rb = train(b, task, opts);
    REQUIRE(ra.loss_curve.size() == rb.loss_curve.size());
    for (std::size_t i = 0; i < ra.loss_curve.size(); ++i) {
      CHECK(ra.loss_curve[i] == rb.loss_curve[i]);
      CHECK(ra.grad_norm_curve[i] == rb.grad_norm_curve[i]);
    }
    REQUIRE(ra.trace.records.size() == rb.trace.records.size());
    for (std::size_t i = 0; i < ra.trace.records.size(); ++i) {
      CHECK(ra.trace.records[i].sigma2_t == rb.trace.records[i].sigma2_t);
      CHECK(ra.trace.records[i].psi == rb.trace.records[i].psi);
    }
  }
}

TEST_CASE("filtration that never fires leaves the trajectory bitwise unchanged") {
  // The adaptive threshold is scale-free; on a noisy stationary stream the
  // benign false-fire rate falls steeply with the window size. This seeded
  // run is verified trigger-free, which makes the bitwise comparison
  // non-vacuous while the detector stays live on every eligible step.
  ModelConfig with = small_cfg(ModelConfig::Kind::Mlp, Method::UN, 37);
  with.norm.filtration = true;
  with.norm.window_m = 8;
  ModelConfig without = with;
  without.norm.filtration = false;
  SyntheticTask task = small_task(37);  // benign stream at a realistic size
  task.batch = 32;
  task.tokens = 8;
  TrainOptions opts;
  opts.steps = 80;
  opts.lr = 0.02;
  opts.record_trace = false;

  Model ma(with, SyntheticTask::Kind::SequenceMeanRegression);
  Model mb(without, SyntheticTask::Kind::SequenceMeanRegression);
  const TrainReport ra = train(ma, task, opts);
  const TrainReport rb = train(mb, task, opts);
  bool any_trigger = false;
  for (const auto* site : ma.norm_sites()) {
    any_trigger = any_trigger || !site->state.outlier_events.empty();
  }
  CHECK_FALSE(any_trigger);
  for (std::size_t i = 0; i < ra.loss_curve.size(); ++i) {
    CHECK(ra.loss_curve[i] == rb.loss_curve[i]);
  }
}

TEST_CASE("token copy classification trains to low loss") {
  ModelConfig cfg = small_cfg(ModelConfig::Kind::Mlp, Method::UN, 23);
  cfg.channels = 8;
  cfg.norm.warmup_steps = 50;
  Model model(cfg, SyntheticTask::Kind::TokenCopyClassification);
  SyntheticTask task = small_task(23);
  task.kind = SyntheticTask::Kind::TokenCopyClassification;
  TrainOptions opts;
  opts.steps = 800;
  opts.lr = 0.1;
  opts.record_trace = false;
  const TrainReport report = train(model, task, opts);
  CHECK_FALSE(report.diverged);
  CHECK(report.loss_curve.back() < 0.5 * report.loss_curve.front());
}

TEST_CASE("warmup handoff does not jolt the loss curve") {
  ModelConfig cfg = small_cfg(ModelConfig::Kind::Mlp, Method::UN, 29);
  cfg.norm.warmup_steps = 100;
  Model model(cfg, SyntheticTask::Kind::SequenceMeanRegression);
  SyntheticTask task = small_task(29);
  task.batch = 16;
  TrainOptions opts;
  opts.steps = 160;
  opts.lr = 0.02;
  opts.record_trace = false;
  const TrainReport report = train(model, task, opts);
  REQUIRE_FALSE(report.diverged);

  // Median per-step delta over the 50 steps before the handoff.
  std::vector<double> deltas;
  for (std::size_t s = 50; s < 100; ++s) {
    deltas.push_back(std::fabs(report.loss_curve[s] - report.loss_curve[s - 1]));
  }
  std::nth_element(deltas.begin(), deltas.begin() + deltas.size() / 2, deltas.end());
  const double typical = std::max(deltas[deltas.size() / 2], 1e-9);
  const double boundary = std::fabs(report.loss_curve[100] - report.loss_curve[99]);
  CHECK(boundary < 10.0 * typical);
}

TEST_CASE("single-point sweep reproduces a direct train call bit-exactly") {
  ModelConfig cfg = small_cfg(ModelConfig::Kind::Mlp, Method::UN, 31);
  SyntheticTask task = small_task(31);
  TrainOptions opts;
  opts.steps = 40;
  opts.lr = 0.02;
  opts.record_trace = false;

  const auto entries = sweep(SweepAxis::WindowM, {4.0}, cfg, task, opts);
  REQUIRE(entries.size() == 1);
  Model model(cfg, task.kind);
  const TrainReport direct = train(model, task, opts);
  CHECK(entries[0].final_loss == direct.loss_curve.back());
  CHECK(entries[0].final_eval == direct.final_eval);
  CHECK(entries[0].max_grad_norm == direct.max_grad_norm);

  // Parallel execution returns the same table.
  const auto parallel = sweep(SweepAxis::WindowM, {2.0, 4.0, 6.0}, cfg, task, opts, 3);
  const auto serial = sweep(SweepAxis::WindowM, {2.0, 4.0, 6.0}, cfg, task, opts, 1);
  for (std::size_t i = 0; i < serial.size(); ++i) {
    CHECK(parallel[i].final_loss == serial[i].final_loss);
  }
}

TEST_CASE("trained offline models fuse exactly and drop norm arithmetic") {
  for (Method m : {Method::BN, Method::MABN, Method::PNStar, Method::UN}) {
    ModelConfig cfg = small_cfg(ModelConfig::Kind::MiniTransformer, m, 37);
    cfg.norm.warmup_steps = 5;
    Model model(cfg, SyntheticTask::Kind::SequenceMeanRegression);
    SyntheticTask task = small_task(37);
    TrainOptions opts;
    opts.steps = 30;
    opts.lr = 0.01;
    opts.record_trace = false;
    const TrainReport report = train(model, task, opts);
    REQUIRE_FALSE(report.diverged);

    const FrozenModel frozen = model.freeze();
    const FrozenModel fused = fuse_frozen(frozen);
    SeededRng rng(1000 + static_cast<int>(m));
    std::vector<Matrix> inputs;
    for (int k = 0; k < 20; ++k) {
      inputs.push_back(rng.uniform_matrix(task.batch * task.tokens, cfg.channels, -10.0, 10.0));
    }
    const double diff = verify_fusion(
        [&](const Matrix& x) { return frozen.predict(x, task.tokens); },
        [&](const Matrix& x) { return fused.predict(x, task.tokens); }, inputs);
    CHECK(diff < 1e-9);

    opcount::reset();
    (void)fused.predict(inputs[0], task.tokens);
    CHECK(opcount::divisions() == 0);
    CHECK(opcount::sqrts() == 0);
    opcount::reset();
    (void)frozen.predict(inputs[0], task.tokens);
    CHECK(opcount::divisions() > 0);
    CHECK(opcount::sqrts() > 0);
  }
}

TEST_CASE("ln models refuse to freeze") {
  ModelConfig cfg = small_cfg(ModelConfig::Kind::Mlp, Method::LN, 41);
  Model model(cfg, SyntheticTask::Kind::SequenceMeanRegression);
  CHECK_THROWS_AS((void)model.freeze(), std::invalid_argument);
}

TEST_CASE("bench reports consistent outputs and op counts") {
  ModelConfig cfg = small_cfg(ModelConfig::Kind::MiniTransformer, Method::UN, 43);
  cfg.norm.warmup_steps = 5;
  Model model(cfg, SyntheticTask::Kind::SequenceMeanRegression);
  SyntheticTask task = small_task(43);
  TrainOptions opts;
  opts.steps = 20;
  opts.lr = 0.01;
  opts.record_trace = false;
  (void)train(model, task, opts);

  const BenchResult bench = bench_inference(model.freeze(), 50, 8, 4, 7);
  CHECK(bench.max_output_diff < 1e-9);
  CHECK(bench.norm_divisions_fused == 0);
  CHECK(bench.norm_sqrts_fused == 0);
  CHECK(bench.norm_divisions_unfused > 0);
  CHECK(bench.throughput_fused > 0.0);
  CHECK(bench.throughput_unfused > 0.0);
}

TEST_CASE("filtration caps the outlier response that sinks the raw method") {
  // The raw geometric-mean window normalizes an outlier batch by a stale,
  // far smaller statistic and the amplified gradients blow training up;
  // filtration drops to the exact per-batch statistic and finishes. The
  // full desk-scale ordering against bn runs in the acceptance suite.
  SyntheticTask task = small_task(47);
  task.batch = 32;
  task.tokens = 8;
  task.channels = 16;
  task.outlier_period = 25;
  task.outlier_magnitude = 1000.0;
  TrainOptions opts;
  opts.steps = 300;
  opts.lr = 0.02;
  opts.record_trace = false;

  const auto run = [&](bool filtration) {
    ModelConfig cfg = small_cfg(ModelConfig::Kind::Mlp, Method::UN, 47);
    cfg.channels = 16;
    cfg.norm.warmup_steps = 20;
    cfg.norm.filtration = filtration;
    Model model(cfg, task.kind);
    return train(model, task, opts);
  };

  const TrainReport un_filtered = run(true);
  const TrainReport un_raw = run(false);

  CHECK_FALSE(un_filtered.diverged);
  CHECK(un_filtered.max_grad_norm < un_raw.max_grad_norm);

  // The filtered run must actually have exercised the drop path.
  ModelConfig cfg = small_cfg(ModelConfig::Kind::Mlp, Method::UN, 47);
  cfg.channels = 16;
  cfg.norm.warmup_steps = 20;
  cfg.norm.filtration = true;
  Model model(cfg, task.kind);
  (void)train(model, task, opts);
  bool any_drop = false;
  for (const auto* site : model.norm_sites()) {
    any_drop = any_drop || !site->state.outlier_events.empty();
  }
  CHECK(any_drop);
}
