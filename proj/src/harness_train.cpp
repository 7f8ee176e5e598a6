#include "unorm/harness/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "unorm/opcount.hpp"
#include "unorm/rng.hpp"

namespace unorm::harness {

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::size_t> choose_trace_channels(std::size_t channels, std::size_t want,
                                               std::uint64_t seed) {
  std::vector<std::size_t> all(channels);
  for (std::size_t i = 0; i < channels; ++i) all[i] = i;
  if (want == 0 || want >= channels) return {};
  SeededRng rng(seed);
  for (std::size_t i = channels; i > 1; --i) {
    std::swap(all[i - 1], all[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
  }
  all.resize(want);
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace

TrainReport train(Model& model, const SyntheticTask& task, const TrainOptions& opts) {
  TrainReport report;
  const std::size_t channels = model.config().channels;
  const std::vector<std::size_t> subsample =
      choose_trace_channels(channels, opts.trace_channels, opts.trace_subsample_seed);
  if (!subsample.empty()) {
    report.trace.recorded_channels = subsample;
    report.trace.subsample_seed = opts.trace_subsample_seed;
  }

  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t step = 0; step < opts.steps; ++step) {
    const SyntheticTask::BatchData batch = task.make_batch(step);
    Matrix out;
    LossResult loss;
    try {
      out = model.forward_train(batch.x, task.tokens);
      loss = task_loss(task.kind, out, batch.targets);
      model.zero_grads();
      model.backward(loss.grad);
    } catch (const std::domain_error&) {
      // Overflowing activations surface as non-finite-input rejections from
      // the normalization layers; report them as divergence, never throw.
      report.diverged = true;
      report.divergence_step = step;
      break;
    }

    const double gn = model.grad_norm();
    report.loss_curve.push_back(loss.loss);
    report.grad_norm_curve.push_back(gn);
    report.max_grad_norm = std::max(report.max_grad_norm, gn);

    if (opts.record_trace) {
      const auto sites = model.norm_sites();
      for (std::size_t layer = 0; layer < sites.size(); ++layer) {
        const NormSite* site = sites[layer];
        if (site->spec.method == Method::LN) continue;  // no offline statistics
        const auto& cache = site->cache;
        const auto& bwd = site->last_backward;
        const auto record_channel = [&](std::size_t c) {
          TraceRecord r;
          r.step = step;
          r.layer = layer;
          r.channel = c;
          r.sigma2_t = cache.sigma2_t[c];
          r.sigma2_hat = cache.sigma2_hat[c];
          r.g = bwd.g_sigma2hat.empty() ? 0.0 : bwd.g_sigma2hat[c];
          r.psi = bwd.psi_applied.empty() ? 0.0 : bwd.psi_applied[c];
          r.trigger = cache.used_filtration_drop;
          report.trace.records.push_back(r);
        };
        if (subsample.empty()) {
          for (std::size_t c = 0; c < channels; ++c) record_channel(c);
        } else {
          for (std::size_t c : subsample) record_channel(c);
        }
      }
    }

    if (!std::isfinite(loss.loss) || !std::isfinite(gn) || !model.grads_finite()) {
      report.diverged = true;
      report.divergence_step = step;
      break;
    }
    model.sgd_step(opts.lr);
  }
  const auto t1 = std::chrono::steady_clock::now();
  const std::size_t ran = report.loss_curve.size();
  report.wall_ms_per_step =
      ran == 0 ? 0.0
               : std::chrono::duration<double, std::milli>(t1 - t0).count() /
                     static_cast<double>(ran);

  // Held-out evaluation on a clean stream far from the training steps.
  if (!report.diverged && opts.eval_batches > 0) {
    SyntheticTask eval_task = task;
    eval_task.outlier_period = 0;
    double acc = 0.0;
    for (std::size_t k = 0; k < opts.eval_batches; ++k) {
      const SyntheticTask::BatchData batch = eval_task.make_batch(1000000 + k);
      Model probe = model;  // keep evaluation from advancing training state
      const Matrix out = probe.forward_train(batch.x, eval_task.tokens);
      acc += task_loss(eval_task.kind, out, batch.targets).loss;
    }
    report.final_eval = acc / static_cast<double>(opts.eval_batches);
  }
  return report;
}

void TrainReport::save_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("TrainReport::save_csv: cannot open " + path);
  }
  out << "step,loss,grad_norm,ms\n";
  for (std::size_t i = 0; i < loss_curve.size(); ++i) {
    out << i << "," << format_double(loss_curve[i]) << "," << format_double(grad_norm_curve[i])
        << "," << format_double(wall_ms_per_step) << "\n";
  }
}

std::vector<SweepEntry> sweep(SweepAxis axis, const std::vector<double>& values,
                              const ModelConfig& base_cfg, const SyntheticTask& task,
                              const TrainOptions& opts, std::size_t jobs) {
  std::vector<SweepEntry> entries(values.size());
  const auto run_one = [&](std::size_t idx) {
    ModelConfig cfg = base_cfg;
    if (axis == SweepAxis::WindowM) {
      cfg.norm.window_m = static_cast<std::size_t>(values[idx]);
    } else {
      cfg.norm.alpha = values[idx];
    }
    Model model(cfg, task.kind);
    TrainOptions local = opts;
    local.record_trace = false;
    const TrainReport report = train(model, task, local);
    SweepEntry entry;
    entry.value = values[idx];
    entry.final_eval = report.final_eval;
    entry.final_loss = report.loss_curve.empty() ? 0.0 : report.loss_curve.back();
    entry.diverged = report.diverged;
    entry.max_grad_norm = report.max_grad_norm;
    entries[idx] = entry;
  };

  if (jobs <= 1) {
    for (std::size_t i = 0; i < values.size(); ++i) run_one(i);
    return entries;
  }
  std::vector<std::thread> pool;
  std::mutex queue_mutex;
  std::size_t next = 0;
  for (std::size_t j = 0; j < std::min(jobs, values.size()); ++j) {
    pool.emplace_back([&]() {
      while (true) {
        std::size_t idx;
        {
          std::lock_guard<std::mutex> lock(queue_mutex);
          if (next >= values.size()) return;
          idx = next++;
        }
        run_one(idx);
      }
    });
  }
  for (auto& t : pool) t.join();
  return entries;
}

void save_sweep_csv(SweepAxis axis, const std::vector<SweepEntry>& entries,
                    const std::string& path) {
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("save_sweep_csv: cannot open " + path);
  }
  out << (axis == SweepAxis::WindowM ? "window_m" : "alpha")
      << ",final_eval,final_loss,diverged,max_grad_norm\n";
  for (const auto& e : entries) {
    out << format_double(e.value) << "," << format_double(e.final_eval) << ","
        << format_double(e.final_loss) << "," << (e.diverged ? 1 : 0) << ","
        << format_double(e.max_grad_norm) << "\n";
  }
}

BenchResult bench_inference(const FrozenModel& frozen, std::size_t batches,
                            std::size_t batch_size, std::size_t tokens, std::uint64_t seed) {
  if (batches == 0 || batch_size == 0 || tokens == 0) {
    throw std::invalid_argument("bench_inference: batches, batch_size, tokens must be >= 1");
  }
  const FrozenModel fused = fuse_frozen(frozen);

  // A small pool of reusable random batches keeps generation out of the
  // timed region.
  SeededRng rng(seed);
  const std::size_t pool_size = std::min<std::size_t>(batches, 16);
  std::vector<Matrix> pool;
  pool.reserve(pool_size);
  for (std::size_t i = 0; i < pool_size; ++i) {
    pool.push_back(rng.normal_matrix(batch_size * tokens, frozen.channels));
  }

  BenchResult result;
  result.batches = batches;
  result.batch_size = batch_size;

  // Correctness guard plus op accounting, outside the timed loops.
  opcount::reset();
  for (const auto& x : pool) {
    const Matrix a = frozen.predict(x, tokens);
    const Matrix b = fused.predict(x, tokens);
    result.max_output_diff = std::max(result.max_output_diff, max_abs_diff(a, b));
  }
  opcount::reset();
  (void)frozen.predict(pool[0], tokens);
  result.norm_divisions_unfused = opcount::divisions();
  result.norm_sqrts_unfused = opcount::sqrts();
  opcount::reset();
  (void)fused.predict(pool[0], tokens);
  result.norm_divisions_fused = opcount::divisions();
  result.norm_sqrts_fused = opcount::sqrts();
  opcount::reset();

  const auto time_run = [&](const FrozenModel& m) {
    double sink = 0.0;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < batches; ++i) {
      const Matrix y = m.predict(pool[i % pool.size()], tokens);
      sink += y(0, 0);
    }
    const auto t1 = std::chrono::steady_clock::now();
    volatile double keep = sink;
    (void)keep;
    return std::chrono::duration<double>(t1 - t0).count();
  };

  // Warmup, then best-of-three alternating repetitions.
  (void)frozen.predict(pool[0], tokens);
  (void)fused.predict(pool[0], tokens);
  double best_unfused = 1e300;
  double best_fused = 1e300;
  for (int rep = 0; rep < 3; ++rep) {
    best_unfused = std::min(best_unfused, time_run(frozen));
    best_fused = std::min(best_fused, time_run(fused));
  }

  const double items = static_cast<double>(batches * batch_size);
  result.throughput_unfused = items / best_unfused;
  result.throughput_fused = items / best_fused;
  result.speedup = result.throughput_fused / result.throughput_unfused;
  return result;
}

void BenchResult::save_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("BenchResult::save_csv: cannot open " + path);
  }
  out << "path,throughput_items_per_sec,norm_divisions_per_batch,norm_sqrts_per_batch,"
         "max_output_diff\n";
  out << "unfused," << format_double(throughput_unfused) << "," << norm_divisions_unfused << ","
      << norm_sqrts_unfused << "," << format_double(max_output_diff) << "\n";
  out << "fused," << format_double(throughput_fused) << "," << norm_divisions_fused << ","
      << norm_sqrts_fused << "," << format_double(max_output_diff) << "\n";
  out << "speedup," << format_double(speedup) << ",,,\n";
}

}  // namespace unorm::harness
