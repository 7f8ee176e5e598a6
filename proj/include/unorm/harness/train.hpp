#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "unorm/diagnostics.hpp"
#include "unorm/harness/model.hpp"
#include "unorm/harness/task.hpp"

namespace unorm::harness {

struct TrainOptions {
  std::size_t steps = 2000;
  double lr = 0.05;
  bool record_trace = true;
  std::size_t trace_channels = 0;  // 0 records every channel
  std::uint64_t trace_subsample_seed = 0;
  std::size_t eval_batches = 4;
};

struct TrainReport {
  std::vector<double> loss_curve;
  std::vector<double> grad_norm_curve;
  bool diverged = false;
  std::size_t divergence_step = std::numeric_limits<std::size_t>::max();
  double final_eval = 0.0;
  double max_grad_norm = 0.0;
  double wall_ms_per_step = 0.0;
  StatsTrace trace;

  // CSV columns: step,loss,grad_norm,ms. The ms column is wall clock and is
  // excluded from reproducibility comparisons.
  void save_csv(const std::string& path) const;
};

// Plain SGD training loop with per-step trace recording. Divergence (any
// non-finite loss or gradient) halts training and sets the flag; it is
// reported, never thrown.
TrainReport train(Model& model, const SyntheticTask& task, const TrainOptions& opts);

enum class SweepAxis { WindowM, Alpha };

struct SweepEntry {
  double value = 0.0;
  double final_eval = 0.0;
  double final_loss = 0.0;
  bool diverged = false;
  double max_grad_norm = 0.0;
};

// Runs one training per axis value on isolated model/task state; jobs > 1
// distributes settings across threads.
std::vector<SweepEntry> sweep(SweepAxis axis, const std::vector<double>& values,
                              const ModelConfig& base_cfg, const SyntheticTask& task,
                              const TrainOptions& opts, std::size_t jobs = 1);

void save_sweep_csv(SweepAxis axis, const std::vector<SweepEntry>& entries,
                    const std::string& path);

struct BenchResult {
  double throughput_unfused = 0.0;  // samples per second
  double throughput_fused = 0.0;
  double speedup = 0.0;             // fused over unfused
  std::uint64_t norm_divisions_unfused = 0;
  std::uint64_t norm_sqrts_unfused = 0;
  std::uint64_t norm_divisions_fused = 0;
  std::uint64_t norm_sqrts_fused = 0;
  double max_output_diff = 0.0;     // correctness guard across the run
  std::size_t batches = 0;
  std::size_t batch_size = 0;

  void save_csv(const std::string& path) const;
};

// Times the frozen model against its fused twin over `batches` random
// batches (best of three alternating repetitions after warmup) and counts
// normalization-attributable divisions and square roots.
BenchResult bench_inference(const FrozenModel& frozen, std::size_t batches,
                            std::size_t batch_size, std::size_t tokens, std::uint64_t seed);

}  // namespace unorm::harness
