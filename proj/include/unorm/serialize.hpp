#pragma once

#include <string>

#include "unorm/harness/model.hpp"
#include "unorm/harness/task.hpp"
#include "unorm/harness/train.hpp"
#include "unorm/norm_layer.hpp"
#include "unorm/norm_spec.hpp"

namespace unorm {

// File format versions.
inline constexpr const char* kStateVersion = "unorm-state-v1";
inline constexpr const char* kModelVersion = "unorm-model-v1";
inline constexpr const char* kStatsVersion = "unorm-stats-v1";
inline constexpr const char* kConfigVersion = "unorm-config-v1";

std::string state_to_json(const NormLayerState& state, const NormMethodSpec& spec);
struct LoadedState {
  NormLayerState state;
  NormMethodSpec spec;
};
LoadedState state_from_json(const std::string& text);

// Standalone frozen statistics for every normalization site of a model.
std::string frozen_stats_to_json(const harness::Model& model);

void save_model_json(const harness::Model& model, const std::string& path);

struct LoadedModel {
  harness::ModelConfig config;
  harness::SyntheticTask::Kind task_kind = harness::SyntheticTask::Kind::SequenceMeanRegression;
  harness::Model model;           // training-side view (valid when !fused)
  harness::FrozenModel frozen;    // inference-side view (always populated for offline)
  bool fused = false;
};
LoadedModel load_model_json(const std::string& path);

// Writes the frozen (optionally fused) inference model in the same format,
// with fused normalization sites replaced by identity markers.
void save_frozen_model_json(const harness::FrozenModel& frozen,
                            const harness::ModelConfig& cfg,
                            harness::SyntheticTask::Kind task_kind, const std::string& path);

// Run configuration shared by the CLI commands.
struct RunConfig {
  harness::ModelConfig model;
  harness::SyntheticTask task;
  harness::TrainOptions train;
  std::uint64_t seed = 1;
  std::string out_dir;
  // sweep
  std::string sweep_axis = "window_m";
  std::vector<double> sweep_values;
  std::size_t jobs = 1;
  // gradcheck
  std::size_t gradcheck_trials = 20;
  double gradcheck_tol = 1e-5;
  // pnac
  std::string pnac_trace_path;
  std::size_t pnac_window = 150;
  std::string pnac_which = "sigma2";
  // bench
  std::size_t bench_batches = 1000;
  std::string bench_model;  // optional pre-trained model; empty trains one first
};

RunConfig load_run_config(const std::string& path);
std::string run_config_to_json(const RunConfig& config);

// Standalone frozen statistics override for fusion: layer index -> (mu, sigma2).
std::vector<FrozenStats> frozen_stats_from_json(const std::string& text);

}  // namespace unorm
