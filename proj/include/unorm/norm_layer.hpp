#pragma once

#include <cstddef>
#include <deque>
#include <vector>

#include "unorm/matrix.hpp"
#include "unorm/norm_spec.hpp"

namespace unorm {

// Mutable per-layer training state shared by all offline methods. Training
// calls must come from a single writer in strict step order; a frozen state
// is safe to read concurrently.
struct NormLayerState {
  Vector gamma;
  Vector beta;
  Vector run_mu;       // inference first moment (stays zero for un/mabn/pnstar)
  Vector run_sigma2;   // inference second moment
  // Recent per-iteration statistics, newest first, trimmed to window_m.
  std::deque<Vector> sigma2_window;
  std::deque<Vector> grad_window;
  Vector psi;          // EMA gradient estimate (un, pnstar)
  Vector ema_sigma2;   // EMA of raw second-moment statistics (mabn, pnstar)
  std::size_t step = 0;
  struct OutlierEvent {
    std::size_t step;
    std::size_t channel_triggers;
  };
  std::vector<OutlierEvent> outlier_events;
  // Set by apply_filtration for the in-flight step; consumed by train_forward.
  bool pending_drop = false;

  static NormLayerState init(std::size_t channels);
  std::size_t channels() const { return gamma.size(); }
};

// Everything the backward pass needs from the matching forward call.
struct ForwardCache {
  Matrix x;
  Matrix z;
  Vector sigma2_hat;   // statistic actually used to normalize
  Vector mu_hat;       // zero for un/mabn/pnstar
  Vector sigma2_t;     // raw current-iteration statistic (trace/diagnostics)
  bool used_filtration_drop = false;
  bool warmup_active = false;
  std::size_t step = 0;  // iteration index t of this forward
};

struct TrainForwardResult {
  Matrix y;
  ForwardCache cache;
};

struct BackwardResult {
  Matrix grad_x;
  Vector grad_gamma;
  Vector grad_beta;
  // Diagnostics: the raw per-batch gradient statistic of this step and the
  // estimates actually substituted into the input-gradient formula.
  Vector g_sigma2hat;
  Vector psi_applied;
  Vector psi_mu_applied;
};

struct FrozenStats {
  Vector mu;
  Vector sigma2;
};

// Frozen-statistics path: Y = gamma (X - mu) / sqrt(sigma2 + eps) + beta.
// Pure in x; requires an offline method and finite statistics.
Matrix inference_forward(const Matrix& x, const NormLayerState& state,
                         const NormMethodSpec& spec);

// One training iteration: computes the current statistic, applies the
// method's averaging function, normalizes, updates running statistics and
// window buffers, and advances the step counter.
TrainForwardResult train_forward(const Matrix& x, NormLayerState& state,
                                 const NormMethodSpec& spec);

// Backward for the immediately preceding train_forward call.
BackwardResult train_backward(const Matrix& grad_y, const ForwardCache& cache,
                              NormLayerState& state, const NormMethodSpec& spec);

// Running statistics for fusion / inference. Throws if no step was taken.
FrozenStats freeze_statistics(const NormLayerState& state);

}  // namespace unorm
