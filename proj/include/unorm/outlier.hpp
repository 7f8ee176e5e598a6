#pragma once

#include <cstddef>

#include "unorm/matrix.hpp"
#include "unorm/norm_layer.hpp"

namespace unorm {

// A window of recent per-channel second-moment statistics, newest first.
struct WindowSnapshot {
  std::vector<Vector> values;

  std::size_t length() const { return values.size(); }
  std::size_t channels() const { return values.empty() ? 0 : values.front().size(); }
};

struct WindowOperators {
  Vector am;        // arithmetic mean per channel
  Vector gm;        // geometric mean per channel (computed in log space)
  Vector var_sqrt;  // population variance of the square roots per channel
};

// Per-channel E, Pi and V(.^1/2) over the window. Entries must be strictly
// positive (the geometric mean is undefined otherwise).
WindowOperators window_operators(const WindowSnapshot& w);

struct FiltrationDecision {
  bool triggered = false;
  std::size_t per_channel_triggers = 0;
  Vector lhs;  // E(current) - Pi(current) per channel
  Vector rhs;  // m * V(previous^1/2) per channel
};

// Adaptive threshold test: a channel triggers when
// E(current) - Pi(current) > m * V(previous^1/2). The layer-wide decision
// fires when any channel triggers. Pure; both windows must be full.
FiltrationDecision detect_outlier(const WindowSnapshot& current,
                                  const WindowSnapshot& previous, std::size_t m);

// Marks the in-flight step as a moving-average drop: the newest recorded
// second-moment entry is passivated with the running inference statistic,
// the event is logged, and the backward pass is told (through the forward
// cache) to use the raw per-batch gradient and passivate its own record.
// No effect when the decision did not trigger.
void apply_filtration(const FiltrationDecision& decision, NormLayerState& state);

struct Lemma1Result {
  double lambda = 0.0;     // Pi(A_t) / a_t
  bool premise_holds = false;
};

// Checks the window-dominance lemma on a concrete instance: A_t is a_t
// prepended to a_prev (window size M = a_prev.size() + 1). premise_holds
// requires every a_i < a_t and M * V(a_prev^1/2) < E(A_t) - Pi(A_t);
// whenever it holds, lambda < 1. Entries must be positive.
Lemma1Result verify_lemma1(const Vector& a_prev, double a_t);

struct CorollaryResult {
  Vector ratio;            // per channel: true gradient / estimated gradient
  double worst_ratio = 0.0;
  Vector sigma2_t;
  bool premise_holds = false;
};

// Gradient-shrinkage check for the geometric-mean estimator: with a full
// window of mild statistics and an input whose second moment dominates all
// of them, the true chain-rule gradient through the window smoothing is the
// estimator's value scaled by (1/M) * Pi(window) / sigma2_t < 1/M. The
// analytic derivative is cross-checked against central finite differences.
// mild_window is the previous window, newest first, with M = length entries.
CorollaryResult verify_corollary(const std::vector<Vector>& mild_window,
                                 const Matrix& outlier_input);

}  // namespace unorm
