#pragma once

#include "unorm/matrix.hpp"
#include "unorm/norm_layer.hpp"
#include "unorm/norm_spec.hpp"

namespace unorm {

// One (forward_rule, backward_rule) pair per offline method:
//
//   bn      mean + variance statistics, current iteration only, exact backward
//   mabn    quadratic mean, EMA forward, window-mean gradient estimate
//   pnstar  quadratic mean, EMA forward, EMA gradient estimate
//   un      quadratic mean, geometric-mean window forward,
//           EMA-of-window-mean gradient estimate
//
// During warmup every method applies the raw current-iteration values while
// the moving-average state keeps tracking in the background. On a
// filtration-drop step (un only) the raw values are applied and the EMA
// state is left untouched.
class AveragingStrategy {
 public:
  explicit AveragingStrategy(Method method);

  Method method() const { return method_; }
  bool uses_first_moment() const { return method_ == Method::BN; }

  // Current-iteration statistics of the batch.
  void batch_statistics(const Matrix& x, Vector& mu_t, Vector& sigma2_t) const;

  // Forward averaging function. Expects the current sigma2_t to be already
  // recorded in state.sigma2_window. Updates EMA state where the method
  // keeps one.
  void smooth(NormLayerState& state, const NormMethodSpec& spec, const Vector& mu_t,
              const Vector& sigma2_t, bool warmup, bool dropped, Vector& mu_hat,
              Vector& sigma2_hat) const;

  // Backward averaging function for the second-moment gradient statistic.
  // Expects g_t to be already recorded in state.grad_window (passivated on
  // drop steps). Updates the psi EMA state where the method keeps one.
  Vector estimate_psi(NormLayerState& state, const NormMethodSpec& spec,
                      const Vector& g_t, bool warmup, bool dropped) const;

 private:
  Method method_;
};

// Throws on ln (online method, no averaging strategy) and unknown tags.
AveragingStrategy make_method(const NormMethodSpec& spec);

// Online layer-normalization reference: per-row mean/variance over channels
// with per-channel affine. Stateless, never fusable.
struct LnForward {
  Matrix y;
  Matrix z;          // normalized rows
  Vector inv_std;    // per row
};

LnForward ln_forward(const Matrix& x, const Vector& gamma, const Vector& beta, double eps);

struct LnBackward {
  Matrix grad_x;
  Vector grad_gamma;
  Vector grad_beta;
};

LnBackward ln_backward(const Matrix& grad_y, const Matrix& x, const LnForward& fwd,
                       const Vector& gamma);

struct LnResult {
  Matrix y;
  Matrix grad_x;
  Vector grad_gamma;
  Vector grad_beta;
};

// Combined forward + exact analytic backward in one call.
LnResult ln_forward_backward(const Matrix& x, const Vector& gamma, const Vector& beta,
                             double eps, const Matrix& grad_y);

}  // namespace unorm
