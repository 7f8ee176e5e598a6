#include "unorm/norm_layer.hpp"

#include <cmath>
#include <stdexcept>

#include "unorm/methods.hpp"
#include "unorm/opcount.hpp"
#include "unorm/outlier.hpp"

namespace unorm {

NormLayerState NormLayerState::init(std::size_t channels) {
  if (channels == 0) {
    throw std::invalid_argument("NormLayerState::init: channels must be >= 1");
  }
  NormLayerState s;
  s.gamma.assign(channels, 1.0);
  s.beta.assign(channels, 0.0);
  s.run_mu.assign(channels, 0.0);
  s.run_sigma2.assign(channels, 1.0);
  s.psi.assign(channels, 0.0);
  s.ema_sigma2.assign(channels, 1.0);
  return s;
}

namespace {

void check_channels(const Matrix& x, const NormLayerState& state) {
  if (x.cols() != state.channels()) {
    throw std::invalid_argument("normalization: channel count mismatch (" +
                                std::to_string(x.cols()) + " vs " +
                                std::to_string(state.channels()) + ")");
  }
}

void push_window(std::deque<Vector>& window, Vector entry, std::size_t m) {
  window.push_front(std::move(entry));
  while (window.size() > m) window.pop_back();
}

bool finite_vector(const Vector& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace

Matrix inference_forward(const Matrix& x, const NormLayerState& state,
                         const NormMethodSpec& spec) {
  spec.validate();
  if (!spec.offline()) {
    throw std::invalid_argument("inference_forward: ln has no frozen statistics");
  }
  check_channels(x, state);
  if (!finite_vector(state.run_mu) || !finite_vector(state.run_sigma2)) {
    throw std::domain_error("inference_forward: non-finite statistics");
  }
  const std::size_t c = x.cols();
  Vector denom(c);
  for (std::size_t j = 0; j < c; ++j) {
    const double s2 = state.run_sigma2[j] + spec.epsilon;
    if (!(s2 > 0.0)) {
      throw std::domain_error("inference_forward: nonpositive sigma^2 + eps");
    }
    denom[j] = std::sqrt(s2);
  }
  opcount::add_sqrts(c);
  Matrix y(x.rows(), c);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      y(i, j) = state.gamma[j] * ((x(i, j) - state.run_mu[j]) / denom[j]) + state.beta[j];
    }
  }
  opcount::add_divisions(x.rows() * c);
  return y;
}

TrainForwardResult train_forward(const Matrix& x, NormLayerState& state,
                                 const NormMethodSpec& spec) {
  AveragingStrategy strategy = make_method(spec);
  check_channels(x, state);
  if (!x.all_finite()) {
    throw std::domain_error("train_forward: non-finite input");
  }

  const std::size_t c = state.channels();
  const bool warmup = state.step < spec.warmup_steps;

  Vector mu_t, sigma2_t;
  strategy.batch_statistics(x, mu_t, sigma2_t);

  // Outlier filtration needs two consecutive full windows and is inert
  // during warmup and for the first M post-warmup steps.
  bool dropped = false;
  if (spec.method == Method::UN && spec.filtration && !warmup &&
      state.step >= spec.warmup_steps + spec.window_m &&
      state.sigma2_window.size() == spec.window_m) {
    WindowSnapshot previous;
    previous.values.assign(state.sigma2_window.begin(), state.sigma2_window.end());
    push_window(state.sigma2_window, sigma2_t, spec.window_m);
    WindowSnapshot current;
    current.values.assign(state.sigma2_window.begin(), state.sigma2_window.end());
    const FiltrationDecision decision = detect_outlier(current, previous, spec.window_m);
    apply_filtration(decision, state);
    dropped = state.pending_drop;
    state.pending_drop = false;
  } else {
    push_window(state.sigma2_window, sigma2_t, spec.window_m);
  }

  Vector mu_hat, sigma2_hat;
  strategy.smooth(state, spec, mu_t, sigma2_t, warmup, dropped, mu_hat, sigma2_hat);

  Vector denom(c);
  for (std::size_t j = 0; j < c; ++j) {
    const double s2 = sigma2_hat[j] + spec.epsilon;
    if (!(s2 > 0.0)) {
      throw std::domain_error("train_forward: sigma^2 + eps is not positive (channel " +
                              std::to_string(j) + ")");
    }
    denom[j] = std::sqrt(s2);
  }

  TrainForwardResult out;
  out.cache.x = x;
  out.cache.z = Matrix(x.rows(), c);
  out.y = Matrix(x.rows(), c);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const double z = (x(i, j) - mu_hat[j]) / denom[j];
      out.cache.z(i, j) = z;
      out.y(i, j) = state.gamma[j] * z + state.beta[j];
    }
  }

  // Running inference statistics blend the values actually applied this
  // step. A filtration drop suspends the blend as well: the applied value is
  // an identified outlier and must not leak into the inference statistics.
  if (!dropped) {
    for (std::size_t j = 0; j < c; ++j) {
      state.run_mu[j] = spec.alpha * state.run_mu[j] + (1.0 - spec.alpha) * mu_hat[j];
      state.run_sigma2[j] =
          spec.alpha * state.run_sigma2[j] + (1.0 - spec.alpha) * sigma2_hat[j];
    }
  }

  out.cache.sigma2_hat = std::move(sigma2_hat);
  out.cache.mu_hat = std::move(mu_hat);
  out.cache.sigma2_t = std::move(sigma2_t);
  out.cache.used_filtration_drop = dropped;
  out.cache.warmup_active = warmup;
  out.cache.step = state.step;
  state.step += 1;
  return out;
}

BackwardResult train_backward(const Matrix& grad_y, const ForwardCache& cache,
                              NormLayerState& state, const NormMethodSpec& spec) {
  AveragingStrategy strategy = make_method(spec);
  if (cache.step + 1 != state.step) {
    throw std::invalid_argument("train_backward: cache does not match the layer step");
  }
  if (!grad_y.same_shape(cache.z)) {
    throw std::invalid_argument("train_backward: gradient shape mismatch");
  }
  const std::size_t rows = grad_y.rows();
  const std::size_t c = state.channels();
  const double inv_b = 1.0 / static_cast<double>(rows);

  BackwardResult out;
  out.grad_gamma.assign(c, 0.0);
  out.grad_beta.assign(c, 0.0);

  // dL/dZ = gamma * dL/dY; per-batch gradient statistics.
  Matrix dz(rows, c);
  Vector g_mu(c, 0.0);
  Vector g_sigma2(c, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const double gy = grad_y(i, j);
      const double z = cache.z(i, j);
      const double d = state.gamma[j] * gy;
      dz(i, j) = d;
      g_mu[j] += d;
      g_sigma2[j] += d * z;
      out.grad_gamma[j] += gy * z;
      out.grad_beta[j] += gy;
    }
  }
  for (std::size_t j = 0; j < c; ++j) {
    g_mu[j] *= inv_b;
    g_sigma2[j] *= inv_b;
  }

  push_window(state.grad_window,
              cache.used_filtration_drop ? state.psi : g_sigma2, spec.window_m);

  Vector psi = strategy.estimate_psi(state, spec, g_sigma2, cache.warmup_active,
                                     cache.used_filtration_drop);
  Vector psi_mu(c, 0.0);
  if (strategy.uses_first_moment()) {
    psi_mu = g_mu;
  }

  out.grad_x = Matrix(rows, c);
  for (std::size_t j = 0; j < c; ++j) {
    const double inv_std = 1.0 / std::sqrt(cache.sigma2_hat[j] + spec.epsilon);
    for (std::size_t i = 0; i < rows; ++i) {
      out.grad_x(i, j) = inv_std * (dz(i, j) - psi_mu[j] - cache.z(i, j) * psi[j]);
    }
  }

  out.g_sigma2hat = std::move(g_sigma2);
  out.psi_applied = std::move(psi);
  out.psi_mu_applied = std::move(psi_mu);
  return out;
}

FrozenStats freeze_statistics(const NormLayerState& state) {
  if (state.step == 0) {
    throw std::logic_error("freeze_statistics: no training step taken");
  }
  return FrozenStats{state.run_mu, state.run_sigma2};
}

}  // namespace unorm
