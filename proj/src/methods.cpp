#include "unorm/methods.hpp"

#include <cmath>
#include <stdexcept>

namespace unorm {

namespace {

// Mean over the newest m_eff window entries, per channel.
Vector window_mean(const std::deque<Vector>& window, std::size_t m) {
  if (window.empty()) {
    throw std::logic_error("window_mean: empty window");
  }
  const std::size_t m_eff = std::min(m, window.size());
  Vector out(window.front().size(), 0.0);
  for (std::size_t i = 0; i < m_eff; ++i) {
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += window[i][c];
  }
  for (auto& v : out) v /= static_cast<double>(m_eff);
  return out;
}

// Geometric mean over the newest m_eff window entries, in log space. A zero
// entry (all-zero input column) collapses the mean to zero; the epsilon
// guard at normalization time decides whether that is usable.
Vector window_geomean(const std::deque<Vector>& window, std::size_t m) {
  if (window.empty()) {
    throw std::logic_error("window_geomean: empty window");
  }
  const std::size_t m_eff = std::min(m, window.size());
  Vector out(window.front().size(), 0.0);
  for (std::size_t i = 0; i < m_eff; ++i) {
    for (std::size_t c = 0; c < out.size(); ++c) {
      const double v = window[i][c];
      if (v < 0.0) {
        throw std::domain_error("window_geomean: negative entry");
      }
      out[c] += std::log(v);  // log(0) = -inf collapses the mean to 0
    }
  }
  for (auto& v : out) v = std::exp(v / static_cast<double>(m_eff));
  return out;
}

void ema_update(Vector& state, const Vector& current, double alpha) {
  for (std::size_t c = 0; c < state.size(); ++c) {
    state[c] = alpha * state[c] + (1.0 - alpha) * current[c];
  }
}

}  // namespace

AveragingStrategy::AveragingStrategy(Method method) : method_(method) {
  if (method == Method::LN) {
    throw std::invalid_argument("AveragingStrategy: ln is an online method");
  }
}

AveragingStrategy make_method(const NormMethodSpec& spec) {
  spec.validate();
  return AveragingStrategy(spec.method);
}

void AveragingStrategy::batch_statistics(const Matrix& x, Vector& mu_t,
                                         Vector& sigma2_t) const {
  if (method_ == Method::BN) {
    mu_t = column_reduce(x, ReduceKind::Mean);
    sigma2_t = column_reduce(x, ReduceKind::Variance);
  } else {
    mu_t.assign(x.cols(), 0.0);
    sigma2_t = column_reduce(x, ReduceKind::QuadraticMean);
  }
}

void AveragingStrategy::smooth(NormLayerState& state, const NormMethodSpec& spec,
                               const Vector& mu_t, const Vector& sigma2_t, bool warmup,
                               bool dropped, Vector& mu_hat, Vector& sigma2_hat) const {
  switch (method_) {
    case Method::BN:
      mu_hat = mu_t;
      sigma2_hat = sigma2_t;
      return;
    case Method::MABN:
    case Method::PNStar:
      mu_hat.assign(state.channels(), 0.0);
      ema_update(state.ema_sigma2, sigma2_t, spec.alpha);
      sigma2_hat = warmup ? sigma2_t : state.ema_sigma2;
      return;
    case Method::UN:
      mu_hat.assign(state.channels(), 0.0);
      if (warmup || dropped) {
        sigma2_hat = sigma2_t;
      } else {
        sigma2_hat = window_geomean(state.sigma2_window, spec.window_m);
      }
      return;
    case Method::LN:
      break;
  }
  throw std::logic_error("AveragingStrategy::smooth: bad method");
}

Vector AveragingStrategy::estimate_psi(NormLayerState& state, const NormMethodSpec& spec,
                                       const Vector& g_t, bool warmup, bool dropped) const {
  switch (method_) {
    case Method::BN:
      return g_t;
    case Method::MABN:
      return warmup ? g_t : window_mean(state.grad_window, spec.window_m);
    case Method::PNStar:
      ema_update(state.psi, g_t, spec.alpha);
      return warmup ? g_t : state.psi;
    case Method::UN: {
      if (dropped) {
        // Moving averages dropped for this step; the EMA state is untouched.
        return g_t;
      }
      const Vector blended = window_mean(state.grad_window, spec.window_m);
      ema_update(state.psi, blended, spec.alpha);
      return warmup ? g_t : state.psi;
    }
    case Method::LN:
      break;
  }
  throw std::logic_error("AveragingStrategy::estimate_psi: bad method");
}

LnForward ln_forward(const Matrix& x, const Vector& gamma, const Vector& beta, double eps) {
  const std::size_t rows = x.rows();
  const std::size_t c = x.cols();
  if (gamma.size() != c || beta.size() != c) {
    throw std::invalid_argument("ln_forward: affine length mismatch");
  }
  if (c < 2 && eps == 0.0) {
    throw std::invalid_argument("ln_forward: single channel with eps == 0");
  }
  LnForward out;
  out.y = Matrix(rows, c);
  out.z = Matrix(rows, c);
  out.inv_std.resize(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += x(i, j);
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = x(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    if (!(var + eps > 0.0)) {
      throw std::domain_error("ln_forward: zero variance row with eps == 0");
    }
    const double inv_std = 1.0 / std::sqrt(var + eps);
    out.inv_std[i] = inv_std;
    for (std::size_t j = 0; j < c; ++j) {
      const double z = (x(i, j) - mean) * inv_std;
      out.z(i, j) = z;
      out.y(i, j) = gamma[j] * z + beta[j];
    }
  }
  return out;
}

LnBackward ln_backward(const Matrix& grad_y, const Matrix& x, const LnForward& fwd,
                       const Vector& gamma) {
  const std::size_t rows = x.rows();
  const std::size_t c = x.cols();
  if (!grad_y.same_shape(x)) {
    throw std::invalid_argument("ln_backward: gradient shape mismatch");
  }
  LnBackward out;
  out.grad_x = Matrix(rows, c);
  out.grad_gamma.assign(c, 0.0);
  out.grad_beta.assign(c, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    double mean_dz = 0.0;
    double mean_dz_z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double dz = gamma[j] * grad_y(i, j);
      mean_dz += dz;
      mean_dz_z += dz * fwd.z(i, j);
      out.grad_gamma[j] += grad_y(i, j) * fwd.z(i, j);
      out.grad_beta[j] += grad_y(i, j);
    }
    mean_dz /= static_cast<double>(c);
    mean_dz_z /= static_cast<double>(c);
    for (std::size_t j = 0; j < c; ++j) {
      const double dz = gamma[j] * grad_y(i, j);
      out.grad_x(i, j) = fwd.inv_std[i] * (dz - mean_dz - fwd.z(i, j) * mean_dz_z);
    }
  }
  return out;
}

LnResult ln_forward_backward(const Matrix& x, const Vector& gamma, const Vector& beta,
                             double eps, const Matrix& grad_y) {
  LnForward fwd = ln_forward(x, gamma, beta, eps);
  LnBackward bwd = ln_backward(grad_y, x, fwd, gamma);
  return LnResult{std::move(fwd.y), std::move(bwd.grad_x), std::move(bwd.grad_gamma),
                  std::move(bwd.grad_beta)};
}

}  // namespace unorm
