#include "unorm/outlier.hpp"

#include <cmath>
#include <stdexcept>

namespace unorm {

namespace {

void check_window(const WindowSnapshot& w) {
  if (w.values.empty()) {
    throw std::invalid_argument("window: empty");
  }
  const std::size_t c = w.values.front().size();
  for (const auto& entry : w.values) {
    if (entry.size() != c) {
      throw std::invalid_argument("window: ragged channel vectors");
    }
    for (double v : entry) {
      if (!(v > 0.0)) {
        throw std::domain_error("window: nonpositive entry (geometric mean undefined)");
      }
    }
  }
}

}  // namespace

WindowOperators window_operators(const WindowSnapshot& w) {
  check_window(w);
  const std::size_t m = w.length();
  const std::size_t c = w.channels();
  WindowOperators out;
  out.am.assign(c, 0.0);
  out.gm.assign(c, 0.0);
  out.var_sqrt.assign(c, 0.0);
  Vector mean_sqrt(c, 0.0);
  for (const auto& entry : w.values) {
    for (std::size_t j = 0; j < c; ++j) {
      out.am[j] += entry[j];
      out.gm[j] += std::log(entry[j]);
      mean_sqrt[j] += std::sqrt(entry[j]);
    }
  }
  const double inv_m = 1.0 / static_cast<double>(m);
  for (std::size_t j = 0; j < c; ++j) {
    out.am[j] *= inv_m;
    out.gm[j] = std::exp(out.gm[j] * inv_m);
    mean_sqrt[j] *= inv_m;
  }
  // Population variance of the square roots.
  for (const auto& entry : w.values) {
    for (std::size_t j = 0; j < c; ++j) {
      const double d = std::sqrt(entry[j]) - mean_sqrt[j];
      out.var_sqrt[j] += d * d;
    }
  }
  for (std::size_t j = 0; j < c; ++j) out.var_sqrt[j] *= inv_m;
  return out;
}

FiltrationDecision detect_outlier(const WindowSnapshot& current,
                                  const WindowSnapshot& previous, std::size_t m) {
  if (current.length() != m || previous.length() != m) {
    throw std::invalid_argument("detect_outlier: windows must both have length m");
  }
  if (current.channels() != previous.channels()) {
    throw std::invalid_argument("detect_outlier: channel count mismatch");
  }
  if (m < 2) {
    throw std::invalid_argument("detect_outlier: m must be >= 2");
  }
  const WindowOperators cur = window_operators(current);
  const WindowOperators prev = window_operators(previous);
  const std::size_t c = current.channels();
  FiltrationDecision d;
  d.lhs.resize(c);
  d.rhs.resize(c);
  for (std::size_t j = 0; j < c; ++j) {
    d.lhs[j] = cur.am[j] - cur.gm[j];
    d.rhs[j] = static_cast<double>(m) * prev.var_sqrt[j];
    if (d.lhs[j] > d.rhs[j]) ++d.per_channel_triggers;
  }
  d.triggered = d.per_channel_triggers >= 1;
  return d;
}

void apply_filtration(const FiltrationDecision& decision, NormLayerState& state) {
  if (!decision.triggered) {
    return;
  }
  state.pending_drop = true;
  // Passivate the just-recorded statistic with the running inference value;
  // the backward pass passivates its own record with the psi state.
  if (!state.sigma2_window.empty()) {
    state.sigma2_window.front() = state.run_sigma2;
  }
  state.outlier_events.push_back({state.step, decision.per_channel_triggers});
}

Lemma1Result verify_lemma1(const Vector& a_prev, double a_t) {
  if (a_prev.empty()) {
    throw std::invalid_argument("verify_lemma1: previous entries required");
  }
  if (!(a_t > 0.0)) {
    throw std::invalid_argument("verify_lemma1: a_t must be positive");
  }
  for (double a : a_prev) {
    if (!(a > 0.0)) {
      throw std::invalid_argument("verify_lemma1: entries must be positive");
    }
  }
  const std::size_t m = a_prev.size() + 1;

  // lambda = Pi(A_t) / a_t with A_t = (a_t, a_prev...), via log space.
  double log_sum = std::log(a_t);
  for (double a : a_prev) log_sum += std::log(a);
  const double gm = std::exp(log_sum / static_cast<double>(m));

  Lemma1Result out;
  out.lambda = gm / a_t;

  bool dominated = true;
  for (double a : a_prev) {
    if (!(a < a_t)) dominated = false;
  }

  // Threshold side: M * V(a_prev^1/2) < E(A_t) - Pi(A_t).
  double mean_sqrt = 0.0;
  for (double a : a_prev) mean_sqrt += std::sqrt(a);
  mean_sqrt /= static_cast<double>(a_prev.size());
  double var_sqrt = 0.0;
  for (double a : a_prev) {
    const double d = std::sqrt(a) - mean_sqrt;
    var_sqrt += d * d;
  }
  var_sqrt /= static_cast<double>(a_prev.size());

  double am = a_t;
  for (double a : a_prev) am += a;
  am /= static_cast<double>(m);

  const bool threshold = static_cast<double>(m) * var_sqrt < am - gm;
  out.premise_holds = dominated && threshold;
  return out;
}

CorollaryResult verify_corollary(const std::vector<Vector>& mild_window,
                                 const Matrix& outlier_input) {
  if (mild_window.size() < 2) {
    throw std::invalid_argument("verify_corollary: window must have length >= 2");
  }
  const std::size_t m = mild_window.size();
  const std::size_t c = outlier_input.cols();
  for (const auto& entry : mild_window) {
    if (entry.size() != c) {
      throw std::invalid_argument("verify_corollary: channel count mismatch");
    }
    for (double v : entry) {
      if (!(v > 0.0)) {
        throw std::domain_error("verify_corollary: window entries must be positive");
      }
    }
  }

  CorollaryResult out;
  out.sigma2_t = column_reduce(outlier_input, ReduceKind::QuadraticMean);
  out.ratio.resize(c);

  // Current window: sigma2_t plus the newest m-1 previous entries.
  // The smoothing map is s -> (s * p)^(1/m) with p the product of the other
  // entries; its derivative at sigma2_t is (1/m) * gm / sigma2_t, which is
  // exactly the factor between the true chain-rule gradient and the
  // estimator's value. Cross-check the analytic derivative with central
  // finite differences before reporting.
  bool premise = true;
  for (std::size_t j = 0; j < c; ++j) {
    const double s = out.sigma2_t[j];
    if (!(s > 0.0)) {
      throw std::domain_error("verify_corollary: input has zero second moment");
    }
    double log_rest = 0.0;
    for (std::size_t i = 0; i + 1 < m; ++i) {
      log_rest += std::log(mild_window[i][j]);
      if (!(mild_window[i][j] < s)) premise = false;
    }
    const auto gm_of = [&](double st) {
      return std::exp((std::log(st) + log_rest) / static_cast<double>(m));
    };
    const double gm = gm_of(s);
    const double analytic = gm / (static_cast<double>(m) * s);
    const double h = s * 1e-6;
    const double fd = (gm_of(s + h) - gm_of(s - h)) / (2.0 * h);
    if (std::fabs(fd - analytic) > 1e-6 * std::max(1.0, std::fabs(analytic))) {
      throw std::runtime_error("verify_corollary: derivative cross-check failed");
    }
    out.ratio[j] = analytic;
    out.worst_ratio = std::max(out.worst_ratio, analytic);
  }

  // Lemma premise: dominance over the whole previous window plus the
  // threshold inequality on the current one.
  if (premise) {
    for (std::size_t j = 0; j < c; ++j) {
      Vector prev_channel(m);
      for (std::size_t i = 0; i < m; ++i) prev_channel[i] = mild_window[i][j];
      Vector a_prev(prev_channel.begin(), prev_channel.begin() + (m - 1));
      // Dominance over the full previous window.
      for (double v : prev_channel) {
        if (!(v < out.sigma2_t[j])) premise = false;
      }
      if (!premise) break;
      const Lemma1Result lemma = verify_lemma1(a_prev, out.sigma2_t[j]);
      if (!lemma.premise_holds) premise = false;
    }
  }
  out.premise_holds = premise;
  return out;
}

}  // namespace unorm
