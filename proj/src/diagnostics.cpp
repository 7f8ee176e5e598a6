#include "unorm/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

namespace unorm {

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void StatsTrace::save_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("StatsTrace::save_csv: cannot open " + path);
  }
  if (!recorded_channels.empty()) {
    out << "# channels:";
    for (std::size_t c : recorded_channels) out << " " << c;
    out << "\n# subsample_seed: " << subsample_seed << "\n";
  }
  out << "step,layer,channel,sigma2_t,sigma2_hat,g,psi,trigger\n";
  for (const auto& r : records) {
    out << r.step << "," << r.layer << "," << r.channel << "," << format_double(r.sigma2_t)
        << "," << format_double(r.sigma2_hat) << "," << format_double(r.g) << ","
        << format_double(r.psi) << "," << (r.trigger ? 1 : 0) << "\n";
  }
}

StatsTrace StatsTrace::load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("StatsTrace::load_csv: cannot open " + path);
  }
  StatsTrace trace;
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream cs(line.substr(1));
      std::string key;
      cs >> key;
      if (key == "channels:") {
        std::size_t c;
        while (cs >> c) trace.recorded_channels.push_back(c);
      } else if (key == "subsample_seed:") {
        cs >> trace.subsample_seed;
      }
      continue;
    }
    if (!header_seen) {
      if (line.rfind("step,", 0) != 0) {
        throw std::runtime_error("StatsTrace::load_csv: unexpected header '" + line + "'");
      }
      header_seen = true;
      continue;
    }
    std::istringstream ls(line);
    std::string cell;
    TraceRecord r;
    auto next = [&]() {
      if (!std::getline(ls, cell, ',')) {
        throw std::runtime_error("StatsTrace::load_csv: short row");
      }
      return cell;
    };
    r.step = std::stoull(next());
    r.layer = std::stoull(next());
    r.channel = std::stoull(next());
    r.sigma2_t = std::stod(next());
    r.sigma2_hat = std::stod(next());
    r.g = std::stod(next());
    r.psi = std::stod(next());
    r.trigger = std::stoi(next()) != 0;
    trace.records.push_back(r);
  }
  return trace;
}

namespace {

// z-score of the sample skewness (D'Agostino's transformation).
double skewness_z(double g1, double n) {
  const double y = g1 * std::sqrt((n + 1.0) * (n + 3.0) / (6.0 * (n - 2.0)));
  const double beta2 = 3.0 * (n * n + 27.0 * n - 70.0) * (n + 1.0) * (n + 3.0) /
                       ((n - 2.0) * (n + 5.0) * (n + 7.0) * (n + 9.0));
  const double w2 = -1.0 + std::sqrt(2.0 * (beta2 - 1.0));
  const double delta = 1.0 / std::sqrt(0.5 * std::log(w2));
  const double alpha = std::sqrt(2.0 / (w2 - 1.0));
  const double yy = (y == 0.0) ? 1.0 : y;
  return delta * std::log(yy / alpha + std::sqrt((yy / alpha) * (yy / alpha) + 1.0));
}

// z-score of the sample kurtosis (Anscombe-Glynn transformation).
double kurtosis_z(double b2, double n) {
  const double mean_b2 = 3.0 * (n - 1.0) / (n + 1.0);
  const double var_b2 =
      24.0 * n * (n - 2.0) * (n - 3.0) / ((n + 1.0) * (n + 1.0) * (n + 3.0) * (n + 5.0));
  const double x = (b2 - mean_b2) / std::sqrt(var_b2);
  const double sqrt_beta1 = 6.0 * (n * n - 5.0 * n + 2.0) / ((n + 7.0) * (n + 9.0)) *
                            std::sqrt(6.0 * (n + 3.0) * (n + 5.0) / (n * (n - 2.0) * (n - 3.0)));
  const double a =
      6.0 + 8.0 / sqrt_beta1 *
                (2.0 / sqrt_beta1 + std::sqrt(1.0 + 4.0 / (sqrt_beta1 * sqrt_beta1)));
  const double term1 = 1.0 - 2.0 / (9.0 * a);
  const double denom = 1.0 + x * std::sqrt(2.0 / (a - 4.0));
  if (denom == 0.0) {
    return std::numeric_limits<double>::infinity();
  }
  const double sign = denom < 0.0 ? -1.0 : 1.0;
  const double term2 = sign * std::cbrt((1.0 - 2.0 / a) / std::fabs(denom));
  return (term1 - term2) / std::sqrt(2.0 / (9.0 * a));
}

}  // namespace

double normality_test(const Vector& sequence) {
  const std::size_t len = sequence.size();
  if (len < 20) {
    throw std::invalid_argument("normality_test: sequence length must be >= 20");
  }
  const double n = static_cast<double>(len);
  double mean = 0.0;
  for (double v : sequence) mean += v;
  mean /= n;
  double m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (double v : sequence) {
    const double d = v - mean;
    m2 += d * d;
    m3 += d * d * d;
    m4 += d * d * d * d;
  }
  m2 /= n;
  m3 /= n;
  m4 /= n;
  if (m2 == 0.0) {
    return 0.0;  // degenerate constant sequence: maximally non-normal
  }
  const double g1 = m3 / std::pow(m2, 1.5);
  const double b2 = m4 / (m2 * m2);
  const double zs = skewness_z(g1, n);
  const double zk = kurtosis_z(b2, n);
  const double k2 = zs * zs + zk * zk;
  if (!std::isfinite(k2)) {
    return 0.0;
  }
  // chi-square(2) survival function.
  return std::exp(-0.5 * k2);
}

PnacReport compute_pnac(const StatsTrace& trace, std::size_t layer,
                        std::size_t window_start, std::size_t window_end, PnacStat which) {
  std::map<std::size_t, Vector> per_channel;
  for (const auto& r : trace.records) {
    if (r.layer != layer || r.step < window_start || r.step >= window_end) continue;
    per_channel[r.channel].push_back(which == PnacStat::Sigma2 ? r.sigma2_t : r.g);
  }
  if (per_channel.empty()) {
    throw std::invalid_argument("compute_pnac: no records for layer in window");
  }
  std::size_t passed = 0;
  std::size_t len = 0;
  for (const auto& [channel, seq] : per_channel) {
    (void)channel;
    len = seq.size();
    if (normality_test(seq) > 0.05) ++passed;
  }
  PnacReport report;
  report.layer = layer;
  report.window_start = window_start;
  report.window_end = window_end;
  report.which = which == PnacStat::Sigma2 ? "sigma2" : "grad";
  report.pnac_percent =
      100.0 * static_cast<double>(passed) / static_cast<double>(per_channel.size());
  report.sample_window_len = len;
  report.channels = per_channel.size();
  return report;
}

void save_pnac_csv(const std::vector<PnacReport>& reports, const std::string& path) {
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("save_pnac_csv: cannot open " + path);
  }
  out << "layer,window_start,window_end,which,pnac\n";
  for (const auto& r : reports) {
    out << r.layer << "," << r.window_start << "," << r.window_end << "," << r.which << ","
        << format_double(r.pnac_percent) << "\n";
  }
}

Matrix input_gradient_reference(const Matrix& grad_y, const Vector& gamma, const Matrix& z,
                                const Vector& sigma2_hat, double eps, const Vector& psi_mu,
                                const Vector& psi_sigma2) {
  Matrix out(grad_y.rows(), grad_y.cols());
  for (std::size_t i = 0; i < grad_y.rows(); ++i) {
    for (std::size_t j = 0; j < grad_y.cols(); ++j) {
      const double dz = gamma[j] * grad_y(i, j);
      out(i, j) = (dz - psi_mu[j] - z(i, j) * psi_sigma2[j]) / std::sqrt(sigma2_hat[j] + eps);
    }
  }
  return out;
}

GradcheckReport gradcheck(const LayerBuilder& builder, const NormMethodSpec& spec,
                          std::size_t trials, double tol) {
  GradcheckReport report;
  report.trials = trials;
  constexpr std::size_t kRows = 8;
  constexpr std::size_t kCols = 4;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    SeededRng rng(0x9e3779b9u + trial);
    NormLayerState state = builder(kCols, rng);
    const Matrix x = rng.normal_matrix(kRows, kCols);
    const Matrix direction = rng.normal_matrix(kRows, kCols);

    const bool exact_regime =
        spec.method == Method::BN || state.step < spec.warmup_steps;
    NormLayerState work = state;
    const TrainForwardResult fwd = train_forward(x, work, spec);
    const BackwardResult bwd = train_backward(direction, fwd.cache, work, spec);

    if (exact_regime) {
      report.exact_regime_checked = true;
      const auto loss = [&](const Matrix& probe) {
        NormLayerState fresh = state;
        const TrainForwardResult r = train_forward(probe, fresh, spec);
        double acc = 0.0;
        for (std::size_t i = 0; i < r.y.size(); ++i) {
          acc += r.y.values()[i] * direction.values()[i];
        }
        return acc;
      };
      const Matrix fd = finite_difference_gradient(loss, x, 1e-5);
      double scale = 0.0;
      for (double v : fd.values()) scale = std::max(scale, std::fabs(v));
      const double rel = max_abs_diff(fd, bwd.grad_x) / std::max(scale, 1e-12);
      report.max_rel_err_fd = std::max(report.max_rel_err_fd, rel);
    }

    const Matrix reference =
        input_gradient_reference(direction, state.gamma, fwd.cache.z, fwd.cache.sigma2_hat,
                                 spec.epsilon, bwd.psi_mu_applied, bwd.psi_applied);
    report.max_err_eq7 = std::max(report.max_err_eq7, max_abs_diff(reference, bwd.grad_x));
  }
  report.pass = report.max_err_eq7 <= 1e-10 &&
                (!report.exact_regime_checked || report.max_rel_err_fd <= tol);
  return report;
}

OutlierAccumulation outlier_accumulation(const StatsTrace& trace) {
  // Any channel record marks the (step, layer) as triggered.
  std::map<std::size_t, std::map<std::size_t, bool>> by_step_layer;
  std::map<std::size_t, bool> layer_set;
  for (const auto& r : trace.records) {
    by_step_layer[r.step][r.layer] = by_step_layer[r.step][r.layer] || r.trigger;
    layer_set[r.layer] = true;
  }
  OutlierAccumulation out;
  for (const auto& [layer, unused] : layer_set) {
    (void)unused;
    out.layers.push_back(layer);
  }
  out.cumulative.assign(out.layers.size(), {});
  std::vector<std::size_t> totals(out.layers.size(), 0);
  for (const auto& [step, layers] : by_step_layer) {
    out.steps.push_back(step);
    for (std::size_t li = 0; li < out.layers.size(); ++li) {
      const auto it = layers.find(out.layers[li]);
      if (it != layers.end() && it->second) ++totals[li];
      out.cumulative[li].push_back(totals[li]);
    }
  }
  return out;
}

void OutlierAccumulation::save_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("OutlierAccumulation::save_csv: cannot open " + path);
  }
  out << "step,layer,cumulative_triggers\n";
  for (std::size_t si = 0; si < steps.size(); ++si) {
    for (std::size_t li = 0; li < layers.size(); ++li) {
      out << steps[si] << "," << layers[li] << "," << cumulative[li][si] << "\n";
    }
  }
}

}  // namespace unorm
