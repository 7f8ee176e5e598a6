#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "unorm/matrix.hpp"
#include "unorm/norm_layer.hpp"
#include "unorm/norm_spec.hpp"
#include "unorm/rng.hpp"

namespace unorm {

struct TraceRecord {
  std::size_t step = 0;
  std::size_t layer = 0;
  std::size_t channel = 0;
  double sigma2_t = 0.0;
  double sigma2_hat = 0.0;
  double g = 0.0;    // raw per-batch second-moment gradient statistic
  double psi = 0.0;  // estimate actually applied in the backward pass
  bool trigger = false;
};

// Per-iteration, per-layer, per-channel record of training statistics.
// CSV columns: step,layer,channel,sigma2_t,sigma2_hat,g,psi,trigger.
struct StatsTrace {
  std::vector<TraceRecord> records;
  // Channels actually recorded (subsampling); empty comment when all.
  std::vector<std::size_t> recorded_channels;
  std::uint64_t subsample_seed = 0;

  void save_csv(const std::string& path) const;
  static StatsTrace load_csv(const std::string& path);
};

// p-value of the skewness-kurtosis omnibus normality statistic: sample skew
// and excess kurtosis are transformed to approximately standard-normal
// z-scores, K2 = z_s^2 + z_k^2 is referred to chi-square(2). Sequences must
// have length >= 20; a zero-variance sequence is defined maximally
// non-normal (p = 0).
double normality_test(const Vector& sequence);

struct PnacReport {
  std::size_t layer = 0;
  std::size_t window_start = 0;
  std::size_t window_end = 0;  // exclusive
  std::string which;           // "sigma2" or "grad"
  double pnac_percent = 0.0;   // 100 * (#channels with p > 0.05) / C
  std::size_t sample_window_len = 0;
  std::size_t channels = 0;
};

enum class PnacStat { Sigma2, Grad };

// Applies the normality test per channel to the chosen statistic sequence
// over [window_start, window_end) steps of one layer.
PnacReport compute_pnac(const StatsTrace& trace, std::size_t layer,
                        std::size_t window_start, std::size_t window_end, PnacStat which);

void save_pnac_csv(const std::vector<PnacReport>& reports, const std::string& path);

// Builds a fresh or mid-training layer state for gradient checking.
using LayerBuilder = std::function<NormLayerState(std::size_t channels, SeededRng& rng)>;

struct GradcheckReport {
  std::size_t trials = 0;
  double max_rel_err_fd = 0.0;   // check (a): exact regime vs central differences
  double max_err_eq7 = 0.0;      // check (b): vs independent input-gradient formula
  bool exact_regime_checked = false;
  bool pass = false;
};

// Check (a) runs only when the method is in the exact-gradient regime for
// the built state (bn always; un/mabn/pnstar while warmup is active).
// Check (b) re-evaluates the input gradient with an independent
// implementation fed the same psi estimates and must agree to 1e-10.
GradcheckReport gradcheck(const LayerBuilder& builder, const NormMethodSpec& spec,
                          std::size_t trials, double tol);

// Independent evaluation of the input gradient
//   (1/sqrt(sigma2_hat + eps)) (gamma*grad_y - psi_mu - z*psi_sigma2)
// used as the reference for gradcheck's check (b).
Matrix input_gradient_reference(const Matrix& grad_y, const Vector& gamma, const Matrix& z,
                                const Vector& sigma2_hat, double eps, const Vector& psi_mu,
                                const Vector& psi_sigma2);

struct OutlierAccumulation {
  std::vector<std::size_t> layers;
  // cumulative[l][k] = number of triggered steps of layer l among the first
  // k+1 recorded steps.
  std::vector<std::vector<std::size_t>> cumulative;
  std::vector<std::size_t> steps;

  void save_csv(const std::string& path) const;
};

// Accumulated moving-average-drop counts per layer over training.
OutlierAccumulation outlier_accumulation(const StatsTrace& trace);

}  // namespace unorm
