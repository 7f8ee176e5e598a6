#include "unorm/harness/task.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "unorm/rng.hpp"

namespace unorm::harness {

namespace {

// splitmix64 finalizer; decorrelates per-step streams from the task seed.
std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

SyntheticTask::BatchData SyntheticTask::make_batch(std::size_t step) const {
  if (batch == 0 || tokens == 0 || channels == 0) {
    throw std::invalid_argument("SyntheticTask: batch, tokens, channels must be >= 1");
  }
  SeededRng rng(mix(seed, step));
  const std::size_t rows = batch * tokens;
  BatchData out;
  out.x = rng.normal_matrix(rows, channels);

  // Targets are the clean signal: computed before injection so an outlier
  // batch stresses the activations, not the labels.
  if (kind == Kind::SequenceMeanRegression) {
    out.targets.assign(batch, 0.0);
    for (std::size_t s = 0; s < batch; ++s) {
      double acc = 0.0;
      for (std::size_t t = 0; t < tokens; ++t) {
        for (std::size_t j = 0; j < channels; ++j) acc += out.x(s * tokens + t, j);
      }
      out.targets[s] = acc / static_cast<double>(tokens * channels);
    }
  } else {
    out.targets.assign(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < channels; ++j) {
        if (out.x(r, j) > out.x(r, best)) best = j;
      }
      out.targets[r] = static_cast<double>(best);
    }
  }

  if (outlier_period > 0 && step > 0 && step % outlier_period == 0) {
    out.injected = true;
    const std::size_t hits = std::max<std::size_t>(1, rows / 4);
    std::vector<std::size_t> order(rows);
    for (std::size_t i = 0; i < rows; ++i) order[i] = i;
    for (std::size_t i = rows; i > 1; --i) {
      std::swap(order[i - 1],
                order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    }
    for (std::size_t k = 0; k < hits; ++k) {
      const std::size_t r = order[k];
      for (std::size_t j = 0; j < channels; ++j) out.x(r, j) *= outlier_magnitude;
    }
  }
  return out;
}

LossResult task_loss(SyntheticTask::Kind kind, const Matrix& output, const Vector& targets) {
  LossResult out;
  if (kind == SyntheticTask::Kind::SequenceMeanRegression) {
    if (output.cols() != 1 || output.rows() != targets.size()) {
      throw std::invalid_argument("task_loss: regression expects one prediction per sample");
    }
    const double inv_b = 1.0 / static_cast<double>(output.rows());
    out.grad = Matrix(output.rows(), 1);
    for (std::size_t i = 0; i < output.rows(); ++i) {
      const double r = output(i, 0) - targets[i];
      out.loss += r * r * inv_b;
      out.grad(i, 0) = 2.0 * r * inv_b;
    }
  } else {
    if (output.rows() != targets.size()) {
      throw std::invalid_argument("task_loss: classification expects one logit row per token");
    }
    const std::size_t classes = output.cols();
    const double inv_n = 1.0 / static_cast<double>(output.rows());
    out.grad = Matrix(output.rows(), classes);
    for (std::size_t i = 0; i < output.rows(); ++i) {
      double peak = output(i, 0);
      for (std::size_t j = 1; j < classes; ++j) peak = std::max(peak, output(i, j));
      double denom = 0.0;
      for (std::size_t j = 0; j < classes; ++j) denom += std::exp(output(i, j) - peak);
      const auto label = static_cast<std::size_t>(targets[i]);
      if (label >= classes) {
        throw std::invalid_argument("task_loss: label out of range");
      }
      for (std::size_t j = 0; j < classes; ++j) {
        const double p = std::exp(output(i, j) - peak) / denom;
        out.grad(i, j) = (p - (j == label ? 1.0 : 0.0)) * inv_n;
        if (j == label) out.loss -= std::log(std::max(p, 1e-300)) * inv_n;
      }
    }
  }
  return out;
}

}  // namespace unorm::harness
