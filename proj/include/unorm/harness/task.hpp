#pragma once

#include <cstdint>

#include "unorm/matrix.hpp"

namespace unorm::harness {

// Deterministic synthetic stimulus. Inputs are standard-normal token rows;
// an optional outlier stream scales a random quarter of the rows in every
// `outlier_period`-th batch by `outlier_magnitude`.
struct SyntheticTask {
  enum class Kind { SequenceMeanRegression, TokenCopyClassification };

  Kind kind = Kind::SequenceMeanRegression;
  std::size_t batch = 32;
  std::size_t tokens = 8;
  std::size_t channels = 16;
  std::size_t outlier_period = 0;  // 0 disables injection
  double outlier_magnitude = 0.0;
  std::uint64_t seed = 1;

  struct BatchData {
    Matrix x;        // (batch * tokens) x channels
    Vector targets;  // regression: one per sample; classification: one per token
    bool injected = false;
  };

  // Fully determined by (task fields, step).
  BatchData make_batch(std::size_t step) const;
};

struct LossResult {
  double loss = 0.0;
  Matrix grad;  // with respect to the model output
};

// Regression: mean squared error of one prediction per sample against the
// sample-mean target. Classification: softmax cross-entropy of per-token
// logits against the dominant-channel index.
LossResult task_loss(SyntheticTask::Kind kind, const Matrix& output, const Vector& targets);

}  // namespace unorm::harness
