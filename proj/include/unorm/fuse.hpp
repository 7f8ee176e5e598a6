#pragma once

#include <functional>

#include "unorm/matrix.hpp"

namespace unorm {

// y = W x + b with W of shape C_out x C_in.
struct LinearLayer {
  Matrix weight;
  Vector bias;
};

struct FusedAffinePair {
  Matrix weight_prime;
  Vector bias_prime;
};

// Folds a frozen normalization into the subsequent linear layer:
//   gamma~ = gamma / sqrt(sigma2 + eps)
//   beta~  = beta - gamma~ * mu
//   b'     = b + W beta~
//   W'     = W * diag(gamma~)
// so that W' x + b' = W Norm(x) + b for every x. eps is folded into the
// denominator, making the rewrite exact against the frozen-statistics path.
FusedAffinePair fuse_into_linear(const Vector& gamma, const Vector& beta, const Vector& mu,
                                 const Vector& sigma2, double eps, const LinearLayer& layer);

// Runs both paths over every input and returns the worst elementwise
// discrepancy. The caller compares against its tolerance; shape mismatches
// between the two outputs throw.
double verify_fusion(const std::function<Matrix(const Matrix&)>& unfused,
                     const std::function<Matrix(const Matrix&)>& fused,
                     const std::vector<Matrix>& inputs);

}  // namespace unorm
