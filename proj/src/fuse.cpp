#include "unorm/fuse.hpp"

#include <cmath>
#include <stdexcept>

namespace unorm {

FusedAffinePair fuse_into_linear(const Vector& gamma, const Vector& beta, const Vector& mu,
                                 const Vector& sigma2, double eps, const LinearLayer& layer) {
  const std::size_t c = gamma.size();
  if (beta.size() != c || mu.size() != c || sigma2.size() != c) {
    throw std::invalid_argument("fuse_into_linear: channel vector length mismatch");
  }
  if (layer.weight.cols() != c) {
    throw std::invalid_argument("fuse_into_linear: weight columns must match channels");
  }
  if (layer.bias.size() != layer.weight.rows()) {
    throw std::invalid_argument("fuse_into_linear: bias length must match weight rows");
  }

  Vector gamma_tilde(c);
  Vector beta_tilde(c);
  for (std::size_t j = 0; j < c; ++j) {
    const double denom2 = sigma2[j] + eps;
    if (!(denom2 > 0.0)) {
      throw std::domain_error("fuse_into_linear: nonpositive sigma^2 + eps");
    }
    gamma_tilde[j] = gamma[j] / std::sqrt(denom2);
    beta_tilde[j] = beta[j] - gamma_tilde[j] * mu[j];
  }

  const std::size_t c_out = layer.weight.rows();
  FusedAffinePair out;
  out.weight_prime = Matrix(c_out, c);
  out.bias_prime = layer.bias;
  for (std::size_t o = 0; o < c_out; ++o) {
    for (std::size_t j = 0; j < c; ++j) {
      out.weight_prime(o, j) = layer.weight(o, j) * gamma_tilde[j];
      out.bias_prime[o] += layer.weight(o, j) * beta_tilde[j];
    }
  }
  if (!out.weight_prime.all_finite()) {
    throw std::domain_error("fuse_into_linear: non-finite fused parameters");
  }
  return out;
}

double verify_fusion(const std::function<Matrix(const Matrix&)>& unfused,
                     const std::function<Matrix(const Matrix&)>& fused,
                     const std::vector<Matrix>& inputs) {
  double worst = 0.0;
  for (const Matrix& x : inputs) {
    const Matrix a = unfused(x);
    const Matrix b = fused(x);
    worst = std::max(worst, max_abs_diff(a, b));
  }
  return worst;
}

}  // namespace unorm
