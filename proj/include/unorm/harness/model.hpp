#pragma once

#include <cstdint>
#include <vector>

#include "unorm/fuse.hpp"
#include "unorm/matrix.hpp"
#include "unorm/methods.hpp"
#include "unorm/norm_layer.hpp"
#include "unorm/norm_spec.hpp"
#include "unorm/rng.hpp"
#include "unorm/harness/task.hpp"

namespace unorm::harness {

struct ModelConfig {
  enum class Kind { Mlp, MiniTransformer };

  Kind kind = Kind::Mlp;
  std::size_t depth = 2;
  std::size_t channels = 16;
  std::size_t hidden_multiple = 2;
  std::size_t heads = 1;  // single-head only
  NormMethodSpec norm;
  std::uint64_t seed = 1;
};

// Token-wise affine layer with gradient accumulators and an input cache for
// the backward pass.
struct Dense {
  LinearLayer p;
  Matrix grad_w;
  Vector grad_b;
  Matrix last_in;

  static Dense make(std::size_t out_dim, std::size_t in_dim, SeededRng& rng);
  Matrix forward(const Matrix& x);              // caches x
  Matrix apply(const Matrix& x) const;          // stateless (inference)
  Matrix backward(const Matrix& grad_out);      // accumulates grads
  void zero_grads();
  void sgd(double lr);
  std::size_t param_count() const { return p.weight.size() + p.bias.size(); }
};

struct Gelu {
  Matrix last_in;
  Matrix forward(const Matrix& x);
  static Matrix apply(const Matrix& x);
  Matrix backward(const Matrix& grad_out) const;
};

// One normalization site inside the model; wraps the engine's training ops
// (or the online ln reference) plus affine gradient accumulators.
struct NormSite {
  NormMethodSpec spec;
  NormLayerState state;
  ForwardCache cache;
  BackwardResult last_backward;
  LnForward ln_cache;
  Matrix ln_in;
  Vector grad_gamma;
  Vector grad_beta;

  static NormSite make(const NormMethodSpec& spec, std::size_t channels);
  Matrix forward_train(const Matrix& x);
  Matrix backward(const Matrix& grad_out);
  void zero_grads();
  void sgd(double lr);
  std::size_t param_count() const { return 2 * state.channels(); }
};

// Single-head self-attention over the tokens of each sample.
struct Attention {
  Dense wq, wk, wv, wo;
  Matrix q_, k_, v_, o_;
  std::vector<Matrix> probs_;  // one N x N softmax per sample

  static Attention make(std::size_t channels, SeededRng& rng);
  Matrix forward(const Matrix& x, std::size_t tokens);
  Matrix backward(const Matrix& grad_out, std::size_t tokens);
  void zero_grads();
  void sgd(double lr);
  std::size_t param_count() const;
};

struct Block {
  bool has_attention = false;
  NormSite attn_norm;
  Attention attn;
  NormSite ffn_norm;
  Dense ff1;
  Gelu act;
  Dense ff2;

  Matrix forward_train(const Matrix& x, std::size_t tokens);
  Matrix backward(const Matrix& grad_out, std::size_t tokens);
  void zero_grads();
  void sgd(double lr);
  std::size_t param_count() const;
};

// Frozen inference-side twin of a trained model. Unfused keeps explicit
// normalization layers evaluated from frozen statistics; fuse_frozen folds
// them into their consumer linears and replaces them by identity markers.
struct FrozenNorm {
  bool identity = false;  // true once fused away
  Vector gamma, beta, mu, sigma2;
  double eps = 0.0;
};

struct FrozenBlock {
  bool has_attention = false;
  FrozenNorm norm1;
  LinearLayer wq, wk, wv, wo;
  FrozenNorm norm2;
  LinearLayer ff1, ff2;
};

struct FrozenModel {
  ModelConfig::Kind kind = ModelConfig::Kind::Mlp;
  std::size_t channels = 0;
  bool per_token_readout = false;
  bool fused = false;
  bool has_final_norm = false;
  std::vector<FrozenBlock> blocks;
  FrozenNorm final_norm;
  LinearLayer readout;

  Matrix predict(const Matrix& x, std::size_t tokens) const;
};

FrozenModel fuse_frozen(const FrozenModel& model);

// Pre-norm residual stack: mlp blocks are x + ff2(gelu(ff1(norm(x)))),
// transformer blocks add x + attn(norm1(x)) in front of the feed-forward
// sub-block. A final normalization caps the residual trunk (the trunk
// otherwise carries raw inputs straight into the head), then a mean-pool
// over tokens plus a linear head for regression, or a per-token linear head
// for classification. Every normalization site feeds a linear layer, so the
// whole stack is fusable. A depth-zero model is the bare readout.
class Model {
 public:
  Model() = default;
  Model(const ModelConfig& cfg, SyntheticTask::Kind task_kind);

  Matrix forward_train(const Matrix& x, std::size_t tokens);
  void backward(const Matrix& grad_out);
  void zero_grads();
  void sgd_step(double lr);
  double grad_norm() const;
  bool grads_finite() const;
  std::size_t param_count() const;

  std::vector<NormSite*> norm_sites();
  std::vector<const NormSite*> norm_sites() const;

  const ModelConfig& config() const { return cfg_; }
  SyntheticTask::Kind task_kind() const { return task_kind_; }

  // Throws for ln (online statistics cannot be frozen).
  FrozenModel freeze() const;

  std::vector<Block>& blocks() { return blocks_; }
  Dense& readout() { return readout_; }
  const Dense& readout() const { return readout_; }
  bool has_final_norm() const { return has_final_norm_; }
  NormSite& final_norm() { return final_norm_; }

 private:
  ModelConfig cfg_;
  SyntheticTask::Kind task_kind_ = SyntheticTask::Kind::SequenceMeanRegression;
  std::vector<Block> blocks_;
  bool has_final_norm_ = false;
  NormSite final_norm_;
  Dense readout_;
  std::size_t tokens_last_ = 0;
  Matrix pool_in_;  // cache for the mean-pool backward
};

}  // namespace unorm::harness
