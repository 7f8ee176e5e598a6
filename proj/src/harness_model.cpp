#include "unorm/harness/model.hpp"

#include <cmath>
#include <stdexcept>

#include "unorm/opcount.hpp"
#include "unorm/rng.hpp"

namespace unorm::harness {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void check_tokens(const Matrix& x, std::size_t tokens) {
  if (tokens == 0 || x.rows() % tokens != 0) {
    throw std::invalid_argument("model: rows must be a multiple of the token count");
  }
}

}  // namespace

Dense Dense::make(std::size_t out_dim, std::size_t in_dim, SeededRng& rng) {
  Dense d;
  d.p.weight = rng.normal_matrix(out_dim, in_dim, 1.0 / std::sqrt(static_cast<double>(in_dim)));
  d.p.bias.assign(out_dim, 0.0);
  d.grad_w = Matrix(out_dim, in_dim, 0.0);
  d.grad_b.assign(out_dim, 0.0);
  return d;
}

Matrix Dense::apply(const Matrix& x) const {
  if (x.cols() != p.weight.cols()) {
    throw std::invalid_argument("Dense: input width mismatch");
  }
  const std::size_t out_dim = p.weight.rows();
  Matrix y(x.rows(), out_dim);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t o = 0; o < out_dim; ++o) {
      double acc = p.bias[o];
      for (std::size_t j = 0; j < x.cols(); ++j) acc += x(i, j) * p.weight(o, j);
      y(i, o) = acc;
    }
  }
  return y;
}

Matrix Dense::forward(const Matrix& x) {
  last_in = x;
  return apply(x);
}

Matrix Dense::backward(const Matrix& grad_out) {
  const std::size_t out_dim = p.weight.rows();
  const std::size_t in_dim = p.weight.cols();
  if (grad_out.cols() != out_dim || grad_out.rows() != last_in.rows()) {
    throw std::invalid_argument("Dense::backward: gradient shape mismatch");
  }
  Matrix grad_in(last_in.rows(), in_dim, 0.0);
  for (std::size_t i = 0; i < last_in.rows(); ++i) {
    for (std::size_t o = 0; o < out_dim; ++o) {
      const double g = grad_out(i, o);
      grad_b[o] += g;
      for (std::size_t j = 0; j < in_dim; ++j) {
        grad_w(o, j) += g * last_in(i, j);
        grad_in(i, j) += g * p.weight(o, j);
      }
    }
  }
  return grad_in;
}

void Dense::zero_grads() {
  for (auto& v : grad_w.values()) v = 0.0;
  for (auto& v : grad_b) v = 0.0;
}

void Dense::sgd(double lr) {
  for (std::size_t i = 0; i < p.weight.size(); ++i) {
    p.weight.values()[i] -= lr * grad_w.values()[i];
  }
  for (std::size_t i = 0; i < p.bias.size(); ++i) {
    p.bias[i] -= lr * grad_b[i];
  }
}

Matrix Gelu::apply(const Matrix& x) {
  Matrix y = x;
  for (auto& v : y.values()) {
    v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  }
  return y;
}

Matrix Gelu::forward(const Matrix& x) {
  last_in = x;
  return apply(x);
}

Matrix Gelu::backward(const Matrix& grad_out) const {
  Matrix grad_in(grad_out.rows(), grad_out.cols());
  for (std::size_t i = 0; i < grad_out.size(); ++i) {
    const double x = last_in.values()[i];
    const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
    grad_in.values()[i] = grad_out.values()[i] * (cdf + x * pdf);
  }
  return grad_in;
}

NormSite NormSite::make(const NormMethodSpec& spec, std::size_t channels) {
  NormSite site;
  site.spec = spec;
  site.state = NormLayerState::init(channels);
  site.grad_gamma.assign(channels, 0.0);
  site.grad_beta.assign(channels, 0.0);
  return site;
}

Matrix NormSite::forward_train(const Matrix& x) {
  if (spec.method == Method::LN) {
    ln_in = x;
    ln_cache = ln_forward(x, state.gamma, state.beta, spec.epsilon);
    return ln_cache.y;
  }
  TrainForwardResult r = train_forward(x, state, spec);
  cache = std::move(r.cache);
  return std::move(r.y);
}

Matrix NormSite::backward(const Matrix& grad_out) {
  if (spec.method == Method::LN) {
    LnBackward b = ln_backward(grad_out, ln_in, ln_cache, state.gamma);
    for (std::size_t j = 0; j < grad_gamma.size(); ++j) {
      grad_gamma[j] += b.grad_gamma[j];
      grad_beta[j] += b.grad_beta[j];
    }
    return std::move(b.grad_x);
  }
  BackwardResult b = train_backward(grad_out, cache, state, spec);
  for (std::size_t j = 0; j < grad_gamma.size(); ++j) {
    grad_gamma[j] += b.grad_gamma[j];
    grad_beta[j] += b.grad_beta[j];
  }
  Matrix grad_x = std::move(b.grad_x);
  b.grad_x = Matrix();
  last_backward = std::move(b);
  return grad_x;
}

void NormSite::zero_grads() {
  for (auto& v : grad_gamma) v = 0.0;
  for (auto& v : grad_beta) v = 0.0;
}

void NormSite::sgd(double lr) {
  for (std::size_t j = 0; j < state.gamma.size(); ++j) {
    state.gamma[j] -= lr * grad_gamma[j];
    state.beta[j] -= lr * grad_beta[j];
  }
}

Attention Attention::make(std::size_t channels, SeededRng& rng) {
  Attention a;
  a.wq = Dense::make(channels, channels, rng);
  a.wk = Dense::make(channels, channels, rng);
  a.wv = Dense::make(channels, channels, rng);
  a.wo = Dense::make(channels, channels, rng);
  return a;
}

Matrix Attention::forward(const Matrix& x, std::size_t tokens) {
  check_tokens(x, tokens);
  const std::size_t samples = x.rows() / tokens;
  const std::size_t c = x.cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(c));

  q_ = wq.forward(x);
  k_ = wk.forward(x);
  v_ = wv.forward(x);
  o_ = Matrix(x.rows(), c, 0.0);
  probs_.assign(samples, Matrix());

  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t base = s * tokens;
    Matrix p(tokens, tokens);
    for (std::size_t i = 0; i < tokens; ++i) {
      double peak = -1e300;
      for (std::size_t j = 0; j < tokens; ++j) {
        double score = 0.0;
        for (std::size_t d = 0; d < c; ++d) score += q_(base + i, d) * k_(base + j, d);
        score *= scale;
        p(i, j) = score;
        peak = std::max(peak, score);
      }
      double denom = 0.0;
      for (std::size_t j = 0; j < tokens; ++j) {
        p(i, j) = std::exp(p(i, j) - peak);
        denom += p(i, j);
      }
      for (std::size_t j = 0; j < tokens; ++j) p(i, j) /= denom;
      for (std::size_t j = 0; j < tokens; ++j) {
        for (std::size_t d = 0; d < c; ++d) o_(base + i, d) += p(i, j) * v_(base + j, d);
      }
    }
    probs_[s] = std::move(p);
  }
  return wo.forward(o_);
}

Matrix Attention::backward(const Matrix& grad_out, std::size_t tokens) {
  const std::size_t samples = grad_out.rows() / tokens;
  const std::size_t c = grad_out.cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(c));

  const Matrix d_o = wo.backward(grad_out);
  Matrix d_q(grad_out.rows(), c, 0.0);
  Matrix d_k(grad_out.rows(), c, 0.0);
  Matrix d_v(grad_out.rows(), c, 0.0);

  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t base = s * tokens;
    const Matrix& p = probs_[s];
    // dP = dO V^T, dV = P^T dO
    Matrix dp(tokens, tokens, 0.0);
    for (std::size_t i = 0; i < tokens; ++i) {
      for (std::size_t j = 0; j < tokens; ++j) {
        double acc = 0.0;
        for (std::size_t d = 0; d < c; ++d) acc += d_o(base + i, d) * v_(base + j, d);
        dp(i, j) = acc;
        for (std::size_t d = 0; d < c; ++d) d_v(base + j, d) += p(i, j) * d_o(base + i, d);
      }
    }
    // softmax backward per row, then dQ = dS K * scale, dK = dS^T Q * scale
    for (std::size_t i = 0; i < tokens; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < tokens; ++j) dot += dp(i, j) * p(i, j);
      for (std::size_t j = 0; j < tokens; ++j) {
        const double ds = p(i, j) * (dp(i, j) - dot) * scale;
        for (std::size_t d = 0; d < c; ++d) {
          d_q(base + i, d) += ds * k_(base + j, d);
          d_k(base + j, d) += ds * q_(base + i, d);
        }
      }
    }
  }

  Matrix grad_in = wq.backward(d_q);
  const Matrix gk = wk.backward(d_k);
  const Matrix gv = wv.backward(d_v);
  for (std::size_t i = 0; i < grad_in.size(); ++i) {
    grad_in.values()[i] += gk.values()[i] + gv.values()[i];
  }
  return grad_in;
}

void Attention::zero_grads() {
  wq.zero_grads();
  wk.zero_grads();
  wv.zero_grads();
  wo.zero_grads();
}

void Attention::sgd(double lr) {
  wq.sgd(lr);
  wk.sgd(lr);
  wv.sgd(lr);
  wo.sgd(lr);
}

std::size_t Attention::param_count() const {
  return wq.param_count() + wk.param_count() + wv.param_count() + wo.param_count();
}

Matrix Block::forward_train(const Matrix& x, std::size_t tokens) {
  Matrix h = x;
  if (has_attention) {
    const Matrix branch = attn.forward(attn_norm.forward_train(h), tokens);
    for (std::size_t i = 0; i < h.size(); ++i) h.values()[i] += branch.values()[i];
  }
  const Matrix branch = ff2.forward(act.forward(ff1.forward(ffn_norm.forward_train(h))));
  for (std::size_t i = 0; i < h.size(); ++i) h.values()[i] += branch.values()[i];
  return h;
}

Matrix Block::backward(const Matrix& grad_out, std::size_t tokens) {
  Matrix d = grad_out;
  {
    const Matrix d_norm = ffn_norm.backward(ff1.backward(act.backward(ff2.backward(d))));
    for (std::size_t i = 0; i < d.size(); ++i) d.values()[i] += d_norm.values()[i];
  }
  if (has_attention) {
    const Matrix d_norm = attn_norm.backward(attn.backward(d, tokens));
    for (std::size_t i = 0; i < d.size(); ++i) d.values()[i] += d_norm.values()[i];
  }
  return d;
}

void Block::zero_grads() {
  if (has_attention) {
    attn_norm.zero_grads();
    attn.zero_grads();
  }
  ffn_norm.zero_grads();
  ff1.zero_grads();
  ff2.zero_grads();
}

void Block::sgd(double lr) {
  if (has_attention) {
    attn_norm.sgd(lr);
    attn.sgd(lr);
  }
  ffn_norm.sgd(lr);
  ff1.sgd(lr);
  ff2.sgd(lr);
}

std::size_t Block::param_count() const {
  std::size_t count = ffn_norm.param_count() + ff1.param_count() + ff2.param_count();
  if (has_attention) count += attn_norm.param_count() + attn.param_count();
  return count;
}

Model::Model(const ModelConfig& cfg, SyntheticTask::Kind task_kind)
    : cfg_(cfg), task_kind_(task_kind) {
  cfg_.norm.validate();
  if (cfg_.channels == 0) {
    throw std::invalid_argument("Model: channels must be >= 1");
  }
  if (cfg_.heads != 1) {
    throw std::invalid_argument("Model: only single-head attention is supported");
  }
  SeededRng rng(cfg_.seed);
  const std::size_t c = cfg_.channels;
  const std::size_t hidden = std::max<std::size_t>(1, cfg_.hidden_multiple) * c;
  blocks_.reserve(cfg_.depth);
  for (std::size_t d = 0; d < cfg_.depth; ++d) {
    Block b;
    b.has_attention = cfg_.kind == ModelConfig::Kind::MiniTransformer;
    if (b.has_attention) {
      b.attn_norm = NormSite::make(cfg_.norm, c);
      b.attn = Attention::make(c, rng);
    }
    b.ffn_norm = NormSite::make(cfg_.norm, c);
    b.ff1 = Dense::make(hidden, c, rng);
    b.ff2 = Dense::make(c, hidden, rng);
    blocks_.push_back(std::move(b));
  }
  if (cfg_.depth > 0) {
    has_final_norm_ = true;
    final_norm_ = NormSite::make(cfg_.norm, c);
  }
  if (task_kind_ == SyntheticTask::Kind::SequenceMeanRegression) {
    readout_ = Dense::make(1, c, rng);
  } else {
    readout_ = Dense::make(c, c, rng);  // per-token class logits
  }
}

Matrix Model::forward_train(const Matrix& x, std::size_t tokens) {
  check_tokens(x, tokens);
  tokens_last_ = tokens;
  Matrix h = x;
  for (auto& b : blocks_) h = b.forward_train(h, tokens);
  if (has_final_norm_) h = final_norm_.forward_train(h);
  if (task_kind_ == SyntheticTask::Kind::SequenceMeanRegression) {
    // Mean-pool tokens per sample, then the linear head.
    pool_in_ = h;
    const std::size_t samples = h.rows() / tokens;
    Matrix pooled(samples, h.cols(), 0.0);
    for (std::size_t s = 0; s < samples; ++s) {
      for (std::size_t t = 0; t < tokens; ++t) {
        for (std::size_t j = 0; j < h.cols(); ++j) pooled(s, j) += h(s * tokens + t, j);
      }
    }
    for (auto& v : pooled.values()) v /= static_cast<double>(tokens);
    return readout_.forward(pooled);
  }
  return readout_.forward(h);
}

void Model::backward(const Matrix& grad_out) {
  Matrix d = readout_.backward(grad_out);
  if (task_kind_ == SyntheticTask::Kind::SequenceMeanRegression) {
    const std::size_t tokens = tokens_last_;
    Matrix expanded(pool_in_.rows(), pool_in_.cols());
    const double inv_t = 1.0 / static_cast<double>(tokens);
    for (std::size_t s = 0; s < d.rows(); ++s) {
      for (std::size_t t = 0; t < tokens; ++t) {
        for (std::size_t j = 0; j < d.cols(); ++j) {
          expanded(s * tokens + t, j) = d(s, j) * inv_t;
        }
      }
    }
    d = std::move(expanded);
  }
  if (has_final_norm_) d = final_norm_.backward(d);
  for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) {
    d = it->backward(d, tokens_last_);
  }
}

void Model::zero_grads() {
  for (auto& b : blocks_) b.zero_grads();
  if (has_final_norm_) final_norm_.zero_grads();
  readout_.zero_grads();
}

void Model::sgd_step(double lr) {
  for (auto& b : blocks_) b.sgd(lr);
  if (has_final_norm_) final_norm_.sgd(lr);
  readout_.sgd(lr);
}

namespace {

void accumulate_sq(const Matrix& m, double& acc) {
  for (double v : m.values()) acc += v * v;
}
void accumulate_sq(const Vector& v, double& acc) {
  for (double x : v) acc += x * x;
}
bool finite_grads(const Matrix& m) {
  return m.all_finite();
}
bool finite_grads(const Vector& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace

double Model::grad_norm() const {
  double acc = 0.0;
  for (const auto& b : blocks_) {
    if (b.has_attention) {
      accumulate_sq(b.attn_norm.grad_gamma, acc);
      accumulate_sq(b.attn_norm.grad_beta, acc);
      for (const Dense* d : {&b.attn.wq, &b.attn.wk, &b.attn.wv, &b.attn.wo}) {
        accumulate_sq(d->grad_w, acc);
        accumulate_sq(d->grad_b, acc);
      }
    }
    accumulate_sq(b.ffn_norm.grad_gamma, acc);
    accumulate_sq(b.ffn_norm.grad_beta, acc);
    accumulate_sq(b.ff1.grad_w, acc);
    accumulate_sq(b.ff1.grad_b, acc);
    accumulate_sq(b.ff2.grad_w, acc);
    accumulate_sq(b.ff2.grad_b, acc);
  }
  if (has_final_norm_) {
    accumulate_sq(final_norm_.grad_gamma, acc);
    accumulate_sq(final_norm_.grad_beta, acc);
  }
  accumulate_sq(readout_.grad_w, acc);
  accumulate_sq(readout_.grad_b, acc);
  return std::sqrt(acc);
}

bool Model::grads_finite() const {
  for (const auto& b : blocks_) {
    if (b.has_attention) {
      if (!finite_grads(b.attn_norm.grad_gamma) || !finite_grads(b.attn_norm.grad_beta)) {
        return false;
      }
      for (const Dense* d : {&b.attn.wq, &b.attn.wk, &b.attn.wv, &b.attn.wo}) {
        if (!finite_grads(d->grad_w) || !finite_grads(d->grad_b)) return false;
      }
    }
    if (!finite_grads(b.ffn_norm.grad_gamma) || !finite_grads(b.ffn_norm.grad_beta) ||
        !finite_grads(b.ff1.grad_w) || !finite_grads(b.ff1.grad_b) ||
        !finite_grads(b.ff2.grad_w) || !finite_grads(b.ff2.grad_b)) {
      return false;
    }
  }
  if (has_final_norm_ &&
      (!finite_grads(final_norm_.grad_gamma) || !finite_grads(final_norm_.grad_beta))) {
    return false;
  }
  return finite_grads(readout_.grad_w) && finite_grads(readout_.grad_b);
}

std::size_t Model::param_count() const {
  std::size_t count = readout_.param_count();
  if (has_final_norm_) count += final_norm_.param_count();
  for (const auto& b : blocks_) count += b.param_count();
  return count;
}

std::vector<NormSite*> Model::norm_sites() {
  std::vector<NormSite*> sites;
  for (auto& b : blocks_) {
    if (b.has_attention) sites.push_back(&b.attn_norm);
    sites.push_back(&b.ffn_norm);
  }
  if (has_final_norm_) sites.push_back(&final_norm_);
  return sites;
}

std::vector<const NormSite*> Model::norm_sites() const {
  std::vector<const NormSite*> sites;
  for (const auto& b : blocks_) {
    if (b.has_attention) sites.push_back(&b.attn_norm);
    sites.push_back(&b.ffn_norm);
  }
  if (has_final_norm_) sites.push_back(&final_norm_);
  return sites;
}

FrozenModel Model::freeze() const {
  if (cfg_.norm.method == Method::LN) {
    throw std::invalid_argument("Model::freeze: online method not fusable");
  }
  const auto freeze_site = [&](const NormSite& site) {
    const FrozenStats stats = freeze_statistics(site.state);
    FrozenNorm fn;
    fn.gamma = site.state.gamma;
    fn.beta = site.state.beta;
    fn.mu = stats.mu;
    fn.sigma2 = stats.sigma2;
    fn.eps = site.spec.epsilon;
    return fn;
  };
  FrozenModel out;
  out.kind = cfg_.kind;
  out.channels = cfg_.channels;
  out.per_token_readout = task_kind_ == SyntheticTask::Kind::TokenCopyClassification;
  for (const auto& b : blocks_) {
    FrozenBlock fb;
    fb.has_attention = b.has_attention;
    if (b.has_attention) {
      fb.norm1 = freeze_site(b.attn_norm);
      fb.wq = b.attn.wq.p;
      fb.wk = b.attn.wk.p;
      fb.wv = b.attn.wv.p;
      fb.wo = b.attn.wo.p;
    }
    fb.norm2 = freeze_site(b.ffn_norm);
    fb.ff1 = b.ff1.p;
    fb.ff2 = b.ff2.p;
    out.blocks.push_back(std::move(fb));
  }
  if (has_final_norm_) {
    out.has_final_norm = true;
    out.final_norm = freeze_site(final_norm_);
  }
  out.readout = readout_.p;
  return out;
}

namespace {

// Frozen-statistics normalization with instrumented division/sqrt counts.
Matrix frozen_norm_apply(const Matrix& x, const FrozenNorm& n) {
  if (n.identity) return x;
  const std::size_t c = x.cols();
  Vector denom(c);
  for (std::size_t j = 0; j < c; ++j) denom[j] = std::sqrt(n.sigma2[j] + n.eps);
  opcount::add_sqrts(c);
  Matrix y(x.rows(), c);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      y(i, j) = n.gamma[j] * ((x(i, j) - n.mu[j]) / denom[j]) + n.beta[j];
    }
  }
  opcount::add_divisions(x.rows() * c);
  return y;
}

Matrix linear_apply(const Matrix& x, const LinearLayer& l) {
  const std::size_t out_dim = l.weight.rows();
  Matrix y(x.rows(), out_dim);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t o = 0; o < out_dim; ++o) {
      double acc = l.bias[o];
      for (std::size_t j = 0; j < x.cols(); ++j) acc += x(i, j) * l.weight(o, j);
      y(i, o) = acc;
    }
  }
  return y;
}

Matrix attention_apply(const Matrix& x, const FrozenBlock& fb, std::size_t tokens) {
  const std::size_t samples = x.rows() / tokens;
  const std::size_t c = x.cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(c));
  const Matrix norm_x = frozen_norm_apply(x, fb.norm1);
  const Matrix q = linear_apply(norm_x, fb.wq);
  const Matrix k = linear_apply(norm_x, fb.wk);
  const Matrix v = linear_apply(norm_x, fb.wv);
  Matrix o(x.rows(), c, 0.0);
  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t base = s * tokens;
    for (std::size_t i = 0; i < tokens; ++i) {
      Vector row(tokens);
      double peak = -1e300;
      for (std::size_t j = 0; j < tokens; ++j) {
        double score = 0.0;
        for (std::size_t d = 0; d < c; ++d) score += q(base + i, d) * k(base + j, d);
        row[j] = score * scale;
        peak = std::max(peak, row[j]);
      }
      double denom = 0.0;
      for (std::size_t j = 0; j < tokens; ++j) {
        row[j] = std::exp(row[j] - peak);
        denom += row[j];
      }
      for (std::size_t j = 0; j < tokens; ++j) {
        const double p = row[j] / denom;
        for (std::size_t d = 0; d < c; ++d) o(base + i, d) += p * v(base + j, d);
      }
    }
  }
  return linear_apply(o, fb.wo);
}

}  // namespace

Matrix FrozenModel::predict(const Matrix& x, std::size_t tokens) const {
  check_tokens(x, tokens);
  Matrix h = x;
  for (const auto& fb : blocks) {
    if (fb.has_attention) {
      const Matrix branch = attention_apply(h, fb, tokens);
      for (std::size_t i = 0; i < h.size(); ++i) h.values()[i] += branch.values()[i];
    }
    const Matrix branch =
        linear_apply(Gelu::apply(linear_apply(frozen_norm_apply(h, fb.norm2), fb.ff1)), fb.ff2);
    for (std::size_t i = 0; i < h.size(); ++i) h.values()[i] += branch.values()[i];
  }
  if (has_final_norm) h = frozen_norm_apply(h, final_norm);
  if (per_token_readout) {
    return linear_apply(h, readout);
  }
  const std::size_t samples = h.rows() / tokens;
  Matrix pooled(samples, h.cols(), 0.0);
  for (std::size_t s = 0; s < samples; ++s) {
    for (std::size_t t = 0; t < tokens; ++t) {
      for (std::size_t j = 0; j < h.cols(); ++j) pooled(s, j) += h(s * tokens + t, j);
    }
  }
  for (auto& v : pooled.values()) v /= static_cast<double>(tokens);
  return linear_apply(pooled, readout);
}

FrozenModel fuse_frozen(const FrozenModel& model) {
  FrozenModel out = model;
  out.fused = true;
  for (auto& fb : out.blocks) {
    if (fb.has_attention && !fb.norm1.identity) {
      const FrozenNorm& n = fb.norm1;
      for (LinearLayer* l : {&fb.wq, &fb.wk, &fb.wv}) {
        const FusedAffinePair fused =
            fuse_into_linear(n.gamma, n.beta, n.mu, n.sigma2, n.eps, *l);
        l->weight = fused.weight_prime;
        l->bias = fused.bias_prime;
      }
      fb.norm1 = FrozenNorm{};
      fb.norm1.identity = true;
    }
    if (!fb.norm2.identity) {
      const FrozenNorm& n = fb.norm2;
      const FusedAffinePair fused =
          fuse_into_linear(n.gamma, n.beta, n.mu, n.sigma2, n.eps, fb.ff1);
      fb.ff1.weight = fused.weight_prime;
      fb.ff1.bias = fused.bias_prime;
      fb.norm2 = FrozenNorm{};
      fb.norm2.identity = true;
    }
  }
  // The final norm is per-channel affine shared by all tokens, so it
  // commutes with the mean-pool and folds straight into the readout.
  if (out.has_final_norm && !out.final_norm.identity) {
    const FrozenNorm& n = out.final_norm;
    const FusedAffinePair fused =
        fuse_into_linear(n.gamma, n.beta, n.mu, n.sigma2, n.eps, out.readout);
    out.readout.weight = fused.weight_prime;
    out.readout.bias = fused.bias_prime;
    out.final_norm = FrozenNorm{};
    out.final_norm.identity = true;
  }
  return out;
}

}  // namespace unorm::harness
