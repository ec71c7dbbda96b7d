#ifndef FINGERFORGE_ATTENTION_HPP
#define FINGERFORGE_ATTENTION_HPP

// Scaled dot-product attention, multi-head attention, layer normalization and
// the position-wise feed-forward block, each with its analytic backward pass.
// Sequences are row-major in the mathematical sense: one row per position.

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fingerforge/error.hpp"

namespace fingerforge::nn {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

/// Named tensors addressed by index. Gradients and optimizer moments share
/// the same layout.
struct ParameterSet {
  std::vector<std::string> names;
  std::vector<Matrix> values;

  std::size_t add(std::string name, Eigen::Index rows, Eigen::Index cols) {
    names.push_back(std::move(name));
    values.emplace_back(Matrix::Zero(rows, cols));
    return values.size() - 1;
  }

  std::size_t size() const { return values.size(); }
  Matrix& operator[](std::size_t i) { return values[i]; }
  const Matrix& operator[](std::size_t i) const { return values[i]; }

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    throw Error(Errc::InvalidArgument, "no parameter named " + name);
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values) n += static_cast<std::size_t>(v.size());
    return n;
  }

  std::vector<Matrix> zeros_like() const {
    std::vector<Matrix> out;
    out.reserve(values.size());
    for (const auto& v : values) out.emplace_back(Matrix::Zero(v.rows(), v.cols()));
    return out;
  }
};

using Gradients = std::vector<Matrix>;

/// x W + b, with b a 1 x n row broadcast over rows.
inline Matrix affine(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix out = x * w;
  out.rowwise() += b.row(0);
  return out;
}

/// Row-wise softmax with max subtraction.
inline Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double peak = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - peak).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

/// softmax(Q K^T / sqrt(d_k)) V. `probs`, when given, receives the weights.
inline Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v, Matrix* probs = nullptr) {
  require(q.cols() >= 1 && q.cols() == k.cols(), Errc::ShapeMismatch, "query/key widths differ");
  require(k.rows() == v.rows(), Errc::ShapeMismatch, "key/value lengths differ");
  require(q.rows() >= 1 && k.rows() >= 1, Errc::ShapeMismatch, "empty sequence");
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Matrix p = softmax_rows((q * k.transpose()) * scale);
  Matrix out = p * v;
  if (probs) *probs = std::move(p);
  return out;
}

inline void attention_backward(const Matrix& q, const Matrix& k, const Matrix& v, const Matrix& probs,
                               const Matrix& d_out, Matrix& d_q, Matrix& d_k, Matrix& d_v) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  d_v = probs.transpose() * d_out;
  const Matrix d_p = d_out * v.transpose();
  // Softmax Jacobian applied row by row: dS = P .* (dP - rowsum(dP .* P)).
  const Eigen::VectorXd inner = (d_p.array() * probs.array()).rowwise().sum();
  Matrix d_s = probs.array() * (d_p.colwise() - inner).array();
  d_s *= scale;
  d_q = d_s * k;
  d_k = d_s.transpose() * q;
}

struct MhaIndex {
  std::size_t wq, bq, wk, bk, wv, bv, wo, bo;
};

inline MhaIndex add_mha(ParameterSet& p, const std::string& prefix, Eigen::Index d_model) {
  MhaIndex ix{};
  ix.wq = p.add(prefix + ".wq", d_model, d_model);
  ix.bq = p.add(prefix + ".bq", 1, d_model);
  ix.wk = p.add(prefix + ".wk", d_model, d_model);
  ix.bk = p.add(prefix + ".bk", 1, d_model);
  ix.wv = p.add(prefix + ".wv", d_model, d_model);
  ix.bv = p.add(prefix + ".bv", 1, d_model);
  ix.wo = p.add(prefix + ".wo", d_model, d_model);
  ix.bo = p.add(prefix + ".bo", 1, d_model);
  return ix;
}

struct MhaCache {
  Matrix xq, xkv, q, k, v, concat;
  std::vector<Matrix> probs;
};

/// Heads own contiguous column blocks of width d_model / heads.
inline Matrix multi_head_attention(const Matrix& xq, const Matrix& xkv, const ParameterSet& p, const MhaIndex& ix,
                                   int heads, MhaCache* cache = nullptr) {
  const auto d_model = p[ix.wq].rows();
  require(heads >= 1 && d_model % heads == 0, Errc::ShapeMismatch, "d_model must be divisible by heads");
  require(xq.cols() == d_model && xkv.cols() == d_model, Errc::ShapeMismatch, "input width != d_model");
  const auto d_k = d_model / heads;
  Matrix q = affine(xq, p[ix.wq], p[ix.bq]);
  Matrix k = affine(xkv, p[ix.wk], p[ix.bk]);
  Matrix v = affine(xkv, p[ix.wv], p[ix.bv]);
  Matrix concat(xq.rows(), d_model);
  std::vector<Matrix> probs(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    const auto c0 = h * d_k;
    concat.middleCols(c0, d_k) =
        attention(q.middleCols(c0, d_k), k.middleCols(c0, d_k), v.middleCols(c0, d_k), &probs[static_cast<std::size_t>(h)]);
  }
  Matrix out = affine(concat, p[ix.wo], p[ix.bo]);
  if (cache) {
    cache->xq = xq;
    cache->xkv = xkv;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->concat = std::move(concat);
    cache->probs = std::move(probs);
  }
  return out;
}

/// Accumulates parameter gradients; returns input gradients separately for
/// the query and key/value streams (sum them for self-attention).
inline void mha_backward(const ParameterSet& p, const MhaIndex& ix, int heads, const MhaCache& c, const Matrix& d_out,
                         Gradients& g, Matrix& d_xq, Matrix& d_xkv) {
  const auto d_model = p[ix.wq].rows();
  const auto d_k = d_model / heads;
  g[ix.wo].noalias() += c.concat.transpose() * d_out;
  g[ix.bo] += d_out.colwise().sum();
  const Matrix d_concat = d_out * p[ix.wo].transpose();

  Matrix d_q(c.q.rows(), d_model), d_k_all(c.k.rows(), d_model), d_v(c.v.rows(), d_model);
  Matrix dq_h, dk_h, dv_h;
  for (int h = 0; h < heads; ++h) {
    const auto c0 = h * d_k;
    attention_backward(c.q.middleCols(c0, d_k), c.k.middleCols(c0, d_k), c.v.middleCols(c0, d_k),
                       c.probs[static_cast<std::size_t>(h)], d_concat.middleCols(c0, d_k), dq_h, dk_h, dv_h);
    d_q.middleCols(c0, d_k) = dq_h;
    d_k_all.middleCols(c0, d_k) = dk_h;
    d_v.middleCols(c0, d_k) = dv_h;
  }
  g[ix.wq].noalias() += c.xq.transpose() * d_q;
  g[ix.bq] += d_q.colwise().sum();
  g[ix.wk].noalias() += c.xkv.transpose() * d_k_all;
  g[ix.bk] += d_k_all.colwise().sum();
  g[ix.wv].noalias() += c.xkv.transpose() * d_v;
  g[ix.bv] += d_v.colwise().sum();
  d_xq = d_q * p[ix.wq].transpose();
  d_xkv = d_k_all * p[ix.wk].transpose() + d_v * p[ix.wv].transpose();
}

struct LayerNormIndex {
  std::size_t gain, bias;
};

inline LayerNormIndex add_layer_norm(ParameterSet& p, const std::string& prefix, Eigen::Index d_model) {
  LayerNormIndex ix{};
  ix.gain = p.add(prefix + ".gain", 1, d_model);
  ix.bias = p.add(prefix + ".bias", 1, d_model);
  p[ix.gain].setOnes();
  return ix;
}

inline constexpr double kLayerNormEpsilon = 1e-10;

struct LayerNormCache {
  Matrix xhat;
  Eigen::VectorXd inv_std;
};

/// Row-wise standardization (population variance) followed by gain and bias.
inline Matrix standardize_rows(const Matrix& x, Eigen::VectorXd* inv_std = nullptr) {
  const auto n = static_cast<double>(x.cols());
  const Eigen::VectorXd mean = x.rowwise().mean();
  Matrix centered = x.colwise() - mean;
  const Eigen::VectorXd var = centered.array().square().rowwise().sum() / n;
  const Eigen::VectorXd inv = (var.array() + kLayerNormEpsilon).rsqrt();
  centered.array().colwise() *= inv.array();
  if (inv_std) *inv_std = inv;
  return centered;
}

inline Matrix layer_norm(const Matrix& x, const ParameterSet& p, const LayerNormIndex& ix,
                         LayerNormCache* cache = nullptr) {
  Eigen::VectorXd inv;
  Matrix xhat = standardize_rows(x, &inv);
  Matrix out = xhat.array().rowwise() * p[ix.gain].row(0).array();
  out.rowwise() += p[ix.bias].row(0);
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv);
  }
  return out;
}

inline Matrix layer_norm_backward(const ParameterSet& p, const LayerNormIndex& ix, const LayerNormCache& c,
                                  const Matrix& d_out, Gradients& g) {
  g[ix.gain] += (d_out.array() * c.xhat.array()).colwise().sum().matrix();
  g[ix.bias] += d_out.colwise().sum();
  const Matrix d_xhat = d_out.array().rowwise() * p[ix.gain].row(0).array();
  const Eigen::VectorXd mean_d = d_xhat.rowwise().mean();
  const Eigen::VectorXd mean_dx = (d_xhat.array() * c.xhat.array()).rowwise().mean();
  Matrix d_x = d_xhat.colwise() - mean_d;
  d_x.array() -= c.xhat.array().colwise() * mean_dx.array();
  d_x.array().colwise() *= c.inv_std.array();
  return d_x;
}

struct FfnIndex {
  std::size_t w1, b1, w2, b2;
};

inline FfnIndex add_ffn(ParameterSet& p, const std::string& prefix, Eigen::Index d_model, Eigen::Index dff) {
  FfnIndex ix{};
  ix.w1 = p.add(prefix + ".w1", d_model, dff);
  ix.b1 = p.add(prefix + ".b1", 1, dff);
  ix.w2 = p.add(prefix + ".w2", dff, d_model);
  ix.b2 = p.add(prefix + ".b2", 1, d_model);
  return ix;
}

struct FfnCache {
  Matrix x, pre, hidden;
};

/// max(0, x W1 + b1) W2 + b2
inline Matrix feed_forward(const Matrix& x, const ParameterSet& p, const FfnIndex& ix, FfnCache* cache = nullptr) {
  Matrix pre = affine(x, p[ix.w1], p[ix.b1]);
  Matrix hidden = pre.cwiseMax(0.0);
  Matrix out = affine(hidden, p[ix.w2], p[ix.b2]);
  if (cache) {
    cache->x = x;
    cache->pre = std::move(pre);
    cache->hidden = std::move(hidden);
  }
  return out;
}

inline Matrix feed_forward_backward(const ParameterSet& p, const FfnIndex& ix, const FfnCache& c, const Matrix& d_out,
                                    Gradients& g) {
  g[ix.w2].noalias() += c.hidden.transpose() * d_out;
  g[ix.b2] += d_out.colwise().sum();
  Matrix d_hidden = d_out * p[ix.w2].transpose();
  d_hidden.array() *= (c.pre.array() > 0.0).cast<double>();
  g[ix.w1].noalias() += c.x.transpose() * d_hidden;
  g[ix.b1] += d_hidden.colwise().sum();
  return d_hidden * p[ix.w1].transpose();
}

}  // namespace fingerforge::nn

#endif  // FINGERFORGE_ATTENTION_HPP
