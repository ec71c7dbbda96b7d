#ifndef FINGERFORGE_TRANSFORMER_HPP
#define FINGERFORGE_TRANSFORMER_HPP

// Transformer autoencoder for W x F windows.
//
//   embedded = X W_in + b_in (+ sinusoidal positions)
//   encoder  : [self-attention, FFN] sublayers, each post-norm residual
//   decoder  : [self-attention, cross-attention over the encoder output, FFN]
//              fed the same embedded sequence, no causal mask
//   output   = decoder_out W_out + b_out
//
// Training minimizes mean squared reconstruction error with Adam. Everything
// runs in double precision on one thread so runs are bit-reproducible.

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fingerforge/attention.hpp"
#include "fingerforge/error.hpp"

namespace fingerforge::ae {

using nn::Gradients;
using nn::Matrix;
using nn::ParameterSet;
using json = nlohmann::json;

struct TransformerConfig {
  int d_model = 64;
  int num_heads = 4;
  int dff = 128;
  int num_layers = 1;  // encoder depth == decoder depth
  int window = 20;
  int features = 215;
  int epochs = 10;
  int batch_size = 32;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 1;
  bool positional_encoding = true;
  bool cross_attention = true;  // false: encoder-only stack

  void validate() const {
    require(d_model >= 1 && num_heads >= 1 && d_model % num_heads == 0, Errc::InvalidArgument,
            "d_model must be divisible by num_heads");
    require(dff >= 1 && num_layers >= 1 && window >= 1 && features >= 1, Errc::InvalidArgument,
            "dimensions must be positive");
    require(epochs >= 0 && batch_size >= 1, Errc::InvalidArgument, "epochs >= 0 and batch_size >= 1 required");
    require(learning_rate > 0, Errc::InvalidArgument, "learning_rate must be positive");
  }

  /// Whether the searched axes stay inside the reference grid.
  bool in_reference_grid() const {
    static const std::set<int> dffs{32, 64, 128, 256, 1024}, layers{1, 2, 3}, epoch_set{10, 20, 50},
        batches{32, 128, 256, 512};
    return dffs.count(dff) && layers.count(num_layers) && epoch_set.count(epochs) && batches.count(batch_size);
  }

  bool operator==(const TransformerConfig&) const = default;
};

inline void to_json(json& j, const TransformerConfig& c) {
  j = json{{"d_model", c.d_model},
           {"num_heads", c.num_heads},
           {"dff", c.dff},
           {"num_layers", c.num_layers},
           {"window", c.window},
           {"features", c.features},
           {"epochs", c.epochs},
           {"batch_size", c.batch_size},
           {"learning_rate", c.learning_rate},
           {"beta1", c.beta1},
           {"beta2", c.beta2},
           {"adam_epsilon", c.adam_epsilon},
           {"seed", c.seed},
           {"positional_encoding", c.positional_encoding},
           {"cross_attention", c.cross_attention}};
}

inline void from_json(const json& j, TransformerConfig& c) {
  TransformerConfig d;
  c.d_model = j.value("d_model", d.d_model);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.dff = j.value("dff", d.dff);
  c.num_layers = j.value("num_layers", d.num_layers);
  c.window = j.value("window", d.window);
  c.features = j.value("features", d.features);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.adam_epsilon = j.value("adam_epsilon", d.adam_epsilon);
  c.seed = j.value("seed", d.seed);
  c.positional_encoding = j.value("positional_encoding", d.positional_encoding);
  c.cross_attention = j.value("cross_attention", d.cross_attention);
}

/// Fixed sinusoidal table: even columns sin, odd columns cos.
inline Matrix positional_table(int length, int d_model) {
  Matrix pe(length, d_model);
  for (int pos = 0; pos < length; ++pos)
    for (int i = 0; i < d_model; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d_model));
      pe(pos, i) = (i % 2 == 0) ? std::sin(pos * rate) : std::cos(pos * rate);
    }
  return pe;
}

struct EncoderIndex {
  nn::MhaIndex attn;
  nn::LayerNormIndex ln1;
  nn::FfnIndex ffn;
  nn::LayerNormIndex ln2;
};

struct DecoderIndex {
  nn::MhaIndex self_attn;
  nn::LayerNormIndex ln1;
  nn::MhaIndex cross_attn;
  nn::LayerNormIndex ln2;
  nn::FfnIndex ffn;
  nn::LayerNormIndex ln3;
};

struct Layout {
  std::size_t w_in = 0, b_in = 0, w_out = 0, b_out = 0;
  std::vector<EncoderIndex> encoder;
  std::vector<DecoderIndex> decoder;
};

/// Allocates every tensor (zeros, unit layer-norm gains) in a fixed order.
inline Layout build_layout(const TransformerConfig& c, ParameterSet& p) {
  Layout l;
  l.w_in = p.add("input.w", c.features, c.d_model);
  l.b_in = p.add("input.b", 1, c.d_model);
  for (int i = 0; i < c.num_layers; ++i) {
    const auto pre = "encoder." + std::to_string(i);
    EncoderIndex e;
    e.attn = nn::add_mha(p, pre + ".self", c.d_model);
    e.ln1 = nn::add_layer_norm(p, pre + ".ln1", c.d_model);
    e.ffn = nn::add_ffn(p, pre + ".ffn", c.d_model, c.dff);
    e.ln2 = nn::add_layer_norm(p, pre + ".ln2", c.d_model);
    l.encoder.push_back(e);
  }
  if (c.cross_attention) {
    for (int i = 0; i < c.num_layers; ++i) {
      const auto pre = "decoder." + std::to_string(i);
      DecoderIndex d;
      d.self_attn = nn::add_mha(p, pre + ".self", c.d_model);
      d.ln1 = nn::add_layer_norm(p, pre + ".ln1", c.d_model);
      d.cross_attn = nn::add_mha(p, pre + ".cross", c.d_model);
      d.ln2 = nn::add_layer_norm(p, pre + ".ln2", c.d_model);
      d.ffn = nn::add_ffn(p, pre + ".ffn", c.d_model, c.dff);
      d.ln3 = nn::add_layer_norm(p, pre + ".ln3", c.d_model);
      l.decoder.push_back(d);
    }
  }
  l.w_out = p.add("output.w", c.d_model, c.features);
  l.b_out = p.add("output.b", 1, c.features);
  return l;
}

struct EncoderCache {
  nn::MhaCache attn;
  nn::LayerNormCache ln1;
  nn::FfnCache ffn;
  nn::LayerNormCache ln2;
};

struct DecoderCache {
  nn::MhaCache self_attn;
  nn::LayerNormCache ln1;
  nn::MhaCache cross_attn;
  nn::LayerNormCache ln2;
  nn::FfnCache ffn;
  nn::LayerNormCache ln3;
};

/// Everything the backward pass needs from one forward pass.
struct ForwardTrace {
  Matrix input;
  std::vector<EncoderCache> encoder;
  std::vector<DecoderCache> decoder;
  Matrix memory;  // encoder output
  Matrix hidden;  // input to the output projection
  Matrix output;
};

/// Mean over all W*F entries of the squared difference.
inline double mean_squared_error(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), Errc::ShapeMismatch, "reconstruction shape mismatch");
  return (a - b).squaredNorm() / static_cast<double>(a.size());
}

class AutoencoderModel {
 public:
  AutoencoderModel() = default;

  /// Glorot-uniform weights, zero biases, unit layer-norm gains.
  static AutoencoderModel initialize(const TransformerConfig& config) {
    config.validate();
    AutoencoderModel m;
    m.config_ = config;
    m.layout_ = build_layout(config, m.params_);
    m.positional_ = positional_table(config.window, config.d_model);
    std::mt19937_64 rng(config.seed);
    for (std::size_t i = 0; i < m.params_.size(); ++i) {
      const auto& name = m.params_.names[i];
      auto& w = m.params_[i];
      const bool matrix = name.size() > 2 && (name.ends_with(".w") || name.ends_with(".wq") || name.ends_with(".wk") ||
                                              name.ends_with(".wv") || name.ends_with(".wo") ||
                                              name.ends_with(".w1") || name.ends_with(".w2"));
      if (!matrix) continue;
      const double limit = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
      std::uniform_real_distribution<double> dist(-limit, limit);
      for (Eigen::Index c = 0; c < w.cols(); ++c)
        for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = dist(rng);
    }
    return m;
  }

  const TransformerConfig& config() const { return config_; }
  const ParameterSet& parameters() const { return params_; }
  ParameterSet& parameters() { return params_; }
  const Layout& layout() const { return layout_; }
  const Matrix& positional() const { return positional_; }

  std::optional<double> threshold() const { return threshold_; }
  void set_threshold(double tau) { threshold_ = tau; }
  const std::vector<double>& history() const { return history_; }
  std::vector<double>& history() { return history_; }

  void check_window(const Matrix& window) const {
    require(window.rows() == config_.window && window.cols() == config_.features, Errc::ShapeMismatch,
            "window is " + std::to_string(window.rows()) + "x" + std::to_string(window.cols()) + ", model expects " +
                std::to_string(config_.window) + "x" + std::to_string(config_.features));
  }

  Matrix forward(const Matrix& window) const { return run_forward(window, nullptr); }

  ForwardTrace trace(const Matrix& window) const {
    ForwardTrace t;
    t.output = run_forward(window, &t);
    return t;
  }

  double reconstruction_error(const Matrix& window) const { return mean_squared_error(forward(window), window); }

  /// Mean of per-window reconstruction errors.
  double loss(const std::vector<Matrix>& batch) const {
    require(!batch.empty(), Errc::EmptyBatch, "loss of an empty batch");
    double total = 0.0;
    for (const auto& w : batch) total += reconstruction_error(w);
    return total / static_cast<double>(batch.size());
  }

  /// Accumulates d(loss)/d(params) for one window into `grads`, scaled by
  /// `weight` (1/batch size for a batch mean). Returns the window's error.
  double accumulate_gradient(const Matrix& window, double weight, Gradients& grads) const {
    const auto t = trace(window);
    const double err = mean_squared_error(t.output, window);
    const Matrix d_out = (t.output - window) * (2.0 * weight / static_cast<double>(window.size()));
    backward(t, d_out, grads);
    return err;
  }

  void backward(const ForwardTrace& t, const Matrix& d_out, Gradients& g) const {
    const auto& p = params_;
    const auto& L = layout_;
    const int heads = config_.num_heads;
    g[L.w_out].noalias() += t.hidden.transpose() * d_out;
    g[L.b_out] += d_out.colwise().sum();
    Matrix d_hidden = d_out * p[L.w_out].transpose();

    Matrix d_embedded = Matrix::Zero(t.input.rows(), config_.d_model);
    Matrix d_memory;
    if (config_.cross_attention) {
      d_memory = Matrix::Zero(t.memory.rows(), config_.d_model);
      Matrix d_x = std::move(d_hidden);
      Matrix dq, dkv;
      for (int i = config_.num_layers - 1; i >= 0; --i) {
        const auto& ix = L.decoder[static_cast<std::size_t>(i)];
        const auto& c = t.decoder[static_cast<std::size_t>(i)];
        Matrix d_r3 = nn::layer_norm_backward(p, ix.ln3, c.ln3, d_x, g);
        Matrix d_y2 = d_r3 + nn::feed_forward_backward(p, ix.ffn, c.ffn, d_r3, g);
        Matrix d_r2 = nn::layer_norm_backward(p, ix.ln2, c.ln2, d_y2, g);
        nn::mha_backward(p, ix.cross_attn, heads, c.cross_attn, d_r2, g, dq, dkv);
        d_memory += dkv;
        Matrix d_y1 = d_r2 + dq;
        Matrix d_r1 = nn::layer_norm_backward(p, ix.ln1, c.ln1, d_y1, g);
        nn::mha_backward(p, ix.self_attn, heads, c.self_attn, d_r1, g, dq, dkv);
        d_x = d_r1 + dq + dkv;
      }
      d_embedded += d_x;
    } else {
      d_memory = std::move(d_hidden);
    }

    Matrix d_x = std::move(d_memory);
    Matrix dq, dkv;
    for (int i = config_.num_layers - 1; i >= 0; --i) {
      const auto& ix = L.encoder[static_cast<std::size_t>(i)];
      const auto& c = t.encoder[static_cast<std::size_t>(i)];
      Matrix d_r2 = nn::layer_norm_backward(p, ix.ln2, c.ln2, d_x, g);
      Matrix d_y = d_r2 + nn::feed_forward_backward(p, ix.ffn, c.ffn, d_r2, g);
      Matrix d_r1 = nn::layer_norm_backward(p, ix.ln1, c.ln1, d_y, g);
      nn::mha_backward(p, ix.attn, heads, c.attn, d_r1, g, dq, dkv);
      d_x = d_r1 + dq + dkv;
    }
    d_embedded += d_x;
    g[L.w_in].noalias() += t.input.transpose() * d_embedded;
    g[L.b_in] += d_embedded.colwise().sum();
  }

  /// Parameters differ only by layout position; names and shapes must match.
  void assign(const TransformerConfig& config, ParameterSet params, Matrix positional) {
    config.validate();
    ParameterSet expected;
    auto layout = build_layout(config, expected);
    require(expected.size() == params.size(), Errc::CorruptModel, "parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      require(expected.names[i] == params.names[i], Errc::CorruptModel, "unexpected tensor " + params.names[i]);
      require(expected[i].rows() == params[i].rows() && expected[i].cols() == params[i].cols(), Errc::CorruptModel,
              "bad shape for " + params.names[i]);
      require(params[i].allFinite(), Errc::CorruptModel, "non-finite weights in " + params.names[i]);
    }
    require(positional.rows() == config.window && positional.cols() == config.d_model, Errc::CorruptModel,
            "bad positional table shape");
    config_ = config;
    layout_ = std::move(layout);
    params_ = std::move(params);
    positional_ = std::move(positional);
  }

 private:
  Matrix run_forward(const Matrix& window, ForwardTrace* t) const {
    check_window(window);
    require(window.allFinite(), Errc::ShapeMismatch, "window contains non-finite entries");
    const auto& p = params_;
    const auto& L = layout_;
    const int heads = config_.num_heads;

    Matrix embedded = nn::affine(window, p[L.w_in], p[L.b_in]);
    if (config_.positional_encoding) embedded += positional_;
    if (t) {
      t->input = window;
      t->encoder.resize(L.encoder.size());
      t->decoder.resize(L.decoder.size());
    }

    Matrix x = embedded;
    for (std::size_t i = 0; i < L.encoder.size(); ++i) {
      const auto& ix = L.encoder[i];
      EncoderCache* c = t ? &t->encoder[i] : nullptr;
      Matrix a = nn::multi_head_attention(x, x, p, ix.attn, heads, c ? &c->attn : nullptr);
      Matrix y = nn::layer_norm(x + a, p, ix.ln1, c ? &c->ln1 : nullptr);
      Matrix f = nn::feed_forward(y, p, ix.ffn, c ? &c->ffn : nullptr);
      x = nn::layer_norm(y + f, p, ix.ln2, c ? &c->ln2 : nullptr);
    }

    Matrix hidden;
    if (config_.cross_attention) {
      const Matrix& memory = x;
      Matrix u = embedded;
      for (std::size_t i = 0; i < L.decoder.size(); ++i) {
        const auto& ix = L.decoder[i];
        DecoderCache* c = t ? &t->decoder[i] : nullptr;
        Matrix s = nn::multi_head_attention(u, u, p, ix.self_attn, heads, c ? &c->self_attn : nullptr);
        Matrix y1 = nn::layer_norm(u + s, p, ix.ln1, c ? &c->ln1 : nullptr);
        Matrix cr = nn::multi_head_attention(y1, memory, p, ix.cross_attn, heads, c ? &c->cross_attn : nullptr);
        Matrix y2 = nn::layer_norm(y1 + cr, p, ix.ln2, c ? &c->ln2 : nullptr);
        Matrix f = nn::feed_forward(y2, p, ix.ffn, c ? &c->ffn : nullptr);
        u = nn::layer_norm(y2 + f, p, ix.ln3, c ? &c->ln3 : nullptr);
      }
      if (t) t->memory = memory;
      hidden = std::move(u);
    } else {
      if (t) t->memory = x;
      hidden = std::move(x);
    }

    Matrix out = nn::affine(hidden, p[L.w_out], p[L.b_out]);
    require(out.allFinite(), Errc::NonFiniteActivation, "forward pass produced non-finite values");
    if (t) t->hidden = std::move(hidden);
    return out;
  }

  TransformerConfig config_;
  ParameterSet params_;
  Layout layout_;
  Matrix positional_;
  std::optional<double> threshold_;
  std::vector<double> history_;
};

/// Adam with bias correction.
class AdamOptimizer {
 public:
  AdamOptimizer(const ParameterSet& params, double lr, double beta1, double beta2, double epsilon)
      : m_(params.zeros_like()), v_(params.zeros_like()), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(epsilon) {}

  void step(ParameterSet& params, const Gradients& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i].cwiseAbs2();
      params[i].array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
    }
  }

 private:
  Gradients m_, v_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

struct TrainOptions {
  std::function<void(int epoch, double mean_loss)> on_epoch;
};

/// Mini-batch Adam over the windows in their given order (the last batch may
/// be partial). Records the mean per-window loss of each epoch.
inline AutoencoderModel train(const std::vector<Matrix>& windows, const TransformerConfig& config,
                              const TrainOptions& options = {}) {
  config.validate();
  require(windows.size() >= static_cast<std::size_t>(config.batch_size), Errc::InvalidArgument,
          "need at least one full batch: " + std::to_string(windows.size()) + " windows < batch " +
              std::to_string(config.batch_size));
  auto model = AutoencoderModel::initialize(config);
  for (const auto& w : windows) model.check_window(w);

  AdamOptimizer adam(model.parameters(), config.learning_rate, config.beta1, config.beta2, config.adam_epsilon);
  const auto B = static_cast<std::size_t>(config.batch_size);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < windows.size(); start += B) {
      const auto end = std::min(windows.size(), start + B);
      const double weight = 1.0 / static_cast<double>(end - start);
      auto grads = model.parameters().zeros_like();
      for (std::size_t i = start; i < end; ++i) {
        double err = 0.0;
        try {
          err = model.accumulate_gradient(windows[i], weight, grads);
        } catch (const Error& e) {
          if (e.code() != Errc::NonFiniteActivation) throw;
          err = std::numeric_limits<double>::infinity();
        }
        require(std::isfinite(err), Errc::DivergenceDetected, "non-finite loss at epoch " + std::to_string(epoch + 1));
        epoch_loss += err;
      }
      adam.step(model.parameters(), grads);
    }
    epoch_loss /= static_cast<double>(windows.size());
    model.history().push_back(epoch_loss);
    if (options.on_epoch) options.on_epoch(epoch + 1, epoch_loss);
  }
  return model;
}

// ---------------------------------------------------------------------------
// Model container
//
//   magic "FFAEMDL1" | u32 version | u32 len + config JSON
//   u32 tensor count | per tensor: u16 name len, name, u32 rows, u32 cols,
//                                   rows*cols f64 (row-major)
//   u8 has_threshold | f64 threshold | u32 history len | f64 history...
//
// All integers and floats little-endian. The positional table is stored as
// the tensor named "positional" after the weights.

inline constexpr char kModelMagic[8] = {'F', 'F', 'A', 'E', 'M', 'D', 'L', '1'};
inline constexpr std::uint32_t kModelVersion = 1;

namespace detail {

template <class U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }

inline void put_tensor(std::string& out, const std::string& name, const Matrix& m) {
  put_le(out, static_cast<std::uint16_t>(name.size()));
  out += name;
  put_le(out, static_cast<std::uint32_t>(m.rows()));
  put_le(out, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) put_f64(out, m(r, c));
}

class Reader {
 public:
  explicit Reader(const std::string& data) : data_(data) {}

  template <class U>
  U le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  std::string bytes(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    require(pos_ + n <= data_.size(), Errc::CorruptModel, "model container truncated");
  }
  const std::string& data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize(const AutoencoderModel& model) {
  std::string out(kModelMagic, sizeof(kModelMagic));
  detail::put_le(out, kModelVersion);
  const auto cfg = json(model.config()).dump();
  detail::put_le(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  const auto& p = model.parameters();
  detail::put_le(out, static_cast<std::uint32_t>(p.size() + 1));
  for (std::size_t i = 0; i < p.size(); ++i) detail::put_tensor(out, p.names[i], p[i]);
  detail::put_tensor(out, "positional", model.positional());
  out.push_back(model.threshold() ? 1 : 0);
  detail::put_f64(out, model.threshold().value_or(0.0));
  detail::put_le(out, static_cast<std::uint32_t>(model.history().size()));
  for (double h : model.history()) detail::put_f64(out, h);
  return out;
}

inline AutoencoderModel deserialize(const std::string& data) {
  require(data.size() >= sizeof(kModelMagic) && std::memcmp(data.data(), kModelMagic, sizeof(kModelMagic)) == 0,
          Errc::CorruptModel, "bad magic");
  detail::Reader in(data);
  in.bytes(sizeof(kModelMagic));
  require(in.le<std::uint32_t>() == kModelVersion, Errc::CorruptModel, "unsupported model version");
  TransformerConfig config;
  try {
    config = json::parse(in.bytes(in.le<std::uint32_t>())).get<TransformerConfig>();
  } catch (const json::exception& e) {
    throw Error(Errc::CorruptModel, std::string("config: ") + e.what());
  }
  const auto count = in.le<std::uint32_t>();
  require(count >= 1, Errc::CorruptModel, "no tensors");
  ParameterSet params;
  Matrix positional;
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name = in.bytes(in.le<std::uint16_t>());
    const auto rows = in.le<std::uint32_t>(), cols = in.le<std::uint32_t>();
    require(static_cast<std::uint64_t>(rows) * cols <= (1ull << 28), Errc::CorruptModel, "tensor too large");
    Matrix m(rows, cols);
    for (std::uint32_t r = 0; r < rows; ++r)
      for (std::uint32_t c = 0; c < cols; ++c) m(r, c) = in.f64();
    if (t + 1 == count) {
      require(name == "positional", Errc::CorruptModel, "missing positional table");
      positional = std::move(m);
    } else {
      params.names.push_back(name);
      params.values.push_back(std::move(m));
    }
  }
  AutoencoderModel model;
  model.assign(config, std::move(params), std::move(positional));
  const bool has_tau = in.le<std::uint8_t>() != 0;
  const double tau = in.f64();
  if (has_tau) model.set_threshold(tau);
  const auto hist = in.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < hist; ++i) model.history().push_back(in.f64());
  require(in.done(), Errc::CorruptModel, "trailing bytes");
  return model;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), Errc::IOError, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), Errc::IOError, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

/// Writes the container and its JSON sidecar (`<path>.json`); returns the
/// container's size in bytes.
inline std::size_t save(const AutoencoderModel& model, const std::filesystem::path& path, json metrics = json::object()) {
  const auto bytes = serialize(model);
  write_file_bytes(path, bytes);
  json sidecar{{"format", "FFAEMDL1"},
               {"version", kModelVersion},
               {"config", model.config()},
               {"parameters", model.parameters().scalar_count()},
               {"threshold", model.threshold() ? json(*model.threshold()) : json(nullptr)},
               {"history", model.history()},
               {"bytes", bytes.size()},
               {"metrics", std::move(metrics)}};
  std::ofstream(path.string() + ".json") << sidecar.dump(2) << '\n';
  return bytes.size();
}

inline AutoencoderModel load(const std::filesystem::path& path) { return deserialize(read_file_bytes(path)); }

// ---------------------------------------------------------------------------
// Gradient verification

struct GradCheckReport {
  double max_relative = 0.0;
  std::string worst_tensor;
  std::vector<std::pair<std::string, double>> per_tensor;
};

/// |analytic - numeric| / max(|analytic|, |numeric|, floor). The floor keeps
/// entries whose true gradient is ~0 from dividing noise by noise.
inline double relative_discrepancy(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares the analytic gradient of the window's reconstruction loss with
/// central finite differences for every weight. `tamper` may modify the
/// analytic gradients first (mutation testing).
inline GradCheckReport grad_check(const AutoencoderModel& model, const Matrix& window, double epsilon = 1e-5,
                                  const std::function<void(Gradients&)>& tamper = {}) {
  auto grads = model.parameters().zeros_like();
  model.accumulate_gradient(window, 1.0, grads);
  if (tamper) tamper(grads);

  AutoencoderModel probe = model;
  auto& params = probe.parameters();
  GradCheckReport report;
  for (std::size_t i = 0; i < params.size(); ++i) {
    double worst = 0.0;
    auto& w = params[i];
    for (Eigen::Index c = 0; c < w.cols(); ++c)
      for (Eigen::Index r = 0; r < w.rows(); ++r) {
        const double saved = w(r, c);
        w(r, c) = saved + epsilon;
        const double up = probe.reconstruction_error(window);
        w(r, c) = saved - epsilon;
        const double down = probe.reconstruction_error(window);
        w(r, c) = saved;
        const double numeric = (up - down) / (2.0 * epsilon);
        worst = std::max(worst, relative_discrepancy(grads[i](r, c), numeric));
      }
    report.per_tensor.emplace_back(params.names[i], worst);
    if (worst >= report.max_relative) {
      report.max_relative = worst;
      report.worst_tensor = params.names[i];
    }
  }
  return report;
}

/// The downsized configuration used for gradient verification.
inline TransformerConfig gradcheck_config() {
  TransformerConfig c;
  c.d_model = 4;
  c.num_heads = 2;
  c.dff = 8;
  c.num_layers = 1;
  c.window = 3;
  c.features = 2;
  c.seed = 7;
  return c;
}

}  // namespace fingerforge::ae

#endif  // FINGERFORGE_TRANSFORMER_HPP
