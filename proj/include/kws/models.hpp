#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "kws/autodiff.hpp"
#include "kws/dsp.hpp"
#include "kws/error.hpp"
#include "kws/layers.hpp"
#include "kws/random.hpp"

namespace kws::models {

using ad::Tensor;
using layers::Mode;

enum class Arch { cnn, cnn_bilstm, attention_rnn, multilayer_attention };

inline std::string to_string(Arch a) {
  switch (a) {
    case Arch::cnn: return "cnn";
    case Arch::cnn_bilstm: return "cnn_bilstm";
    case Arch::attention_rnn: return "attention_rnn";
    case Arch::multilayer_attention: return "multilayer_attention";
  }
  return "?";
}

inline Arch parse_arch(const std::string& s) {
  for (Arch a : {Arch::cnn, Arch::cnn_bilstm, Arch::attention_rnn, Arch::multilayer_attention}) {
    if (to_string(a) == s) return a;
  }
  throw ConfigError("unknown architecture '" + s + "'");
}

struct ModelConfig {
  Arch arch = Arch::multilayer_attention;
  std::size_t n_classes = 2;
  std::size_t input_frames = 98;  // T
  std::size_t input_dim = 40;     // D
  // Empty means the architecture default: {32, 64, 64} for cnn, {32, 64} otherwise.
  std::vector<std::size_t> conv_channels;
  std::size_t kernel_size = 3;
  std::size_t pool_size = 2;
  std::size_t lstm_hidden = 64;
  // Hidden dense widths before the output layer. Empty with `default_dense`
  // set picks the architecture default: {128, 64} for cnn, none for
  // cnn_bilstm, {64} for the attention models.
  std::vector<std::size_t> dense_units;
  bool default_dense = true;
  double dropout_rate = 0.2;
  std::uint64_t seed = 0;

  bool operator==(const ModelConfig&) const = default;
};

inline std::vector<std::size_t> resolved_conv_channels(const ModelConfig& c) {
  if (!c.conv_channels.empty()) return c.conv_channels;
  if (c.arch == Arch::cnn) return {32, 64, 64};
  return {32, 64};
}

inline std::vector<std::size_t> resolved_dense_units(const ModelConfig& c) {
  if (!c.dense_units.empty() || !c.default_dense) return c.dense_units;
  switch (c.arch) {
    case Arch::cnn: return {128, 64};
    case Arch::cnn_bilstm: return {};
    default: return {64};
  }
}

/// Spatial size after the conv/pool stack; throws naming the first block
/// whose pooling window no longer fits.
inline std::pair<std::size_t, std::size_t> conv_output_size(const ModelConfig& c) {
  std::size_t h = c.input_frames, w = c.input_dim;
  const auto channels = resolved_conv_channels(c);
  for (std::size_t b = 0; b < channels.size(); ++b) {
    if (h < c.pool_size || w < c.pool_size) {
      throw ConfigError("input " + std::to_string(c.input_frames) + "x" + std::to_string(c.input_dim) +
                        " too small: conv block " + std::to_string(b) + " receives " + std::to_string(h) + "x" +
                        std::to_string(w) + ", smaller than the " + std::to_string(c.pool_size) + "x" +
                        std::to_string(c.pool_size) + " pool");
    }
    h = (h - c.pool_size) / c.pool_size + 1;
    w = (w - c.pool_size) / c.pool_size + 1;
  }
  return {h, w};
}

inline void validate(const ModelConfig& c) {
  if (c.n_classes < 2) throw ConfigError("n_classes must be at least 2");
  if (c.lstm_hidden == 0) throw ConfigError("lstm_hidden must be positive");
  if (c.input_frames == 0 || c.input_dim == 0) throw ConfigError("input shape must be positive");
  if (c.kernel_size == 0 || c.pool_size == 0) throw ConfigError("kernel_size and pool_size must be positive");
  if (!(c.dropout_rate >= 0.0 && c.dropout_rate < 1.0)) throw ConfigError("dropout_rate must lie in [0, 1)");
  const auto channels = resolved_conv_channels(c);
  if (channels.empty()) throw ConfigError("at least one conv block is required");
  if (std::find(channels.begin(), channels.end(), 0u) != channels.end()) throw ConfigError("zero conv channels");
  for (auto u : resolved_dense_units(c)) {
    if (u == 0) throw ConfigError("zero dense units");
  }
  conv_output_size(c);
}

/// A built network. Parameters are tensor handles; copying a Model would
/// alias them, so copies go through clone().
class Model {
 public:
  ModelConfig config;
  std::map<std::string, Tensor> named_params;  // trainable weights and batch-norm buffers
  Mode mode = Mode::train;

  Model() = default;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  Model clone() const {
    Model m;
    m.config = config;
    m.mode = mode;
    m.dropout_rng_ = dropout_rng_;
    for (const auto& [name, t] : named_params) m.named_params.emplace(name, t.clone());
    return m;
  }

  const Tensor& param(const std::string& name) const {
    const auto it = named_params.find(name);
    if (it == named_params.end()) throw UsageError("model has no parameter '" + name + "'");
    return it->second;
  }

  /// Trainable tensors in name order.
  std::vector<std::pair<std::string, Tensor>> trainable() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& [name, t] : named_params) {
      if (t.requires_grad()) out.emplace_back(name, t);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : trainable()) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : named_params) t.zero_grad();
  }

  std::vector<std::vector<double>> snapshot() const {
    std::vector<std::vector<double>> values;
    for (const auto& [name, t] : named_params) values.emplace_back(t.data().begin(), t.data().end());
    return values;
  }

  void restore(const std::vector<std::vector<double>>& values) {
    if (values.size() != named_params.size()) throw UsageError("snapshot does not match model");
    std::size_t i = 0;
    for (auto& [name, t] : named_params) {
      if (values[i].size() != t.size()) throw UsageError("snapshot size mismatch for '" + name + "'");
      std::copy(values[i].begin(), values[i].end(), t.mutable_data().begin());
      ++i;
    }
  }

  Rng& dropout_rng() { return dropout_rng_; }

  void add(const std::string& name, Tensor t) {
    if (!named_params.emplace(name, std::move(t)).second) throw UsageError("duplicate parameter '" + name + "'");
  }

 private:
  Rng dropout_rng_{0};
  friend Model build_model(const ModelConfig&);
};

// ---------------------------------------------------------------------------
// Construction

namespace detail {

inline void add_lstm(Model& m, const std::string& prefix, const layers::LstmParams& p) {
  for (auto& [name, t] : p.named()) m.add(prefix + "." + name, t);
}

inline layers::LstmParams get_lstm(const Model& m, const std::string& prefix) {
  layers::LstmParams p;
  const auto g = [&](const char* n) { return m.param(prefix + "." + n); };
  p.W_i = g("W_i"), p.W_f = g("W_f"), p.W_o = g("W_o"), p.W_g = g("W_g");
  p.U_i = g("U_i"), p.U_f = g("U_f"), p.U_o = g("U_o"), p.U_g = g("U_g");
  p.b_i = g("b_i"), p.b_f = g("b_f"), p.b_o = g("b_o"), p.b_g = g("b_g");
  return p;
}

inline void add_dense(Model& m, const std::string& prefix, const layers::DenseParams& p) {
  m.add(prefix + ".W", p.weights);
  m.add(prefix + ".b", p.bias);
}

inline layers::DenseParams get_dense(const Model& m, const std::string& prefix) {
  return {m.param(prefix + ".W"), m.param(prefix + ".b")};
}

inline std::string block_name(const char* kind, std::size_t i) { return std::string(kind) + std::to_string(i); }

}  // namespace detail

/// Width of the per-timestep sequence produced by the conv stack
/// (channels x pooled feature width).
inline std::size_t conv_sequence_width(const ModelConfig& c) {
  return resolved_conv_channels(c).back() * conv_output_size(c).second;
}

inline std::size_t conv_sequence_length(const ModelConfig& c) { return conv_output_size(c).first; }

/// Deterministic in config.seed. Parameter naming:
///   conv<i>.kernel/.bias, bn<i>.gamma/.beta/.running_mean/.running_var,
///   lstm<j>.fwd.* / lstm<j>.bwd.*, attn.query_proj (attention_rnn),
///   attn.stage<k>.query_proj (multilayer_attention), dense<i>.W/.b, out.W/.b
inline Model build_model(const ModelConfig& config) {
  validate(config);
  Model m;
  m.config = config;
  m.dropout_rng_ = Rng(mix_seed(config.seed, 0xD50));
  Rng rng(mix_seed(config.seed, 0x1417));

  const auto channels = resolved_conv_channels(config);
  std::size_t in_ch = 1;
  for (std::size_t b = 0; b < channels.size(); ++b) {
    auto conv = layers::init_conv(in_ch, channels[b], config.kernel_size, config.kernel_size, rng);
    m.add(detail::block_name("conv", b) + ".kernel", conv.kernels);
    m.add(detail::block_name("conv", b) + ".bias", conv.bias);
    auto bn = layers::init_batch_norm(channels[b]);
    const std::string bn_name = detail::block_name("bn", b);
    m.add(bn_name + ".gamma", bn.gamma);
    m.add(bn_name + ".beta", bn.beta);
    m.add(bn_name + ".running_mean", bn.running_mean);
    m.add(bn_name + ".running_var", bn.running_var);
    in_ch = channels[b];
  }

  const auto [seq_len, pooled_w] = conv_output_size(config);
  const std::size_t seq_width = channels.back() * pooled_w;
  const std::size_t hidden = config.lstm_hidden;
  std::size_t head_in = 0;

  switch (config.arch) {
    case Arch::cnn:
      head_in = channels.back() * seq_len * pooled_w;
      break;
    case Arch::cnn_bilstm:
      detail::add_lstm(m, "lstm0.fwd", layers::init_lstm(seq_width, hidden, rng));
      detail::add_lstm(m, "lstm0.bwd", layers::init_lstm(seq_width, hidden, rng));
      head_in = 2 * hidden;
      break;
    case Arch::attention_rnn:
    case Arch::multilayer_attention:
      detail::add_lstm(m, "lstm0.fwd", layers::init_lstm(seq_width, hidden, rng));
      detail::add_lstm(m, "lstm0.bwd", layers::init_lstm(seq_width, hidden, rng));
      detail::add_lstm(m, "lstm1.fwd", layers::init_lstm(2 * hidden, hidden, rng));
      detail::add_lstm(m, "lstm1.bwd", layers::init_lstm(2 * hidden, hidden, rng));
      if (config.arch == Arch::attention_rnn) {
        m.add("attn.query_proj", layers::init_attention(2 * hidden, 2 * hidden, rng).query_proj);
      } else {
        m.add("attn.stage1.query_proj", layers::init_attention(config.input_dim, seq_width, rng).query_proj);
        m.add("attn.stage2.query_proj", layers::init_attention(seq_width, 2 * hidden, rng).query_proj);
        m.add("attn.stage3.query_proj", layers::init_attention(2 * hidden, 2 * hidden, rng).query_proj);
      }
      head_in = 2 * hidden;
      break;
  }

  std::size_t width = head_in;
  const auto dense_units = resolved_dense_units(config);
  for (std::size_t i = 0; i < dense_units.size(); ++i) {
    detail::add_dense(m, detail::block_name("dense", i), layers::init_dense(width, dense_units[i], rng));
    width = dense_units[i];
  }
  detail::add_dense(m, "out", layers::init_dense(width, config.n_classes, rng));
  return m;
}

// ---------------------------------------------------------------------------
// Forward

struct ForwardResult {
  Tensor logits;                      // N x n_classes
  std::vector<Tensor> stage_weights;  // attention weights (N x T') per stage, in stage order
};

namespace detail {

// N x T x D -> N x C x T' x D'
inline Tensor conv_stack(Model& m, const Tensor& batch) {
  const auto& c = m.config;
  Tensor x = ad::reshape(batch, {batch.dim(0), 1, batch.dim(1), batch.dim(2)});
  const auto channels = resolved_conv_channels(c);
  for (std::size_t b = 0; b < channels.size(); ++b) {
    layers::ConvParams conv;
    conv.kernels = m.param(block_name("conv", b) + ".kernel");
    conv.bias = m.param(block_name("conv", b) + ".bias");
    conv.padding = layers::Padding::same;
    const std::string bn_name = block_name("bn", b);
    layers::BatchNormParams bn;
    bn.gamma = m.param(bn_name + ".gamma");
    bn.beta = m.param(bn_name + ".beta");
    bn.running_mean = m.param(bn_name + ".running_mean");
    bn.running_var = m.param(bn_name + ".running_var");

    x = layers::conv2d(x, conv);
    x = layers::batch_norm(x, bn, m.mode);
    x = ad::relu(x);
    x = layers::max_pool2d(x, c.pool_size, c.pool_size, c.pool_size, c.pool_size);
    x = layers::dropout(x, c.dropout_rate, m.mode, m.dropout_rng());
  }
  return x;
}

// N x C x T' x D' -> N x T' x (C * D')
inline Tensor to_sequence(const Tensor& maps) {
  const std::size_t n = maps.dim(0), ch = maps.dim(1), t = maps.dim(2), w = maps.dim(3);
  return ad::reshape(ad::permute(maps, {0, 2, 1, 3}), {n, t, ch * w});
}

inline Tensor head(const Model& m, Tensor x) {
  const auto units = resolved_dense_units(m.config);
  for (std::size_t i = 0; i < units.size(); ++i) {
    x = layers::dense(x, get_dense(m, block_name("dense", i)), layers::Activation::relu);
  }
  return layers::dense(x, get_dense(m, "out"));
}

inline Tensor time_step(const Tensor& seq, std::size_t t) {
  return ad::reshape(ad::slice(seq, 1, t, 1), {seq.dim(0), seq.dim(2)});
}

}  // namespace detail

inline void check_batch(const Model& m, const Tensor& batch) {
  if (batch.rank() != 3 || batch.dim(1) != m.config.input_frames || batch.dim(2) != m.config.input_dim) {
    throw ShapeError("model expects N x " + std::to_string(m.config.input_frames) + " x " +
                     std::to_string(m.config.input_dim) + " features, got " + ad::shape_str(batch.shape()));
  }
}

/// Full forward pass with the attention weights of each stage exposed.
/// Train/infer behavior of dropout and batch norm follows model.mode.
inline ForwardResult forward_with_weights(Model& m, const Tensor& batch) {
  check_batch(m, batch);
  const auto& c = m.config;
  const std::size_t hidden2 = 2 * c.lstm_hidden;
  const Tensor maps = detail::conv_stack(m, batch);
  ForwardResult r;

  if (c.arch == Arch::cnn) {
    const Tensor flat = ad::reshape(maps, {maps.dim(0), maps.size() / maps.dim(0)});
    r.logits = detail::head(m, flat);
    return r;
  }

  const Tensor seq = detail::to_sequence(maps);
  const Tensor lstm0 =
      layers::bilstm_sequence(seq, detail::get_lstm(m, "lstm0.fwd"), detail::get_lstm(m, "lstm0.bwd"));

  if (c.arch == Arch::cnn_bilstm) {
    // Final state of each direction: forward at T'-1, backward at 0.
    const std::size_t t_last = lstm0.dim(1) - 1;
    const Tensor fwd_last = ad::slice(detail::time_step(lstm0, t_last), 1, 0, c.lstm_hidden);
    const Tensor bwd_last = ad::slice(detail::time_step(lstm0, 0), 1, c.lstm_hidden, c.lstm_hidden);
    r.logits = detail::head(m, ad::concat({fwd_last, bwd_last}, 1));
    return r;
  }

  const Tensor lstm1 =
      layers::bilstm_sequence(lstm0, detail::get_lstm(m, "lstm1.fwd"), detail::get_lstm(m, "lstm1.bwd"));
  const double last_scale = 1.0 / std::sqrt(static_cast<double>(hidden2));

  if (c.arch == Arch::attention_rnn) {
    const Tensor summary = detail::time_step(lstm1, lstm1.dim(1) / 2);
    const auto read = layers::attend(summary, lstm1, {m.param("attn.query_proj"), last_scale});
    r.stage_weights = {read.weights};
    r.logits = detail::head(m, read.context);
    return r;
  }

  // Three chained reads. The raw-feature summary queries the conv sequence;
  // each context, projected, queries the next layer up.
  const std::size_t seq_width = seq.dim(2);
  const Tensor feature_summary = ad::mean(batch, 1);  // N x D
  const auto first = layers::attend(feature_summary, seq,
                                    {m.param("attn.stage1.query_proj"),
                                     1.0 / std::sqrt(static_cast<double>(seq_width))});
  const auto second = layers::attend(first.context, lstm0, {m.param("attn.stage2.query_proj"), last_scale});
  const auto third = layers::attend(second.context, lstm1, {m.param("attn.stage3.query_proj"), last_scale});
  r.stage_weights = {first.weights, second.weights, third.weights};
  r.logits = detail::head(m, third.context);
  return r;
}

inline Tensor model_forward(Model& m, const Tensor& batch) { return forward_with_weights(m, batch).logits; }

/// Single-sample multi-layer attention pass over a T x D feature matrix.
inline ForwardResult multilayer_attention_forward(Model& m, const Matrix& features) {
  if (m.config.arch != Arch::multilayer_attention) {
    throw UsageError("multilayer_attention_forward on a " + to_string(m.config.arch) + " model");
  }
  const Tensor batch = Tensor::from({1, features.rows, features.cols}, features.data);
  return forward_with_weights(m, batch);
}

struct Prediction {
  std::size_t label = 0;
  std::vector<double> probabilities;
};

/// Index of the largest value; ties resolve to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

/// Decision from raw logits: argmax of their softmax.
inline Prediction decide(std::span<const double> logits) {
  Prediction p;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  for (double l : logits) p.probabilities.push_back(std::exp(l - mx) / z);
  p.label = argmax(logits);
  return p;
}

inline std::vector<Prediction> predict_batch(Model& m, const Tensor& batch) {
  ad::NoGradGuard no_grad;
  const Tensor probs = ad::softmax(model_forward(m, batch), 1);
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  std::vector<Prediction> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].probabilities.assign(probs.data().begin() + static_cast<std::ptrdiff_t>(i * k),
                                probs.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * k));
    out[i].label = argmax(out[i].probabilities);
  }
  return out;
}

/// Class decision for one feature matrix. Expects the model in infer mode.
inline Prediction predict(Model& m, const Matrix& features) {
  if (m.mode != Mode::infer) throw UsageError("predict requires the model in infer mode");
  return predict_batch(m, Tensor::from({1, features.rows, features.cols}, features.data)).front();
}

}  // namespace kws::models
