#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "kws/autodiff.hpp"
#include "kws/error.hpp"
#include "kws/random.hpp"

namespace kws::layers {

using ad::Node;
using ad::Shape;
using ad::Tensor;

enum class Mode { train, infer };
enum class Padding { same, valid };
enum class Activation { none, relu, tanh, softmax };

// ---------------------------------------------------------------------------
// Initialization

/// Uniform in +-sqrt(6 / (fan_in + fan_out)).
inline Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> values(ad::numel(shape));
  for (double& v : values) v = rng.uniform(-limit, limit);
  return Tensor::from(std::move(shape), std::move(values), true);
}

// ---------------------------------------------------------------------------
// Convolution

struct ConvParams {
  Tensor kernels;  // out_ch x in_ch x kh x kw
  Tensor bias;     // out_ch
  std::size_t stride_h = 1, stride_w = 1;
  Padding padding = Padding::same;

  std::size_t out_channels() const { return kernels.dim(0); }
  std::size_t in_channels() const { return kernels.dim(1); }
};

inline ConvParams init_conv(std::size_t in_ch, std::size_t out_ch, std::size_t kh, std::size_t kw, Rng& rng) {
  ConvParams p;
  p.kernels = glorot_uniform({out_ch, in_ch, kh, kw}, in_ch * kh * kw, out_ch * kh * kw, rng);
  p.bias = Tensor::zeros({out_ch}, true);
  return p;
}

namespace detail {

struct ConvGeometry {
  std::size_t n, c, h, w;      // input
  std::size_t o, kh, kw;       // kernel
  std::size_t sh, sw;          // stride
  std::size_t pad_top, pad_left;
  std::size_t ho, wo;          // output

  std::size_t patch() const { return c * kh * kw; }
  std::size_t positions() const { return ho * wo; }
};

// cols[(ci*kh + i)*kw + j][y*wo + x] = input[ci][y*sh + i - pad_top][x*sw + j - pad_left]
inline void im2col(const double* img, const ConvGeometry& g, double* cols) {
  const std::size_t pos = g.positions();
  for (std::size_t ci = 0; ci < g.c; ++ci)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = cols + ((ci * g.kh + i) * g.kw + j) * pos;
        for (std::size_t y = 0; y < g.ho; ++y) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.sh + i) - static_cast<std::ptrdiff_t>(g.pad_top);
          for (std::size_t x = 0; x < g.wo; ++x) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(x * g.sw + j) - static_cast<std::ptrdiff_t>(g.pad_left);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                ix < static_cast<std::ptrdiff_t>(g.w);
            row[y * g.wo + x] =
                inside ? img[(ci * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] : 0.0;
          }
        }
      }
}

inline void col2im_acc(const double* cols, const ConvGeometry& g, double* img) {
  const std::size_t pos = g.positions();
  for (std::size_t ci = 0; ci < g.c; ++ci)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = cols + ((ci * g.kh + i) * g.kw + j) * pos;
        for (std::size_t y = 0; y < g.ho; ++y) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.sh + i) - static_cast<std::ptrdiff_t>(g.pad_top);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t x = 0; x < g.wo; ++x) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(x * g.sw + j) - static_cast<std::ptrdiff_t>(g.pad_left);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            img[(ci * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] += row[y * g.wo + x];
          }
        }
      }
}

}  // namespace detail

/// 2-D cross-correlation over N x C x H x W input.
inline Tensor conv2d(const Tensor& input, const ConvParams& p) {
  if (input.rank() != 4) throw ShapeError("conv2d: expected N x C x H x W input, got " + ad::shape_str(input.shape()));
  if (p.kernels.rank() != 4) throw ShapeError("conv2d: kernels must be out x in x kh x kw");
  if (p.bias.size() != p.out_channels()) throw ShapeError("conv2d: bias length does not match output channels");
  if (input.dim(1) != p.in_channels()) {
    throw ShapeError("conv2d: input has " + std::to_string(input.dim(1)) + " channels, kernels expect " +
                     std::to_string(p.in_channels()));
  }
  if (p.stride_h == 0 || p.stride_w == 0) throw ShapeError("conv2d: zero stride");

  detail::ConvGeometry g{};
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.o = p.out_channels();
  g.kh = p.kernels.dim(2);
  g.kw = p.kernels.dim(3);
  g.sh = p.stride_h;
  g.sw = p.stride_w;
  if (p.padding == Padding::same) {
    g.ho = (g.h + g.sh - 1) / g.sh;
    g.wo = (g.w + g.sw - 1) / g.sw;
    const std::size_t need_h = (g.ho - 1) * g.sh + g.kh;
    const std::size_t need_w = (g.wo - 1) * g.sw + g.kw;
    g.pad_top = need_h > g.h ? (need_h - g.h) / 2 : 0;
    g.pad_left = need_w > g.w ? (need_w - g.w) / 2 : 0;
  } else {
    if (g.kh > g.h || g.kw > g.w) throw ShapeError("conv2d: kernel larger than input with valid padding");
    g.ho = (g.h - g.kh) / g.sh + 1;
    g.wo = (g.w - g.kw) / g.sw + 1;
  }

  const std::size_t in_size = g.c * g.h * g.w;
  const std::size_t out_size = g.o * g.positions();
  std::vector<double> out(g.n * out_size);
  std::vector<double> cols(g.patch() * g.positions());
  const double* k = p.kernels.data().data();
  const auto bias = p.bias.data();
  for (std::size_t n = 0; n < g.n; ++n) {
    detail::im2col(input.data().data() + n * in_size, g, cols.data());
    double* dst = out.data() + n * out_size;
    for (std::size_t o = 0; o < g.o; ++o) std::fill_n(dst + o * g.positions(), g.positions(), bias[o]);
    ad::detail::gemm_acc(k, cols.data(), dst, g.o, g.patch(), g.positions());
  }

  return ad::make_result("conv2d", {g.n, g.o, g.ho, g.wo}, std::move(out), {input, p.kernels, p.bias},
                         [g, in_size, out_size](Node& self) {
                           const auto& x = self.inputs[0]->value;
                           const auto& k = self.inputs[1]->value;
                           auto* gx = ad::input_grad(self, 0);
                           auto* gk = ad::input_grad(self, 1);
                           auto* gb = ad::input_grad(self, 2);
                           std::vector<double> cols(g.patch() * g.positions());
                           for (std::size_t n = 0; n < g.n; ++n) {
                             const double* dy = self.grad.data() + n * out_size;
                             if (gb) {
                               for (std::size_t o = 0; o < g.o; ++o)
                                 for (std::size_t q = 0; q < g.positions(); ++q) (*gb)[o] += dy[o * g.positions() + q];
                             }
                             if (gk) {
                               detail::im2col(x.data() + n * in_size, g, cols.data());
                               ad::detail::gemm_nt_acc(dy, cols.data(), gk->data(), g.o, g.positions(), g.patch());
                             }
                             if (gx) {
                               std::fill(cols.begin(), cols.end(), 0.0);
                               ad::detail::gemm_tn_acc(k.data(), dy, cols.data(), g.patch(), g.o, g.positions());
                               detail::col2im_acc(cols.data(), g, gx->data() + n * in_size);
                             }
                           }
                         });
}

/// Valid max pooling over the last two axes of N x C x H x W. The gradient of
/// each window goes to its first maximum in row-major scan order.
inline Tensor max_pool2d(const Tensor& input, std::size_t ph, std::size_t pw, std::size_t sh, std::size_t sw) {
  if (input.rank() != 4) throw ShapeError("max_pool2d: expected N x C x H x W, got " + ad::shape_str(input.shape()));
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (ph == 0 || pw == 0 || sh == 0 || sw == 0 || ph > h || pw > w) {
    throw ShapeError("max_pool2d: window " + std::to_string(ph) + "x" + std::to_string(pw) + " does not fit " +
                     ad::shape_str(input.shape()));
  }
  const std::size_t ho = (h - ph) / sh + 1, wo = (w - pw) / sw + 1;
  std::vector<double> out(n * c * ho * wo);
  std::vector<std::size_t> argmax(out.size());
  const auto xv = input.data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t in_base = plane * h * w;
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t x = 0; x < wo; ++x) {
        std::size_t best = in_base + (y * sh) * w + x * sw;
        for (std::size_t i = 0; i < ph; ++i)
          for (std::size_t j = 0; j < pw; ++j) {
            const std::size_t idx = in_base + (y * sh + i) * w + (x * sw + j);
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (plane * ho + y) * wo + x;
        out[o] = xv[best];
        argmax[o] = best;
      }
  }
  return ad::make_result("max_pool2d", {n, c, ho, wo}, std::move(out), {input},
                         [argmax = std::move(argmax)](Node& self) {
                           auto* gx = ad::input_grad(self, 0);
                           if (!gx) return;
                           for (std::size_t o = 0; o < argmax.size(); ++o) (*gx)[argmax[o]] += self.grad[o];
                         });
}

// ---------------------------------------------------------------------------
// Batch normalization

struct BatchNormParams {
  Tensor gamma, beta;                 // trainable, one per channel
  Tensor running_mean, running_var;   // buffers, not trained
  double momentum = 0.9;
  double epsilon = 1e-5;

  std::size_t channels() const { return gamma.size(); }
};

inline BatchNormParams init_batch_norm(std::size_t channels) {
  BatchNormParams p;
  p.gamma = Tensor::full({channels}, 1.0, true);
  p.beta = Tensor::zeros({channels}, true);
  p.running_mean = Tensor::zeros({channels}, false);
  p.running_var = Tensor::full({channels}, 1.0, false);
  return p;
}

/// Normalizes per channel (axis 1) over every other axis. Works for N x C and
/// N x C x H x W. Train mode uses biased batch statistics and folds them into
/// the running averages: running = momentum * running + (1 - momentum) * batch.
inline Tensor batch_norm(const Tensor& input, BatchNormParams& p, Mode mode) {
  if (input.rank() < 2 || input.dim(1) != p.channels()) {
    throw ShapeError("batch_norm: input " + ad::shape_str(input.shape()) + " vs " + std::to_string(p.channels()) +
                     " channels");
  }
  const std::size_t n = input.dim(0), c = input.dim(1);
  const std::size_t inner = input.size() / (n * c);
  const double count = static_cast<double>(n * inner);
  const auto xv = input.data();
  const auto at = [&](std::size_t b, std::size_t ch, std::size_t i) { return (b * c + ch) * inner + i; };

  std::vector<double> mu(c), inv_std(c);
  if (mode == Mode::train) {
    auto rm = p.running_mean.mutable_data();
    auto rv = p.running_var.mutable_data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < inner; ++i) s += xv[at(b, ch, i)];
      const double m = s / count;
      double ss = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < inner; ++i) {
          const double d = xv[at(b, ch, i)] - m;
          ss += d * d;
        }
      const double var = ss / count;
      mu[ch] = m;
      inv_std[ch] = 1.0 / std::sqrt(var + p.epsilon);
      rm[ch] = p.momentum * rm[ch] + (1.0 - p.momentum) * m;
      rv[ch] = p.momentum * rv[ch] + (1.0 - p.momentum) * var;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = p.running_mean.at(ch);
      inv_std[ch] = 1.0 / std::sqrt(p.running_var.at(ch) + p.epsilon);
    }
  }

  const auto gamma = p.gamma.data();
  const auto beta = p.beta.data();
  std::vector<double> xhat(input.size()), out(input.size());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t k = at(b, ch, i);
        xhat[k] = (xv[k] - mu[ch]) * inv_std[ch];
        out[k] = gamma[ch] * xhat[k] + beta[ch];
      }

  const bool batch_stats = mode == Mode::train;
  return ad::make_result(
      "batch_norm", input.shape(), std::move(out), {input, p.gamma, p.beta},
      [n, c, inner, count, batch_stats, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        const auto& gamma = self.inputs[1]->value;
        auto* gx = ad::input_grad(self, 0);
        auto* gg = ad::input_grad(self, 1);
        auto* gb = ad::input_grad(self, 2);
        const auto& dy = self.grad;
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t k = (b * c + ch) * inner + i;
              sum_dy += dy[k];
              sum_dy_xhat += dy[k] * xhat[k];
            }
          if (gg) (*gg)[ch] += sum_dy_xhat;
          if (gb) (*gb)[ch] += sum_dy;
          if (!gx) continue;
          const double s = gamma[ch] * inv_std[ch];
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t k = (b * c + ch) * inner + i;
              if (batch_stats) {
                (*gx)[k] += s * (dy[k] - sum_dy / count - xhat[k] * sum_dy_xhat / count);
              } else {
                (*gx)[k] += s * dy[k];
              }
            }
        }
      });
}

// ---------------------------------------------------------------------------

/// Inverted dropout: survivors are scaled by 1 / (1 - rate) in train mode;
/// infer mode (or rate 0) returns the input unchanged.
inline Tensor dropout(const Tensor& input, double rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw UsageError("dropout: rate must lie in [0, 1)");
  if (mode == Mode::infer || rate == 0.0) return input;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(input.size());
  for (double& m : mask) m = rng.uniform() < rate ? 0.0 : keep_scale;
  return ad::mul(input, Tensor::from(input.shape(), std::move(mask)));
}

struct DenseParams {
  Tensor weights;  // in x out
  Tensor bias;     // out
};

inline DenseParams init_dense(std::size_t in, std::size_t out, Rng& rng) {
  return {glorot_uniform({in, out}, in, out, rng), Tensor::zeros({out}, true)};
}

/// activation(input . W + b) for N x in input.
inline Tensor dense(const Tensor& input, const DenseParams& p, Activation act = Activation::none) {
  Tensor y = ad::add(ad::matmul(input, p.weights), p.bias);
  switch (act) {
    case Activation::relu: return ad::relu(y);
    case Activation::tanh: return ad::tanh(y);
    case Activation::softmax: return ad::softmax(y, 1);
    case Activation::none: break;
  }
  return y;
}

// ---------------------------------------------------------------------------
// LSTM

struct LstmParams {
  // Input-to-hidden (d x H), hidden-to-hidden (H x H) and biases (H) for the
  // input, forget, output and candidate gates.
  Tensor W_i, W_f, W_o, W_g;
  Tensor U_i, U_f, U_o, U_g;
  Tensor b_i, b_f, b_o, b_g;

  std::size_t input_size() const { return W_i.dim(0); }
  std::size_t hidden_size() const { return U_i.dim(0); }

  std::vector<std::pair<std::string, Tensor>> named() const {
    return {{"W_i", W_i}, {"W_f", W_f}, {"W_o", W_o}, {"W_g", W_g}, {"U_i", U_i}, {"U_f", U_f},
            {"U_o", U_o}, {"U_g", U_g}, {"b_i", b_i}, {"b_f", b_f}, {"b_o", b_o}, {"b_g", b_g}};
  }
};

inline LstmParams init_lstm(std::size_t input, std::size_t hidden, Rng& rng) {
  LstmParams p;
  for (Tensor* w : {&p.W_i, &p.W_f, &p.W_o, &p.W_g}) *w = glorot_uniform({input, hidden}, input, hidden, rng);
  for (Tensor* u : {&p.U_i, &p.U_f, &p.U_o, &p.U_g}) *u = glorot_uniform({hidden, hidden}, hidden, hidden, rng);
  p.b_i = Tensor::zeros({hidden}, true);
  p.b_f = Tensor::full({hidden}, 1.0, true);
  p.b_o = Tensor::zeros({hidden}, true);
  p.b_g = Tensor::zeros({hidden}, true);
  return p;
}

struct LstmState {
  Tensor h, c;  // N x H each
};

inline LstmState zero_state(std::size_t batch, std::size_t hidden) {
  return {Tensor::zeros({batch, hidden}), Tensor::zeros({batch, hidden})};
}

namespace detail {
// Gate pre-activations from already-projected inputs.
inline LstmState lstm_cell(const Tensor& xi, const Tensor& xf, const Tensor& xo, const Tensor& xg,
                           const LstmState& s, const LstmParams& p) {
  using namespace ad;
  const Tensor i = sigmoid(xi + matmul(s.h, p.U_i) + p.b_i);
  const Tensor f = sigmoid(xf + matmul(s.h, p.U_f) + p.b_f);
  const Tensor o = sigmoid(xo + matmul(s.h, p.U_o) + p.b_o);
  const Tensor g = ad::tanh(xg + matmul(s.h, p.U_g) + p.b_g);
  const Tensor c = f * s.c + i * g;
  return {o * ad::tanh(c), c};
}
}  // namespace detail

/// One step for a batch: x is N x d, state holds N x H tensors.
inline LstmState lstm_step(const Tensor& x, const LstmState& state, const LstmParams& p) {
  if (x.rank() != 2 || x.dim(1) != p.input_size()) {
    throw ShapeError("lstm_step: input " + ad::shape_str(x.shape()) + " vs input size " +
                     std::to_string(p.input_size()));
  }
  if (state.h.rank() != 2 || state.h.dim(1) != p.hidden_size() || state.h.dim(0) != x.dim(0)) {
    throw ShapeError("lstm_step: state " + ad::shape_str(state.h.shape()) + " does not match");
  }
  return detail::lstm_cell(ad::matmul(x, p.W_i), ad::matmul(x, p.W_f), ad::matmul(x, p.W_o), ad::matmul(x, p.W_g),
                           state, p);
}

/// Runs the cell over N x T x d from a zero state; returns N x T x H with
/// output t aligned to input t. With `reverse`, time is walked T-1 .. 0.
/// Input projections are computed for all steps at once.
inline Tensor lstm_sequence(const Tensor& seq, const LstmParams& p, bool reverse = false) {
  if (seq.rank() != 3 || seq.dim(2) != p.input_size()) {
    throw ShapeError("lstm_sequence: input " + ad::shape_str(seq.shape()) + " vs input size " +
                     std::to_string(p.input_size()));
  }
  const std::size_t n = seq.dim(0), t_len = seq.dim(1), d = seq.dim(2), hidden = p.hidden_size();
  const Tensor flat = ad::reshape(seq, {n * t_len, d});
  const auto project = [&](const Tensor& w) { return ad::reshape(ad::matmul(flat, w), {n, t_len, hidden}); };
  const Tensor xi = project(p.W_i), xf = project(p.W_f), xo = project(p.W_o), xg = project(p.W_g);
  const auto step_slice = [&](const Tensor& x, std::size_t t) {
    return ad::reshape(ad::slice(x, 1, t, 1), {n, hidden});
  };

  LstmState state = zero_state(n, hidden);
  std::vector<Tensor> outputs(t_len);
  for (std::size_t k = 0; k < t_len; ++k) {
    const std::size_t t = reverse ? t_len - 1 - k : k;
    state = detail::lstm_cell(step_slice(xi, t), step_slice(xf, t), step_slice(xo, t), step_slice(xg, t), state, p);
    outputs[t] = ad::reshape(state.h, {n, 1, hidden});
  }
  return ad::concat(outputs, 1);
}

/// Forward and backward passes concatenated per timestep: N x T x 2H.
/// Rank-2 input (T x d) is treated as a batch of one and returns T x 2H.
inline Tensor bilstm_sequence(const Tensor& seq, const LstmParams& fwd, const LstmParams& bwd) {
  if (seq.rank() == 2) {
    const Tensor out = bilstm_sequence(ad::reshape(seq, {1, seq.dim(0), seq.dim(1)}), fwd, bwd);
    return ad::reshape(out, {out.dim(1), out.dim(2)});
  }
  if (fwd.input_size() != bwd.input_size()) throw ShapeError("bilstm_sequence: direction input sizes differ");
  return ad::concat({lstm_sequence(seq, fwd, false), lstm_sequence(seq, bwd, true)}, 2);
}

// ---------------------------------------------------------------------------
// Attention

struct AttentionParams {
  Tensor query_proj;  // summary dim x key dim
  double scale = 1.0;  // 1 / sqrt(key dim)
};

inline AttentionParams init_attention(std::size_t summary_dim, std::size_t key_dim, Rng& rng) {
  return {glorot_uniform({summary_dim, key_dim}, summary_dim, key_dim, rng),
          1.0 / std::sqrt(static_cast<double>(key_dim))};
}

struct AttentionResult {
  Tensor context;  // N x dv
  Tensor weights;  // N x T
};

/// Scaled dot-product attention, batched. query N x dk, keys N x T x dk,
/// values N x T x dv. weights = softmax(query . key_t * scale) over t.
inline AttentionResult attention(const Tensor& query, const Tensor& keys, const Tensor& values, double scale) {
  if (query.rank() != 2 || keys.rank() != 3 || values.rank() != 3 || query.dim(0) != keys.dim(0) ||
      query.dim(1) != keys.dim(2) || values.dim(0) != keys.dim(0) || values.dim(1) != keys.dim(1)) {
    throw ShapeError("attention: query " + ad::shape_str(query.shape()) + ", keys " + ad::shape_str(keys.shape()) +
                     ", values " + ad::shape_str(values.shape()));
  }
  const std::size_t n = query.dim(0), dk = query.dim(1), t_len = keys.dim(1);
  const Tensor q = ad::reshape(query, {n, 1, dk});
  const Tensor scores = ad::scale(ad::sum(ad::mul(keys, q), 2), scale);  // N x T
  const Tensor weights = ad::softmax(scores, 1);
  const Tensor context = ad::sum(ad::mul(values, ad::reshape(weights, {n, t_len, 1})), 1);
  return {context, weights};
}

/// Unbatched form: query dk, keys T x dk, values T x dv.
inline AttentionResult attention_single(const Tensor& query, const Tensor& keys, const Tensor& values) {
  if (query.rank() != 1 || keys.rank() != 2 || values.rank() != 2) {
    throw ShapeError("attention: expected query (dk), keys (T x dk), values (T x dv)");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(query.dim(0)));
  auto r = attention(ad::reshape(query, {1, query.dim(0)}), ad::reshape(keys, {1, keys.dim(0), keys.dim(1)}),
                     ad::reshape(values, {1, values.dim(0), values.dim(1)}), scale);
  return {ad::reshape(r.context, {values.dim(1)}), ad::reshape(r.weights, {keys.dim(0)})};
}

/// Projects `summary` (N x s) into a query and attends over keys = values.
inline AttentionResult attend(const Tensor& summary, const Tensor& sequence, const AttentionParams& p) {
  return attention(ad::matmul(summary, p.query_proj), sequence, sequence, p.scale);
}

}  // namespace kws::layers
