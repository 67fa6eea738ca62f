#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "crfuse/ops.hpp"
#include "crfuse/param_store.hpp"
#include "crfuse/rng.hpp"

namespace crfuse {

// 4 x (3x3 conv, pad 1 -> ReLU -> 2x2/2 maxpool) over 128x128, 8 channels
// throughout: flattened embedding is 8 * 8 * 8 = 512.
struct AudioEncoderConfig {
  int layers = 4;
  int channels = 8;
  int input_hw = 128;
  int embedding_dim() const {
    const int spatial = input_hw >> layers;
    return channels * spatial * spatial;
  }
};

// two stacked unidirectional LSTMs, additive attention pooling on top
struct TextEncoderConfig {
  int layers = 2;
  int hidden = 200;
  int input_dim = 300;
  int steps = 30;
};

inline constexpr int kAudioEmbeddingDim = 512;
inline constexpr int kTextEmbeddingDim = 200;
inline constexpr int kFusedDim = kAudioEmbeddingDim + kTextEmbeddingDim;

namespace detail {

template <typename T>
TensorT<T> uniform_init(Shape shape, double bound, uint64_t seed) {
  TensorT<T> t(std::move(shape));
  Rng rng(seed);
  for (long i = 0; i < t.size(); ++i) t.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

}  // namespace detail

// Scaled uniform init, one rng stream per parameter name so the draw for a
// given parameter does not depend on what else exists in the store.
template <typename T>
void init_audio_encoder(ParamStoreT<T>& ps, uint64_t seed, AudioEncoderConfig cfg = {}) {
  int cin = 1;
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string base = "audio_cnn.layer" + std::to_string(l);
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin) * 9.0);
    ps.add(base + ".kernel", detail::uniform_init<T>(Shape{cfg.channels, cin, 3, 3}, bound,
                                                     derive_seed(seed, base + ".kernel")));
    ps.add(base + ".bias", TensorT<T>(Shape{cfg.channels}));
    cin = cfg.channels;
  }
}

template <typename T>
void init_text_encoder(ParamStoreT<T>& ps, uint64_t seed, TextEncoderConfig cfg = {}) {
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string base = "text_lstm.layer" + std::to_string(l);
    const int in_dim = l == 0 ? cfg.input_dim : cfg.hidden;
    ps.add(base + ".W_ih", detail::uniform_init<T>(Shape{4 * cfg.hidden, in_dim},
                                                   1.0 / std::sqrt(static_cast<double>(in_dim)),
                                                   derive_seed(seed, base + ".W_ih")));
    ps.add(base + ".W_hh", detail::uniform_init<T>(Shape{4 * cfg.hidden, cfg.hidden},
                                                   1.0 / std::sqrt(static_cast<double>(cfg.hidden)),
                                                   derive_seed(seed, base + ".W_hh")));
    // forget-gate bias starts at 1, everything else at 0
    TensorT<T> b(Shape{4 * cfg.hidden});
    for (int i = cfg.hidden; i < 2 * cfg.hidden; ++i) b.data()[i] = T(1);
    ps.add(base + ".b", std::move(b));
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
  ps.add("attention.M", detail::uniform_init<T>(Shape{cfg.hidden, cfg.hidden}, bound,
                                                derive_seed(seed, "attention.M")));
  ps.add("attention.v",
         detail::uniform_init<T>(Shape{1, cfg.hidden}, bound, derive_seed(seed, "attention.v")));
}

// [B x 1 x 128 x 128] -> [B x 512]
template <typename T>
TensorT<T> audio_encode(TapeT<T>& tape, const TensorT<T>& x, const ParamStoreT<T>& ps,
                        AudioEncoderConfig cfg = {}) {
  if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != cfg.input_hw || x.dim(3) != cfg.input_hw)
    throw DimensionError("audio_encode: expected [B x 1 x " + std::to_string(cfg.input_hw) +
                         " x " + std::to_string(cfg.input_hw) + "], got " + shape_str(x.shape()));
  TensorT<T> h = x;
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string base = "audio_cnn.layer" + std::to_string(l);
    h = conv2d(tape, h, ps.get(base + ".kernel"));
    h = add_channel_bias(tape, h, ps.get(base + ".bias"));
    h = relu(tape, h);
    h = maxpool2d(tape, h);
  }
  return reshape(tape, h, Shape{x.dim(0), cfg.embedding_dim()});
}

template <typename T>
struct LstmState {
  TensorT<T> h, c;
};

namespace detail {

// gate order along the 4H axis: input, forget, candidate, output
template <typename T>
LstmState<T> lstm_gates(TapeT<T>& tape, const TensorT<T>& preact, const LstmState<T>& state,
                        const TensorT<T>& w_hh, int hidden) {
  TensorT<T> z = add(tape, preact, matmul_nt(tape, state.h, w_hh));
  TensorT<T> gi = sigmoid(tape, slice_cols(tape, z, 0, hidden));
  TensorT<T> gf = sigmoid(tape, slice_cols(tape, z, hidden, hidden));
  TensorT<T> gg = tanh_act(tape, slice_cols(tape, z, 2 * hidden, hidden));
  TensorT<T> go = sigmoid(tape, slice_cols(tape, z, 3 * hidden, hidden));
  TensorT<T> c = add(tape, mul(tape, gf, state.c), mul(tape, gi, gg));
  TensorT<T> h = mul(tape, go, tanh_act(tape, c));
  return {h, c};
}

}  // namespace detail

// one standard LSTM cell update
template <typename T>
LstmState<T> lstm_step(TapeT<T>& tape, const TensorT<T>& x, const LstmState<T>& state,
                       const TensorT<T>& w_ih, const TensorT<T>& w_hh, const TensorT<T>& b) {
  if (w_ih.rank() != 2 || w_ih.dim(0) % 4 != 0)
    throw DimensionError("lstm_step: W_ih must be [4H x in], got " + shape_str(w_ih.shape()));
  const int hidden = w_ih.dim(0) / 4;
  TensorT<T> preact = add_row_bias(tape, matmul_nt(tape, x, w_ih), b);
  return detail::lstm_gates(tape, preact, state, w_hh, hidden);
}

// steps: per-time-step inputs [B x in]; lengths: attended prefix per sample.
// The input projection of every step runs as one matrix product; the
// recurrence is unavoidable and stays per step.
template <typename T>
TensorT<T> text_encode(TapeT<T>& tape, const std::vector<TensorT<T>>& steps,
                       const std::vector<int>& lengths, const ParamStoreT<T>& ps,
                       TextEncoderConfig cfg = {}) {
  if (static_cast<int>(steps.size()) != cfg.steps)
    throw DimensionError("text_encode: expected " + std::to_string(cfg.steps) + " steps, got " +
                         std::to_string(steps.size()));
  const int batch = steps[0].dim(0);
  if (static_cast<int>(lengths.size()) != batch)
    throw DimensionError("text_encode: " + std::to_string(lengths.size()) + " lengths for batch " +
                         std::to_string(batch));
  for (int len : lengths)
    if (len < 1 || len > cfg.steps)
      throw InputError("text_encode: true_length " + std::to_string(len) + " outside [1, " +
                       std::to_string(cfg.steps) + "]");

  std::vector<TensorT<T>> layer_in = steps;
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string base = "text_lstm.layer" + std::to_string(l);
    const TensorT<T>& w_ih = ps.get(base + ".W_ih");
    const TensorT<T>& w_hh = ps.get(base + ".W_hh");
    const TensorT<T>& b = ps.get(base + ".b");
    TensorT<T> z_all =
        add_row_bias(tape, matmul_nt(tape, concat_rows(tape, layer_in), w_ih), b);
    LstmState<T> state{TensorT<T>(Shape{batch, cfg.hidden}), TensorT<T>(Shape{batch, cfg.hidden})};
    std::vector<TensorT<T>> outs;
    outs.reserve(static_cast<size_t>(cfg.steps));
    for (int t = 0; t < cfg.steps; ++t) {
      TensorT<T> z_t = slice_rows(tape, z_all, t * batch, batch);
      state = detail::lstm_gates(tape, z_t, state, w_hh, cfg.hidden);
      outs.push_back(state.h);
    }
    layer_in = std::move(outs);
  }

  // additive attention: score_t = v . tanh(M h_t), softmax over the unmasked
  // prefix, output is the attention-weighted sum of hidden states
  const TensorT<T>& att_m = ps.get("attention.M");
  const TensorT<T>& att_v = ps.get("attention.v");
  TensorT<T> scores;
  for (int t = 0; t < cfg.steps; ++t) {
    TensorT<T> s_t = matmul_nt(tape, tanh_act(tape, matmul_nt(tape, layer_in[static_cast<size_t>(t)], att_m)), att_v);
    scores = t == 0 ? s_t : concat_cols(tape, scores, s_t);
  }
  TensorT<T> alpha = softmax_rows_masked(tape, scores, lengths);
  TensorT<T> pooled;
  for (int t = 0; t < cfg.steps; ++t) {
    TensorT<T> term = scale_rows(tape, layer_in[static_cast<size_t>(t)],
                                 slice_cols(tape, alpha, t, 1));
    pooled = t == 0 ? term : add(tape, pooled, term);
  }
  return pooled;
}

}  // namespace crfuse
