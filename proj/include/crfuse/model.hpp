#pragma once

#include <vector>

#include "crfuse/data_synth.hpp"
#include "crfuse/encoders.hpp"
#include "crfuse/features.hpp"
#include "crfuse/fusion.hpp"

// Whole-model wiring: feature tensors -> encoders -> fused classifier and
// contrastive regularizer. Templated so the trainer runs in single precision
// while gradient checking instantiates the identical graph in double.

namespace crfuse {

template <typename T>
ParamStoreT<T> init_model_params(int classes, uint64_t seed, bool with_discriminator,
                                 int disc_hidden = kDiscriminatorHidden) {
  ParamStoreT<T> ps;
  init_audio_encoder(ps, seed);
  init_text_encoder(ps, seed);
  init_fusion_classifier(ps, classes, seed);
  if (with_discriminator) init_discriminator(ps, seed, disc_hidden);
  return ps;
}

template <typename T>
TensorT<T> make_audio_batch(const Dataset& data, const std::vector<int>& indices) {
  const int batch = static_cast<int>(indices.size());
  TensorT<T> x(Shape{batch, 1, kSpectrogramFrames, kSpectrogramBins});
  const long plane = static_cast<long>(kSpectrogramFrames) * kSpectrogramBins;
  for (int b = 0; b < batch; ++b) {
    const auto& v = data.samples[static_cast<size_t>(indices[static_cast<size_t>(b)])].x_a.values;
    for (long i = 0; i < plane; ++i)
      x.data()[b * plane + i] = static_cast<T>(v[static_cast<size_t>(i)]);
  }
  return x;
}

template <typename T>
std::vector<TensorT<T>> make_text_steps(const Dataset& data, const std::vector<int>& indices) {
  const int batch = static_cast<int>(indices.size());
  std::vector<TensorT<T>> steps;
  steps.reserve(kTextSteps);
  for (int t = 0; t < kTextSteps; ++t) {
    TensorT<T> step(Shape{batch, kTextDim});
    for (int b = 0; b < batch; ++b) {
      const auto& v = data.samples[static_cast<size_t>(indices[static_cast<size_t>(b)])].x_t.vectors;
      for (int d = 0; d < kTextDim; ++d)
        step.data()[static_cast<long>(b) * kTextDim + d] =
            static_cast<T>(v[static_cast<size_t>(t) * kTextDim + d]);
    }
    steps.push_back(std::move(step));
  }
  return steps;
}

inline std::vector<int> text_lengths(const Dataset& data, const std::vector<int>& indices) {
  std::vector<int> lengths;
  lengths.reserve(indices.size());
  for (int i : indices)
    lengths.push_back(data.samples[static_cast<size_t>(i)].x_t.true_length);
  return lengths;
}

template <typename T>
struct EmbeddingPairT {
  TensorT<T> e_a;  // [B x 512]
  TensorT<T> e_t;  // [B x 200]
};

template <typename T>
EmbeddingPairT<T> encode_batch(TapeT<T>& tape, const ParamStoreT<T>& ps, const Dataset& data,
                               const std::vector<int>& indices) {
  EmbeddingPairT<T> pair;
  pair.e_a = audio_encode(tape, make_audio_batch<T>(data, indices), ps);
  pair.e_t = text_encode(tape, make_text_steps<T>(data, indices), text_lengths(data, indices), ps);
  return pair;
}

template <typename T>
struct BatchLossT {
  TensorT<T> total, l1, l2;
  int contrastive_anchors = 0;  // anchors that contributed to l2
};

// Classification loss over fused scores plus, when requested, the
// contrastive term over in-batch different-emotion negatives. Anchors
// without any valid negative stay in l1 and drop out of l2 silently; a batch
// with no valid anchor at all trains on l1 alone with l2 pinned to zero.
template <typename T>
BatchLossT<T> batch_loss(TapeT<T>& tape, const ParamStoreT<T>& ps, const Dataset& data,
                         const Batch& batch, double alpha, bool build_l2) {
  BatchLossT<T> out;
  EmbeddingPairT<T> pair = encode_batch(tape, ps, data, batch.sample_indices);
  ScoreVectorT<T> sv = classify(tape, pair.e_a, pair.e_t, ps.get("fusion.W"));
  out.l1 = cross_entropy_loss(tape, sv.s, batch.labels);

  out.l2 = TensorT<T>(Shape{});  // scalar zero unless the regularizer is built
  if (build_l2) {
    std::vector<int> active;
    for (size_t i = 0; i < batch.negatives.size(); ++i)
      if (!batch.negatives[i].empty()) active.push_back(static_cast<int>(i));
    out.contrastive_anchors = static_cast<int>(active.size());
    if (!active.empty()) {
      if (active.size() == batch.negatives.size()) {
        out.l2 = info_nce_loss(tape, pair.e_a, pair.e_t, batch.negatives, ps);
      } else {
        TensorT<T> e_a_act = take_rows(tape, pair.e_a, active);
        TensorT<T> scores = pairwise_discriminator_scores(tape, e_a_act, pair.e_t, ps);
        std::vector<std::vector<int>> negs;
        negs.reserve(active.size());
        for (int i : active) negs.push_back(batch.negatives[static_cast<size_t>(i)]);
        out.l2 = info_nce_from_scores(tape, scores, active, negs);
      }
    }
  }
  out.total = combined_loss(tape, out.l1, out.l2, alpha);
  return out;
}

// forward-only fused and per-modality scores for a set of samples
template <typename T>
ScoreVectorT<T> batch_scores(const ParamStoreT<T>& ps, const Dataset& data,
                             const std::vector<int>& indices) {
  TapeT<T> tape;  // nothing watched: pure forward evaluation
  EmbeddingPairT<T> pair = encode_batch(tape, ps, data, indices);
  return classify(tape, pair.e_a, pair.e_t, ps.get("fusion.W"));
}

}  // namespace crfuse
