#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "crfuse/encoders.hpp"
#include "crfuse/ops.hpp"
#include "crfuse/param_store.hpp"

namespace crfuse {

inline constexpr int kDiscriminatorHidden = 128;

// fused score vector plus the per-modality decomposition; s == s_a + s_t
template <typename T>
struct ScoreVectorT {
  TensorT<T> s;    // [B x C]
  TensorT<T> s_a;  // [B x C]
  TensorT<T> s_t;  // [B x C]
  int classes = 0;
};

// Linear fusion classifier: a single bias-free weight matrix over the
// concatenated embeddings. Kept bias-free so the fused score decomposes
// exactly into per-modality scores.
template <typename T>
void init_fusion_classifier(ParamStoreT<T>& ps, int classes, uint64_t seed) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(kFusedDim));
  ps.add("fusion.W", detail::uniform_init<T>(Shape{classes, kFusedDim}, bound,
                                             derive_seed(seed, "fusion.W")));
}

// one-hidden-layer scorer over [e_a; e_t] pairs, real-valued output
template <typename T>
void init_discriminator(ParamStoreT<T>& ps, uint64_t seed, int hidden = kDiscriminatorHidden) {
  ps.add("disc.hidden.W",
         detail::uniform_init<T>(Shape{hidden, kFusedDim}, 1.0 / std::sqrt(double(kFusedDim)),
                                 derive_seed(seed, "disc.hidden.W")));
  ps.add("disc.hidden.b", TensorT<T>(Shape{hidden}));
  ps.add("disc.out.w", detail::uniform_init<T>(Shape{1, hidden}, 1.0 / std::sqrt(double(hidden)),
                                               derive_seed(seed, "disc.out.w")));
  ps.add("disc.out.b", TensorT<T>(Shape{1}));
}

// s = W [e_a; e_t] with the decomposition s_a = W1 e_a, s_t = W2 e_t taken
// from the column split of W. The fused score is computed through the
// concatenated route, the parts through the split route.
template <typename T>
ScoreVectorT<T> classify(TapeT<T>& tape, const TensorT<T>& e_a, const TensorT<T>& e_t,
                         const TensorT<T>& w) {
  detail::check_rank("classify", w, 2);
  detail::check_rank("classify", e_a, 2);
  detail::check_rank("classify", e_t, 2);
  const int p = e_a.dim(1), q = e_t.dim(1);
  if (w.dim(1) != p + q)
    throw DimensionError("classify: W " + shape_str(w.shape()) + " does not match embeddings " +
                         shape_str(e_a.shape()) + " + " + shape_str(e_t.shape()));
  ScoreVectorT<T> out;
  out.classes = w.dim(0);
  out.s = matmul_nt(tape, concat_cols(tape, e_a, e_t), w);
  out.s_a = matmul_nt(tape, e_a, slice_cols(tape, w, 0, p));
  out.s_t = matmul_nt(tape, e_t, slice_cols(tape, w, p, q));
  return out;
}

// batch-mean negative log softmax of the true-class score
template <typename T>
TensorT<T> cross_entropy_loss(TapeT<T>& tape, const TensorT<T>& s, const std::vector<int>& labels) {
  detail::check_rank("cross_entropy_loss", s, 2);
  const int classes = s.dim(1);
  for (int y : labels)
    if (y < 0 || y >= classes)
      throw RangeError("cross_entropy_loss: label " + std::to_string(y) + " out of [0, " +
                       std::to_string(classes) + ")");
  TensorT<T> per_sample = sub(tape, logsumexp_rows(tape, s), take_per_row(tape, s, labels));
  return mean(tape, per_sample);
}

// d(e_a, e_t) for aligned rows: [B x 512], [B x 200] -> [B]
template <typename T>
TensorT<T> discriminator_scores(TapeT<T>& tape, const TensorT<T>& e_a, const TensorT<T>& e_t,
                                const ParamStoreT<T>& ps) {
  TensorT<T> hidden = relu(
      tape, add_row_bias(tape, matmul_nt(tape, concat_cols(tape, e_a, e_t), ps.get("disc.hidden.W")),
                         ps.get("disc.hidden.b")));
  TensorT<T> out = add_row_bias(tape, matmul_nt(tape, hidden, ps.get("disc.out.w")),
                                ps.get("disc.out.b"));
  return reshape(tape, out, Shape{e_a.dim(0)});
}

// single pair -> scalar
template <typename T>
TensorT<T> discriminator_score(TapeT<T>& tape, const TensorT<T>& e_a, const TensorT<T>& e_t,
                               const ParamStoreT<T>& ps) {
  TensorT<T> a = e_a.rank() == 1 ? reshape(tape, e_a, Shape{1, e_a.dim(0)}) : e_a;
  TensorT<T> t = e_t.rank() == 1 ? reshape(tape, e_t, Shape{1, e_t.dim(0)}) : e_t;
  if (a.dim(0) != 1 || t.dim(0) != 1)
    throw DimensionError("discriminator_score: expected a single pair, got " +
                         shape_str(e_a.shape()) + " and " + shape_str(e_t.shape()));
  return reshape(tape, discriminator_scores(tape, a, t, ps), Shape{});
}

// All-pairs scores S[i, j] = d(e_a_i, e_t_j). The hidden-layer input of a
// pair splits into an audio part and a text part, so each is projected once
// and the pair grid only sums them.
template <typename T>
TensorT<T> pairwise_discriminator_scores(TapeT<T>& tape, const TensorT<T>& e_a,
                                         const TensorT<T>& e_t, const ParamStoreT<T>& ps) {
  detail::check_rank("pairwise_discriminator_scores", e_a, 2);
  detail::check_rank("pairwise_discriminator_scores", e_t, 2);
  const TensorT<T>& w_h = ps.get("disc.hidden.W");
  const int p = e_a.dim(1), q = e_t.dim(1);
  if (w_h.dim(1) != p + q)
    throw DimensionError("pairwise_discriminator_scores: hidden W " + shape_str(w_h.shape()) +
                         " does not match embeddings");
  TensorT<T> u = matmul_nt(tape, e_a, slice_cols(tape, w_h, 0, p));
  TensorT<T> v = matmul_nt(tape, e_t, slice_cols(tape, w_h, p, q));
  TensorT<T> w_out = reshape(tape, ps.get("disc.out.w"), Shape{w_h.dim(0)});
  return pairwise_score(tape, u, v, ps.get("disc.hidden.b"), w_out,
                        reshape(tape, ps.get("disc.out.b"), Shape{}));
}

// Noise-contrastive loss over a score matrix. For each anchor row a, the
// positive sits at column pos[a] and the negatives at columns negs[a]:
//   loss_a = -log( exp(S[a,pos]) / (exp(S[a,pos]) + sum_n exp(S[a,neg_n])) )
//          = logsumexp(S[a, pos] ++ S[a, negs]) - S[a, pos]
// averaged over anchors. Every anchor must bring at least one negative.
template <typename T>
TensorT<T> info_nce_from_scores(TapeT<T>& tape, const TensorT<T>& scores,
                                const std::vector<int>& pos,
                                const std::vector<std::vector<int>>& negs) {
  detail::check_rank("info_nce_from_scores", scores, 2);
  const int rows = scores.dim(0), cols = scores.dim(1);
  if (static_cast<int>(pos.size()) != rows || static_cast<int>(negs.size()) != rows)
    throw DimensionError("info_nce_from_scores: anchor bookkeeping does not match " +
                         std::to_string(rows) + " rows");
  for (int a = 0; a < rows; ++a) {
    if (negs[static_cast<size_t>(a)].empty())
      throw ContractError("info_nce_from_scores: anchor " + std::to_string(a) +
                          " has an empty negative set");
    if (pos[static_cast<size_t>(a)] < 0 || pos[static_cast<size_t>(a)] >= cols)
      throw RangeError("info_nce_from_scores: positive column out of range");
    for (int n : negs[static_cast<size_t>(a)])
      if (n < 0 || n >= cols) throw RangeError("info_nce_from_scores: negative column out of range");
  }

  TensorT<T> out(Shape{});
  T total = 0;
  for (int a = 0; a < rows; ++a) {
    const T* row = scores.data() + static_cast<long>(a) * cols;
    const T sp = row[pos[static_cast<size_t>(a)]];
    T m = sp;
    for (int n : negs[static_cast<size_t>(a)]) m = std::max(m, row[n]);
    T sum = std::exp(sp - m);
    for (int n : negs[static_cast<size_t>(a)]) sum += std::exp(row[n] - m);
    total += m + std::log(sum) - sp;
  }
  out.data()[0] = total / static_cast<T>(rows);

  if (tape.tracks(scores)) {
    tape.record(out, [scores, pos, negs, rows, cols](TapeT<T>& tp, const std::vector<T>& g) {
      auto& gs = tp.grad_buffer(scores.node());
      const T w = g[0] / static_cast<T>(rows);
      for (int a = 0; a < rows; ++a) {
        const T* row = scores.data() + static_cast<long>(a) * cols;
        const int p = pos[static_cast<size_t>(a)];
        T m = row[p];
        for (int n : negs[static_cast<size_t>(a)]) m = std::max(m, row[n]);
        T sum = std::exp(row[p] - m);
        for (int n : negs[static_cast<size_t>(a)]) sum += std::exp(row[n] - m);
        // d loss_a / d S[a,p] = softmax_p - 1; d / d S[a,n] = softmax_n
        gs[static_cast<size_t>(a) * cols + p] += w * (std::exp(row[p] - m) / sum - T(1));
        for (int n : negs[static_cast<size_t>(a)])
          gs[static_cast<size_t>(a) * cols + n] += w * (std::exp(row[n] - m) / sum);
      }
    });
  }
  return out;
}

// Contrastive regularizer over a batch of embedding pairs: anchor i's
// positive is its own text embedding, negatives are the different-emotion
// text embeddings selected by the caller. negatives[i] must be non-empty for
// every anchor; callers drop anchors without valid negatives beforehand.
template <typename T>
TensorT<T> info_nce_loss(TapeT<T>& tape, const TensorT<T>& e_a, const TensorT<T>& e_t,
                         const std::vector<std::vector<int>>& negatives, const ParamStoreT<T>& ps) {
  detail::check_rank("info_nce_loss", e_a, 2);
  const int batch = e_a.dim(0);
  if (static_cast<int>(negatives.size()) != batch)
    throw DimensionError("info_nce_loss: " + std::to_string(negatives.size()) +
                         " negative sets for batch " + std::to_string(batch));
  for (int a = 0; a < batch; ++a)
    if (negatives[static_cast<size_t>(a)].empty())
      throw ContractError("info_nce_loss: anchor " + std::to_string(a) +
                          " has an empty negative set; filter anchors before calling");
  TensorT<T> scores = pairwise_discriminator_scores(tape, e_a, e_t, ps);
  std::vector<int> pos(static_cast<size_t>(batch));
  for (int a = 0; a < batch; ++a) pos[static_cast<size_t>(a)] = a;
  return info_nce_from_scores(tape, scores, pos, negatives);
}

// L = (1 - alpha) L1 + alpha L2
template <typename T>
TensorT<T> combined_loss(TapeT<T>& tape, const TensorT<T>& l1, const TensorT<T>& l2, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw RangeError("combined_loss: alpha " + std::to_string(alpha) + " outside [0, 1]");
  if (l1.size() != 1 || l2.size() != 1)
    throw ContractError("combined_loss: loss terms must be scalar");
  return add(tape, scale(tape, l1, 1.0 - alpha), scale(tape, l2, alpha));
}

}  // namespace crfuse
