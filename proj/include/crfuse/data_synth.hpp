#pragma once

#include <cstdint>
#include <vector>

#include "crfuse/features.hpp"
#include "crfuse/rng.hpp"

namespace crfuse {

// Synthetic two-modality corpus with a controllable cross-modal conflict
// rate: every sample's audio follows its own class template, but with
// probability conflict_rate the text side is generated from a different
// class's template (the sample keeps its true label).
struct SynthConfig {
  int classes = 4;
  int samples_per_class = 400;
  std::vector<int> class_counts;  // optional per-class override, size == classes
  double conflict_rate = 0.3;
  double noise_sigma = 0.5;
  uint64_t seed = 0;
};

Dataset generate(const SynthConfig& cfg);

// indices into the batch; negatives[i] holds positions whose label differs
// from position i's label (possibly empty)
struct Batch {
  std::vector<int> sample_indices;  // into the underlying dataset/pool
  std::vector<int> labels;
  std::vector<std::vector<int>> negatives;
};

// Epoch-shuffled sampling without replacement over a fixed index pool.
// Negative sets are rebuilt per batch from the in-batch labels.
class BatchSampler {
 public:
  // pool: dataset indices to draw from; labels: full dataset labels
  BatchSampler(std::vector<int> pool, const std::vector<int>& dataset_labels, int batch_size,
               uint64_t seed);

  Batch next();
  int batches_per_epoch() const { return batches_per_epoch_; }
  uint64_t rng_state() const { return rng_.state(); }

 private:
  std::vector<int> pool_;
  std::vector<int> pool_labels_;
  int batch_size_;
  int batches_per_epoch_;
  size_t cursor_ = 0;
  std::vector<int> order_;
  Rng rng_;
};

struct Fold {
  std::vector<int> train, val, test;
};

// Stratified k-fold plan: fold f tests on chunk f, validates on chunk
// (f+1) mod k and trains on the rest, an 8:1:1 split at k = 10.
std::vector<Fold> make_folds(const std::vector<int>& labels, int k, uint64_t seed);

}  // namespace crfuse
