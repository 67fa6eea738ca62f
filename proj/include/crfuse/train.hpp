#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "crfuse/data_synth.hpp"
#include "crfuse/features.hpp"
#include "crfuse/fusion.hpp"
#include "crfuse/param_store.hpp"

namespace crfuse {

// Whether the discriminator exists and enters the loss graph. Auto builds
// the contrastive term only when alpha > 0; Always keeps it in the graph
// even at alpha = 0 (where it must change nothing); Absent omits the
// discriminator parameters entirely.
enum class DiscriminatorMode { Auto, Always, Absent };

struct TrainConfig {
  double learning_rate = 0.001;
  int batch_size = 64;
  double alpha = 0.0;  // regularization weight in [0, 1]
  int epochs = 30;
  uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int disc_hidden = kDiscriminatorHidden;
  DiscriminatorMode disc_mode = DiscriminatorMode::Auto;
};

struct AdamState {
  std::vector<std::vector<float>> m, v;
  long step = 0;
};

void adam_init(AdamState& state, const ParamStoreT<float>& params);

// standard bias-corrected Adam; grads aligned with the store's iteration
// order, nullptr meaning an all-zero gradient
void adam_step(ParamStoreT<float>& params, const std::vector<const std::vector<float>*>& grads,
               AdamState& state, const TrainConfig& cfg);

struct EvalReport {
  double wa = 0.0;  // overall accuracy
  double ua = 0.0;  // mean per-class recall over classes with support
  std::vector<std::vector<long>> confusion;         // rows = true class, raw counts
  std::vector<std::vector<double>> confusion_rates; // row-normalized; zero rows stay zero
  std::vector<double> per_class_recall;
  std::vector<long> class_support;
  // fraction of samples whose audio-only and text-only argmax agree
  double modality_agreement = 0.0;
  long total = 0;
};

// metrics from raw counts; also the path evaluate() itself goes through
EvalReport report_from_confusion(const std::vector<std::vector<long>>& counts);

// Argmax of the fused score, with segments of the same utterance merged by
// averaging their scores before the argmax. Modality agreement is counted
// per segment.
EvalReport evaluate(const ParamStoreT<float>& params, const Dataset& data,
                    const std::vector<int>& indices, int batch_size = 64);

struct EpochStats {
  double train_loss = 0.0;
  double l1 = 0.0;
  double l2 = 0.0;
  double val_wa = 0.0;
  double val_ua = 0.0;
};

struct TrainResult {
  ParamStoreT<float> params;  // snapshot with the best validation UA
  int best_epoch = -1;
  double best_val_ua = 0.0;
  std::vector<EpochStats> curve;
  uint64_t sampler_rng_state = 0;
};

// Minimizes (1-alpha) L1 + alpha L2 with Adam over the fold's training
// split, evaluating UA on the validation split once per epoch. Aborts with
// NumericError naming epoch, batch and both loss terms if the loss goes
// non-finite.
TrainResult train(const Dataset& data, const Fold& fold, const TrainConfig& cfg,
                  std::ostream* log = nullptr);

struct Checkpoint {
  TrainConfig cfg;
  int classes = 0;
  int epoch = -1;
  uint64_t rng_digest = 0;
  ParamStoreT<float> params;
};

// "CFCK" magic, versioned; config as embedded JSON, tensors as named f32
// blobs, little-endian throughout
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct GridPoint {
  double alpha = 0.0;
  bool failed = false;
  double mean_val_ua = 0.0;
  double mean_val_wa = 0.0;
  std::vector<double> fold_val_ua;
};

struct GridResult {
  std::vector<GridPoint> points;
  int selected_index = -1;
  double selected_alpha = 0.0;
};

inline std::vector<double> default_alpha_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 10; ++i) g.push_back(i / 10.0);
  return g;
}

// One run per (alpha, fold) over the first folds_to_run folds of a k-fold
// plan; selects the alpha with the highest mean validation UA, ties going to
// the smaller alpha. Failed runs mark their grid point and drop out of the
// selection. threads > 1 runs grid points concurrently; results are
// identical either way.
GridResult grid_search_alpha(const Dataset& data, const TrainConfig& base,
                             const std::vector<double>& grid, int folds_to_run, int k_folds,
                             int threads = 1, std::ostream* log = nullptr);

}  // namespace crfuse
