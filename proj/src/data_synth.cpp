#include "crfuse/data_synth.hpp"

#include <algorithm>
#include <cstdlib>
#include <set>
#include <string>

#include "crfuse/errors.hpp"

namespace crfuse {

namespace {

// Per-entry template magnitudes. The audio side is kept weak enough that a
// classifier must pool evidence across the whole 128x128 plane, while the
// text side is individually strong, so corrupted text actively misleads.
// TODO: remove the env overrides once calibration settles.
inline double audio_template_scale() {
  const char* s = std::getenv("CRFUSE_TAU_A");
  return s ? std::atof(s) : 0.15;
}
inline double text_template_scale() {
  const char* s = std::getenv("CRFUSE_TAU_T");
  return s ? std::atof(s) : 0.08;
}

constexpr size_t kSpecValues = static_cast<size_t>(kSpectrogramFrames) * kSpectrogramBins;
constexpr size_t kTextValues = static_cast<size_t>(kTextSteps) * kTextDim;

std::vector<float> draw_template(Rng& rng, size_t n, double scale) {
  std::vector<float> t(n);
  for (auto& x : t) x = static_cast<float>(scale * rng.gaussian());
  return t;
}

// Smooth 2-D Gaussian field: i.i.d. draws blurred with a separable box
// filter, then rescaled to the requested per-entry magnitude. Audio templates
// and audio noise both use this spectral profile: a convolutional encoder
// needs locally coherent class patterns, and noise sharing the template
// subspace keeps the class overlap (and so the achievable accuracy) a real
// function of the template-to-noise ratio instead of a threshold effect.
std::vector<float> draw_smooth_field(Rng& rng, int rows, int cols, double scale, int radius) {
  std::vector<double> field(static_cast<size_t>(rows) * cols);
  for (auto& x : field) x = rng.gaussian();
  std::vector<double> tmp(field.size());
  for (int pass = 0; pass < 2; ++pass) {
    // rows
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        double acc = 0.0;
        for (int d = -radius; d <= radius; ++d) {
          int cc = std::clamp(c + d, 0, cols - 1);
          acc += field[static_cast<size_t>(r) * cols + cc];
        }
        tmp[static_cast<size_t>(r) * cols + c] = acc / (2 * radius + 1);
      }
    field.swap(tmp);
    // columns
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        double acc = 0.0;
        for (int d = -radius; d <= radius; ++d) {
          int rr = std::clamp(r + d, 0, rows - 1);
          acc += field[static_cast<size_t>(rr) * cols + c];
        }
        tmp[static_cast<size_t>(r) * cols + c] = acc / (2 * radius + 1);
      }
    field.swap(tmp);
  }
  double var = 0.0;
  for (double x : field) var += x * x;
  var /= static_cast<double>(field.size());
  const double gain = var > 0.0 ? scale / std::sqrt(var) : 0.0;
  std::vector<float> out(field.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(field[i] * gain);
  return out;
}

void validate(const SynthConfig& cfg) {
  if (cfg.classes < 2) throw ConfigError("generate: need at least 2 classes");
  if (!(cfg.conflict_rate >= 0.0 && cfg.conflict_rate <= 1.0))
    throw ConfigError("generate: conflict_rate outside [0, 1]");
  if (cfg.noise_sigma < 0.0) throw ConfigError("generate: negative noise_sigma");
  if (!cfg.class_counts.empty() &&
      cfg.class_counts.size() != static_cast<size_t>(cfg.classes))
    throw ConfigError("generate: class_counts size does not match classes");
  if (cfg.class_counts.empty() && cfg.samples_per_class <= 0)
    throw ConfigError("generate: non-positive samples_per_class");
  for (int c : cfg.class_counts)
    if (c <= 0) throw ConfigError("generate: non-positive class count");
}

}  // namespace

Dataset generate(const SynthConfig& cfg) {
  validate(cfg);
  std::vector<int> counts = cfg.class_counts;
  if (counts.empty()) counts.assign(static_cast<size_t>(cfg.classes), cfg.samples_per_class);

  // templates first, from their own streams, so sample counts never shift them
  std::vector<std::vector<float>> audio_tpl, text_tpl;
  for (int c = 0; c < cfg.classes; ++c) {
    Rng tr(derive_seed(cfg.seed, "template.audio." + std::to_string(c)));
    audio_tpl.push_back(draw_smooth_field(tr, kSpectrogramFrames, kSpectrogramBins,
                                              audio_template_scale(), 6));
    Rng tt(derive_seed(cfg.seed, "template.text." + std::to_string(c)));
    text_tpl.push_back(draw_template(tt, kTextValues, text_template_scale()));
  }

  Dataset out;
  out.classes = cfg.classes;
  Rng rng(derive_seed(cfg.seed, "samples"));
  for (int c = 0; c < cfg.classes; ++c) {
    for (int i = 0; i < counts[static_cast<size_t>(c)]; ++i) {
      LabeledSample s;
      s.label = c;
      s.utterance_id = "synth-c" + std::to_string(c) + "-" + std::to_string(i);

      s.x_a.values.resize(kSpecValues);
      s.x_a.utterance_id = s.utterance_id;
      const std::vector<float> audio_noise =
          draw_smooth_field(rng, kSpectrogramFrames, kSpectrogramBins, cfg.noise_sigma, 6);
      for (size_t k = 0; k < kSpecValues; ++k)
        s.x_a.values[k] = audio_tpl[static_cast<size_t>(c)][k] + audio_noise[k];

      int text_class = c;
      if (rng.next_double() < cfg.conflict_rate) {
        // uniform over the other classes
        const int shift = 1 + static_cast<int>(rng.next_below(static_cast<uint64_t>(cfg.classes - 1)));
        text_class = (c + shift) % cfg.classes;
        s.conflict_flag = true;
      }
      s.x_t.vectors.resize(kTextValues);
      s.x_t.utterance_id = s.utterance_id;
      s.x_t.true_length = kTextSteps;
      for (size_t k = 0; k < kTextValues; ++k)
        s.x_t.vectors[k] = text_tpl[static_cast<size_t>(text_class)][k] +
                           static_cast<float>(cfg.noise_sigma * rng.gaussian());

      out.samples.push_back(std::move(s));
    }
  }
  return out;
}

BatchSampler::BatchSampler(std::vector<int> pool, const std::vector<int>& dataset_labels,
                           int batch_size, uint64_t seed)
    : pool_(std::move(pool)), batch_size_(batch_size), rng_(seed) {
  if (pool_.empty()) throw ConfigError("BatchSampler: empty sample pool");
  if (batch_size_ <= 0) throw ConfigError("BatchSampler: non-positive batch size");
  pool_labels_.reserve(pool_.size());
  std::set<int> distinct;
  for (int idx : pool_) {
    if (idx < 0 || static_cast<size_t>(idx) >= dataset_labels.size())
      throw ConfigError("BatchSampler: pool index out of range");
    pool_labels_.push_back(dataset_labels[static_cast<size_t>(idx)]);
    distinct.insert(pool_labels_.back());
  }
  if (distinct.size() < 2)
    throw ConfigError("BatchSampler: sample pool carries a single label; "
                      "different-emotion negatives are impossible");
  batches_per_epoch_ =
      static_cast<int>((pool_.size() + static_cast<size_t>(batch_size_) - 1) / batch_size_);
  order_.resize(pool_.size());
  for (size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int>(i);
  shuffle(order_, rng_);
}

Batch BatchSampler::next() {
  if (cursor_ >= order_.size()) {
    shuffle(order_, rng_);
    cursor_ = 0;
  }
  const size_t take = std::min(static_cast<size_t>(batch_size_), order_.size() - cursor_);
  Batch b;
  b.sample_indices.reserve(take);
  b.labels.reserve(take);
  for (size_t i = 0; i < take; ++i) {
    const int pi = order_[cursor_ + i];
    b.sample_indices.push_back(pool_[static_cast<size_t>(pi)]);
    b.labels.push_back(pool_labels_[static_cast<size_t>(pi)]);
  }
  cursor_ += take;

  b.negatives.resize(take);
  for (size_t i = 0; i < take; ++i)
    for (size_t j = 0; j < take; ++j)
      if (b.labels[j] != b.labels[i]) b.negatives[i].push_back(static_cast<int>(j));
  return b;
}

std::vector<Fold> make_folds(const std::vector<int>& labels, int k, uint64_t seed) {
  if (k < 3) throw ConfigError("make_folds: need k >= 3 for disjoint train/val/test");
  const int classes = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<std::vector<int>> by_class(static_cast<size_t>(classes));
  for (size_t i = 0; i < labels.size(); ++i)
    by_class[static_cast<size_t>(labels[i])].push_back(static_cast<int>(i));
  for (int c = 0; c < classes; ++c)
    if (by_class[static_cast<size_t>(c)].size() < static_cast<size_t>(k))
      throw ConfigError("make_folds: class " + std::to_string(c) + " has " +
                        std::to_string(by_class[static_cast<size_t>(c)].size()) +
                        " samples, fewer than k=" + std::to_string(k));

  // chunk[f] = stratified slice f of every class, assigned round-robin after
  // a seeded per-class shuffle
  std::vector<std::vector<int>> chunks(static_cast<size_t>(k));
  Rng rng(derive_seed(seed, "folds"));
  for (int c = 0; c < classes; ++c) {
    auto idx = by_class[static_cast<size_t>(c)];
    shuffle(idx, rng);
    for (size_t i = 0; i < idx.size(); ++i)
      chunks[i % static_cast<size_t>(k)].push_back(idx[i]);
  }

  std::vector<Fold> folds(static_cast<size_t>(k));
  for (int f = 0; f < k; ++f) {
    Fold& fold = folds[static_cast<size_t>(f)];
    fold.test = chunks[static_cast<size_t>(f)];
    fold.val = chunks[static_cast<size_t>((f + 1) % k)];
    for (int g = 0; g < k; ++g)
      if (g != f && g != (f + 1) % k)
        fold.train.insert(fold.train.end(), chunks[static_cast<size_t>(g)].begin(),
                          chunks[static_cast<size_t>(g)].end());
    std::sort(fold.test.begin(), fold.test.end());
    std::sort(fold.val.begin(), fold.val.end());
    std::sort(fold.train.begin(), fold.train.end());
  }
  return folds;
}

}  // namespace crfuse
