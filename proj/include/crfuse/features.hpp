#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "crfuse/dsp.hpp"

namespace crfuse {

// one audio segment paired with its utterance's text features
struct LabeledSample {
  Spectrogram x_a;
  WordEmbeddingSequence x_t;
  int label = 0;
  std::string utterance_id;
  bool conflict_flag = false;  // synthetic corpora only
};

struct Dataset {
  std::vector<LabeledSample> samples;
  int classes = 0;

  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.label);
    return out;
  }
};

// Feature file, little-endian:
//   magic "CFE1", u32 n_samples, then per sample:
//   u32 label, u32 id_len, id bytes, f32[128*128] spectrogram,
//   u32 true_length, f32[30*300] embeddings
void save_features(const std::filesystem::path& path, const std::vector<LabeledSample>& samples);
std::vector<LabeledSample> load_feature_file(const std::filesystem::path& path, int classes);

// Manifest: UTF-8 text, one feature-file path per line, '#' starts a comment.
// Relative paths resolve against the manifest's directory.
std::vector<LabeledSample> load_features(const std::filesystem::path& manifest_path, int classes);

// 16 kHz mono 16-bit PCM RIFF/WAVE only; anything else is rejected with the
// offending property named
Waveform read_wav_16k_mono(const std::filesystem::path& path);

// Per-utterance precomputed text features, little-endian:
//   magic "CEMB", u32 true_length, f32[30*300] row-major
WordEmbeddingSequence read_embedding_file(const std::filesystem::path& path);
void save_embedding_file(const std::filesystem::path& path, const WordEmbeddingSequence& emb);

}  // namespace crfuse
