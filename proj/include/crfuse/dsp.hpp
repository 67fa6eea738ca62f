#pragma once

#include <complex>
#include <cstdint>
#include <string>
#include <vector>

namespace crfuse {

inline constexpr int kFftSize = 256;
inline constexpr int kHopSize = 128;
inline constexpr int kSpectrogramBins = 128;   // one-sided bins 1..128, DC dropped
inline constexpr int kSpectrogramFrames = 128;
inline constexpr int kSampleRateHz = 16000;
// 256 + 127 * 128 samples -> exactly 128 frames per segment (~1.04 s)
inline constexpr int kSegmentSamples = kFftSize + (kSpectrogramFrames - 1) * kHopSize;
inline constexpr double kLogFloor = 1e-10;

inline constexpr int kTextSteps = 30;
inline constexpr int kTextDim = 300;

struct Waveform {
  std::vector<float> samples;  // in [-1, 1]
  int sample_rate_hz = kSampleRateHz;
};

// log-magnitude time-frequency matrix for one audio segment, frames x bins
struct Spectrogram {
  std::vector<float> values;  // row-major 128 x 128
  int segment_index = 0;
  std::string utterance_id;
};

struct WordEmbeddingSequence {
  std::vector<float> vectors;  // row-major 30 x 300; rows >= true_length are zero
  std::string utterance_id;
  int true_length = 0;
};

// in-place radix-2 forward DFT, unnormalized: X[k] = sum_n x[n] e^{-2πi kn/N};
// length must be exactly 256
std::vector<std::complex<double>> fft(std::vector<std::complex<double>> signal);

// Hann-windowed frames of 256 samples at stride 128; one-sided magnitudes,
// bins 0..128, so each row has 129 entries
std::vector<std::vector<double>> stft(const Waveform& w);

// Non-overlapping ~1 s segments, each reduced to a 128x128 log-magnitude
// matrix (bins 1..128, floored at ln(1e-10)); a trailing remainder shorter
// than one segment is dropped. Shorter-than-one-segment input yields an
// empty list.
std::vector<Spectrogram> make_spectrograms(const Waveform& w, const std::string& utterance_id = "");

}  // namespace crfuse
