#include "crfuse/dsp.hpp"

#include <cmath>

#include "crfuse/errors.hpp"

namespace crfuse {

namespace {

constexpr double kPi = 3.14159265358979323846;

// iterative Cooley-Tukey, decimation in time
void fft_inplace(std::vector<std::complex<double>>& a) {
  const size_t n = a.size();
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * kPi / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t j = 0; j < len / 2; ++j) {
        const std::complex<double> u = a[i + j];
        const std::complex<double> v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

std::vector<double> hann_window(int n) {
  std::vector<double> w(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    w[static_cast<size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * kPi * i / (n - 1));
  return w;
}

}  // namespace

std::vector<std::complex<double>> fft(std::vector<std::complex<double>> signal) {
  if (signal.size() != static_cast<size_t>(kFftSize))
    throw DimensionError("fft: expected " + std::to_string(kFftSize) + " points, got " +
                         std::to_string(signal.size()));
  fft_inplace(signal);
  return signal;
}

std::vector<std::vector<double>> stft(const Waveform& w) {
  if (w.samples.empty() || w.sample_rate_hz <= 0)
    throw InputError("stft: empty waveform or non-positive sample rate");
  if (w.samples.size() < static_cast<size_t>(kFftSize))
    throw InputError("stft: waveform has " + std::to_string(w.samples.size()) +
                     " samples, need at least " + std::to_string(kFftSize));
  static const std::vector<double> window = hann_window(kFftSize);
  const size_t frames = (w.samples.size() - kFftSize) / kHopSize + 1;
  std::vector<std::vector<double>> mags(frames, std::vector<double>(kFftSize / 2 + 1));
  std::vector<std::complex<double>> buf(kFftSize);
  for (size_t f = 0; f < frames; ++f) {
    const size_t off = f * kHopSize;
    for (int i = 0; i < kFftSize; ++i)
      buf[static_cast<size_t>(i)] = {static_cast<double>(w.samples[off + static_cast<size_t>(i)]) *
                                         window[static_cast<size_t>(i)],
                                     0.0};
    fft_inplace(buf);
    for (int k = 0; k <= kFftSize / 2; ++k)
      mags[f][static_cast<size_t>(k)] = std::abs(buf[static_cast<size_t>(k)]);
  }
  return mags;
}

std::vector<Spectrogram> make_spectrograms(const Waveform& w, const std::string& utterance_id) {
  if (w.samples.empty() || w.sample_rate_hz <= 0)
    throw InputError("make_spectrograms: empty waveform or non-positive sample rate");
  const size_t segments = w.samples.size() / kSegmentSamples;
  std::vector<Spectrogram> out;
  out.reserve(segments);
  for (size_t s = 0; s < segments; ++s) {
    Waveform seg;
    seg.sample_rate_hz = w.sample_rate_hz;
    seg.samples.assign(w.samples.begin() + static_cast<long>(s * kSegmentSamples),
                       w.samples.begin() + static_cast<long>((s + 1) * kSegmentSamples));
    const auto frames = stft(seg);
    Spectrogram spec;
    spec.segment_index = static_cast<int>(s);
    spec.utterance_id = utterance_id;
    spec.values.resize(static_cast<size_t>(kSpectrogramFrames) * kSpectrogramBins);
    for (int f = 0; f < kSpectrogramFrames; ++f)
      for (int b = 0; b < kSpectrogramBins; ++b)
        spec.values[static_cast<size_t>(f) * kSpectrogramBins + b] = static_cast<float>(
            std::log(std::max(frames[static_cast<size_t>(f)][static_cast<size_t>(b + 1)], kLogFloor)));
    out.push_back(std::move(spec));
  }
  return out;
}

}  // namespace crfuse
