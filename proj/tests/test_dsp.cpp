#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "crfuse/data_synth.hpp"
#include "crfuse/dsp.hpp"
#include "crfuse/errors.hpp"
#include "crfuse/features.hpp"
#include "crfuse/rng.hpp"
#include "oracles.hpp"

using namespace crfuse;
namespace fs = std::filesystem;

namespace {

Waveform tone(double freq_hz, size_t samples, double amplitude = 0.5) {
  Waveform w;
  w.sample_rate_hz = kSampleRateHz;
  w.samples.resize(samples);
  for (size_t i = 0; i < samples; ++i)
    w.samples[i] = static_cast<float>(
        amplitude * std::cos(2.0 * 3.14159265358979323846 * freq_hz * static_cast<double>(i) /
                             kSampleRateHz));
  return w;
}

fs::path temp_dir() {
  const auto dir = fs::temp_directory_path() / "crfuse_dsp_test";
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("fft of a constant is a DC spike") {
  std::vector<std::complex<double>> x(kFftSize, {0.75, 0.0});
  const auto spec = fft(x);
  CHECK(std::abs(spec[0] - std::complex<double>(256.0 * 0.75, 0.0)) < 1e-9);
  for (int k = 1; k < kFftSize; ++k) CHECK(std::abs(spec[static_cast<size_t>(k)]) < 1e-9);
}

TEST_CASE("fft of a pure tone peaks at its bin pair") {
  std::vector<std::complex<double>> x(kFftSize);
  for (int n = 0; n < kFftSize; ++n)
    x[static_cast<size_t>(n)] = {std::cos(2.0 * 3.14159265358979323846 * 16.0 * n / 256.0), 0.0};
  const auto spec = fft(x);
  CHECK(std::abs(spec[16]) == doctest::Approx(128.0).epsilon(1e-9));
  CHECK(std::abs(spec[240]) == doctest::Approx(128.0).epsilon(1e-9));
  for (int k = 0; k < kFftSize; ++k)
    if (k != 16 && k != 240) CHECK(std::abs(spec[static_cast<size_t>(k)]) < 1e-8);
}

TEST_CASE("fft matches the naive DFT oracle and satisfies Parseval") {
  Rng rng(101);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::complex<double>> x(kFftSize);
    for (auto& v : x) v = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
    const auto fast = fft(x);
    const auto slow = oracles::naive_dft(x);
    for (int k = 0; k < kFftSize; ++k)
      CHECK(std::abs(fast[static_cast<size_t>(k)] - slow[static_cast<size_t>(k)]) < 1e-9);

    double time_energy = 0.0, freq_energy = 0.0;
    for (const auto& v : x) time_energy += std::norm(v);
    for (const auto& v : fast) freq_energy += std::norm(v);
    CHECK(std::fabs(time_energy - freq_energy / kFftSize) / time_energy < 1e-9);
  }
}

TEST_CASE("fft rejects wrong lengths") {
  CHECK_THROWS_AS(fft(std::vector<std::complex<double>>(128)), DimensionError);
  CHECK_THROWS_AS(fft(std::vector<std::complex<double>>(512)), DimensionError);
}

TEST_CASE("stft frame count follows the hop formula") {
  const auto frames = stft(tone(440.0, 16384));
  CHECK(frames.size() == 127);  // (16384 - 256) / 128 + 1
  CHECK(frames[0].size() == 129);
}

TEST_CASE("stft of a 1 kHz tone puts every frame's peak at bin 16") {
  const auto frames = stft(tone(1000.0, 3 * kSegmentSamples));
  for (const auto& frame : frames) {
    size_t argmax = 0;
    for (size_t k = 1; k < frame.size(); ++k)
      if (frame[k] > frame[argmax]) argmax = k;
    CHECK(argmax == 16);  // 1000 * 256 / 16000
  }
}

TEST_CASE("stft of silence is exactly zero before the log floor") {
  Waveform silence;
  silence.samples.assign(kSegmentSamples, 0.0f);
  for (const auto& frame : stft(silence))
    for (double m : frame) CHECK(m == 0.0);
}

TEST_CASE("stft input validation") {
  Waveform w;
  CHECK_THROWS_AS(stft(w), InputError);
  w.samples.assign(100, 0.1f);
  CHECK_THROWS_AS(stft(w), InputError);
}

TEST_CASE("make_spectrograms segments and discards the remainder") {
  const auto two = make_spectrograms(tone(1000.0, 2 * kSegmentSamples + 5000), "utt-a");
  REQUIRE(two.size() == 2);
  for (const auto& spec : two) {
    CHECK(spec.values.size() == 128u * 128u);
    CHECK(spec.utterance_id == "utt-a");
  }
  CHECK(two[0].segment_index == 0);
  CHECK(two[1].segment_index == 1);

  const auto none = make_spectrograms(tone(1000.0, kSegmentSamples - 1));
  CHECK(none.empty());
}

TEST_CASE("silent segments sit exactly at the log floor") {
  Waveform silence;
  silence.samples.assign(kSegmentSamples, 0.0f);
  const auto specs = make_spectrograms(silence);
  REQUIRE(specs.size() == 1);
  const float floor_value = static_cast<float>(std::log(kLogFloor));
  for (float v : specs[0].values) CHECK(v == floor_value);
}

TEST_CASE("white-noise segments stay finite") {
  Rng rng(777);
  Waveform noise;
  noise.samples.resize(kSegmentSamples);
  for (auto& s : noise.samples) s = static_cast<float>(rng.uniform(-1.0, 1.0));
  const auto specs = make_spectrograms(noise);
  REQUIRE(specs.size() == 1);
  for (float v : specs[0].values) CHECK(std::isfinite(v));
}

TEST_CASE("feature files round-trip bit-exactly") {
  SynthConfig cfg;
  cfg.classes = 3;
  cfg.samples_per_class = 4;
  cfg.seed = 5;
  const Dataset data = generate(cfg);

  const auto dir = temp_dir();
  const auto file = dir / "roundtrip.bin";
  save_features(file, data.samples);
  const auto loaded = load_feature_file(file, cfg.classes);
  REQUIRE(loaded.size() == data.samples.size());
  for (size_t i = 0; i < loaded.size(); ++i) {
    CHECK(loaded[i].label == data.samples[i].label);
    CHECK(loaded[i].utterance_id == data.samples[i].utterance_id);
    CHECK(loaded[i].x_t.true_length == data.samples[i].x_t.true_length);
    CHECK(loaded[i].x_a.values == data.samples[i].x_a.values);
    CHECK(loaded[i].x_t.vectors == data.samples[i].x_t.vectors);
  }
  fs::remove(file);
}

TEST_CASE("manifest loading reports missing files by name") {
  const auto dir = temp_dir();
  const auto manifest = dir / "manifest_missing.txt";
  {
    std::ofstream m(manifest);
    m << "# comment line\n";
    m << "not_there.bin\n";
  }
  CHECK_THROWS_WITH_AS(load_features(manifest, 4), doctest::Contains("not_there.bin"), IoError);
  fs::remove(manifest);
}

TEST_CASE("labels outside the class range are format errors") {
  SynthConfig cfg;
  cfg.classes = 4;
  cfg.samples_per_class = 1;
  const Dataset data = generate(cfg);
  const auto dir = temp_dir();
  const auto file = dir / "bad_label.bin";
  save_features(file, data.samples);
  // class 3 exists in the file, so loading with classes=3 must fail
  CHECK_THROWS_AS(load_feature_file(file, 3), FormatError);
  fs::remove(file);
}

TEST_CASE("corrupted magic and truncation are rejected with offsets") {
  const auto dir = temp_dir();
  const auto file = dir / "corrupt.bin";
  {
    std::ofstream out(file, std::ios::binary);
    out << "XXXX";
  }
  CHECK_THROWS_AS(load_feature_file(file, 4), FormatError);
  {
    std::ofstream out(file, std::ios::binary);
    out << "CFE1";
    const uint32_t n = 2;
    out.write(reinterpret_cast<const char*>(&n), 4);
    // no sample bodies follow
  }
  CHECK_THROWS_WITH_AS(load_feature_file(file, 4), doctest::Contains("@"), FormatError);
  fs::remove(file);
}

TEST_CASE("wav reader accepts 16 kHz mono PCM and names violations") {
  const auto dir = temp_dir();
  const auto good = dir / "good.wav";
  const auto bad_rate = dir / "bad_rate.wav";

  const auto write_wav = [](const fs::path& path, uint32_t rate, uint16_t channels,
                            const std::vector<int16_t>& pcm) {
    std::ofstream out(path, std::ios::binary);
    const uint32_t data_size = static_cast<uint32_t>(pcm.size() * 2);
    const uint32_t riff_size = 36 + data_size;
    const uint16_t bits = 16, fmt = 1;
    const uint32_t byte_rate = rate * channels * 2;
    const uint16_t block_align = static_cast<uint16_t>(channels * 2);
    out << "RIFF";
    out.write(reinterpret_cast<const char*>(&riff_size), 4);
    out << "WAVEfmt ";
    const uint32_t fmt_size = 16;
    out.write(reinterpret_cast<const char*>(&fmt_size), 4);
    out.write(reinterpret_cast<const char*>(&fmt), 2);
    out.write(reinterpret_cast<const char*>(&channels), 2);
    out.write(reinterpret_cast<const char*>(&rate), 4);
    out.write(reinterpret_cast<const char*>(&byte_rate), 4);
    out.write(reinterpret_cast<const char*>(&block_align), 2);
    out.write(reinterpret_cast<const char*>(&bits), 2);
    out << "data";
    out.write(reinterpret_cast<const char*>(&data_size), 4);
    out.write(reinterpret_cast<const char*>(pcm.data()), data_size);
  };

  std::vector<int16_t> pcm(kSampleRateHz);  // 1 s
  for (size_t i = 0; i < pcm.size(); ++i)
    pcm[i] = static_cast<int16_t>(
        10000.0 * std::sin(2.0 * 3.14159265358979323846 * 440.0 * i / kSampleRateHz));

  write_wav(good, kSampleRateHz, 1, pcm);
  const Waveform w = read_wav_16k_mono(good);
  CHECK(w.samples.size() == pcm.size());
  CHECK(w.sample_rate_hz == kSampleRateHz);

  write_wav(bad_rate, 8000, 1, pcm);
  CHECK_THROWS_WITH_AS(read_wav_16k_mono(bad_rate), doctest::Contains("bad_rate.wav"), InputError);

  fs::remove(good);
  fs::remove(bad_rate);
}

TEST_CASE("embedding files round-trip") {
  WordEmbeddingSequence emb;
  emb.true_length = 12;
  emb.vectors.resize(static_cast<size_t>(kTextSteps) * kTextDim);
  Rng rng(9);
  for (auto& v : emb.vectors) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  const auto dir = temp_dir();
  const auto file = dir / "emb.bin";
  save_embedding_file(file, emb);
  const auto loaded = read_embedding_file(file);
  CHECK(loaded.true_length == 12);
  CHECK(loaded.vectors == emb.vectors);
  fs::remove(file);
}
