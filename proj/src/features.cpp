#include "crfuse/features.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "crfuse/errors.hpp"

namespace crfuse {

namespace {

constexpr char kMagic[4] = {'C', 'F', 'E', '1'};
constexpr size_t kSpecValues = static_cast<size_t>(kSpectrogramFrames) * kSpectrogramBins;
constexpr size_t kTextValues = static_cast<size_t>(kTextSteps) * kTextDim;

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void write_f32(std::ostream& os, const float* data, size_t n) {
  // little-endian host assumed; asserted once at load time
  os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
}

struct Reader {
  std::ifstream in;
  std::string path;
  uint64_t offset = 0;

  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(path + " @" + std::to_string(offset) + ": " + what);
  }

  void read(void* dst, size_t n, const char* what) {
    in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in.gcount()) != n) fail(std::string("truncated ") + what);
    offset += n;
  }

  uint32_t read_u32(const char* what) {
    unsigned char b[4];
    read(b, 4, what);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
  }
};

}  // namespace

void save_features(const std::filesystem::path& path, const std::vector<LabeledSample>& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(kMagic, 4);
  write_u32(out, static_cast<uint32_t>(samples.size()));
  for (const auto& s : samples) {
    if (s.x_a.values.size() != kSpecValues || s.x_t.vectors.size() != kTextValues)
      throw DimensionError("save_features: sample " + s.utterance_id + " has wrong feature shape");
    write_u32(out, static_cast<uint32_t>(s.label));
    write_u32(out, static_cast<uint32_t>(s.utterance_id.size()));
    out.write(s.utterance_id.data(), static_cast<std::streamsize>(s.utterance_id.size()));
    write_f32(out, s.x_a.values.data(), kSpecValues);
    write_u32(out, static_cast<uint32_t>(s.x_t.true_length));
    write_f32(out, s.x_t.vectors.data(), kTextValues);
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<LabeledSample> load_feature_file(const std::filesystem::path& path, int classes) {
  static_assert(sizeof(float) == 4);
  Reader r;
  r.path = path.string();
  r.in.open(path, std::ios::binary);
  if (!r.in) throw IoError("cannot open: " + path.string());

  char magic[4];
  r.read(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) r.fail("bad magic, not a feature file");
  const uint32_t n = r.read_u32("sample count");

  std::vector<LabeledSample> out;
  out.reserve(n);
  for (uint32_t i = 0; i < n; ++i) {
    LabeledSample s;
    const uint32_t label = r.read_u32("label");
    if (label >= static_cast<uint32_t>(classes))
      r.fail("label " + std::to_string(label) + " out of [0, " + std::to_string(classes) + ")");
    s.label = static_cast<int>(label);
    const uint32_t id_len = r.read_u32("id length");
    if (id_len > (1u << 20)) r.fail("implausible utterance id length");
    s.utterance_id.resize(id_len);
    if (id_len) r.read(s.utterance_id.data(), id_len, "utterance id");
    s.x_a.values.resize(kSpecValues);
    r.read(s.x_a.values.data(), kSpecValues * sizeof(float), "spectrogram");
    s.x_a.utterance_id = s.utterance_id;
    const uint32_t tl = r.read_u32("true length");
    if (tl > static_cast<uint32_t>(kTextSteps))
      r.fail("true_length " + std::to_string(tl) + " exceeds " + std::to_string(kTextSteps));
    s.x_t.true_length = static_cast<int>(tl);
    s.x_t.vectors.resize(kTextValues);
    r.read(s.x_t.vectors.data(), kTextValues * sizeof(float), "embeddings");
    s.x_t.utterance_id = s.utterance_id;
    out.push_back(std::move(s));
  }
  return out;
}

Waveform read_wav_16k_mono(const std::filesystem::path& path) {
  Reader r;
  r.path = path.string();
  r.in.open(path, std::ios::binary);
  if (!r.in) throw IoError("cannot open: " + path.string());

  char riff[4], wave[4];
  r.read(riff, 4, "RIFF header");
  uint32_t riff_size = r.read_u32("RIFF size");
  (void)riff_size;
  r.read(wave, 4, "WAVE header");
  if (std::memcmp(riff, "RIFF", 4) != 0 || std::memcmp(wave, "WAVE", 4) != 0)
    throw FormatError(path.string() + ": not a RIFF/WAVE file");

  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  bool have_fmt = false;
  while (true) {
    char id[4];
    r.in.read(id, 4);
    if (r.in.gcount() != 4) throw FormatError(path.string() + ": no data chunk");
    r.offset += 4;
    const uint32_t size = r.read_u32("chunk size");
    if (std::memcmp(id, "fmt ", 4) == 0) {
      std::vector<unsigned char> fmt(size);
      r.read(fmt.data(), size, "fmt chunk");
      if (size < 16) throw FormatError(path.string() + ": short fmt chunk");
      format = static_cast<uint16_t>(fmt[0] | (fmt[1] << 8));
      channels = static_cast<uint16_t>(fmt[2] | (fmt[3] << 8));
      rate = static_cast<uint32_t>(fmt[4]) | (static_cast<uint32_t>(fmt[5]) << 8) |
             (static_cast<uint32_t>(fmt[6]) << 16) | (static_cast<uint32_t>(fmt[7]) << 24);
      bits = static_cast<uint16_t>(fmt[14] | (fmt[15] << 8));
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      if (!have_fmt) throw FormatError(path.string() + ": data chunk before fmt chunk");
      if (format != 1) throw InputError(path.string() + ": not PCM (format tag " +
                                        std::to_string(format) + ")");
      if (channels != 1)
        throw InputError(path.string() + ": expected mono, got " + std::to_string(channels) +
                         " channels");
      if (bits != 16)
        throw InputError(path.string() + ": expected 16-bit samples, got " + std::to_string(bits));
      if (rate != static_cast<uint32_t>(kSampleRateHz))
        throw InputError(path.string() + ": expected " + std::to_string(kSampleRateHz) +
                         " Hz, got " + std::to_string(rate));
      Waveform w;
      w.sample_rate_hz = static_cast<int>(rate);
      const size_t n = size / 2;
      std::vector<unsigned char> raw(size);
      r.read(raw.data(), size, "PCM data");
      w.samples.resize(n);
      for (size_t i = 0; i < n; ++i) {
        const int16_t s = static_cast<int16_t>(raw[2 * i] | (raw[2 * i + 1] << 8));
        w.samples[i] = static_cast<float>(s) / 32768.0f;
      }
      return w;
    } else {
      std::vector<char> skip(size);
      r.read(skip.data(), size, "chunk body");
    }
  }
}

WordEmbeddingSequence read_embedding_file(const std::filesystem::path& path) {
  Reader r;
  r.path = path.string();
  r.in.open(path, std::ios::binary);
  if (!r.in) throw IoError("cannot open: " + path.string());
  char magic[4];
  r.read(magic, 4, "magic");
  if (std::memcmp(magic, "CEMB", 4) != 0) r.fail("bad magic, not an embedding file");
  WordEmbeddingSequence emb;
  const uint32_t tl = r.read_u32("true length");
  if (tl > static_cast<uint32_t>(kTextSteps))
    r.fail("true_length " + std::to_string(tl) + " exceeds " + std::to_string(kTextSteps));
  emb.true_length = static_cast<int>(tl);
  emb.vectors.resize(kTextValues);
  r.read(emb.vectors.data(), kTextValues * sizeof(float), "embeddings");
  return emb;
}

void save_embedding_file(const std::filesystem::path& path, const WordEmbeddingSequence& emb) {
  if (emb.vectors.size() != kTextValues)
    throw DimensionError("save_embedding_file: wrong embedding shape");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write("CEMB", 4);
  write_u32(out, static_cast<uint32_t>(emb.true_length));
  write_f32(out, emb.vectors.data(), kTextValues);
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<LabeledSample> load_features(const std::filesystem::path& manifest_path, int classes) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open manifest: " + manifest_path.string());
  const auto base = manifest_path.parent_path();
  std::vector<LabeledSample> out;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    // trim
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    std::filesystem::path p = line.substr(b, e - b + 1);
    if (p.is_relative()) p = base / p;
    if (!std::filesystem::exists(p))
      throw IoError("manifest " + manifest_path.string() + " references missing file: " +
                    p.string());
    auto part = load_feature_file(p, classes);
    out.insert(out.end(), std::make_move_iterator(part.begin()),
               std::make_move_iterator(part.end()));
  }
  return out;
}

}  // namespace crfuse
