#include "crfuse/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <ostream>
#include <thread>

#include <json.hpp>

#include "crfuse/errors.hpp"
#include "crfuse/model.hpp"

namespace crfuse {

void adam_init(AdamState& state, const ParamStoreT<float>& params) {
  state.m.clear();
  state.v.clear();
  state.step = 0;
  for (const auto& [name, t] : params) {
    state.m.emplace_back(static_cast<size_t>(t.size()), 0.0f);
    state.v.emplace_back(static_cast<size_t>(t.size()), 0.0f);
  }
}

void adam_step(ParamStoreT<float>& params, const std::vector<const std::vector<float>*>& grads,
               AdamState& state, const TrainConfig& cfg) {
  if (grads.size() != params.size() || state.m.size() != params.size())
    throw DimensionError("adam_step: gradient/state list does not match parameter store");
  state.step += 1;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const float corr1 = static_cast<float>(1.0 - std::pow(b1, static_cast<double>(state.step)));
  const float corr2 = static_cast<float>(1.0 - std::pow(b2, static_cast<double>(state.step)));
  const float lr = static_cast<float>(cfg.learning_rate);
  const float eps = static_cast<float>(cfg.adam_eps);
  const float fb1 = static_cast<float>(b1), fb2 = static_cast<float>(b2);

  size_t pi = 0;
  for (auto& [name, t] : params) {
    const std::vector<float>* g = grads[pi];
    if (g != nullptr && static_cast<long>(g->size()) != t.size())
      throw DimensionError("adam_step: gradient size mismatch for " + name);
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    float* w = t.data();
    for (long i = 0; i < t.size(); ++i) {
      const float gi = g ? (*g)[static_cast<size_t>(i)] : 0.0f;
      m[static_cast<size_t>(i)] = fb1 * m[static_cast<size_t>(i)] + (1.0f - fb1) * gi;
      v[static_cast<size_t>(i)] = fb2 * v[static_cast<size_t>(i)] + (1.0f - fb2) * gi * gi;
      const float mhat = m[static_cast<size_t>(i)] / corr1;
      const float vhat = v[static_cast<size_t>(i)] / corr2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
    ++pi;
  }
}

EvalReport report_from_confusion(const std::vector<std::vector<long>>& counts) {
  EvalReport r;
  const size_t classes = counts.size();
  r.confusion = counts;
  r.confusion_rates.assign(classes, std::vector<double>(classes, 0.0));
  r.per_class_recall.assign(classes, 0.0);
  r.class_support.assign(classes, 0);
  long correct = 0;
  double recall_sum = 0.0;
  int supported = 0;
  for (size_t c = 0; c < classes; ++c) {
    if (counts[c].size() != classes) throw DimensionError("report_from_confusion: ragged matrix");
    long row = 0;
    for (long x : counts[c]) row += x;
    r.class_support[c] = row;
    r.total += row;
    correct += counts[c][c];
    if (row > 0) {
      for (size_t p = 0; p < classes; ++p)
        r.confusion_rates[c][p] = static_cast<double>(counts[c][p]) / static_cast<double>(row);
      r.per_class_recall[c] = r.confusion_rates[c][c];
      recall_sum += r.per_class_recall[c];
      ++supported;
    }
  }
  r.wa = r.total > 0 ? static_cast<double>(correct) / static_cast<double>(r.total) : 0.0;
  r.ua = supported > 0 ? recall_sum / supported : 0.0;
  return r;
}

namespace {

int argmax_row(const float* row, int n) {
  int best = 0;
  for (int i = 1; i < n; ++i)
    if (row[i] > row[best]) best = i;
  return best;
}

}  // namespace

EvalReport evaluate(const ParamStoreT<float>& params, const Dataset& data,
                    const std::vector<int>& indices, int batch_size) {
  if (indices.empty()) throw InputError("evaluate: empty sample set");
  const int classes = data.classes;

  // per-utterance mean fused scores decide; agreement is counted per segment
  std::map<std::string, std::pair<int, std::vector<double>>> groups;  // id -> label, sum of s
  long agree = 0;
  for (size_t off = 0; off < indices.size(); off += static_cast<size_t>(batch_size)) {
    std::vector<int> chunk(indices.begin() + static_cast<long>(off),
                           indices.begin() + static_cast<long>(std::min(
                               indices.size(), off + static_cast<size_t>(batch_size))));
    ScoreVectorT<float> sv = batch_scores(params, data, chunk);
    for (size_t b = 0; b < chunk.size(); ++b) {
      const auto& sample = data.samples[static_cast<size_t>(chunk[b])];
      auto& g = groups[sample.utterance_id];
      if (g.second.empty()) {
        g.first = sample.label;
        g.second.assign(static_cast<size_t>(classes), 0.0);
      }
      const float* s = sv.s.data() + b * static_cast<size_t>(classes);
      for (int c = 0; c < classes; ++c) g.second[static_cast<size_t>(c)] += s[c];
      const int pa = argmax_row(sv.s_a.data() + b * static_cast<size_t>(classes), classes);
      const int pt = argmax_row(sv.s_t.data() + b * static_cast<size_t>(classes), classes);
      if (pa == pt) ++agree;
    }
  }

  std::vector<std::vector<long>> counts(static_cast<size_t>(classes),
                                        std::vector<long>(static_cast<size_t>(classes), 0));
  for (const auto& [id, g] : groups) {
    int pred = 0;
    for (int c = 1; c < classes; ++c)
      if (g.second[static_cast<size_t>(c)] > g.second[static_cast<size_t>(pred)]) pred = c;
    counts[static_cast<size_t>(g.first)][static_cast<size_t>(pred)] += 1;
  }
  EvalReport r = report_from_confusion(counts);
  r.modality_agreement = static_cast<double>(agree) / static_cast<double>(indices.size());
  return r;
}

TrainResult train(const Dataset& data, const Fold& fold, const TrainConfig& cfg,
                  std::ostream* log) {
  if (!(cfg.alpha >= 0.0 && cfg.alpha <= 1.0))
    throw RangeError("train: alpha " + std::to_string(cfg.alpha) + " outside [0, 1]");
  if (cfg.epochs <= 0 || cfg.batch_size <= 0) throw ConfigError("train: non-positive counts");
  if (fold.train.empty() || fold.val.empty()) throw ConfigError("train: empty fold split");

  const bool with_disc = cfg.disc_mode != DiscriminatorMode::Absent;
  const bool build_l2 =
      with_disc && (cfg.alpha > 0.0 || cfg.disc_mode == DiscriminatorMode::Always);

  ParamStoreT<float> params =
      init_model_params<float>(data.classes, cfg.seed, with_disc, cfg.disc_hidden);
  AdamState adam;
  adam_init(adam, params);
  BatchSampler sampler(fold.train, data.labels(), cfg.batch_size,
                       derive_seed(cfg.seed, "batches"));

  TrainResult result;
  const int batches = sampler.batches_per_epoch();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0, l1_sum = 0.0, l2_sum = 0.0;
    for (int bi = 0; bi < batches; ++bi) {
      Batch batch = sampler.next();
      TapeT<float> tape;
      params.watch_all(tape);
      BatchLossT<float> bl = batch_loss(tape, params, data, batch, cfg.alpha, build_l2);
      const double loss = static_cast<double>(bl.total.item());
      if (!std::isfinite(loss))
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                           " batch " + std::to_string(bi) + " (l1=" +
                           std::to_string(bl.l1.item()) + ", l2=" + std::to_string(bl.l2.item()) +
                           ")");
      tape.backward(bl.total);
      std::vector<const std::vector<float>*> grads;
      grads.reserve(params.size());
      for (auto& [name, t] : params) grads.push_back(tape.grad_ptr(t));
      adam_step(params, grads, adam, cfg);
      loss_sum += loss;
      l1_sum += static_cast<double>(bl.l1.item());
      l2_sum += static_cast<double>(bl.l2.item());
    }

    EvalReport val = evaluate(params, data, fold.val, cfg.batch_size);
    EpochStats stats;
    stats.train_loss = loss_sum / batches;
    stats.l1 = l1_sum / batches;
    stats.l2 = l2_sum / batches;
    stats.val_wa = val.wa;
    stats.val_ua = val.ua;
    result.curve.push_back(stats);
    if (log)
      (*log) << "epoch " << epoch << " loss " << stats.train_loss << " l1 " << stats.l1 << " l2 "
             << stats.l2 << " val_ua " << stats.val_ua << " val_wa " << stats.val_wa << "\n";

    if (result.best_epoch < 0 || val.ua > result.best_val_ua) {
      result.best_epoch = epoch;
      result.best_val_ua = val.ua;
      result.params = params.clone();
    }
  }
  result.sampler_rng_state = sampler.rng_state();
  return result;
}

namespace {

constexpr char kCkptMagic[4] = {'C', 'F', 'C', 'K'};
constexpr uint32_t kCkptVersion = 1;

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& is, const std::string& path, const char* what) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (is.gcount() != 4) throw FormatError(path + ": truncated " + what);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

const char* disc_mode_name(DiscriminatorMode m) {
  switch (m) {
    case DiscriminatorMode::Auto: return "auto";
    case DiscriminatorMode::Always: return "always";
    case DiscriminatorMode::Absent: return "absent";
  }
  return "auto";
}

DiscriminatorMode disc_mode_from(const std::string& s) {
  if (s == "always") return DiscriminatorMode::Always;
  if (s == "absent") return DiscriminatorMode::Absent;
  return DiscriminatorMode::Auto;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(kCkptMagic, 4);
  write_u32(out, kCkptVersion);

  nlohmann::json cfg{{"learning_rate", ckpt.cfg.learning_rate},
                     {"batch_size", ckpt.cfg.batch_size},
                     {"alpha", ckpt.cfg.alpha},
                     {"epochs", ckpt.cfg.epochs},
                     {"seed", ckpt.cfg.seed},
                     {"adam_beta1", ckpt.cfg.adam_beta1},
                     {"adam_beta2", ckpt.cfg.adam_beta2},
                     {"adam_eps", ckpt.cfg.adam_eps},
                     {"disc_hidden", ckpt.cfg.disc_hidden},
                     {"disc_mode", disc_mode_name(ckpt.cfg.disc_mode)},
                     {"classes", ckpt.classes},
                     {"epoch", ckpt.epoch},
                     {"rng_digest", ckpt.rng_digest}};
  const std::string cfg_str = cfg.dump();
  write_u32(out, static_cast<uint32_t>(cfg_str.size()));
  out.write(cfg_str.data(), static_cast<std::streamsize>(cfg_str.size()));

  write_u32(out, static_cast<uint32_t>(ckpt.params.size()));
  for (const auto& [name, t] : ckpt.params) {
    write_u32(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, static_cast<uint32_t>(t.shape().size()));
    for (int d : t.shape()) write_u32(out, static_cast<uint32_t>(d));
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * static_cast<long>(sizeof(float))));
  }
  if (!out) throw IoError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  static_assert(sizeof(float) == 4);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  const std::string p = path.string();

  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kCkptMagic, 4) != 0)
    throw FormatError(p + ": not a checkpoint file (bad magic)");
  const uint32_t version = read_u32(in, p, "version");
  if (version != kCkptVersion)
    throw FormatError(p + ": unsupported checkpoint version " + std::to_string(version));

  const uint32_t cfg_len = read_u32(in, p, "config length");
  std::string cfg_str(cfg_len, '\0');
  in.read(cfg_str.data(), cfg_len);
  if (static_cast<uint32_t>(in.gcount()) != cfg_len) throw FormatError(p + ": truncated config");

  Checkpoint ckpt;
  try {
    const auto cfg = nlohmann::json::parse(cfg_str);
    ckpt.cfg.learning_rate = cfg.at("learning_rate").get<double>();
    ckpt.cfg.batch_size = cfg.at("batch_size").get<int>();
    ckpt.cfg.alpha = cfg.at("alpha").get<double>();
    ckpt.cfg.epochs = cfg.at("epochs").get<int>();
    ckpt.cfg.seed = cfg.at("seed").get<uint64_t>();
    ckpt.cfg.adam_beta1 = cfg.at("adam_beta1").get<double>();
    ckpt.cfg.adam_beta2 = cfg.at("adam_beta2").get<double>();
    ckpt.cfg.adam_eps = cfg.at("adam_eps").get<double>();
    ckpt.cfg.disc_hidden = cfg.at("disc_hidden").get<int>();
    ckpt.cfg.disc_mode = disc_mode_from(cfg.at("disc_mode").get<std::string>());
    ckpt.classes = cfg.at("classes").get<int>();
    ckpt.epoch = cfg.at("epoch").get<int>();
    ckpt.rng_digest = cfg.at("rng_digest").get<uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(p + ": malformed config block: " + e.what());
  }

  const uint32_t n_tensors = read_u32(in, p, "tensor count");
  for (uint32_t i = 0; i < n_tensors; ++i) {
    const uint32_t name_len = read_u32(in, p, "tensor name length");
    if (name_len > (1u << 16)) throw FormatError(p + ": implausible tensor name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (static_cast<uint32_t>(in.gcount()) != name_len)
      throw FormatError(p + ": truncated tensor name");
    const uint32_t rank = read_u32(in, p, "tensor rank");
    if (rank > 8) throw FormatError(p + ": implausible tensor rank");
    Shape shape;
    for (uint32_t d = 0; d < rank; ++d)
      shape.push_back(static_cast<int>(read_u32(in, p, "tensor dim")));
    TensorT<float> t(shape);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * static_cast<long>(sizeof(float))));
    if (in.gcount() != static_cast<std::streamsize>(t.size() * static_cast<long>(sizeof(float))))
      throw FormatError(p + ": truncated tensor data for " + name);
    ckpt.params.add(name, std::move(t));
  }
  return ckpt;
}

GridResult grid_search_alpha(const Dataset& data, const TrainConfig& base,
                             const std::vector<double>& grid, int folds_to_run, int k_folds,
                             int threads, std::ostream* log) {
  if (grid.empty()) throw ConfigError("grid_search_alpha: empty grid");
  if (folds_to_run < 1 || folds_to_run > k_folds)
    throw ConfigError("grid_search_alpha: folds_to_run outside [1, k]");
  const auto folds = make_folds(data.labels(), k_folds, base.seed);

  struct Job {
    size_t gi;
    int fold;
  };
  std::vector<Job> jobs;
  for (size_t gi = 0; gi < grid.size(); ++gi)
    for (int f = 0; f < folds_to_run; ++f) jobs.push_back({gi, f});

  std::vector<std::vector<double>> ua(grid.size(),
                                      std::vector<double>(static_cast<size_t>(folds_to_run), 0.0));
  std::vector<std::vector<double>> wa = ua;
  std::vector<char> failed(grid.size(), 0);

  const auto run_job = [&](const Job& job) {
    TrainConfig cfg = base;
    cfg.alpha = grid[job.gi];
    try {
      TrainResult r = train(data, folds[static_cast<size_t>(job.fold)], cfg);
      const EvalReport val =
          evaluate(r.params, data, folds[static_cast<size_t>(job.fold)].val, cfg.batch_size);
      ua[job.gi][static_cast<size_t>(job.fold)] = val.ua;
      wa[job.gi][static_cast<size_t>(job.fold)] = val.wa;
    } catch (const NumericError&) {
      failed[job.gi] = 1;
    }
  };

  if (threads <= 1) {
    for (const auto& job : jobs) {
      run_job(job);
      if (log) (*log) << "grid alpha=" << grid[job.gi] << " fold=" << job.fold << " done\n";
    }
  } else {
    std::atomic<size_t> next{0};
    std::vector<std::thread> workers;
    const int n = std::min<int>(threads, static_cast<int>(jobs.size()));
    for (int w = 0; w < n; ++w)
      workers.emplace_back([&] {
        for (size_t j = next++; j < jobs.size(); j = next++) run_job(jobs[j]);
      });
    for (auto& w : workers) w.join();
  }

  GridResult result;
  for (size_t gi = 0; gi < grid.size(); ++gi) {
    GridPoint point;
    point.alpha = grid[gi];
    point.failed = failed[gi] != 0;
    point.fold_val_ua = ua[gi];
    if (!point.failed) {
      double su = 0, sw = 0;
      for (int f = 0; f < folds_to_run; ++f) {
        su += ua[gi][static_cast<size_t>(f)];
        sw += wa[gi][static_cast<size_t>(f)];
      }
      point.mean_val_ua = su / folds_to_run;
      point.mean_val_wa = sw / folds_to_run;
      // strict > keeps the smallest alpha on ties
      if (result.selected_index < 0 ||
          point.mean_val_ua > result.points[static_cast<size_t>(result.selected_index)].mean_val_ua) {
        result.selected_index = static_cast<int>(gi);
      }
    }
    result.points.push_back(std::move(point));
  }
  if (result.selected_index < 0)
    throw NumericError("grid_search_alpha: every grid point failed");
  result.selected_alpha = result.points[static_cast<size_t>(result.selected_index)].alpha;
  return result;
}

}  // namespace crfuse
