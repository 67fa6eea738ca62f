// crfuse command line: synthetic corpus generation, spectrogram extraction,
// training, evaluation, alpha grid search and gradient checking.
//
// Exit codes: 0 success, 1 numerical failure (non-finite loss, failed
// gradient check), 2 configuration / input / output errors.

#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "crfuse/data_synth.hpp"
#include "crfuse/errors.hpp"
#include "crfuse/features.hpp"
#include "crfuse/gradcheck_suite.hpp"
#include "crfuse/model.hpp"
#include "crfuse/reports.hpp"
#include "crfuse/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// JSON config file whose keys mirror the long flags; command line wins.
struct ConfigBinder {
  struct Entry {
    CLI::Option* opt;
    std::function<void(const json&)> set;
  };
  std::map<std::string, Entry> entries;

  template <typename V>
  void bind(CLI::Option* opt, const std::string& key, V& var) {
    entries[key] = Entry{opt, [&var](const json& j) { var = j.get<V>(); }};
  }

  void apply(const fs::path& config_path) const {
    std::ifstream in(config_path);
    if (!in) throw crfuse::IoError("cannot open config: " + config_path.string());
    json cfg;
    try {
      in >> cfg;
    } catch (const json::exception& e) {
      throw crfuse::ConfigError(config_path.string() + ": " + e.what());
    }
    if (!cfg.is_object()) throw crfuse::ConfigError(config_path.string() + ": not a JSON object");
    for (const auto& [key, value] : cfg.items()) {
      auto it = entries.find(key);
      if (it == entries.end())
        throw crfuse::ConfigError(config_path.string() + ": unknown key \"" + key + "\"");
      if (it->second.opt->count() == 0) it->second.set(value);
    }
  }
};

crfuse::Dataset load_dataset(const fs::path& data, int classes) {
  fs::path manifest = data;
  if (fs::is_directory(data)) manifest = data / "manifest.txt";
  crfuse::Dataset ds;
  ds.classes = classes;
  ds.samples = crfuse::load_features(manifest, classes);
  if (ds.samples.empty()) throw crfuse::ConfigError("dataset is empty: " + manifest.string());
  return ds;
}

void ensure_out_dir(const fs::path& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out))
    throw crfuse::IoError("cannot create output directory: " + out.string());
}

crfuse::DiscriminatorMode parse_disc_mode(const std::string& s) {
  if (s == "auto") return crfuse::DiscriminatorMode::Auto;
  if (s == "always") return crfuse::DiscriminatorMode::Always;
  if (s == "absent") return crfuse::DiscriminatorMode::Absent;
  throw crfuse::ConfigError("disc-mode must be auto, always or absent, got \"" + s + "\"");
}

std::vector<int> parse_counts(const std::string& csv) {
  std::vector<int> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
  return out;
}

int run_gencorpus(const fs::path& out_dir, const crfuse::SynthConfig& cfg) {
  ensure_out_dir(out_dir);
  const crfuse::Dataset data = crfuse::generate(cfg);

  crfuse::save_features(out_dir / "features.bin", data.samples);
  {
    std::ofstream manifest(out_dir / "manifest.txt");
    manifest << "features.bin\n";
  }

  std::vector<long> per_class(static_cast<size_t>(cfg.classes), 0);
  long conflicts = 0;
  for (const auto& s : data.samples) {
    per_class[static_cast<size_t>(s.label)] += 1;
    if (s.conflict_flag) ++conflicts;
  }
  {
    std::ofstream meta(out_dir / "meta.txt");
    meta << "classes=" << cfg.classes << "\n";
    meta << "rho=" << cfg.conflict_rate << "\n";
    meta << "sigma=" << cfg.noise_sigma << "\n";
    meta << "seed=" << cfg.seed << "\n";
    meta << "conflicts=" << conflicts << "\n";
    for (int c = 0; c < cfg.classes; ++c)
      meta << "count_class" << c << "=" << per_class[static_cast<size_t>(c)] << "\n";
  }

  std::cout << "wrote " << data.samples.size() << " samples to " << (out_dir / "features.bin")
            << "\n";
  for (int c = 0; c < cfg.classes; ++c)
    std::cout << "  class " << c << ": " << per_class[static_cast<size_t>(c)] << " samples\n";
  std::cout << "  conflict-flagged: " << conflicts << " ("
            << 100.0 * conflicts / static_cast<double>(data.samples.size()) << "%)\n";
  return 0;
}

int run_featurize(const fs::path& wav_dir, const fs::path& manifest_path, const fs::path& out_dir,
                  int classes) {
  ensure_out_dir(out_dir);
  std::ifstream manifest(manifest_path);
  if (!manifest) throw crfuse::IoError("cannot open manifest: " + manifest_path.string());

  std::vector<crfuse::LabeledSample> samples;
  std::string line;
  size_t line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    std::string utt_id, wav_rel, emb_rel;
    int label = -1;
    if (!(ss >> utt_id)) continue;  // blank line
    if (!(ss >> wav_rel >> emb_rel >> label))
      throw crfuse::FormatError(manifest_path.string() + ":" + std::to_string(line_no) +
                                ": expected \"utt_id wav_path emb_path label\"");
    if (label < 0 || label >= classes)
      throw crfuse::RangeError(manifest_path.string() + ":" + std::to_string(line_no) +
                               ": label " + std::to_string(label) + " out of [0, " +
                               std::to_string(classes) + ")");
    const fs::path emb_path = wav_dir / emb_rel;
    if (!fs::exists(emb_path))
      throw crfuse::IoError("utterance " + utt_id + ": missing embedding file " +
                            emb_path.string());
    const crfuse::Waveform wav = crfuse::read_wav_16k_mono(wav_dir / wav_rel);
    crfuse::WordEmbeddingSequence emb = crfuse::read_embedding_file(emb_path);
    emb.utterance_id = utt_id;
    const auto specs = crfuse::make_spectrograms(wav, utt_id);
    if (specs.empty())
      std::cout << "warning: " << utt_id << " is shorter than one segment, skipped\n";
    for (const auto& spec : specs) {
      crfuse::LabeledSample s;
      s.x_a = spec;
      s.x_t = emb;
      s.label = label;
      s.utterance_id = utt_id;
      samples.push_back(std::move(s));
    }
  }

  crfuse::save_features(out_dir / "features.bin", samples);
  {
    std::ofstream m(out_dir / "manifest.txt");
    m << "features.bin\n";
  }
  std::cout << "wrote " << samples.size() << " segment samples to "
            << (out_dir / "features.bin") << "\n";
  return 0;
}

int run_train(const fs::path& data_path, int classes, const crfuse::TrainConfig& cfg, int k,
              int fold_index, const fs::path& out_dir) {
  ensure_out_dir(out_dir);
  const crfuse::Dataset data = load_dataset(data_path, classes);
  const auto folds = crfuse::make_folds(data.labels(), k, cfg.seed);
  if (fold_index < 0 || fold_index >= k)
    throw crfuse::ConfigError("fold index " + std::to_string(fold_index) + " outside [0, " +
                              std::to_string(k) + ")");
  const crfuse::Fold& fold = folds[static_cast<size_t>(fold_index)];

  crfuse::TrainResult result = crfuse::train(data, fold, cfg, &std::cout);
  const crfuse::EvalReport test = crfuse::evaluate(result.params, data, fold.test, cfg.batch_size);

  crfuse::Checkpoint ckpt;
  ckpt.cfg = cfg;
  ckpt.classes = classes;
  ckpt.epoch = result.best_epoch;
  ckpt.rng_digest = result.sampler_rng_state;
  ckpt.params = result.params.clone();
  crfuse::save_checkpoint(out_dir / "checkpoint.bin", ckpt);
  crfuse::write_loss_curve_csv(out_dir / "loss_curve.csv", result.curve);
  crfuse::write_eval_report(out_dir / "eval_report.json", test);
  crfuse::write_confusion_csv(out_dir / "confusion.csv", test);
  {
    json j{{"alpha", cfg.alpha},
           {"seed", cfg.seed},
           {"fold", fold_index},
           {"k", k},
           {"best_epoch", result.best_epoch},
           {"best_val_ua", result.best_val_ua},
           {"test_wa", test.wa},
           {"test_ua", test.ua},
           {"test_modality_agreement", test.modality_agreement}};
    std::ofstream out(out_dir / "train_report.json");
    out << j.dump(2) << "\n";
  }
  std::cout << "best epoch " << result.best_epoch << " val_ua " << result.best_val_ua
            << " | test WA " << test.wa << " UA " << test.ua << " agreement "
            << test.modality_agreement << "\n";
  return 0;
}

int run_eval(const fs::path& ckpt_path, const fs::path& data_path, int k, int fold_index,
             const std::string& split, bool seed_given, uint64_t seed, const fs::path& out_dir) {
  ensure_out_dir(out_dir);
  const crfuse::Checkpoint ckpt = crfuse::load_checkpoint(ckpt_path);
  const crfuse::Dataset data = load_dataset(data_path, ckpt.classes);

  std::vector<int> indices;
  if (fold_index < 0) {
    indices.resize(data.samples.size());
    for (size_t i = 0; i < indices.size(); ++i) indices[i] = static_cast<int>(i);
  } else {
    // fold plans are a function of the seed; default to the checkpoint's
    const uint64_t fold_seed = seed_given ? seed : ckpt.cfg.seed;
    const auto folds = crfuse::make_folds(data.labels(), k, fold_seed);
    if (fold_index >= k)
      throw crfuse::ConfigError("fold index " + std::to_string(fold_index) + " outside [0, " +
                                std::to_string(k) + ")");
    const crfuse::Fold& fold = folds[static_cast<size_t>(fold_index)];
    if (split == "test")
      indices = fold.test;
    else if (split == "val")
      indices = fold.val;
    else if (split == "train")
      indices = fold.train;
    else
      throw crfuse::ConfigError("split must be test, val or train, got \"" + split + "\"");
  }

  const crfuse::EvalReport report =
      crfuse::evaluate(ckpt.params, data, indices, ckpt.cfg.batch_size);
  crfuse::write_eval_report(out_dir / "eval_report.json", report);
  crfuse::write_confusion_csv(out_dir / "confusion.csv", report);
  std::cout << "WA " << report.wa << " UA " << report.ua << " agreement "
            << report.modality_agreement << " over " << report.total << " utterances\n";
  return 0;
}

int run_gridsearch(const fs::path& data_path, int classes, const crfuse::TrainConfig& base,
                   double grid_step, int folds_to_run, int k, int threads,
                   const fs::path& out_dir) {
  ensure_out_dir(out_dir);
  const crfuse::Dataset data = load_dataset(data_path, classes);
  if (grid_step <= 0.0 || grid_step > 1.0)
    throw crfuse::ConfigError("grid-step must be in (0, 1]");
  std::vector<double> grid;
  for (int i = 0;; ++i) {
    const double a = i * grid_step;
    if (a > 1.0 + 1e-12) break;
    grid.push_back(std::min(a, 1.0));
  }

  const crfuse::GridResult result =
      crfuse::grid_search_alpha(data, base, grid, folds_to_run, k, threads, &std::cout);
  crfuse::write_grid_json(out_dir / "grid.json", result);
  crfuse::write_grid_csv(out_dir / "grid.csv", result);

  std::cout << std::setprecision(6) << "alpha  mean_val_ua  mean_val_wa\n";
  for (const auto& p : result.points) {
    std::cout << std::fixed << std::setprecision(1) << p.alpha << "    ";
    if (p.failed)
      std::cout << "FAILED\n";
    else
      std::cout << std::setprecision(6) << p.mean_val_ua << "     " << p.mean_val_wa << "\n";
  }
  std::cout << "selected alpha* = " << std::setprecision(1) << result.selected_alpha << "\n";
  return 0;
}

int run_gradcheck(const crfuse::GradCheckSuiteOptions& opt) {
  const auto cases = crfuse::run_gradcheck_suite(opt);
  for (const auto& c : cases) {
    std::cout << (c.report.pass ? "[ OK ] " : "[FAIL] ") << c.name << "  max_rel_err "
              << std::scientific << std::setprecision(3) << c.report.max_rel_err << "\n";
    if (!c.report.pass)
      for (const auto& e : c.report.per_param)
        if (e.max_rel_err >= c.report.tol)
          std::cout << "         " << e.name << "  " << e.max_rel_err << " (" << e.probes
                    << " probes)\n";
  }
  const bool pass = crfuse::gradcheck_suite_passed(cases);
  std::cout << (pass ? "gradient check passed" : "gradient check FAILED") << "\n";
  return pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"contrastive-regularized audio/text emotion classification"};
  app.require_subcommand(1);

  // gencorpus
  auto* gen = app.add_subcommand("gencorpus", "generate a synthetic multimodal corpus");
  crfuse::SynthConfig synth;
  std::string class_counts_csv;
  std::string gen_out, gen_config;
  ConfigBinder gen_binder;
  gen_binder.bind(gen->add_option("--classes", synth.classes, "emotion classes"), "classes",
                  synth.classes);
  gen_binder.bind(gen->add_option("--per-class", synth.samples_per_class, "samples per class"),
                  "per-class", synth.samples_per_class);
  gen_binder.bind(gen->add_option("--class-counts", class_counts_csv,
                                  "comma-separated per-class sample counts"),
                  "class-counts", class_counts_csv);
  gen_binder.bind(gen->add_option("--rho", synth.conflict_rate, "cross-modal conflict rate"),
                  "rho", synth.conflict_rate);
  gen_binder.bind(gen->add_option("--sigma", synth.noise_sigma, "additive noise scale"), "sigma",
                  synth.noise_sigma);
  gen_binder.bind(gen->add_option("--seed", synth.seed, "generator seed"), "seed", synth.seed);
  gen_binder.bind(gen->add_option("--out", gen_out, "output directory")->required(), "out",
                  gen_out);
  gen->add_option("--config", gen_config, "JSON config file; flags take precedence");

  // featurize
  auto* feat = app.add_subcommand("featurize", "extract spectrogram features from WAV files");
  std::string feat_wav_dir, feat_manifest, feat_out, feat_config;
  int feat_classes = 4;
  ConfigBinder feat_binder;
  feat_binder.bind(feat->add_option("--wav-dir", feat_wav_dir, "directory with WAV and embedding files")
                       ->required(),
                   "wav-dir", feat_wav_dir);
  feat_binder.bind(feat->add_option("--manifest", feat_manifest,
                                    "text manifest: utt_id wav_path emb_path label")
                       ->required(),
                   "manifest", feat_manifest);
  feat_binder.bind(feat->add_option("--classes", feat_classes, "emotion classes"), "classes",
                   feat_classes);
  feat_binder.bind(feat->add_option("--out", feat_out, "output directory")->required(), "out",
                   feat_out);
  feat->add_option("--config", feat_config, "JSON config file; flags take precedence");

  // shared training options
  const auto add_train_options = [](CLI::App* cmd, ConfigBinder& binder,
                                    crfuse::TrainConfig& cfg, std::string& disc_mode) {
    binder.bind(cmd->add_option("--lr", cfg.learning_rate, "Adam learning rate"), "lr",
                cfg.learning_rate);
    binder.bind(cmd->add_option("--batch-size", cfg.batch_size, "batch size"), "batch-size",
                cfg.batch_size);
    binder.bind(cmd->add_option("--epochs", cfg.epochs, "training epochs"), "epochs", cfg.epochs);
    binder.bind(cmd->add_option("--seed", cfg.seed, "run seed"), "seed", cfg.seed);
    binder.bind(cmd->add_option("--disc-hidden", cfg.disc_hidden, "discriminator hidden width"),
                "disc-hidden", cfg.disc_hidden);
    binder.bind(cmd->add_option("--disc-mode", disc_mode,
                                "discriminator wiring: auto, always or absent"),
                "disc-mode", disc_mode);
  };

  // train
  auto* tr = app.add_subcommand("train", "train one fold and write a checkpoint");
  crfuse::TrainConfig train_cfg;
  std::string train_data, train_out, train_config, train_disc_mode = "auto";
  int train_classes = 4, train_k = 10, train_fold = 0;
  ConfigBinder train_binder;
  train_binder.bind(tr->add_option("--data", train_data, "feature manifest or corpus directory")
                        ->required(),
                    "data", train_data);
  train_binder.bind(tr->add_option("--classes", train_classes, "emotion classes"), "classes",
                    train_classes);
  train_binder.bind(tr->add_option("--alpha", train_cfg.alpha, "regularization weight in [0,1]"),
                    "alpha", train_cfg.alpha);
  train_binder.bind(tr->add_option("--k", train_k, "folds in the cross-validation plan"), "k",
                    train_k);
  train_binder.bind(tr->add_option("--fold", train_fold, "fold index to train"), "fold",
                    train_fold);
  add_train_options(tr, train_binder, train_cfg, train_disc_mode);
  train_binder.bind(tr->add_option("--out", train_out, "output directory")->required(), "out",
                    train_out);
  tr->add_option("--config", train_config, "JSON config file; flags take precedence");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_ckpt, eval_data, eval_out, eval_split = "test", eval_config;
  int eval_k = 10, eval_fold = -1;
  uint64_t eval_seed = 0;
  ConfigBinder eval_binder;
  eval_binder.bind(ev->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required(),
                   "checkpoint", eval_ckpt);
  eval_binder.bind(ev->add_option("--data", eval_data, "feature manifest or corpus directory")
                       ->required(),
                   "data", eval_data);
  eval_binder.bind(ev->add_option("--k", eval_k, "folds in the plan"), "k", eval_k);
  eval_binder.bind(ev->add_option("--fold", eval_fold,
                                  "fold to select a split from; -1 evaluates everything"),
                   "fold", eval_fold);
  eval_binder.bind(ev->add_option("--split", eval_split, "test, val or train"), "split",
                   eval_split);
  auto* eval_seed_opt = ev->add_option(
      "--seed", eval_seed, "fold-plan seed; defaults to the seed stored in the checkpoint");
  eval_binder.bind(eval_seed_opt, "seed", eval_seed);
  eval_binder.bind(ev->add_option("--out", eval_out, "output directory")->required(), "out",
                   eval_out);
  ev->add_option("--config", eval_config, "JSON config file; flags take precedence");

  // gridsearch
  auto* gs = app.add_subcommand("gridsearch", "sweep alpha over a grid");
  crfuse::TrainConfig grid_cfg;
  std::string grid_data, grid_out, grid_config, grid_disc_mode = "auto";
  int grid_classes = 4, grid_folds = 3, grid_k = 10, grid_threads = 1;
  double grid_step = 0.1;
  ConfigBinder grid_binder;
  grid_binder.bind(gs->add_option("--data", grid_data, "feature manifest or corpus directory")
                       ->required(),
                   "data", grid_data);
  grid_binder.bind(gs->add_option("--classes", grid_classes, "emotion classes"), "classes",
                   grid_classes);
  grid_binder.bind(gs->add_option("--grid-step", grid_step, "alpha grid step"), "grid-step",
                   grid_step);
  grid_binder.bind(gs->add_option("--folds", grid_folds, "folds trained per grid point"), "folds",
                   grid_folds);
  grid_binder.bind(gs->add_option("--k", grid_k, "folds in the plan"), "k", grid_k);
  grid_binder.bind(gs->add_option("--threads", grid_threads, "parallel grid workers"), "threads",
                   grid_threads);
  add_train_options(gs, grid_binder, grid_cfg, grid_disc_mode);
  grid_binder.bind(gs->add_option("--out", grid_out, "output directory")->required(), "out",
                   grid_out);
  gs->add_option("--config", grid_config, "JSON config file; flags take precedence");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient certification");
  crfuse::GradCheckSuiteOptions gc_opt;
  std::string gc_config;
  ConfigBinder gc_binder;
  gc_binder.bind(gc->add_option("--step", gc_opt.h, "central-difference step"), "step", gc_opt.h);
  gc_binder.bind(gc->add_option("--tol", gc_opt.tol, "max relative error tolerance"), "tol",
                 gc_opt.tol);
  gc_binder.bind(gc->add_option("--probes", gc_opt.composite_probes,
                                "sampled coordinates per parameter in the composite check"),
                 "probes", gc_opt.composite_probes);
  gc_binder.bind(gc->add_option("--seed", gc_opt.seed, "probe sampling seed"), "seed",
                 gc_opt.seed);
  gc->add_option("--config", gc_config, "JSON config file; flags take precedence");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      if (!gen_config.empty()) gen_binder.apply(gen_config);
      if (!class_counts_csv.empty()) synth.class_counts = parse_counts(class_counts_csv);
      return run_gencorpus(gen_out, synth);
    }
    if (feat->parsed()) {
      if (!feat_config.empty()) feat_binder.apply(feat_config);
      return run_featurize(feat_wav_dir, feat_manifest, feat_out, feat_classes);
    }
    if (tr->parsed()) {
      if (!train_config.empty()) train_binder.apply(train_config);
      train_cfg.disc_mode = parse_disc_mode(train_disc_mode);
      return run_train(train_data, train_classes, train_cfg, train_k, train_fold, train_out);
    }
    if (ev->parsed()) {
      if (!eval_config.empty()) eval_binder.apply(eval_config);
      return run_eval(eval_ckpt, eval_data, eval_k, eval_fold, eval_split,
                      eval_seed_opt->count() > 0, eval_seed, eval_out);
    }
    if (gs->parsed()) {
      if (!grid_config.empty()) grid_binder.apply(grid_config);
      grid_cfg.disc_mode = parse_disc_mode(grid_disc_mode);
      return run_gridsearch(grid_data, grid_classes, grid_cfg, grid_step, grid_folds, grid_k,
                            grid_threads, grid_out);
    }
    if (gc->parsed()) {
      if (!gc_config.empty()) gc_binder.apply(gc_config);
      return run_gradcheck(gc_opt);
    }
  } catch (const crfuse::NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
