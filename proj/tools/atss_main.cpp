// Copyright 2026 The atssnet Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)
//
// Single binary with subcommands: train-embedder, train-separator,
// separate, evaluate, simulate, gradcheck.
// Exit codes: 0 ok, 1 bad arguments, 2 data errors, 3 numeric failure,
// 4 gradient-check failure.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "atss/checkpoint.hpp"
#include "atss/config.hpp"
#include "atss/gradchecks.hpp"
#include "atss/pipeline.hpp"
#include "atss/wav.hpp"
#include "json.hpp"

namespace {

using namespace atss;

constexpr int kExitOk = 0;
constexpr int kExitBadArgs = 1;
constexpr int kExitDataError = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitGradCheck = 4;

Config load_config_or_default(const std::string& path) {
  return path.empty() ? Config{} : Config::parse_file(path);
}

// Embedder geometry is data-derived: fc1 bias gives the embedding width,
// fc2 bias the speaker count.
Embedder<float> load_embedder(const std::string& path) {
  CheckpointData ckpt = load_checkpoint(path);
  const TensorEntry* fc1 = ckpt.find("embedder.fc1.b");
  const TensorEntry* fc2 = ckpt.find("embedder.fc2.b");
  if (!fc1 || !fc2)
    throw DataError("not an embedder checkpoint (fc1/fc2 missing): " + path);
  EmbedderConfig cfg;
  cfg.embed_dim = static_cast<int>(fc1->data.size());
  cfg.n_speakers = static_cast<int>(fc2->data.size());
  Embedder<float> embedder(cfg, 0);
  load_into(ckpt, embedder.named_parameters());
  return embedder;
}

struct LoadedModel {
  Config config;
  AtssModel<float> model;
};

LoadedModel load_model(const std::string& path,
                       const std::string& ablation_override) {
  CheckpointData ckpt = load_checkpoint(path);
  Config cfg = Config::parse_text(ckpt.config_text);
  if (!ablation_override.empty()) {
    if (ablation_override == "full") cfg.ablation = ModelMode::kFull;
    else if (ablation_override == "no_attention")
      cfg.ablation = ModelMode::kNoAttention;
    else if (ablation_override == "pit") cfg.ablation = ModelMode::kPit;
    else throw std::invalid_argument("unknown ablation mode: " +
                                     ablation_override);
  }
  LoadedModel out{cfg, AtssModel<float>(cfg.model_config(), 0)};
  load_into(ckpt, out.model.named_parameters());
  return out;
}

void write_loss_csv(const std::string& path, const TrainResult& result) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write loss history: " + path);
  f << "epoch,train_loss,val_loss\n";
  char buf[128];
  for (const auto& row : result.history) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g\n", row.epoch,
                  row.train_loss, row.val_loss);
    f << buf;
  }
}

int cmd_train_embedder(const std::string& manifest, const std::string& config,
                       const std::string& out) {
  const Config cfg = load_config_or_default(config);
  const Corpus corpus = load_corpus_manifest(manifest);
  if (corpus.rejected_short > 0)
    std::fprintf(stderr, "note: rejected %" PRId64 " utterances shorter than 3 s\n",
                 corpus.rejected_short);

  EmbedderConfig ecfg;
  ecfg.embed_dim = cfg.embed_dim;
  ecfg.n_speakers = static_cast<int>(corpus.speakers.size());
  Embedder<float> embedder(ecfg, cfg.seed);

  EmbedderTrainOptions opts;
  opts.train = TrainConfig::from(cfg);
  opts.on_epoch = [](int epoch, double loss) {
    std::printf("epoch %d loss=%.6f\n", epoch, loss);
    std::fflush(stdout);
  };
  train_embedder(corpus, embedder, opts);
  save_checkpoint(out, cfg.serialize(), embedder.named_parameters());
  std::printf("wrote %s\n", out.c_str());
  return kExitOk;
}

int cmd_train_separator(const std::string& manifest,
                        const std::string& val_manifest,
                        const std::string& noise_manifest,
                        const std::string& embedder_path,
                        const std::string& config, const std::string& out,
                        bool inject_nan) {
  const Config cfg = load_config_or_default(config);
  const Corpus train_corpus = load_corpus_manifest(manifest);
  const Corpus val_corpus = load_corpus_manifest(val_manifest);
  std::optional<Corpus> noise;
  if (cfg.mix_mode == MixMode::kNoisy) {
    if (noise_manifest.empty())
      throw std::invalid_argument(
          "mix.mode=noisy requires --noise-manifest");
    noise = load_corpus_manifest(noise_manifest);
  }
  const Embedder<float> embedder = load_embedder(embedder_path);
  ATSS_CHECK(embedder.config().embed_dim == cfg.embed_dim,
             "embedder checkpoint width (" +
                 std::to_string(embedder.config().embed_dim) +
                 ") does not match model.embed_dim (" +
                 std::to_string(cfg.embed_dim) + ")");

  AtssModel<float> model(cfg.model_config(), cfg.seed);
  SeparatorTrainOptions opts;
  opts.train = TrainConfig::from(cfg);
  opts.mix_mode = cfg.mix_mode;
  opts.snr_min = cfg.snr_min;
  opts.snr_max = cfg.snr_max;
  opts.stft = cfg.stft;
  opts.inject_nan = inject_nan;
  opts.on_epoch = [](int epoch, double tr, double va) {
    std::printf("epoch %d train_loss=%.6f val_loss=%.6f\n", epoch, tr, va);
    std::fflush(stdout);
  };

  TrainResult result;
  try {
    result = train_separator(train_corpus, val_corpus,
                             noise ? &*noise : nullptr, embedder, model, opts);
  } catch (const NumericError&) {
    // partial-state dump for postmortem, then the numeric exit code
    save_checkpoint(out + ".partial", cfg.serialize(),
                    model.named_parameters());
    std::fprintf(stderr, "partial state written to %s.partial\n", out.c_str());
    throw;
  }
  save_checkpoint(out, cfg.serialize(), model.named_parameters());
  write_loss_csv(out + ".loss.csv", result);
  std::printf("best epoch %d%s; wrote %s\n", result.best_epoch,
              result.early_stopped ? " (early stop)" : "", out.c_str());
  return kExitOk;
}

int cmd_separate(const std::string& mixture_path,
                 const std::string& reference_path,
                 const std::string& embedder_path,
                 const std::string& model_path, const std::string& out,
                 bool ones_mask) {
  const Waveform mixture = read_wav(mixture_path);
  const Waveform reference = read_wav(reference_path);
  if (mixture.sample_rate != kSampleRate ||
      reference.sample_rate != kSampleRate)
    throw DataError("separate expects 16 kHz input WAVs");

  const Embedder<float> embedder = load_embedder(embedder_path);
  LoadedModel lm = load_model(model_path, "");
  const Waveform estimate = separate(mixture, reference, embedder, lm.model,
                                     lm.config.stft, ones_mask);
  int64_t clipped = 0;
  write_wav(out, estimate, &clipped);
  if (clipped > 0)
    std::fprintf(stderr, "warning: clamped %" PRId64 " samples to [-1, 1)\n",
                 clipped);
  return kExitOk;
}

int cmd_evaluate(const std::string& manifest, const std::string& embedder_path,
                 const std::string& model_path, const std::string& report_path,
                 const std::string& ablation, bool ones_mask) {
  const std::vector<MixtureSample> samples = load_simulation_dir(manifest);
  const Embedder<float> embedder = load_embedder(embedder_path);
  LoadedModel lm = load_model(model_path, ablation);
  const EvalReport report =
      evaluate(samples, embedder, lm.model, lm.config.stft, ones_mask);
  if (!report_path.empty()) {
    std::ofstream f(report_path, std::ios::trunc);
    if (!f) throw DataError("cannot write report: " + report_path);
    f << eval_report_json(report);
  }
  std::printf("SDR before=%.2f after=%.2f improved=%.2f\n",
              report.sdr_before_mean, report.sdr_after_mean,
              report.sdr_improved_mean);
  return kExitOk;
}

int cmd_simulate(const std::string& manifest, const std::string& noise_manifest,
                 const std::string& mode, int count, uint64_t seed,
                 const std::string& out_dir) {
  ATSS_CHECK(count >= 1, "simulate: --count must be >= 1");
  MixMode mix_mode;
  if (mode == "two_speaker") mix_mode = MixMode::kTwoSpeaker;
  else if (mode == "noisy") mix_mode = MixMode::kNoisy;
  else throw std::invalid_argument("--mode must be two_speaker or noisy");

  const Corpus corpus = load_corpus_manifest(manifest);
  std::optional<Corpus> noise;
  if (mix_mode == MixMode::kNoisy) {
    if (noise_manifest.empty())
      throw std::invalid_argument("noisy mode requires --noise-manifest");
    noise = load_corpus_manifest(noise_manifest);
  }

  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  Rng rng(seed);
  nlohmann::json index;
  index["mode"] = mode;
  index["seed"] = seed;
  index["count"] = count;
  index["samples"] = nlohmann::json::array();
  int64_t clipped_total = 0;
  for (int i = 0; i < count; ++i) {
    const uint64_t sample_seed = rng.fork_seed();
    const MixtureSample s =
        mix_mode == MixMode::kNoisy
            ? simulate_noisy(corpus, *noise, 5.0, 20.0, sample_seed)
            : simulate_two_speaker(corpus, sample_seed);
    char id[16];
    std::snprintf(id, sizeof(id), "%05d", i);
    const std::string mix_name = std::string("mixture_") + id + ".wav";
    const std::string tgt_name = std::string("target_") + id + ".wav";
    const std::string ref_name = std::string("reference_") + id + ".wav";
    int64_t c = 0;
    write_wav((fs::path(out_dir) / mix_name).string(), s.mixture, &c);
    clipped_total += c;
    write_wav((fs::path(out_dir) / tgt_name).string(), s.target, &c);
    clipped_total += c;
    write_wav((fs::path(out_dir) / ref_name).string(), s.reference, &c);
    clipped_total += c;

    nlohmann::json row;
    row["id"] = id;
    row["mixture"] = mix_name;
    row["target"] = tgt_name;
    row["reference"] = ref_name;
    row["target_speaker"] = s.target_speaker;
    row["interference_source"] = s.interference_source;
    row["seed"] = s.seed;
    if (s.snr_db) row["snr_db"] = *s.snr_db;
    index["samples"].push_back(std::move(row));
  }
  if (clipped_total > 0)
    std::fprintf(stderr, "warning: clamped %" PRId64 " samples to [-1, 1)\n",
                 clipped_total);

  std::ofstream f(fs::path(out_dir) / "index.json", std::ios::trunc);
  if (!f) throw DataError("cannot write index.json in " + out_dir);
  f << index.dump(2) << "\n";
  std::printf("wrote %d samples to %s\n", count, out_dir.c_str());
  return kExitOk;
}

int cmd_gradcheck(const std::string& scope, bool inject_fault, uint64_t seed) {
  std::vector<GradCheckResult> results;
  if (scope == "layers") {
    results = gradcheck_layers<float>(seed);
  } else if (scope == "block") {
    results = gradcheck_block<float>(seed);
  } else if (scope == "end2end") {
    results = gradcheck_end2end<float>(seed);
  } else {
    throw std::invalid_argument("--scope must be layers, block or end2end");
  }
  if (inject_fault) results.push_back(gradcheck_injected_fault<float>(seed));

  bool all_pass = true;
  for (const auto& r : results) {
    std::printf("%-24s max_rel_err=%.3e threshold=%.1e %s\n", r.name.c_str(),
                r.max_rel_err, r.threshold, r.pass() ? "ok" : "FAIL");
    all_pass = all_pass && r.pass();
  }
  return all_pass ? kExitOk : kExitGradCheck;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attention-based target speaker separation toolkit"};
  app.require_subcommand(1);

  std::string manifest, val_manifest, noise_manifest, config, out;
  std::string mixture, reference, embedder_path, model_path, report, ablation;
  std::string mode = "two_speaker", scope = "layers";
  int count = 10;
  uint64_t seed = 0;
  bool ones_mask = false, inject_nan = false, inject_fault = false;

  auto* te = app.add_subcommand("train-embedder",
                                "train the speaker embedder on a manifest");
  te->add_option("--manifest", manifest, "speaker_id<TAB>wav_path manifest")
      ->required();
  te->add_option("--config", config, "key=value config file");
  te->add_option("--out", out, "output checkpoint path")->required();

  auto* ts = app.add_subcommand("train-separator",
                                "train the separator against a frozen embedder");
  ts->add_option("--manifest", manifest, "training corpus manifest")
      ->required();
  ts->add_option("--val-manifest", val_manifest, "validation corpus manifest")
      ->required();
  ts->add_option("--noise-manifest", noise_manifest,
                 "noise manifest (mix.mode=noisy)");
  ts->add_option("--embedder", embedder_path, "embedder checkpoint")
      ->required();
  ts->add_option("--config", config, "key=value config file");
  ts->add_option("--out", out, "output checkpoint path")->required();
  ts->add_flag("--inject-nan", inject_nan, "poison the first batch (testing)")
      ->group("");

  auto* sp = app.add_subcommand("separate",
                                "separate a target speaker from a mixture");
  sp->add_option("--mixture", mixture, "mixture WAV")->required();
  sp->add_option("--reference", reference, "reference utterance WAV")
      ->required();
  sp->add_option("--embedder", embedder_path, "embedder checkpoint")
      ->required();
  sp->add_option("--model", model_path, "separator checkpoint")->required();
  sp->add_option("--out", out, "output WAV path")->required();
  sp->add_flag("--ones-mask", ones_mask, "bypass the model with an all-ones mask")
      ->group("");

  auto* ev = app.add_subcommand("evaluate", "SDR evaluation over a simulation dir");
  ev->add_option("--manifest", manifest,
                 "simulation directory or index.json from `simulate`")
      ->required();
  ev->add_option("--embedder", embedder_path, "embedder checkpoint")
      ->required();
  ev->add_option("--model", model_path, "separator checkpoint")->required();
  ev->add_option("--report", report, "output JSON report path");
  ev->add_option("--ablation", ablation,
                 "override architecture: full|no_attention|pit");
  ev->add_flag("--ones-mask", ones_mask, "bypass the model with an all-ones mask")
      ->group("");

  auto* si = app.add_subcommand("simulate", "write mixture/target/reference WAVs");
  si->add_option("--manifest", manifest, "speaker corpus manifest")->required();
  si->add_option("--noise-manifest", noise_manifest, "noise manifest");
  si->add_option("--mode", mode, "two_speaker|noisy");
  si->add_option("--count", count, "number of samples");
  si->add_option("--seed", seed, "base seed");
  si->add_option("--out-dir", out, "output directory")->required();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gc->add_option("--scope", scope, "layers|block|end2end");
  gc->add_option("--seed", seed, "check seed");
  gc->add_flag("--inject-fault", inject_fault,
               "add a deliberately broken gradient (testing)")
      ->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitBadArgs;
  }

  try {
    if (te->parsed()) return cmd_train_embedder(manifest, config, out);
    if (ts->parsed())
      return cmd_train_separator(manifest, val_manifest, noise_manifest,
                                 embedder_path, config, out, inject_nan);
    if (sp->parsed())
      return cmd_separate(mixture, reference, embedder_path, model_path, out,
                          ones_mask);
    if (ev->parsed())
      return cmd_evaluate(manifest, embedder_path, model_path, report,
                          ablation, ones_mask);
    if (si->parsed())
      return cmd_simulate(manifest, noise_manifest, mode, count, seed, out);
    if (gc->parsed()) return cmd_gradcheck(scope, inject_fault, seed);
  } catch (const DataError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitDataError;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitBadArgs;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitDataError;
  }
  return kExitBadArgs;
}
