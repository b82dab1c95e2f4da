// Copyright 2026 The atssnet Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "atss/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "atss/wav.hpp"
#include "json.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace atss {

namespace {

int pick_workers(int requested, int batch) {
  if (requested > 0) return std::min(requested, batch);
  const int hw = static_cast<int>(std::thread::hardware_concurrency());
  return std::max(1, std::min(hw > 0 ? hw : 1, batch));
}

Waveform crop(const Waveform& wave, int64_t offset, int64_t len) {
  Waveform out;
  out.sample_rate = wave.sample_rate;
  out.samples.assign(wave.samples.begin() + offset,
                     wave.samples.begin() + offset + len);
  return out;
}

// Uniform crop offset; full-length signals stay put.
int64_t draw_offset(Rng& rng, int64_t len, int64_t span) {
  const int64_t room = len - span;
  return room <= 0 ? 0 : static_cast<int64_t>(rng.uniform_int(room + 1));
}

size_t draw_eligible_speaker(const Corpus& corpus, Rng& rng,
                             size_t min_utts) {
  std::vector<size_t> eligible;
  for (size_t i = 0; i < corpus.speakers.size(); ++i)
    if (corpus.speakers[i].utterances.size() >= min_utts) eligible.push_back(i);
  if (eligible.empty())
    throw DataError("corpus has no speaker with at least " +
                    std::to_string(min_utts) + " usable utterances");
  return eligible[rng.uniform_int(eligible.size())];
}

}  // namespace

// ---------------------------------------------------------------------------
// Corpora

void Corpus::add(const std::string& speaker_id, Waveform wave,
                 const std::string& path) {
  if (wave.size() < kMixtureSamples) {
    ++rejected_short;
    return;
  }
  const size_t idx = utterances.size();
  utterances.push_back({speaker_id, path, std::move(wave)});
  for (auto& s : speakers) {
    if (s.id == speaker_id) {
      s.utterances.push_back(idx);
      return;
    }
  }
  speakers.push_back({speaker_id, {idx}});
}

const Corpus::Speaker* Corpus::find_speaker(const std::string& id) const {
  for (const auto& s : speakers)
    if (s.id == id) return &s;
  return nullptr;
}

Corpus load_corpus_manifest(const std::string& manifest_path) {
  std::ifstream f(manifest_path);
  if (!f) throw DataError("cannot open manifest: " + manifest_path);
  const std::filesystem::path base =
      std::filesystem::path(manifest_path).parent_path();

  Corpus corpus;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw DataError("manifest line " + std::to_string(lineno) +
                      ": expected speaker_id<TAB>wav_path");
    const std::string speaker = line.substr(0, tab);
    std::string path = line.substr(tab + 1);
    if (!path.empty() && std::filesystem::path(path).is_relative())
      path = (base / path).string();
    Waveform wave = read_wav(path);
    if (wave.sample_rate != kSampleRate)
      throw DataError("expected 16 kHz audio, got " +
                      std::to_string(wave.sample_rate) + " Hz: " + path);
    corpus.add(speaker, std::move(wave), path);
  }
  if (corpus.utterances.empty())
    throw DataError("manifest holds no usable utterances (>= 3 s): " +
                    manifest_path);
  return corpus;
}

// ---------------------------------------------------------------------------
// Mixture simulation

MixtureSample simulate_two_speaker(const Corpus& corpus, uint64_t seed) {
  ATSS_CHECK(corpus.speakers.size() >= 2,
             "simulate_two_speaker: need at least two speakers");
  Rng rng(seed);
  // target needs a spare utterance to act as the reference
  const size_t target_idx = draw_eligible_speaker(corpus, rng, 2);
  size_t interf_idx = rng.uniform_int(corpus.speakers.size() - 1);
  if (interf_idx >= target_idx) ++interf_idx;

  const auto& target_spk = corpus.speakers[target_idx];
  const auto& interf_spk = corpus.speakers[interf_idx];

  const size_t tgt_pick = rng.uniform_int(target_spk.utterances.size());
  size_t ref_pick = rng.uniform_int(target_spk.utterances.size() - 1);
  if (ref_pick >= tgt_pick) ++ref_pick;
  const size_t target_utt = target_spk.utterances[tgt_pick];
  const size_t ref_utt = target_spk.utterances[ref_pick];
  const size_t interf_utt =
      interf_spk.utterances[rng.uniform_int(interf_spk.utterances.size())];

  const Waveform& tw = corpus.utterances[target_utt].wave;
  const Waveform& iw = corpus.utterances[interf_utt].wave;

  MixtureSample out;
  out.seed = seed;
  out.target_speaker = target_spk.id;
  out.interference_source = interf_spk.id;
  out.reference_utterance = ref_utt;
  out.target = rms_normalize(
      crop(tw, draw_offset(rng, tw.size(), kMixtureSamples), kMixtureSamples),
      kTargetRms);
  out.interference = rms_normalize(
      crop(iw, draw_offset(rng, iw.size(), kMixtureSamples), kMixtureSamples),
      kTargetRms);
  out.reference = rms_normalize(corpus.utterances[ref_utt].wave, kTargetRms);

  out.mixture.sample_rate = kSampleRate;
  out.mixture.samples.resize(kMixtureSamples);
  for (int64_t i = 0; i < kMixtureSamples; ++i)
    out.mixture.samples[i] =
        out.target.samples[i] + out.interference.samples[i];
  return out;
}

MixtureSample simulate_noisy(const Corpus& corpus, const Corpus& noise,
                             double snr_min, double snr_max, uint64_t seed) {
  ATSS_CHECK(!noise.utterances.empty(), "simulate_noisy: empty noise set");
  ATSS_CHECK(snr_min <= snr_max, "simulate_noisy: bad SNR range");
  Rng rng(seed);
  const size_t spk_idx = draw_eligible_speaker(corpus, rng, 2);
  const auto& spk = corpus.speakers[spk_idx];

  const size_t speech_pick = rng.uniform_int(spk.utterances.size());
  size_t ref_pick = rng.uniform_int(spk.utterances.size() - 1);
  if (ref_pick >= speech_pick) ++ref_pick;
  const size_t speech_utt = spk.utterances[speech_pick];
  const size_t ref_utt = spk.utterances[ref_pick];
  const size_t noise_utt = rng.uniform_int(noise.utterances.size());

  const Waveform& sw = corpus.utterances[speech_utt].wave;
  const Waveform& nw = noise.utterances[noise_utt].wave;

  MixtureSample out;
  out.seed = seed;
  out.target_speaker = spk.id;
  out.interference_source = noise.utterances[noise_utt].speaker;
  out.reference_utterance = ref_utt;
  out.snr_db = rng.uniform(snr_min, snr_max);

  out.target = rms_normalize(
      crop(sw, draw_offset(rng, sw.size(), kMixtureSamples), kMixtureSamples),
      kTargetRms);
  Waveform noise_crop = rms_normalize(
      crop(nw, draw_offset(rng, nw.size(), kMixtureSamples), kMixtureSamples),
      kTargetRms);
  out.reference = rms_normalize(corpus.utterances[ref_utt].wave, kTargetRms);

  MixResult mixed = mix_at_snr(out.target, noise_crop, *out.snr_db);
  out.mixture = std::move(mixed.mixture);
  out.interference = std::move(mixed.scaled_noise);
  return out;
}

std::vector<MixtureSample> load_simulation_dir(const std::string& path) {
  namespace fs = std::filesystem;
  fs::path index = path;
  if (fs::is_directory(index)) index /= "index.json";
  std::ifstream f(index);
  if (!f) throw DataError("cannot open simulation index: " + index.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw DataError("malformed simulation index " + index.string() + ": " +
                    e.what());
  }
  const fs::path dir = index.parent_path();
  std::vector<MixtureSample> out;
  for (const auto& row : j.at("samples")) {
    MixtureSample s;
    s.mixture = read_wav((dir / row.at("mixture").get<std::string>()).string());
    s.target = read_wav((dir / row.at("target").get<std::string>()).string());
    s.reference =
        read_wav((dir / row.at("reference").get<std::string>()).string());
    s.target_speaker = row.value("target_speaker", "");
    s.interference_source = row.value("interference_source", "");
    s.seed = row.value("seed", uint64_t{0});
    if (row.contains("snr_db")) s.snr_db = row.at("snr_db").get<double>();
    s.reference_utterance = SIZE_MAX;
    out.push_back(std::move(s));
  }
  if (out.empty())
    throw DataError("simulation index holds no samples: " + index.string());
  return out;
}

// ---------------------------------------------------------------------------
// Tensor bridges

Tensor<float> mag_to_tensor(const MagnitudeSpectrogram& mag) {
  std::vector<float> data(mag.values.size());
  for (size_t i = 0; i < data.size(); ++i)
    data[i] = static_cast<float>(mag.values[i]);
  return Tensor<float>::from_data({mag.frames, mag.bins}, std::move(data));
}

MagnitudeSpectrogram tensor_to_mag(const Tensor<float>& t) {
  ATSS_CHECK(t.ndim() == 2, "tensor_to_mag: need [T, F]");
  MagnitudeSpectrogram mag;
  mag.frames = t.dim(0);
  mag.bins = t.dim(1);
  mag.values.assign(t.data().begin(), t.data().end());
  return mag;
}

Tensor<float> features_to_tensor(const FeatureMatrix& feat,
                                 const std::vector<int64_t>* keep) {
  if (!keep) {
    std::vector<float> data(feat.values.size());
    for (size_t i = 0; i < data.size(); ++i)
      data[i] = static_cast<float>(feat.values[i]);
    return Tensor<float>::from_data({feat.rows, feat.cols}, std::move(data));
  }
  std::vector<float> data(keep->size() * feat.cols);
  for (size_t r = 0; r < keep->size(); ++r)
    for (int64_t c = 0; c < feat.cols; ++c)
      data[r * feat.cols + c] =
          static_cast<float>(feat.at((*keep)[r], c));
  return Tensor<float>::from_data(
      {static_cast<int64_t>(keep->size()), feat.cols}, std::move(data));
}

Tensor<float> embed_waveform(const Waveform& reference,
                             const Embedder<float>& embedder) {
  NoGradGuard ng;
  const FeatureMatrix feat = log_mel_fbank(reference, FbankConfig{});
  const std::vector<int64_t> keep = energy_vad(feat);
  return embedder.embed(features_to_tensor(feat, &keep));
}

// ---------------------------------------------------------------------------
// Separator training

namespace {

struct SampleTensors {
  Tensor<float> mixture_mag;
  Tensor<float> target_mag;
  Tensor<float> interference_mag;  // PIT only
  Tensor<float> embedding;         // embedding-conditioned modes only
};

SampleTensors prepare_sample(const MixtureSample& s,
                             const Embedder<float>& embedder,
                             const StftConfig& stft_cfg, ModelMode mode,
                             const Tensor<float>* cached_embedding) {
  SampleTensors out;
  out.mixture_mag =
      mag_to_tensor(magnitude_phase(stft(s.mixture, stft_cfg)).first);
  out.target_mag =
      mag_to_tensor(magnitude_phase(stft(s.target, stft_cfg)).first);
  if (mode == ModelMode::kPit) {
    out.interference_mag =
        mag_to_tensor(magnitude_phase(stft(s.interference, stft_cfg)).first);
  } else {
    out.embedding = cached_embedding ? *cached_embedding
                                     : embed_waveform(s.reference, embedder);
  }
  return out;
}

// Forward + loss for one sample; the graph is built on the caller's thread.
Tensor<float> sample_loss(const SampleTensors& t, const AtssModel<float>& model) {
  if (model.config().mode == ModelMode::kPit) {
    auto masks = model.forward(t.mixture_mag);
    auto pit = pit_loss(masks, t.mixture_mag,
                        {t.target_mag, t.interference_mag});
    return pit.loss;
  }
  auto mask = model.forward_mask(t.mixture_mag, t.embedding);
  return l2_loss(apply_mask(t.mixture_mag, mask), t.target_mag);
}

}  // namespace

TrainResult train_separator(const Corpus& train_corpus,
                            const Corpus& val_corpus, const Corpus* noise,
                            const Embedder<float>& embedder,
                            AtssModel<float>& model,
                            const SeparatorTrainOptions& opts) {
  const TrainConfig& tc = opts.train;
  const ModelMode mode = model.config().mode;
  ATSS_CHECK(model.config().freq_bins == opts.stft.bins(),
             "train_separator: model freq_bins inconsistent with STFT config");
  if (opts.mix_mode == MixMode::kNoisy)
    ATSS_CHECK(noise != nullptr, "train_separator: noisy mode needs a noise set");

  auto params = model.parameters();
  AdamState<float> adam;
  adam.lr = tc.lr;
  adam.init(params);

  const int workers = pick_workers(opts.n_workers, tc.batch_size);

  auto simulate = [&](const Corpus& corpus, uint64_t seed) {
    return opts.mix_mode == MixMode::kNoisy
               ? simulate_noisy(corpus, *noise, opts.snr_min, opts.snr_max,
                                seed)
               : simulate_two_speaker(corpus, seed);
  };

  // Frozen embedder: every utterance embedding is reusable across steps.
  std::vector<Tensor<float>> embed_cache(train_corpus.utterances.size());
  auto cached_embed = [&](const Corpus& corpus, size_t utt,
                          const Waveform& ref) -> const Tensor<float>* {
    if (&corpus != &train_corpus || utt == SIZE_MAX) return nullptr;
    if (!embed_cache[utt].defined())
      embed_cache[utt] = embed_waveform(ref, embedder);
    return &embed_cache[utt];
  };

  // Fixed validation set, regenerated from seeds derived off the main seed.
  Rng val_rng(tc.seed ^ 0x76616c5345454432ull);
  std::vector<uint64_t> val_seeds(tc.validation_size);
  for (auto& s : val_seeds) s = val_rng.fork_seed();
  std::vector<SampleTensors> val_set;
  auto build_val_set = [&]() {
    val_set.resize(val_seeds.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 1) num_threads(workers)
#endif
    for (int64_t i = 0; i < static_cast<int64_t>(val_seeds.size()); ++i) {
      MixtureSample s = simulate(val_corpus, val_seeds[i]);
      val_set[i] = prepare_sample(s, embedder, opts.stft, mode, nullptr);
    }
  };

  auto validation_loss = [&](int epoch) -> double {
    if (opts.scripted_validation) return opts.scripted_validation(epoch);
    if (val_set.empty()) build_val_set();
    std::vector<double> losses(val_set.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 1) num_threads(workers)
#endif
    for (int64_t i = 0; i < static_cast<int64_t>(val_set.size()); ++i) {
      NoGradGuard ng;
      losses[i] = sample_loss(val_set[i], model).item();
    }
    double acc = 0.0;
    for (double v : losses) acc += v;
    return acc / losses.size();
  };

  Rng step_rng(tc.seed);
  EarlyStopper stopper(tc.patience);
  TrainResult result;
  std::vector<std::vector<float>> best_params;

  for (int epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (int step = 0; step < tc.steps_per_epoch; ++step) {
      std::vector<uint64_t> seeds(tc.batch_size);
      for (auto& s : seeds)
        s = opts.sample_pool.empty()
                ? step_rng.fork_seed()
                : opts.sample_pool[step_rng.uniform_int(
                      opts.sample_pool.size())];

      // Samples are drawn and embedded up front so the cache is filled
      // outside the parallel region.
      std::vector<SampleTensors> batch(tc.batch_size);
      for (int b = 0; b < tc.batch_size; ++b) {
        MixtureSample s = simulate(train_corpus, seeds[b]);
        batch[b] = prepare_sample(
            s, embedder, opts.stft, mode,
            mode == ModelMode::kPit
                ? nullptr
                : cached_embed(train_corpus, s.reference_utterance,
                               s.reference));
      }

      std::vector<double> losses(tc.batch_size, 0.0);
      std::vector<std::vector<std::vector<float>>> grads(tc.batch_size);
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 1) num_threads(workers)
#endif
      for (int b = 0; b < tc.batch_size; ++b) {
        Tensor<float> loss = sample_loss(batch[b], model);
        GradTape<float> tape(loss);
        tape.backward();
        grads[b].reserve(params.size());
        for (auto& p : params) grads[b].push_back(tape.grad_of(p));
        losses[b] = loss.item();
      }

      if (opts.inject_nan && epoch == 1 && step == 0)
        losses[0] = std::numeric_limits<double>::quiet_NaN();

      double batch_loss = 0.0;
      for (double v : losses) batch_loss += v;
      batch_loss /= tc.batch_size;
      if (!std::isfinite(batch_loss))
        throw NumericError("non-finite training loss at epoch " +
                           std::to_string(epoch) + " step " +
                           std::to_string(step));

      // in-order reduction keeps results independent of the worker count
      std::vector<std::vector<float>> total(params.size());
      for (size_t p = 0; p < params.size(); ++p)
        total[p].assign(params[p].numel(), 0.0f);
      for (int b = 0; b < tc.batch_size; ++b)
        for (size_t p = 0; p < params.size(); ++p)
          for (size_t i = 0; i < total[p].size(); ++i)
            total[p][i] += grads[b][p][i];
      const float inv_b = 1.0f / static_cast<float>(tc.batch_size);
      for (auto& g : total)
        for (auto& v : g) v *= inv_b;

      adam_step(params, total, adam);
      epoch_loss += batch_loss;
    }
    epoch_loss /= tc.steps_per_epoch;

    const double val_loss = validation_loss(epoch);
    if (!std::isfinite(val_loss))
      throw NumericError("non-finite validation loss at epoch " +
                         std::to_string(epoch));
    result.history.push_back({epoch, epoch_loss, val_loss});
    if (opts.on_epoch) opts.on_epoch(epoch, epoch_loss, val_loss);

    if (stopper.feed(val_loss)) {
      best_params.clear();
      for (auto& p : params) best_params.push_back(p.data());
    }
    if (stopper.should_stop()) {
      result.early_stopped = true;
      break;
    }
  }

  // the best-validation snapshot, not the last epoch, is what survives
  if (!best_params.empty())
    for (size_t p = 0; p < params.size(); ++p)
      params[p].mutable_data() = best_params[p];
  result.best_epoch = stopper.best_index() + 1;
  return result;
}

// ---------------------------------------------------------------------------
// Embedder training

std::vector<double> train_embedder(const Corpus& corpus,
                                   Embedder<float>& embedder,
                                   const EmbedderTrainOptions& opts) {
  const TrainConfig& tc = opts.train;
  ATSS_CHECK(corpus.speakers.size() >= 2,
             "train_embedder: need at least two speakers");
  ATSS_CHECK(static_cast<int>(corpus.speakers.size()) ==
                 embedder.config().n_speakers,
             "train_embedder: embedder head size (" +
                 std::to_string(embedder.config().n_speakers) +
                 ") does not match corpus speaker count (" +
                 std::to_string(corpus.speakers.size()) + ")");
  for (const auto& s : corpus.speakers)
    if (s.utterances.size() < 2)
      throw DataError("train_embedder: speaker '" + s.id +
                      "' has fewer than 2 utterances");

  // Fbank + VAD preprocessing, cached per utterance.
  std::vector<Tensor<float>> features(corpus.utterances.size());
  std::vector<int> labels(corpus.utterances.size(), -1);
  for (size_t spk = 0; spk < corpus.speakers.size(); ++spk)
    for (size_t utt : corpus.speakers[spk].utterances)
      labels[utt] = static_cast<int>(spk);
  const int workers = pick_workers(opts.n_workers, tc.batch_size);
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 1) num_threads(workers)
#endif
  for (int64_t i = 0; i < static_cast<int64_t>(corpus.utterances.size());
       ++i) {
    const FeatureMatrix feat =
        log_mel_fbank(corpus.utterances[i].wave, FbankConfig{});
    const std::vector<int64_t> keep = energy_vad(feat);
    features[i] = features_to_tensor(feat, &keep);
  }
  std::vector<size_t> usable;  // enough voiced frames for three downsamplings
  for (size_t i = 0; i < features.size(); ++i)
    if (features[i].dim(0) >= 16) usable.push_back(i);
  ATSS_CHECK(!usable.empty(), "train_embedder: no utterance kept >= 16 frames");

  auto params = embedder.parameters();
  AdamState<float> adam;
  adam.lr = tc.lr;
  adam.init(params);

  Rng rng(tc.seed);
  std::vector<double> epoch_losses;
  for (int epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (int step = 0; step < tc.steps_per_epoch; ++step) {
      // balanced draw: speaker first, then one of its usable utterances
      std::vector<std::pair<size_t, int64_t>> picks(tc.batch_size);
      for (int b = 0; b < tc.batch_size; ++b) {
        size_t utt = SIZE_MAX;
        for (int tries = 0; tries < 100 && utt == SIZE_MAX; ++tries) {
          const auto& spk =
              corpus.speakers[rng.uniform_int(corpus.speakers.size())];
          const size_t cand =
              spk.utterances[rng.uniform_int(spk.utterances.size())];
          if (features[cand].dim(0) >= 16) utt = cand;
        }
        if (utt == SIZE_MAX) utt = usable[rng.uniform_int(usable.size())];
        const int64_t frames = features[utt].dim(0);
        const int64_t span = std::min<int64_t>(frames, opts.crop_frames);
        const int64_t offset =
            span < frames
                ? static_cast<int64_t>(rng.uniform_int(frames - span + 1))
                : 0;
        picks[b] = {utt, offset};
      }

      std::vector<double> losses(tc.batch_size, 0.0);
      std::vector<std::vector<std::vector<float>>> grads(tc.batch_size);
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 1) num_threads(workers)
#endif
      for (int b = 0; b < tc.batch_size; ++b) {
        const auto [utt, offset] = picks[b];
        const int64_t frames = features[utt].dim(0);
        const int64_t span = std::min<int64_t>(frames, opts.crop_frames);
        Tensor<float> x = features[utt];
        if (span < frames) {
          NoGradGuard ng;  // plain data movement, not part of the graph
          x = slice(x, 0, offset, span);
        }
        auto loss = cross_entropy_with_logits(embedder.classify(x),
                                              labels[utt]);
        GradTape<float> tape(loss);
        tape.backward();
        grads[b].reserve(params.size());
        for (auto& p : params) grads[b].push_back(tape.grad_of(p));
        losses[b] = loss.item();
      }

      double batch_loss = 0.0;
      for (double v : losses) batch_loss += v;
      batch_loss /= tc.batch_size;
      if (!std::isfinite(batch_loss))
        throw NumericError("non-finite embedder loss at epoch " +
                           std::to_string(epoch) + " step " +
                           std::to_string(step));

      std::vector<std::vector<float>> total(params.size());
      for (size_t p = 0; p < params.size(); ++p)
        total[p].assign(params[p].numel(), 0.0f);
      for (int b = 0; b < tc.batch_size; ++b)
        for (size_t p = 0; p < params.size(); ++p)
          for (size_t i = 0; i < total[p].size(); ++i)
            total[p][i] += grads[b][p][i];
      const float inv_b = 1.0f / static_cast<float>(tc.batch_size);
      for (auto& g : total)
        for (auto& v : g) v *= inv_b;
      adam_step(params, total, adam);
      epoch_loss += batch_loss;
    }
    epoch_loss /= tc.steps_per_epoch;
    epoch_losses.push_back(epoch_loss);
    if (opts.on_epoch) opts.on_epoch(epoch, epoch_loss);
  }
  return epoch_losses;
}

// ---------------------------------------------------------------------------
// Inference and evaluation

Waveform separate(const Waveform& mixture, const Waveform& reference,
                  const Embedder<float>& embedder,
                  const AtssModel<float>& model, const StftConfig& stft_cfg,
                  bool force_ones_mask) {
  NoGradGuard ng;
  const ComplexSpectrogram spec = stft(mixture, stft_cfg);
  auto [mag, phase] = magnitude_phase(spec);

  MagnitudeSpectrogram est = mag;
  if (!force_ones_mask) {
    ATSS_CHECK(model.config().uses_embedding(),
               "separate: PIT models need ground truth; use evaluate");
    const Tensor<float> emb = embed_waveform(reference, embedder);
    const Tensor<float> mask = model.forward_mask(mag_to_tensor(mag), emb);
    const auto& mv = mask.data();
    for (size_t i = 0; i < est.values.size(); ++i) est.values[i] *= mv[i];
  }
  return istft(reconstruct(est, phase, stft_cfg), stft_cfg, mixture.size());
}

double sdr(const Waveform& reference, const Waveform& estimate) {
  ATSS_CHECK(reference.size() == estimate.size(), "sdr: length mismatch");
  double ref_pow = 0.0, dot = 0.0;
  for (int64_t i = 0; i < reference.size(); ++i) {
    ref_pow += reference.samples[i] * reference.samples[i];
    dot += estimate.samples[i] * reference.samples[i];
  }
  ATSS_CHECK(ref_pow > 0.0, "sdr: zero reference");
  const double alpha = dot / ref_pow;
  double sig_pow = 0.0, res_pow = 0.0;
  for (int64_t i = 0; i < reference.size(); ++i) {
    const double s = alpha * reference.samples[i];
    const double r = estimate.samples[i] - s;
    sig_pow += s * s;
    res_pow += r * r;
  }
  // exactly +60 iff the residual vanishes relative to the projection
  constexpr double kCapDb = 60.0;
  if (res_pow <= 1e-12 * sig_pow) return kCapDb;
  return 10.0 * std::log10(sig_pow / res_pow);
}

namespace {

// PIT models emit one estimate per source; score the one whose masked
// magnitude sits closest to the target.
Waveform separate_pit_best(const MixtureSample& sample,
                           const AtssModel<float>& model,
                           const StftConfig& stft_cfg) {
  NoGradGuard ng;
  const ComplexSpectrogram spec = stft(sample.mixture, stft_cfg);
  auto [mag, phase] = magnitude_phase(spec);
  const Tensor<float> mag_t = mag_to_tensor(mag);
  const Tensor<float> target_t =
      mag_to_tensor(magnitude_phase(stft(sample.target, stft_cfg)).first);
  const auto masks = model.forward(mag_t);
  double best_loss = std::numeric_limits<double>::infinity();
  Tensor<float> best_mask;
  for (const auto& m : masks) {
    const double loss = l2_loss(apply_mask(mag_t, m), target_t).item();
    if (loss < best_loss) {
      best_loss = loss;
      best_mask = m;
    }
  }
  MagnitudeSpectrogram est = mag;
  const auto& mv = best_mask.data();
  for (size_t i = 0; i < est.values.size(); ++i) est.values[i] *= mv[i];
  return istft(reconstruct(est, phase, stft_cfg), stft_cfg,
               sample.mixture.size());
}

}  // namespace

EvalReport evaluate(const std::vector<MixtureSample>& samples,
                    const Embedder<float>& embedder,
                    const AtssModel<float>& model, const StftConfig& stft_cfg,
                    bool force_ones_mask) {
  ATSS_CHECK(!samples.empty(), "evaluate: empty sample set");
  EvalReport report;
  report.n = static_cast<int64_t>(samples.size());
  report.rows.resize(samples.size());

  const int workers =
      pick_workers(0, static_cast<int>(samples.size()));
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 1) num_threads(workers)
#endif
  for (int64_t i = 0; i < static_cast<int64_t>(samples.size()); ++i) {
    const MixtureSample& s = samples[i];
    Waveform estimate =
        (model.config().mode == ModelMode::kPit && !force_ones_mask)
            ? separate_pit_best(s, model, stft_cfg)
            : separate(s.mixture, s.reference, embedder, model, stft_cfg,
                       force_ones_mask);
    EvalRow row;
    char id[16];
    std::snprintf(id, sizeof(id), "%05lld", static_cast<long long>(i));
    row.id = id;
    row.before = sdr(s.target, s.mixture);
    row.after = sdr(s.target, estimate);
    row.snr_db = s.snr_db;
    report.rows[i] = std::move(row);
  }

  double before = 0.0, after = 0.0;
  for (const auto& r : report.rows) {
    before += r.before;
    after += r.after;
  }
  report.sdr_before_mean = before / report.n;
  report.sdr_after_mean = after / report.n;
  report.sdr_improved_mean = report.sdr_after_mean - report.sdr_before_mean;
  return report;
}

std::string eval_report_json(const EvalReport& report) {
  nlohmann::json j;
  j["n"] = report.n;
  j["sdr_before_mean"] = report.sdr_before_mean;
  j["sdr_after_mean"] = report.sdr_after_mean;
  j["sdr_improved_mean"] = report.sdr_improved_mean;
  j["samples"] = nlohmann::json::array();
  for (const auto& r : report.rows) {
    nlohmann::json row;
    row["id"] = r.id;
    row["before"] = r.before;
    row["after"] = r.after;
    if (r.snr_db) row["snr_db"] = *r.snr_db;
    j["samples"].push_back(std::move(row));
  }
  return j.dump(2) + "\n";
}

}  // namespace atss
