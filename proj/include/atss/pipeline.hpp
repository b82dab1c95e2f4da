// Copyright 2026 The atssnet Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)
//
// End-to-end orchestration: on-the-fly mixture simulation, separator and
// embedder training, full inference and SDR evaluation.

#ifndef ATSS_PIPELINE_HPP_
#define ATSS_PIPELINE_HPP_

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "atss/config.hpp"
#include "atss/dsp.hpp"
#include "atss/embedder.hpp"
#include "atss/model.hpp"
#include "atss/tensor.hpp"

namespace atss {

inline constexpr int kSampleRate = 16000;
inline constexpr int64_t kMixtureSamples = 3 * kSampleRate;  // 3 s crops
inline constexpr double kTargetRms = 0.05;

// ---------------------------------------------------------------------------
// Corpora

struct Utterance {
  std::string speaker;
  std::string path;  // empty for in-memory corpora
  Waveform wave;
};

struct Corpus {
  struct Speaker {
    std::string id;
    std::vector<size_t> utterances;  // indices into the utterance table
  };

  std::vector<Utterance> utterances;
  std::vector<Speaker> speakers;
  int64_t rejected_short = 0;  // utterances dropped at manifest build time

  void add(const std::string& speaker_id, Waveform wave,
           const std::string& path = "");
  const Speaker* find_speaker(const std::string& id) const;
};

// Manifest: one `speaker_id<TAB>wav_path` per line, UTF-8. Utterances
// shorter than 3 s are rejected; files must be mono 16-bit 16 kHz PCM.
Corpus load_corpus_manifest(const std::string& manifest_path);

// ---------------------------------------------------------------------------
// Mixture simulation

struct MixtureSample {
  Waveform mixture, target, reference, interference;
  std::string target_speaker;
  std::string interference_source;   // speaker id or noise id
  std::optional<double> snr_db;      // set in noisy mode only
  uint64_t seed = 0;
  // corpus utterance index behind `reference`; lets trainers cache
  // embeddings. SIZE_MAX when the sample was loaded from disk.
  size_t reference_utterance = SIZE_MAX;
};

// Two distinct speakers, 3 s crops, RMS-normalized, summed at unit gain;
// the reference is a different utterance of the target speaker.
MixtureSample simulate_two_speaker(const Corpus& corpus, uint64_t seed);

// Speaker utterance plus a noise crop mixed at an SNR drawn uniformly from
// [snr_min, snr_max] dB.
MixtureSample simulate_noisy(const Corpus& corpus, const Corpus& noise,
                             double snr_min, double snr_max, uint64_t seed);

// Reads samples back from a directory written by the simulate command
// (index.json plus mixture/target/reference WAVs). `path` may name the
// directory or the index.json itself.
std::vector<MixtureSample> load_simulation_dir(const std::string& path);

// ---------------------------------------------------------------------------
// Tensor bridges

Tensor<float> mag_to_tensor(const MagnitudeSpectrogram& mag);
MagnitudeSpectrogram tensor_to_mag(const Tensor<float>& t);

// Fbank matrix (optionally row-filtered by a VAD keep list) to [T, n_mels].
Tensor<float> features_to_tensor(const FeatureMatrix& feat,
                                 const std::vector<int64_t>* keep = nullptr);

// fbank -> energy VAD -> embedder, with gradients disabled.
Tensor<float> embed_waveform(const Waveform& reference,
                             const Embedder<float>& embedder);

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double lr = 1e-4;
  int batch_size = 16;
  int max_epochs = 50;
  int patience = 10;
  int steps_per_epoch = 100;
  int validation_size = 64;
  uint64_t seed = 0;

  static TrainConfig from(const Config& cfg) {
    return {cfg.lr,      cfg.batch_size,      cfg.max_epochs,     cfg.patience,
            cfg.steps_per_epoch, cfg.validation_size, cfg.seed};
  }
};

// "loss does not descend" bookkeeping: stop after `patience` consecutive
// epochs without a new strict minimum of the validation loss.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience) : patience_(patience) {}

  // Returns true when v is a new strict minimum.
  bool feed(double v) {
    ++count_;
    if (v < best_) {
      best_ = v;
      best_index_ = count_ - 1;
      since_best_ = 0;
      return true;
    }
    ++since_best_;
    return false;
  }

  bool should_stop() const { return since_best_ >= patience_; }
  int best_index() const { return best_index_; }
  double best_value() const { return best_; }

 private:
  int patience_;
  double best_ = std::numeric_limits<double>::infinity();
  int best_index_ = -1;
  int since_best_ = 0;
  int count_ = 0;
};

struct EpochRow {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  std::vector<EpochRow> history;
  int best_epoch = 0;  // 1-based epoch whose validation loss was lowest
  bool early_stopped = false;
};

struct SeparatorTrainOptions {
  TrainConfig train;
  MixMode mix_mode = MixMode::kTwoSpeaker;
  double snr_min = 5.0, snr_max = 20.0;
  StftConfig stft;
  int n_workers = 0;  // 0: pick from hardware
  // When non-empty, training samples are drawn from this fixed pool of
  // simulation seeds instead of fresh seeds (the overfit-a-small-set
  // regime used by the desk-scale experiments).
  std::vector<uint64_t> sample_pool;
  // test hooks
  std::function<double(int epoch)> scripted_validation;
  bool inject_nan = false;
  // progress callback (epoch, train loss, val loss)
  std::function<void(int, double, double)> on_epoch;
};

// Trains `model` in place (embedder frozen); on return the model holds the
// parameters of the best-validation epoch. Throws NumericError on a
// non-finite loss.
TrainResult train_separator(const Corpus& train_corpus,
                            const Corpus& val_corpus, const Corpus* noise,
                            const Embedder<float>& embedder,
                            AtssModel<float>& model,
                            const SeparatorTrainOptions& opts);

struct EmbedderTrainOptions {
  TrainConfig train;
  int crop_frames = 150;  // random contiguous crop of post-VAD frames
  int n_workers = 0;
  std::function<void(int, double)> on_epoch;
};

// Closed-set cross-entropy training; returns per-epoch mean losses.
std::vector<double> train_embedder(const Corpus& corpus,
                                   Embedder<float>& embedder,
                                   const EmbedderTrainOptions& opts);

// ---------------------------------------------------------------------------
// Inference and evaluation

// mask -> masked magnitude -> mixed phase -> inverse STFT; output length
// equals the input length. force_ones_mask bypasses the model (debug hook).
Waveform separate(const Waveform& mixture, const Waveform& reference,
                  const Embedder<float>& embedder,
                  const AtssModel<float>& model, const StftConfig& stft_cfg,
                  bool force_ones_mask = false);

// Scale-invariant projection SDR in dB, +60 cap on a vanishing residual.
double sdr(const Waveform& reference, const Waveform& estimate);

struct EvalRow {
  std::string id;
  double before = 0.0;
  double after = 0.0;
  std::optional<double> snr_db;
};

struct EvalReport {
  int64_t n = 0;
  double sdr_before_mean = 0.0;
  double sdr_after_mean = 0.0;
  double sdr_improved_mean = 0.0;
  std::vector<EvalRow> rows;
};

// Per sample: SDR(target, mixture) and SDR(target, separated estimate).
// PIT models emit two estimates; the one with the lower magnitude-domain
// l2 loss against the target is scored.
EvalReport evaluate(const std::vector<MixtureSample>& samples,
                    const Embedder<float>& embedder,
                    const AtssModel<float>& model, const StftConfig& stft_cfg,
                    bool force_ones_mask = false);

std::string eval_report_json(const EvalReport& report);

}  // namespace atss

#endif  // ATSS_PIPELINE_HPP_
