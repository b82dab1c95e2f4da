// Copyright 2026 The atssnet Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef ATSS_CONFIG_HPP_
#define ATSS_CONFIG_HPP_

#include <cstdint>
#include <string>

#include "atss/dsp.hpp"
#include "atss/model.hpp"

namespace atss {

enum class MixMode { kTwoSpeaker, kNoisy };

inline const char* to_string(MixMode m) {
  return m == MixMode::kTwoSpeaker ? "two_speaker" : "noisy";
}

// Flat key=value configuration (UTF-8, '#' comments). Unknown keys are
// rejected with their line number; defaults follow the reference training
// setup. The full key table lives in the README.
struct Config {
  StftConfig stft;

  int n_blocks = 3;
  int n_heads = 2;
  int d_k = 64;
  int embed_dim = 256;
  AttentionAxis attention_axis = AttentionAxis::kTime;
  ModelMode ablation = ModelMode::kFull;

  double lr = 1e-4;
  int batch_size = 16;
  int max_epochs = 50;
  int patience = 10;
  uint64_t seed = 0;
  int steps_per_epoch = 100;
  int validation_size = 64;

  MixMode mix_mode = MixMode::kTwoSpeaker;
  double snr_min = 5.0;
  double snr_max = 20.0;

  static Config parse_text(const std::string& text);
  static Config parse_file(const std::string& path);

  // Canonical key=value rendering; parse_text(serialize()) round-trips.
  std::string serialize() const;

  ModelConfig model_config() const {
    ModelConfig m;
    m.n_blocks = n_blocks;
    m.n_heads = n_heads;
    m.d_k = d_k;
    m.freq_bins = stft.bins();
    m.embed_dim = embed_dim;
    m.attention_axis = attention_axis;
    m.mode = ablation;
    return m;
  }

  void validate() const;
};

}  // namespace atss

#endif  // ATSS_CONFIG_HPP_
