// Copyright 2026 The atssnet Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)
//
// Deterministic signal-processing primitives: framing, windowing,
// STFT/ISTFT, magnitude/phase split, log-Mel filterbanks, energy VAD,
// RMS normalization and SNR-controlled mixing. Everything here is a pure
// function of its inputs and runs in double precision.

#ifndef ATSS_DSP_HPP_
#define ATSS_DSP_HPP_

#include <complex>
#include <cstdint>
#include <utility>
#include <vector>

#include "atss/common.hpp"

namespace atss {

struct Waveform {
  std::vector<double> samples;
  int sample_rate = 16000;

  int64_t size() const { return static_cast<int64_t>(samples.size()); }
};

struct StftConfig {
  int frame_len = 400;
  int hop = 160;
  int fft_size = 512;

  int bins() const { return fft_size / 2 + 1; }
  void validate() const {
    ATSS_CHECK(hop > 0 && frame_len > 0 && fft_size > 0,
               "StftConfig: sizes must be positive");
    ATSS_CHECK(hop <= frame_len && frame_len <= fft_size,
               "StftConfig: need hop <= frame_len <= fft_size");
  }
};

// Row-major [frames][bins] onesided spectrogram, bins = fft_size/2 + 1.
struct ComplexSpectrogram {
  int64_t frames = 0;
  int64_t bins = 0;
  std::vector<std::complex<double>> values;
  StftConfig config;

  std::complex<double> at(int64_t t, int64_t f) const {
    return values[t * bins + f];
  }
};

struct MagnitudeSpectrogram {
  int64_t frames = 0;
  int64_t bins = 0;
  std::vector<double> values;

  double at(int64_t t, int64_t f) const { return values[t * bins + f]; }
};

// Angles in radians, range (-pi, pi].
struct Phase {
  int64_t frames = 0;
  int64_t bins = 0;
  std::vector<double> values;
};

struct FbankConfig {
  int n_mels = 64;
  int frame_len = 400;  // 25 ms at 16 kHz
  int hop = 160;        // 10 ms
  int fft_size = 512;
};

// Row-major [rows][cols] feature matrix (log-Mel features, T x n_mels).
struct FeatureMatrix {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<double> values;

  double at(int64_t r, int64_t c) const { return values[r * cols + c]; }
};

// Periodic Hann: w[k] = 0.5*(1 - cos(2*pi*k/n)).
std::vector<double> hann_window(int n);

// T = 1 + floor((len - frame_len)/hop); no padding.
int64_t num_frames(int64_t len, int frame_len, int hop);
std::vector<std::vector<double>> frame_signal(const Waveform& wave,
                                              int frame_len, int hop);

ComplexSpectrogram stft(const Waveform& wave, const StftConfig& cfg);

// Weighted overlap-add with synthesis window = analysis window and
// per-sample division by the accumulated squared window; samples whose
// normalizer stays under 1e-8 are set to zero. Output is truncated or
// zero-padded to out_len.
Waveform istft(const ComplexSpectrogram& spec, const StftConfig& cfg,
               int64_t out_len);

std::pair<MagnitudeSpectrogram, Phase> magnitude_phase(
    const ComplexSpectrogram& spec);
ComplexSpectrogram reconstruct(const MagnitudeSpectrogram& mag,
                               const Phase& phase, const StftConfig& cfg);

// Power spectrum -> HTK-mel triangular filterbank spanning 0..Nyquist ->
// natural log with floor ln(max(p, 1e-10)). Output is T x n_mels.
FeatureMatrix log_mel_fbank(const Waveform& wave, const FbankConfig& cfg);

// Center frequencies (Hz) of the triangular filters; exposed for tests.
std::vector<double> mel_filter_centers(const FbankConfig& cfg, int sample_rate);

// Keeps frames whose logsumexp energy is within threshold_db of the loudest
// frame; the loudest frame itself is always kept.
std::vector<int64_t> energy_vad(const FeatureMatrix& fbank,
                                double threshold_db = 40.0);

double rms(const Waveform& wave);

Waveform rms_normalize(const Waveform& wave, double target_rms = 0.05);

struct MixResult {
  Waveform mixture;
  Waveform scaled_noise;
  double gain = 1.0;
};

// Scales `noise` so that 10*log10(P_speech/P_noise) == snr_db, then adds.
MixResult mix_at_snr(const Waveform& speech, const Waveform& noise,
                     double snr_db);

namespace detail {
// In-place FFT; radix-2 when n is a power of two, O(n^2) DFT otherwise.
void fft(std::vector<std::complex<double>>& a, bool inverse);
}  // namespace detail

}  // namespace atss

#endif  // ATSS_DSP_HPP_
