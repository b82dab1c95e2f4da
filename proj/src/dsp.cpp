// Copyright 2026 The atssnet Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "atss/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace atss {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kLogFloor = 1e-10;

bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

}  // namespace

namespace detail {

void fft(std::vector<std::complex<double>>& a, bool inverse) {
  const int n = static_cast<int>(a.size());
  if (n <= 1) return;
  if (!is_pow2(n)) {
    // naive DFT keeps arbitrary fft_size valid; 512 takes the fast path
    std::vector<std::complex<double>> out(n);
    const double sign = inverse ? 2.0 * kPi / n : -2.0 * kPi / n;
    for (int k = 0; k < n; ++k) {
      std::complex<double> acc = 0.0;
      for (int t = 0; t < n; ++t)
        acc += a[t] * std::polar(1.0, sign * k * t);
      out[k] = acc;
    }
    a = std::move(out);
  } else {
    // iterative radix-2 Cooley-Tukey
    for (int i = 1, j = 0; i < n; ++i) {
      int bit = n >> 1;
      for (; j & bit; bit >>= 1) j ^= bit;
      j ^= bit;
      if (i < j) std::swap(a[i], a[j]);
    }
    for (int len = 2; len <= n; len <<= 1) {
      const double ang = (inverse ? 2.0 : -2.0) * kPi / len;
      const std::complex<double> wl = std::polar(1.0, ang);
      for (int i = 0; i < n; i += len) {
        std::complex<double> w = 1.0;
        for (int j = 0; j < len / 2; ++j) {
          const std::complex<double> u = a[i + j];
          const std::complex<double> v = a[i + j + len / 2] * w;
          a[i + j] = u + v;
          a[i + j + len / 2] = u - v;
          w *= wl;
        }
      }
    }
  }
  if (inverse)
    for (auto& x : a) x /= n;
}

}  // namespace detail

std::vector<double> hann_window(int n) {
  ATSS_CHECK(n >= 1, "hann_window: length must be >= 1");
  std::vector<double> w(n);
  for (int k = 0; k < n; ++k)
    w[k] = 0.5 * (1.0 - std::cos(2.0 * kPi * k / n));
  return w;
}

int64_t num_frames(int64_t len, int frame_len, int hop) {
  ATSS_CHECK(frame_len >= 1 && hop >= 1, "num_frames: bad frame/hop");
  if (len < frame_len)
    throw DataError("signal too short: " + std::to_string(len) +
                    " samples < frame length " + std::to_string(frame_len));
  return 1 + (len - frame_len) / hop;
}

std::vector<std::vector<double>> frame_signal(const Waveform& wave,
                                              int frame_len, int hop) {
  const int64_t t = num_frames(wave.size(), frame_len, hop);
  std::vector<std::vector<double>> frames(t);
  for (int64_t i = 0; i < t; ++i) {
    const auto begin = wave.samples.begin() + i * hop;
    frames[i].assign(begin, begin + frame_len);
  }
  return frames;
}

ComplexSpectrogram stft(const Waveform& wave, const StftConfig& cfg) {
  cfg.validate();
  const int64_t t = num_frames(wave.size(), cfg.frame_len, cfg.hop);
  const std::vector<double> window = hann_window(cfg.frame_len);
  ComplexSpectrogram spec;
  spec.frames = t;
  spec.bins = cfg.bins();
  spec.config = cfg;
  spec.values.resize(t * spec.bins);

  std::vector<std::complex<double>> buf(cfg.fft_size);
  for (int64_t i = 0; i < t; ++i) {
    const double* src = wave.samples.data() + i * cfg.hop;
    for (int k = 0; k < cfg.frame_len; ++k) buf[k] = src[k] * window[k];
    std::fill(buf.begin() + cfg.frame_len, buf.end(), 0.0);
    detail::fft(buf, false);
    std::copy(buf.begin(), buf.begin() + spec.bins,
              spec.values.begin() + i * spec.bins);
  }
  return spec;
}

Waveform istft(const ComplexSpectrogram& spec, const StftConfig& cfg,
               int64_t out_len) {
  cfg.validate();
  ATSS_CHECK(spec.bins == cfg.bins(),
             "istft: spectrogram bins inconsistent with fft_size");
  ATSS_CHECK(spec.frames >= 1, "istft: empty spectrogram");
  const std::vector<double> window = hann_window(cfg.frame_len);
  const int64_t span = (spec.frames - 1) * cfg.hop + cfg.frame_len;
  std::vector<double> acc(span, 0.0), den(span, 0.0);

  std::vector<std::complex<double>> buf(cfg.fft_size);
  for (int64_t i = 0; i < spec.frames; ++i) {
    const std::complex<double>* row = spec.values.data() + i * spec.bins;
    for (int64_t k = 0; k < spec.bins; ++k) buf[k] = row[k];
    for (int64_t k = spec.bins; k < cfg.fft_size; ++k)
      buf[k] = std::conj(row[cfg.fft_size - k]);
    detail::fft(buf, true);
    const int64_t base = i * cfg.hop;
    for (int k = 0; k < cfg.frame_len; ++k) {
      acc[base + k] += buf[k].real() * window[k];
      den[base + k] += window[k] * window[k];
    }
  }

  Waveform out;
  out.sample_rate = 16000;
  out.samples.assign(out_len, 0.0);
  const int64_t copy = std::min(out_len, span);
  for (int64_t n = 0; n < copy; ++n)
    out.samples[n] = den[n] < 1e-8 ? 0.0 : acc[n] / den[n];
  return out;
}

std::pair<MagnitudeSpectrogram, Phase> magnitude_phase(
    const ComplexSpectrogram& spec) {
  MagnitudeSpectrogram mag;
  Phase phase;
  mag.frames = phase.frames = spec.frames;
  mag.bins = phase.bins = spec.bins;
  mag.values.resize(spec.values.size());
  phase.values.resize(spec.values.size());
  for (size_t i = 0; i < spec.values.size(); ++i) {
    mag.values[i] = std::abs(spec.values[i]);
    // zero magnitude gets phase 0 by convention (atan2(0,0) == 0)
    phase.values[i] = std::arg(spec.values[i]);
  }
  return {std::move(mag), std::move(phase)};
}

ComplexSpectrogram reconstruct(const MagnitudeSpectrogram& mag,
                               const Phase& phase, const StftConfig& cfg) {
  ATSS_CHECK(mag.frames == phase.frames && mag.bins == phase.bins,
             "reconstruct: magnitude/phase shape mismatch");
  ComplexSpectrogram spec;
  spec.frames = mag.frames;
  spec.bins = mag.bins;
  spec.config = cfg;
  spec.values.resize(mag.values.size());
  for (size_t i = 0; i < mag.values.size(); ++i)
    spec.values[i] = std::polar(mag.values[i], phase.values[i]);
  return spec;
}

std::vector<double> mel_filter_centers(const FbankConfig& cfg,
                                       int sample_rate) {
  const auto hz_to_mel = [](double f) {
    return 2595.0 * std::log10(1.0 + f / 700.0);
  };
  const auto mel_to_hz = [](double m) {
    return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0);
  };
  const double mel_max = hz_to_mel(sample_rate / 2.0);
  std::vector<double> centers(cfg.n_mels);
  for (int i = 0; i < cfg.n_mels; ++i)
    centers[i] = mel_to_hz(mel_max * (i + 1) / (cfg.n_mels + 1));
  return centers;
}

FeatureMatrix log_mel_fbank(const Waveform& wave, const FbankConfig& cfg) {
  ATSS_CHECK(cfg.n_mels >= 1, "log_mel_fbank: n_mels must be >= 1");
  ATSS_CHECK(cfg.n_mels < cfg.fft_size / 2 + 1,
             "log_mel_fbank: n_mels must be below the bin count");
  StftConfig scfg{cfg.frame_len, cfg.hop, cfg.fft_size};
  const ComplexSpectrogram spec = stft(wave, scfg);
  const int64_t bins = spec.bins;

  // triangular filters on the HTK mel scale, edges linear in mel
  const auto hz_to_mel = [](double f) {
    return 2595.0 * std::log10(1.0 + f / 700.0);
  };
  const auto mel_to_hz = [](double m) {
    return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0);
  };
  const double mel_max = hz_to_mel(wave.sample_rate / 2.0);
  std::vector<double> edges(cfg.n_mels + 2);
  for (int i = 0; i < cfg.n_mels + 2; ++i)
    edges[i] = mel_to_hz(mel_max * i / (cfg.n_mels + 1));

  std::vector<double> weights(cfg.n_mels * bins, 0.0);
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    for (int64_t k = 0; k < bins; ++k) {
      const double f = double(k) * wave.sample_rate / cfg.fft_size;
      double w = 0.0;
      if (f >= lo && f <= mid && mid > lo) w = (f - lo) / (mid - lo);
      else if (f > mid && f <= hi && hi > mid) w = (hi - f) / (hi - mid);
      weights[m * bins + k] = std::max(w, 0.0);
    }
  }

  FeatureMatrix feat;
  feat.rows = spec.frames;
  feat.cols = cfg.n_mels;
  feat.values.resize(feat.rows * feat.cols);
  std::vector<double> power(bins);
  for (int64_t t = 0; t < spec.frames; ++t) {
    const std::complex<double>* row = spec.values.data() + t * bins;
    for (int64_t k = 0; k < bins; ++k) power[k] = std::norm(row[k]);
    for (int m = 0; m < cfg.n_mels; ++m) {
      const double* wrow = weights.data() + m * bins;
      double acc = 0.0;
      for (int64_t k = 0; k < bins; ++k) acc += wrow[k] * power[k];
      feat.values[t * cfg.n_mels + m] = std::log(std::max(acc, kLogFloor));
    }
  }
  return feat;
}

std::vector<int64_t> energy_vad(const FeatureMatrix& fbank,
                                double threshold_db) {
  ATSS_CHECK(fbank.rows >= 1, "energy_vad: need at least one frame");
  std::vector<double> energy(fbank.rows);
  for (int64_t t = 0; t < fbank.rows; ++t) {
    const double* row = fbank.values.data() + t * fbank.cols;
    double mx = row[0];
    for (int64_t j = 1; j < fbank.cols; ++j) mx = std::max(mx, row[j]);
    double acc = 0.0;
    for (int64_t j = 0; j < fbank.cols; ++j) acc += std::exp(row[j] - mx);
    energy[t] = mx + std::log(acc);
  }
  const int64_t argmax = static_cast<int64_t>(
      std::max_element(energy.begin(), energy.end()) - energy.begin());
  const double cutoff = energy[argmax] - threshold_db * std::log(10.0) / 10.0;
  std::vector<int64_t> kept;
  for (int64_t t = 0; t < fbank.rows; ++t)
    if (energy[t] > cutoff || t == argmax) kept.push_back(t);
  return kept;
}

double rms(const Waveform& wave) {
  if (wave.samples.empty()) return 0.0;
  double acc = 0.0;
  for (double s : wave.samples) acc += s * s;
  return std::sqrt(acc / wave.samples.size());
}

Waveform rms_normalize(const Waveform& wave, double target_rms) {
  ATSS_CHECK(target_rms > 0.0, "rms_normalize: target must be positive");
  const double r = rms(wave);
  if (r <= 0.0)
    throw DataError("rms_normalize: cannot normalize an all-zero signal");
  Waveform out = wave;
  const double g = target_rms / r;
  for (double& s : out.samples) s *= g;
  return out;
}

MixResult mix_at_snr(const Waveform& speech, const Waveform& noise,
                     double snr_db) {
  ATSS_CHECK(speech.size() == noise.size(),
             "mix_at_snr: length mismatch " + std::to_string(speech.size()) +
                 " vs " + std::to_string(noise.size()));
  double p_speech = 0.0, p_noise = 0.0;
  for (double s : speech.samples) p_speech += s * s;
  for (double s : noise.samples) p_noise += s * s;
  if (p_speech <= 0.0 || p_noise <= 0.0)
    throw DataError("mix_at_snr: zero-power input");
  const double gain =
      std::sqrt(p_speech / (p_noise * std::pow(10.0, snr_db / 10.0)));

  MixResult out;
  out.gain = gain;
  out.scaled_noise.sample_rate = noise.sample_rate;
  out.scaled_noise.samples.resize(noise.samples.size());
  out.mixture.sample_rate = speech.sample_rate;
  out.mixture.samples.resize(speech.samples.size());
  for (size_t i = 0; i < speech.samples.size(); ++i) {
    out.scaled_noise.samples[i] = gain * noise.samples[i];
    out.mixture.samples[i] = speech.samples[i] + out.scaled_noise.samples[i];
  }
  return out;
}

}  // namespace atss
