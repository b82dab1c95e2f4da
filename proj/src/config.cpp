// Copyright 2026 The atssnet Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "atss/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace atss {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

[[noreturn]] void fail(int line, const std::string& msg) {
  throw DataError("config line " + std::to_string(line) + ": " + msg);
}

int parse_int(const std::string& v, int line) {
  try {
    size_t used = 0;
    const int x = std::stoi(v, &used);
    if (used != v.size()) fail(line, "trailing junk in integer '" + v + "'");
    return x;
  } catch (const DataError&) {
    throw;
  } catch (const std::exception&) {
    fail(line, "expected an integer, got '" + v + "'");
  }
}

uint64_t parse_u64(const std::string& v, int line) {
  try {
    size_t used = 0;
    const uint64_t x = std::stoull(v, &used);
    if (used != v.size()) fail(line, "trailing junk in integer '" + v + "'");
    return x;
  } catch (const DataError&) {
    throw;
  } catch (const std::exception&) {
    fail(line, "expected an unsigned integer, got '" + v + "'");
  }
}

double parse_double(const std::string& v, int line) {
  try {
    size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) fail(line, "trailing junk in number '" + v + "'");
    return x;
  } catch (const DataError&) {
    throw;
  } catch (const std::exception&) {
    fail(line, "expected a number, got '" + v + "'");
  }
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

Config Config::parse_text(const std::string& text) {
  Config cfg;
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    if (hash != std::string::npos) raw = raw.substr(0, hash);
    const std::string s = trim(raw);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos) fail(line, "expected key=value, got '" + s + "'");
    const std::string key = trim(s.substr(0, eq));
    const std::string val = trim(s.substr(eq + 1));
    if (val.empty()) fail(line, "empty value for key '" + key + "'");

    if (key == "stft.frame_len") cfg.stft.frame_len = parse_int(val, line);
    else if (key == "stft.hop") cfg.stft.hop = parse_int(val, line);
    else if (key == "stft.fft_size") cfg.stft.fft_size = parse_int(val, line);
    else if (key == "model.n_blocks") cfg.n_blocks = parse_int(val, line);
    else if (key == "model.n_heads") cfg.n_heads = parse_int(val, line);
    else if (key == "model.d_k") cfg.d_k = parse_int(val, line);
    else if (key == "model.embed_dim") cfg.embed_dim = parse_int(val, line);
    else if (key == "model.attention_axis") {
      if (val == "time") cfg.attention_axis = AttentionAxis::kTime;
      else if (val == "freq") cfg.attention_axis = AttentionAxis::kFreq;
      else fail(line, "model.attention_axis must be 'time' or 'freq'");
    } else if (key == "model.ablation") {
      if (val == "full") cfg.ablation = ModelMode::kFull;
      else if (val == "no_attention") cfg.ablation = ModelMode::kNoAttention;
      else if (val == "pit") cfg.ablation = ModelMode::kPit;
      else fail(line, "model.ablation must be full, no_attention or pit");
    } else if (key == "train.lr") cfg.lr = parse_double(val, line);
    else if (key == "train.batch_size") cfg.batch_size = parse_int(val, line);
    else if (key == "train.max_epochs") cfg.max_epochs = parse_int(val, line);
    else if (key == "train.patience") cfg.patience = parse_int(val, line);
    else if (key == "train.seed") cfg.seed = parse_u64(val, line);
    else if (key == "train.steps_per_epoch")
      cfg.steps_per_epoch = parse_int(val, line);
    else if (key == "train.validation_size")
      cfg.validation_size = parse_int(val, line);
    else if (key == "mix.mode") {
      if (val == "two_speaker") cfg.mix_mode = MixMode::kTwoSpeaker;
      else if (val == "noisy") cfg.mix_mode = MixMode::kNoisy;
      else fail(line, "mix.mode must be 'two_speaker' or 'noisy'");
    } else if (key == "mix.snr_min") cfg.snr_min = parse_double(val, line);
    else if (key == "mix.snr_max") cfg.snr_max = parse_double(val, line);
    else fail(line, "unknown key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

Config Config::parse_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_text(ss.str());
}

std::string Config::serialize() const {
  std::ostringstream out;
  out << "stft.frame_len=" << stft.frame_len << "\n"
      << "stft.hop=" << stft.hop << "\n"
      << "stft.fft_size=" << stft.fft_size << "\n"
      << "model.n_blocks=" << n_blocks << "\n"
      << "model.n_heads=" << n_heads << "\n"
      << "model.d_k=" << d_k << "\n"
      << "model.embed_dim=" << embed_dim << "\n"
      << "model.attention_axis=" << to_string(attention_axis) << "\n"
      << "model.ablation=" << to_string(ablation) << "\n"
      << "train.lr=" << fmt_double(lr) << "\n"
      << "train.batch_size=" << batch_size << "\n"
      << "train.max_epochs=" << max_epochs << "\n"
      << "train.patience=" << patience << "\n"
      << "train.seed=" << seed << "\n"
      << "train.steps_per_epoch=" << steps_per_epoch << "\n"
      << "train.validation_size=" << validation_size << "\n"
      << "mix.mode=" << to_string(mix_mode) << "\n"
      << "mix.snr_min=" << fmt_double(snr_min) << "\n"
      << "mix.snr_max=" << fmt_double(snr_max) << "\n";
  return out.str();
}

void Config::validate() const {
  stft.validate();
  model_config().validate();
  ATSS_CHECK(lr > 0, "config: train.lr must be positive");
  ATSS_CHECK(batch_size >= 1, "config: train.batch_size must be >= 1");
  ATSS_CHECK(max_epochs >= 1, "config: train.max_epochs must be >= 1");
  ATSS_CHECK(patience >= 1, "config: train.patience must be >= 1");
  ATSS_CHECK(steps_per_epoch >= 1, "config: train.steps_per_epoch must be >= 1");
  ATSS_CHECK(validation_size >= 1, "config: train.validation_size must be >= 1");
  ATSS_CHECK(snr_min <= snr_max, "config: mix.snr_min must be <= mix.snr_max");
}

}  // namespace atss
