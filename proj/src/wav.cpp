// Copyright 2026 The atssnet Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "atss/wav.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

namespace atss {

namespace {

uint32_t read_u32(const uint8_t* p) {
  return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 |
         uint32_t(p[3]) << 24;
}

uint16_t read_u16(const uint8_t* p) {
  return uint16_t(p[0]) | uint16_t(p[1]) << 8;
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(v & 0xff);
  out.push_back((v >> 8) & 0xff);
  out.push_back((v >> 16) & 0xff);
  out.push_back((v >> 24) & 0xff);
}

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(v & 0xff);
  out.push_back((v >> 8) & 0xff);
}

}  // namespace

Waveform read_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open WAV file: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
  if (bytes.size() < 44 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw DataError("not a RIFF/WAVE file: " + path);

  bool have_fmt = false;
  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  size_t data_off = 0, data_len = 0;

  size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const char* id = reinterpret_cast<const char*>(bytes.data() + pos);
    const uint32_t size = read_u32(bytes.data() + pos + 4);
    const size_t body = pos + 8;
    if (body + size > bytes.size())
      throw DataError("truncated WAV chunk in " + path);
    if (std::memcmp(id, "fmt ", 4) == 0) {
      if (size < 16) throw DataError("malformed fmt chunk in " + path);
      format = read_u16(bytes.data() + body);
      channels = read_u16(bytes.data() + body + 2);
      rate = read_u32(bytes.data() + body + 4);
      bits = read_u16(bytes.data() + body + 14);
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      data_off = body;
      data_len = size;
    }
    pos = body + size + (size & 1);  // chunks are word-aligned
  }

  if (!have_fmt || data_off == 0)
    throw DataError("WAV file missing fmt/data chunk: " + path);
  if (format != 1)
    throw DataError("WAV file is not integer PCM (fmt tag " +
                    std::to_string(format) + "): " + path);
  if (channels != 1)
    throw DataError("WAV file must be mono, got " + std::to_string(channels) +
                    " channels: " + path);
  if (bits != 16)
    throw DataError("WAV file must be 16-bit, got " + std::to_string(bits) +
                    ": " + path);

  Waveform wave;
  wave.sample_rate = static_cast<int>(rate);
  const size_t n = data_len / 2;
  wave.samples.resize(n);
  const uint8_t* p = bytes.data() + data_off;
  for (size_t i = 0; i < n; ++i) {
    const int16_t s = static_cast<int16_t>(read_u16(p + 2 * i));
    wave.samples[i] = s / 32768.0;
  }
  return wave;
}

void write_wav(const std::string& path, const Waveform& wave,
               int64_t* clipped) {
  const uint32_t n = static_cast<uint32_t>(wave.samples.size());
  const uint32_t data_bytes = n * 2;
  std::vector<uint8_t> out;
  out.reserve(44 + data_bytes);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  put_u32(out, 36 + data_bytes);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  put_u32(out, 16);
  put_u16(out, 1);  // PCM
  put_u16(out, 1);  // mono
  put_u32(out, static_cast<uint32_t>(wave.sample_rate));
  put_u32(out, static_cast<uint32_t>(wave.sample_rate) * 2);  // byte rate
  put_u16(out, 2);   // block align
  put_u16(out, 16);  // bits
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  put_u32(out, data_bytes);

  int64_t clips = 0;
  for (double s : wave.samples) {
    long v = std::lrint(s * 32768.0);
    if (v > 32767) {
      v = 32767;
      ++clips;
    } else if (v < -32768) {
      v = -32768;
      ++clips;
    }
    put_u16(out, static_cast<uint16_t>(static_cast<int16_t>(v)));
  }
  if (clipped) *clipped = clips;

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write WAV file: " + path);
  f.write(reinterpret_cast<const char*>(out.data()),
          static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("short write to WAV file: " + path);
}

}  // namespace atss
