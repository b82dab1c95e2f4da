// Copyright 2026 The atssnet Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef ATSS_WAV_HPP_
#define ATSS_WAV_HPP_

#include <string>

#include "atss/dsp.hpp"

namespace atss {

// RIFF PCM, 16-bit little-endian signed, mono. Samples map to [-1, 1) by
// division by 32768. Anything else is rejected with a DataError.
Waveform read_wav(const std::string& path);

// Writes 16-bit PCM mono; out-of-range samples are clamped to [-1, 1) and
// counted into *clipped when given.
void write_wav(const std::string& path, const Waveform& wave,
               int64_t* clipped = nullptr);

}  // namespace atss

#endif  // ATSS_WAV_HPP_
