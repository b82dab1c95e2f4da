# Copyright 2026 The atssnet Authors
# License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)
"""Attention-based target speaker separation in the spectrogram domain."""

from atssnet._core import (
    DataError,
    Embedder,
    NumericError,
    Separator,
    energy_vad,
    hann_window,
    istft,
    log_mel_fbank,
    mix_at_snr,
    read_wav,
    rms_normalize,
    sdr,
    separate,
    stft,
    write_wav,
)

__all__ = [
    "DataError",
    "Embedder",
    "NumericError",
    "Separator",
    "energy_vad",
    "hann_window",
    "istft",
    "log_mel_fbank",
    "mix_at_snr",
    "read_wav",
    "rms_normalize",
    "sdr",
    "separate",
    "stft",
    "write_wav",
]
