# Copyright 2026 The atssnet Authors
# License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)
"""Smoke tests for the python bindings."""

import numpy as np
import pytest

import atssnet


def tone(freq, seconds=1.0, sr=16000, amp=0.3):
    t = np.arange(int(seconds * sr)) / sr
    return amp * np.sin(2 * np.pi * freq * t)


def test_hann_window():
    w = atssnet.hann_window(4)
    np.testing.assert_allclose(w, [0.0, 0.5, 1.0, 0.5], atol=1e-12)


def test_stft_istft_round_trip():
    rng = np.random.default_rng(0)
    x = 0.2 * rng.standard_normal(48000)
    spec = atssnet.stft(x)
    assert spec.shape == (298, 257)
    back = atssnet.istft(spec, out_len=len(x))
    assert back.shape == x.shape
    interior = slice(400, len(x) - 400)
    assert np.max(np.abs(back[interior] - x[interior])) < 1e-6


def test_log_mel_fbank_and_vad():
    feat = atssnet.log_mel_fbank(tone(440.0))
    assert feat.shape == (98, 64)
    kept = atssnet.energy_vad(feat)
    assert len(kept) == 98  # a steady tone is always voiced


def test_mix_at_snr():
    speech = tone(300.0, amp=0.5)
    noise = tone(1000.0, amp=0.2)
    mixture, scaled, gain = atssnet.mix_at_snr(speech, noise, 10.0)
    assert gain > 0
    measured = 10 * np.log10(np.sum(speech**2) / np.sum(scaled**2))
    assert abs(measured - 10.0) < 0.01
    np.testing.assert_array_equal(mixture, speech + scaled)


def test_rms_normalize():
    y = atssnet.rms_normalize(tone(200.0), target_rms=0.05)
    assert abs(np.sqrt(np.mean(y**2)) - 0.05) < 1e-9
    with pytest.raises(ValueError):
        atssnet.rms_normalize(np.zeros(1000))


def test_sdr():
    ref = tone(250.0)
    assert atssnet.sdr(ref, ref) == 60.0
    assert atssnet.sdr(ref, 2.0 * ref) == 60.0
    noisy = ref + 0.01 * np.random.default_rng(1).standard_normal(len(ref))
    assert 20.0 < atssnet.sdr(ref, noisy) < 60.0


def test_wav_round_trip(tmp_path):
    path = str(tmp_path / "t.wav")
    x = tone(500.0, seconds=0.25)
    clipped = atssnet.write_wav(path, x)
    assert clipped == 0
    back, rate = atssnet.read_wav(path)
    assert rate == 16000
    assert np.max(np.abs(back - x)) <= 0.5 / 32768.0 + 1e-12


def test_separator_mask_shapes():
    sep = atssnet.Separator(n_blocks=1, n_heads=2, d_k=8, embed_dim=16,
                            freq_bins=257, seed=3)
    mag = np.abs(np.random.default_rng(2).standard_normal((40, 257))).astype(
        np.float32)
    emb = np.random.default_rng(3).standard_normal(16).astype(np.float32)
    mask = sep.mask(mag, emb)
    assert mask.shape == (40, 257)
    assert mask.min() > 0.0 and mask.max() < 1.0
    assert sep.parameter_count() > 0


def test_pit_masks():
    sep = atssnet.Separator(n_blocks=1, n_heads=2, d_k=8, embed_dim=16,
                            freq_bins=257, mode="pit", seed=4)
    mag = np.abs(np.random.default_rng(5).standard_normal((30, 257))).astype(
        np.float32)
    masks = sep.masks_pit(mag)
    assert len(masks) == 2
    for m in masks:
        assert m.shape == (30, 257)


def test_separate_end_to_end():
    embedder = atssnet.Embedder(embed_dim=16, n_speakers=2, seed=6)
    sep = atssnet.Separator(n_blocks=1, n_heads=2, d_k=8, embed_dim=16,
                            freq_bins=257, seed=7)
    mixture = tone(220.0, 3.0) + tone(1500.0, 3.0)
    reference = tone(220.0, 3.0)
    est = atssnet.separate(mixture, reference, embedder, sep)
    assert est.shape == mixture.shape
    # ones-mask bypass reproduces the mixture on the interior
    rt = atssnet.separate(mixture, reference, embedder, sep, ones_mask=True)
    interior = slice(400, len(mixture) - 400)
    assert np.max(np.abs(rt[interior] - mixture[interior])) < 1e-6


def test_embedder_embed():
    embedder = atssnet.Embedder(embed_dim=16, n_speakers=2, seed=8)
    e = embedder.embed(tone(180.0, 2.0))
    assert e.shape == (16,)
    e2 = embedder.embed(tone(180.0, 2.0))
    np.testing.assert_array_equal(e, e2)
