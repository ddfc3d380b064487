from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import wavfile

from asdkit.frontend import (LOG_FLOOR, FrontendParams, filter_centers, load_waveform,
                             logmel, mel_filterbank, mixup, patchify, spec_augment,
                             standardize, unpatchify)

FULL = FrontendParams()  # 10 s defaults


def _write(path, sr, samples):
    wavfile.write(path, sr, np.asarray(samples, dtype=np.int16))


class TestParams:
    def test_derived_counts_at_paper_scale(self):
        FULL.validate()
        assert FULL.n_samples == 160000
        assert FULL.frame_length == 400 and FULL.frame_shift == 160
        assert FULL.raw_frames == (160000 - 400) // 160 + 1 == 998
        assert FULL.n_patches == (128 // 16) * (1024 // 16) == 512

    def test_padding_must_cover_raw_frames(self):
        with pytest.raises(ValueError, match="padded_frames"):
            FrontendParams(padded_frames=976).validate()


class TestLoadWaveform:
    def test_truncates_long_clips(self, tmp_path):
        sr = 16000
        params = FrontendParams(clip_seconds=1.0, n_mels=32, padded_frames=112)
        _write(tmp_path / "long.wav", sr, np.arange(int(1.2 * sr)) % 1000)
        x = load_waveform(tmp_path / "long.wav", params)
        assert len(x) == sr
        assert x[0] == 0 and x[-1] == ((sr - 1) % 1000) / 32768.0

    def test_pads_short_clips(self, tmp_path):
        sr = 16000
        params = FrontendParams(clip_seconds=1.0, n_mels=32, padded_frames=112)
        _write(tmp_path / "short.wav", sr, 100 * np.ones(int(0.8 * sr)))
        x = load_waveform(tmp_path / "short.wav", params)
        assert len(x) == sr
        assert np.all(x[: int(0.8 * sr)] == 100 / 32768.0)
        assert np.all(x[int(0.8 * sr):] == 0.0)

    def test_exact_length_is_identity(self, tmp_path):
        sr = 16000
        params = FrontendParams(clip_seconds=1.0, n_mels=32, padded_frames=112)
        samples = (np.arange(sr) % 251) - 125
        _write(tmp_path / "exact.wav", sr, samples)
        x = load_waveform(tmp_path / "exact.wav", params)
        assert np.array_equal(x, samples.astype(np.float32) / 32768.0)

    def test_wrong_sample_rate_rejected(self, tmp_path):
        _write(tmp_path / "bad.wav", 8000, np.zeros(8000))
        with pytest.raises(ValueError, match="sample rate"):
            load_waveform(tmp_path / "bad.wav", FrontendParams(clip_seconds=1.0, n_mels=32,
                                                               padded_frames=112))

    def test_stereo_rejected(self, tmp_path):
        wavfile.write(tmp_path / "stereo.wav", 16000, np.zeros((100, 2), dtype=np.int16))
        with pytest.raises(ValueError, match="mono"):
            load_waveform(tmp_path / "stereo.wav", FrontendParams(clip_seconds=1.0, n_mels=32,
                                                                  padded_frames=112))


class TestMelFilterbank:
    def test_filters_non_negative(self, tiny_fparams):
        fb = mel_filterbank(tiny_fparams)
        assert fb.shape == (tiny_fparams.n_mels, tiny_fparams.n_fft // 2 + 1)
        assert np.all(fb >= 0)

    def test_coverage_inside_band(self, tiny_fparams):
        fb = mel_filterbank(tiny_fparams)
        freqs = np.fft.rfftfreq(tiny_fparams.n_fft, 1.0 / tiny_fparams.sample_rate)
        fmax = tiny_fparams.sample_rate / 2.0
        inside = (freqs > tiny_fparams.fmin) & (freqs < fmax)
        assert np.all(fb[:, inside].sum(axis=0) > 0)


class TestLogmel:
    def test_silence_hits_the_floor(self, tiny_fparams):
        spec = logmel(np.zeros(tiny_fparams.n_samples, dtype=np.float32), tiny_fparams)
        assert spec.shape == (tiny_fparams.n_mels, tiny_fparams.padded_frames)
        assert np.all(spec == np.float32(np.log(LOG_FLOOR)))

    def test_pure_tone_peaks_at_nearest_filter(self, tiny_fparams):
        sr = tiny_fparams.sample_rate
        t = np.arange(tiny_fparams.n_samples) / sr
        tone = 0.5 * np.sin(2 * np.pi * 1000.0 * t)
        spec = logmel(tone.astype(np.float32), tiny_fparams)
        energy = spec[:, : tiny_fparams.raw_frames].mean(axis=1)
        expected_bin = int(np.argmin(np.abs(filter_centers(tiny_fparams) - 1000.0)))
        assert int(np.argmax(energy)) == expected_bin

    def test_padded_region_is_floor_valued(self, tiny_fparams):
        rng = np.random.default_rng(0)
        spec = logmel(rng.uniform(-0.5, 0.5, tiny_fparams.n_samples).astype(np.float32),
                      tiny_fparams)
        padded = spec[:, tiny_fparams.raw_frames:]
        assert np.all(padded == np.float32(np.log(LOG_FLOOR)))

    def test_wrong_length_rejected(self, tiny_fparams):
        with pytest.raises(ValueError, match="samples"):
            logmel(np.zeros(100, dtype=np.float32), tiny_fparams)

    def test_standardize_zero_mean_unit_var(self, tiny_fparams, rng):
        spec = logmel(rng.uniform(-0.5, 0.5, tiny_fparams.n_samples).astype(np.float32),
                      tiny_fparams)
        z = standardize(spec)
        assert abs(float(z.mean())) < 1e-4
        assert abs(float(z.std()) - 1.0) < 1e-3


class TestPatchify:
    def test_patch_count_at_paper_scale(self):
        spec = np.zeros((128, 1024), dtype=np.float32)
        assert patchify(spec, FULL).shape == (512, 256)

    def test_round_trip_is_identity(self, tiny_fparams, rng):
        spec = rng.normal(size=(tiny_fparams.n_mels, tiny_fparams.padded_frames)).astype(np.float32)
        patches = patchify(spec, tiny_fparams)
        assert patches.shape == (tiny_fparams.n_patches, tiny_fparams.patch_dim)
        assert np.array_equal(unpatchify(patches, tiny_fparams), spec)

    def test_unpadded_input_rejected(self):
        with pytest.raises(ValueError, match="padded"):
            patchify(np.zeros((128, 1008), dtype=np.float32), FULL)


class TestSpecAugment:
    def test_zero_masks_is_identity(self, rng):
        spec = rng.normal(size=(32, 40)).astype(np.float32)
        out = spec_augment(spec, 0, 8, 0, 8, rng)
        assert np.array_equal(out, spec)

    def test_single_freq_mask_width(self, rng):
        spec = rng.normal(size=(32, 40)).astype(np.float32)
        out = spec_augment(spec, 1, 8, 0, 0, rng)
        fill = np.float32(spec.mean())
        masked_rows = np.nonzero(np.all(out == fill, axis=1))[0]
        assert len(masked_rows) == 8
        assert np.array_equal(masked_rows, np.arange(masked_rows[0], masked_rows[0] + 8))
        keep = np.ones(32, dtype=bool)
        keep[masked_rows] = False
        assert np.array_equal(out[keep], spec[keep])

    def test_deterministic_given_rng(self):
        spec = np.random.default_rng(3).normal(size=(32, 40)).astype(np.float32)
        a = spec_augment(spec, 2, 4, 2, 6, np.random.default_rng(11))
        b = spec_augment(spec, 2, 4, 2, 6, np.random.default_rng(11))
        assert np.array_equal(a, b)

    def test_width_larger_than_axis_rejected(self, rng):
        with pytest.raises(ValueError, match="width"):
            spec_augment(np.zeros((8, 8), dtype=np.float32), 1, 9, 0, 0, rng)


class TestMixup:
    def test_lambda_one_returns_first(self, rng):
        a = rng.normal(size=(4, 4))
        b = rng.normal(size=(4, 4))
        mixed, soft = mixup(a, b, 0, 1, 1.0, n_classes=3)
        assert np.array_equal(mixed, a)
        assert np.array_equal(soft, [1.0, 0.0, 0.0])

    def test_constant_spectrograms(self):
        a = np.full((2, 2), 1.0)
        b = np.full((2, 2), 2.0)
        mixed, soft = mixup(a, b, 0, 1, 0.3, n_classes=2)
        assert np.allclose(mixed, 0.3 * 1.0 + 0.7 * 2.0)
        assert np.allclose(soft, [0.3, 0.7])

    def test_same_class_mass_sums_to_one(self, rng):
        a = rng.normal(size=(3, 3))
        mixed, soft = mixup(a, a, 2, 2, 0.5, n_classes=4)
        assert np.array_equal(mixed, a)
        assert soft[2] == 1.0 and soft.sum() == 1.0

    @given(lam=st.floats(min_value=0.0, max_value=1.0))
    @settings(max_examples=50, deadline=None)
    def test_affine_symmetry(self, lam):
        gen = np.random.default_rng(5)
        a = gen.normal(size=(4, 6))
        b = gen.normal(size=(4, 6))
        ab, _ = mixup(a, b, 0, 1, lam, n_classes=2)
        ba, _ = mixup(b, a, 0, 1, lam, n_classes=2)
        assert np.allclose(ab + ba, a + b, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            mixup(np.zeros((2, 2)), np.zeros((3, 3)), 0, 1, 0.5, n_classes=2)
