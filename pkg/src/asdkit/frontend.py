"""Waveform loading, log-mel extraction, patch decomposition and augmentations."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class FrontendParams:
    sample_rate: int = 16000
    clip_seconds: float = 10.0
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    n_mels: int = 128
    patch_size: int = 16
    padded_frames: int = 1024
    fmin: float = 0.0
    fmax: float | None = None  # None: Nyquist

    def validate(self) -> None:
        if self.frame_length <= self.frame_shift or self.frame_shift <= 0:
            raise ValueError("need frame_length > frame_shift > 0")
        if self.n_mels % self.patch_size != 0:
            raise ValueError("n_mels must be divisible by the patch size")
        if self.padded_frames % self.patch_size != 0:
            raise ValueError("padded_frames must be divisible by the patch size")
        if self.padded_frames < self.raw_frames:
            raise ValueError(f"padded_frames={self.padded_frames} < raw frame count {self.raw_frames}")

    @property
    def n_samples(self) -> int:
        return int(round(self.clip_seconds * self.sample_rate))

    @property
    def frame_length(self) -> int:
        return int(round(self.frame_length_ms * self.sample_rate / 1000.0))

    @property
    def frame_shift(self) -> int:
        return int(round(self.frame_shift_ms * self.sample_rate / 1000.0))

    @property
    def raw_frames(self) -> int:
        return (self.n_samples - self.frame_length) // self.frame_shift + 1

    @property
    def n_fft(self) -> int:
        return 1 << int(math.ceil(math.log2(self.frame_length)))

    @property
    def freq_patches(self) -> int:
        return self.n_mels // self.patch_size

    @property
    def time_patches(self) -> int:
        return self.padded_frames // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.freq_patches * self.time_patches

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size


def load_waveform(path: Path | str, params: FrontendParams) -> np.ndarray:
    """Load 16-bit mono PCM, scale to [-1, 1] and fix the length to n_samples."""
    sr, data = wavfile.read(path)
    if sr != params.sample_rate:
        raise ValueError(f"{path}: sample rate {sr} != expected {params.sample_rate}")
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.ndim} channels")
    if data.dtype != np.int16:
        raise ValueError(f"{path}: expected 16-bit PCM, got dtype {data.dtype}")
    x = data.astype(np.float32) / 32768.0
    n = params.n_samples
    if len(x) >= n:
        return x[:n]
    return np.pad(x, (0, n - len(x)))


def hz_to_mel(hz: np.ndarray | float) -> np.ndarray | float:
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel: np.ndarray | float) -> np.ndarray | float:
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(params: FrontendParams) -> np.ndarray:
    """Triangular filters, unit peak, evaluated on continuous rfft frequencies.

    Returns (n_mels, n_fft//2 + 1). Filter i spans [pts[i], pts[i+2]] in Hz with
    its peak at pts[i+1]; adjacent filters overlap so every frequency strictly
    inside (fmin, fmax) gets positive total weight.
    """
    fmax = params.fmax if params.fmax is not None else params.sample_rate / 2.0
    pts = mel_to_hz(np.linspace(hz_to_mel(params.fmin), hz_to_mel(fmax), params.n_mels + 2))
    freqs = np.fft.rfftfreq(params.n_fft, 1.0 / params.sample_rate)
    left = pts[:-2, None]
    center = pts[1:-1, None]
    right = pts[2:, None]
    rising = (freqs[None, :] - left) / np.maximum(center - left, 1e-12)
    falling = (right - freqs[None, :]) / np.maximum(right - center, 1e-12)
    return np.clip(np.minimum(rising, falling), 0.0, None)


def filter_centers(params: FrontendParams) -> np.ndarray:
    fmax = params.fmax if params.fmax is not None else params.sample_rate / 2.0
    pts = mel_to_hz(np.linspace(hz_to_mel(params.fmin), hz_to_mel(fmax), params.n_mels + 2))
    return np.asarray(pts[1:-1])


def logmel(waveform: np.ndarray, params: FrontendParams) -> np.ndarray:
    """Hann-windowed power STFT -> mel filterbank -> natural log, padded in time.

    Output is (n_mels, padded_frames) float32; padding frames carry the floored
    log energy of silence, log(1e-10).
    """
    if waveform.ndim != 1 or len(waveform) != params.n_samples:
        raise ValueError(f"waveform must have exactly {params.n_samples} samples")
    x = np.asarray(waveform, dtype=np.float64)
    fl, fs = params.frame_length, params.frame_shift
    n_frames = params.raw_frames
    idx = np.arange(fl)[None, :] + fs * np.arange(n_frames)[:, None]
    frames = x[idx]
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(fl) / fl)
    spectrum = np.fft.rfft(frames * window, n=params.n_fft, axis=1)
    power = np.abs(spectrum) ** 2
    mel = mel_filterbank(params) @ power.T
    out = np.log(np.maximum(mel, LOG_FLOOR)).astype(np.float32)
    pad = params.padded_frames - n_frames
    if pad:
        out = np.pad(out, ((0, 0), (0, pad)), constant_values=np.float32(np.log(LOG_FLOOR)))
    return out


def standardize(spec: np.ndarray) -> np.ndarray:
    """Per-clip zero mean, unit variance (guarded against silent clips)."""
    mu = float(spec.mean())
    sd = float(spec.std())
    return ((spec - mu) / max(sd, 1e-6)).astype(np.float32)


def extract_features(path: Path | str, params: FrontendParams, normalize: bool = True) -> np.ndarray:
    spec = logmel(load_waveform(path, params), params)
    return standardize(spec) if normalize else spec


def patchify(spec: np.ndarray, params: FrontendParams) -> np.ndarray:
    """(F, T) -> (P, patch_size^2), row-major over (freq patch, time patch)."""
    ps = params.patch_size
    f, t = spec.shape
    if (f, t) != (params.n_mels, params.padded_frames):
        raise ValueError(f"spectrogram shape {spec.shape} is not the padded "
                         f"({params.n_mels}, {params.padded_frames}) grid")
    fp, tp = f // ps, t // ps
    return (spec.reshape(fp, ps, tp, ps)
                .transpose(0, 2, 1, 3)
                .reshape(fp * tp, ps * ps))


def unpatchify(patches: np.ndarray, params: FrontendParams, n_frames: int | None = None) -> np.ndarray:
    ps = params.patch_size
    t = n_frames if n_frames is not None else params.padded_frames
    fp = params.freq_patches
    tp = t // ps
    if patches.shape != (fp * tp, ps * ps):
        raise ValueError(f"patch array shape {patches.shape} does not match ({fp * tp}, {ps * ps})")
    return (patches.reshape(fp, tp, ps, ps)
                   .transpose(0, 2, 1, 3)
                   .reshape(fp * ps, tp * ps))


def spec_augment(spec: np.ndarray, n_freq_masks: int, freq_mask_width: int,
                 n_time_masks: int, time_mask_width: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Mask contiguous rows/columns with the spectrogram mean.

    Each mask covers exactly the given width at a uniformly random offset;
    unmasked cells are untouched.
    """
    f, t = spec.shape
    if freq_mask_width > f or time_mask_width > t:
        raise ValueError("mask width exceeds spectrogram dimension")
    out = spec.copy()
    fill = spec.dtype.type(spec.mean())
    for _ in range(n_freq_masks):
        if freq_mask_width == 0:
            continue
        start = int(rng.integers(0, f - freq_mask_width + 1))
        out[start:start + freq_mask_width, :] = fill
    for _ in range(n_time_masks):
        if time_mask_width == 0:
            continue
        start = int(rng.integers(0, t - time_mask_width + 1))
        out[:, start:start + time_mask_width] = fill
    return out


def mixup(spec_a: np.ndarray, spec_b: np.ndarray, label_a: int, label_b: int,
          lam: float, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Convex combination of two spectrograms with a matching soft label."""
    if spec_a.shape != spec_b.shape:
        raise ValueError(f"shape mismatch {spec_a.shape} vs {spec_b.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if not (0 <= label_a < n_classes and 0 <= label_b < n_classes):
        raise ValueError("labels out of range")
    mixed = lam * spec_a + (1.0 - lam) * spec_b
    soft = np.zeros(n_classes, dtype=np.float64)
    soft[label_a] += lam
    soft[label_b] += 1.0 - lam
    return mixed, soft
