"""Dataset model, clip naming convention, manifest scanning and the synthetic corpus.

Layout convention: ``<root>/<machine>/<split>/<domain>_<condition>_<index:04d>[_<attr>].wav``
with split in {train, test}, domain in {source, target} and the condition token
"normal" or "anomaly". Train clips are always normal, and a machine either has
an attribute token on every train clip or on none (attributed vs unattributed
machines).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np
from scipy.io import wavfile

from .errors import CorpusError, ParseError

SPLITS = ("train", "test")
DOMAINS = ("source", "target")
CONDITIONS = ("normal", "anomalous")

# filename token <-> ClipMeta.condition
_CONDITION_TOKENS = {"normal": "normal", "anomaly": "anomalous"}
_TOKEN_OF_CONDITION = {v: k for k, v in _CONDITION_TOKENS.items()}

_ATTR_CHARS = frozenset("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789-")

MANIFEST_HEADER = ["path", "machine", "split", "domain", "condition", "index", "attribute"]
TRUTH_HEADER = ["path", "latent_attribute"]


class ParsedName(NamedTuple):
    domain: str
    condition: str
    index: int
    attribute: str | None


@dataclass(frozen=True)
class ClipMeta:
    """One audio clip; `path` is relative to the dataset root."""

    machine_type: str
    split: str
    domain: str
    condition: str
    index: int
    attribute: str | None
    path: str

    def key(self) -> tuple[str, str, str, str, int]:
        return (self.machine_type, self.split, self.domain, self.condition, self.index)


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    clips: tuple[ClipMeta, ...]
    machines: tuple[str, ...]
    attributed_machines: tuple[str, ...]
    unattributed_machines: tuple[str, ...]

    def clips_of(self, machine: str | None = None, split: str | None = None,
                 domain: str | None = None, condition: str | None = None) -> list[ClipMeta]:
        out = []
        for c in self.clips:
            if machine is not None and c.machine_type != machine:
                continue
            if split is not None and c.split != split:
                continue
            if domain is not None and c.domain != domain:
                continue
            if condition is not None and c.condition != condition:
                continue
            out.append(c)
        return out

    def train_clips(self, machine: str | None = None) -> list[ClipMeta]:
        return self.clips_of(machine=machine, split="train")

    def test_clips(self, machine: str | None = None) -> list[ClipMeta]:
        return self.clips_of(machine=machine, split="test")

    def abspath(self, clip: ClipMeta) -> Path:
        return self.root / clip.path


def parse_clip_name(filename: str) -> ParsedName:
    """Parse `<domain>_<condition>_<index>[_<attr>].wav`; raises ParseError with the offset."""
    pos = 0

    def take_until(sep: str, what: str) -> str:
        nonlocal pos
        idx = filename.find(sep, pos)
        if idx < 0:
            raise ParseError(f"expected '{sep}' after {what}", filename, len(filename))
        token = filename[pos:idx]
        pos = idx + 1
        return token

    domain = take_until("_", "domain")
    if domain not in DOMAINS:
        raise ParseError(f"unknown domain token {domain!r}", filename, 0)

    cond_start = pos
    cond_token = take_until("_", "condition")
    if cond_token not in _CONDITION_TOKENS:
        raise ParseError(f"unknown condition token {cond_token!r}", filename, cond_start)
    condition = _CONDITION_TOKENS[cond_token]

    digit_start = pos
    while pos < len(filename) and filename[pos].isdigit():
        pos += 1
    digits = filename[digit_start:pos]
    if len(digits) < 4:
        raise ParseError("expected a zero-padded index of at least 4 digits", filename, digit_start)
    if len(digits) > 4 and digits[0] == "0":
        raise ParseError("index longer than 4 digits must not be zero-padded", filename, digit_start)
    index = int(digits)

    attribute: str | None = None
    if pos < len(filename) and filename[pos] == "_":
        pos += 1
        attr_start = pos
        while pos < len(filename) and filename[pos] in _ATTR_CHARS:
            pos += 1
        attribute = filename[attr_start:pos]
        if not attribute:
            raise ParseError("empty attribute token", filename, attr_start)

    if filename[pos:] != ".wav":
        raise ParseError("expected '.wav' suffix", filename, pos)
    return ParsedName(domain, condition, index, attribute)


def format_clip_name(domain: str, condition: str, index: int, attribute: str | None = None) -> str:
    """Inverse of parse_clip_name for valid field values."""
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}")
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}")
    if index < 0:
        raise ValueError("index must be non-negative")
    if attribute is not None and (not attribute or not set(attribute) <= _ATTR_CHARS):
        raise ValueError(f"invalid attribute token {attribute!r}")
    name = f"{domain}_{_TOKEN_OF_CONDITION[condition]}_{index:04d}"
    if attribute is not None:
        name += f"_{attribute}"
    return name + ".wav"


def scan_dataset(root: Path | str) -> DatasetManifest:
    """Build a manifest from a corpus directory tree.

    Hard errors: unparseable filenames, anomalous train clips, machines whose
    train clips mix attributed and unattributed names, and empty datasets.
    """
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"dataset root {root} does not exist")

    clips: list[ClipMeta] = []
    machines: list[str] = []
    for machine_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        machine = machine_dir.name
        machine_clips: list[ClipMeta] = []
        for split in SPLITS:
            split_dir = machine_dir / split
            if not split_dir.is_dir():
                continue
            for wav in sorted(split_dir.glob("*.wav")):
                try:
                    parsed = parse_clip_name(wav.name)
                except ParseError as e:
                    raise CorpusError(f"unparseable clip filename {wav}: {e}") from e
                machine_clips.append(ClipMeta(
                    machine_type=machine,
                    split=split,
                    domain=parsed.domain,
                    condition=parsed.condition,
                    index=parsed.index,
                    attribute=parsed.attribute,
                    path=wav.relative_to(root).as_posix(),
                ))
        if not machine_clips:
            continue
        machines.append(machine)
        clips.extend(machine_clips)

    if not clips:
        raise CorpusError(f"no clips found under {root}")

    attributed: list[str] = []
    unattributed: list[str] = []
    for machine in machines:
        train = [c for c in clips if c.machine_type == machine and c.split == "train"]
        if not train:
            raise CorpusError(f"machine {machine!r} has no train clips")
        for c in train:
            if c.condition != "normal":
                raise CorpusError(f"train split contains an anomalous clip: {c.path}")
        with_attr = sum(1 for c in train if c.attribute is not None)
        if with_attr == len(train):
            attributed.append(machine)
        elif with_attr == 0:
            unattributed.append(machine)
        else:
            raise CorpusError(
                f"inconsistent attributes for machine {machine!r}: "
                f"{with_attr} of {len(train)} train clips carry an attribute token"
            )

    seen: set[tuple] = set()
    for c in clips:
        if c.key() in seen:
            raise CorpusError(f"duplicate clip identity {c.key()}")
        seen.add(c.key())

    return DatasetManifest(
        root=root,
        clips=tuple(sorted(clips, key=lambda c: c.path)),
        machines=tuple(machines),
        attributed_machines=tuple(attributed),
        unattributed_machines=tuple(unattributed),
    )


def write_manifest_csv(manifest: DatasetManifest, path: Path | str) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(MANIFEST_HEADER)
        for c in manifest.clips:
            w.writerow([c.path, c.machine_type, c.split, c.domain, c.condition,
                        c.index, c.attribute or ""])


def read_manifest_csv(path: Path | str, root: Path | str) -> DatasetManifest:
    clips: list[ClipMeta] = []
    with Path(path).open(newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise CorpusError(f"bad manifest header in {path}: {header}")
        for row in reader:
            rel, machine, split, domain, condition, index, attribute = row
            clips.append(ClipMeta(machine, split, domain, condition, int(index),
                                  attribute or None, rel))
    machines = sorted({c.machine_type for c in clips})
    attributed = []
    unattributed = []
    for m in machines:
        train = [c for c in clips if c.machine_type == m and c.split == "train"]
        if train and all(c.attribute is not None for c in train):
            attributed.append(m)
        else:
            unattributed.append(m)
    return DatasetManifest(Path(root), tuple(sorted(clips, key=lambda c: c.path)),
                           tuple(machines), tuple(attributed), tuple(unattributed))


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Shape of a generated corpus.

    `clips_per_attr_test` counts both conditions (half normal, half anomalous)
    and must therefore be even. `target_fraction` governs the train split; the
    test split is divided evenly between domains so that every machine/domain
    cell has equal normal and anomalous counts.
    """

    n_machines: int = 4
    attrs_per_machine: int = 3
    clips_per_attr_train: int = 12
    clips_per_attr_test: int = 8
    unattributed_machines: int = field(default=-1)  # -1: half of n_machines
    sample_rate: int = 16000
    clip_seconds: float = 2.0
    seed: int = 0
    target_fraction: float = 0.1

    def validate(self) -> None:
        if min(self.n_machines, self.attrs_per_machine,
               self.clips_per_attr_train, self.clips_per_attr_test) < 1:
            raise ValueError("all counts must be >= 1")
        if self.clips_per_attr_test % 2 != 0:
            raise ValueError("clips_per_attr_test must be even (half normal, half anomalous)")
        if not 0.0 <= self.target_fraction <= 1.0:
            raise ValueError("target_fraction must lie in [0, 1]")
        if self.sample_rate <= 0 or self.clip_seconds <= 0:
            raise ValueError("sample_rate and clip_seconds must be positive")
        if self.n_unattributed > self.n_machines:
            raise ValueError("unattributed_machines exceeds n_machines")

    @property
    def n_unattributed(self) -> int:
        return self.n_machines // 2 if self.unattributed_machines < 0 else self.unattributed_machines

    @property
    def n_samples(self) -> int:
        return int(round(self.clip_seconds * self.sample_rate))


# Tone/noise levels; picked so that attribute clusters are separable from the
# embeddings of a trained encoder but not trivially separable from raw features.
_TONE_RMS = 0.055
_NOISE_RMS = 0.16
_N_HARMONICS = 6
_BASE_F0 = 130.0
_MACHINE_F0_STEP = 90.0
_ATTR_F0_STEP = 55.0


def _machine_profile(spec: SynthSpec, m: int) -> dict:
    rng = np.random.default_rng([spec.seed, 1000 + m])
    decay = 0.55 + 0.1 * (m % 4)
    amps = np.array([decay ** h for h in range(_N_HARMONICS)], dtype=np.float64)
    amps *= rng.uniform(0.7, 1.3, size=_N_HARMONICS)
    # band wide enough to bury the whole tone stack of this machine
    lo = 80.0 + 40.0 * m
    hi = min(4000.0 + 500.0 * m, spec.sample_rate / 2 - 500.0)
    return {"amps": amps, "noise_lo": lo, "noise_hi": hi}


def _band_noise(rng: np.random.Generator, n: int, sr: int, lo: float, hi: float) -> np.ndarray:
    white = rng.standard_normal(n)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    ramp = 200.0
    gain = np.clip((freqs - (lo - ramp)) / ramp, 0.0, 1.0)
    gain *= np.clip(((hi + ramp) - freqs) / ramp, 0.0, 1.0)
    shaped = np.fft.irfft(spectrum * gain, n=n)
    rms = np.sqrt(np.mean(shaped ** 2))
    return shaped / max(rms, 1e-12)


# +1.5 dB/octave: amplitude gain (f/1kHz)^0.25; steeper tilts swamp the
# attribute structure at this corpus scale
_TILT_EXPONENT = 0.25


def _spectral_tilt(x: np.ndarray, sr: int) -> np.ndarray:
    """Fixed spectral tilt relative to 1 kHz (target-domain shift)."""
    spectrum = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(len(x), 1.0 / sr)
    gain = (np.maximum(freqs, 20.0) / 1000.0) ** _TILT_EXPONENT
    return np.fft.irfft(spectrum * gain, n=len(x))


def _render_clip(rng: np.random.Generator, spec: SynthSpec, profile: dict,
                 f0: float, anomalous: bool, target_domain: bool) -> np.ndarray:
    n = spec.n_samples
    sr = spec.sample_rate
    t = np.arange(n, dtype=np.float64) / sr

    f = f0 * (1.0 + rng.uniform(-0.004, 0.004))
    amps = profile["amps"] * rng.uniform(0.85, 1.15, size=_N_HARMONICS)
    tone = np.zeros(n)
    for h in range(_N_HARMONICS):
        tone += amps[h] * np.sin(2 * np.pi * f * (h + 1) * t + rng.uniform(0, 2 * np.pi))
    tone *= _TONE_RMS / max(np.sqrt(np.mean(tone ** 2)), 1e-12)

    if anomalous:
        # harmonic distortion: memoryless polynomial on the tonal part
        scaled = tone / _TONE_RMS
        tone = tone + _TONE_RMS * (0.45 * scaled ** 2 + 0.35 * scaled ** 3)
        tone -= tone.mean()

    noise = _NOISE_RMS * _band_noise(rng, n, sr, profile["noise_lo"], profile["noise_hi"])
    x = tone + noise

    if anomalous:
        n_bursts = int(rng.integers(4, 9))
        for _ in range(n_bursts):
            width = int(rng.uniform(0.003, 0.015) * sr)
            start = int(rng.integers(0, max(n - width, 1)))
            env = np.exp(-np.linspace(0.0, 5.0, width))
            x[start:start + width] += rng.uniform(0.25, 0.5) * env * rng.standard_normal(width)

    if target_domain:
        x = _spectral_tilt(x, sr)

    peak = np.max(np.abs(x))
    if peak > 0.95:
        x = x * (0.95 / peak)
    return x


def _write_wav(path: Path, x: np.ndarray, sr: int) -> None:
    pcm = np.round(np.clip(x, -1.0, 1.0) * 32767.0).astype("<i2")
    wavfile.write(path, sr, pcm)


def _train_domains(spec: SynthSpec) -> list[str]:
    n_target = int(round(spec.clips_per_attr_train * spec.target_fraction))
    n_target = min(n_target, spec.clips_per_attr_train)
    return ["source"] * (spec.clips_per_attr_train - n_target) + ["target"] * n_target


def _test_domains(spec: SynthSpec) -> list[str]:
    group = spec.clips_per_attr_test // 2  # per condition
    n_target = int(round(group * 0.5))
    return ["source"] * (group - n_target) + ["target"] * n_target


def synth_corpus(spec: SynthSpec, root: Path | str, truth_csv: Path | str) -> DatasetManifest:
    """Generate a deterministic corpus under `root`.

    Every machine is a band-limited noise bed plus a tone stack; each latent
    attribute shifts the fundamental. Anomalous test clips add harmonic
    distortion and transient bursts; target-domain clips get a fixed spectral
    tilt. The hidden `truth_csv` maps every clip of unattributed machines to
    its latent attribute (for purity scoring only; keep it outside `root`).
    """
    spec.validate()
    root = Path(root)
    truth_csv = Path(truth_csv)
    if truth_csv.resolve().is_relative_to(root.resolve()):
        raise ValueError("truth_csv must live outside the corpus tree")
    root.mkdir(parents=True, exist_ok=True)

    truth_rows: list[tuple[str, str]] = []
    n_attributed = spec.n_machines - spec.n_unattributed

    for m in range(spec.n_machines):
        machine = f"machine{m:02d}"
        has_attrs = m < n_attributed
        profile = _machine_profile(spec, m)
        counters: dict[tuple[str, str, str], int] = {}

        for split in SPLITS:
            (root / machine / split).mkdir(parents=True, exist_ok=True)

        for k in range(spec.attrs_per_machine):
            f0 = _BASE_F0 + _MACHINE_F0_STEP * m + _ATTR_F0_STEP * k
            attr_token = f"hz{int(round(f0))}"

            plan: list[tuple[str, str, str, int]] = []  # split, domain, condition, j
            for j, domain in enumerate(_train_domains(spec)):
                plan.append(("train", domain, "normal", j))
            test_domains = _test_domains(spec)
            for condition in CONDITIONS:
                for j, domain in enumerate(test_domains):
                    plan.append(("test", domain, condition, j))

            for split, domain, condition, j in plan:
                key = (split, domain, condition)
                counters[key] = counters.get(key, 0) + 1
                index = counters[key]
                rng = np.random.default_rng(
                    [spec.seed, m, k, SPLITS.index(split), DOMAINS.index(domain),
                     CONDITIONS.index(condition), j])
                x = _render_clip(rng, spec, profile, f0,
                                 anomalous=(condition == "anomalous"),
                                 target_domain=(domain == "target"))
                name = format_clip_name(domain, condition, index,
                                        attr_token if has_attrs else None)
                rel = f"{machine}/{split}/{name}"
                _write_wav(root / rel, x, spec.sample_rate)
                if not has_attrs:
                    truth_rows.append((rel, attr_token))

    truth_csv.parent.mkdir(parents=True, exist_ok=True)
    with truth_csv.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(TRUTH_HEADER)
        w.writerows(sorted(truth_rows))

    return scan_dataset(root)


def read_truth_csv(path: Path | str) -> dict[str, str]:
    out: dict[str, str] = {}
    with Path(path).open(newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != TRUTH_HEADER:
            raise CorpusError(f"bad truth table header in {path}: {header}")
        for rel, attr in reader:
            out[rel] = attr
    return out


def machines_of(clips: Iterable[ClipMeta]) -> list[str]:
    return sorted({c.machine_type for c in clips})
