"""Pipeline configuration: INI-style files, dotted overrides and a config hash.

Format: `[section]` headers and `key = value` lines; `#` starts a comment.
Overrides use `section.key=value`. The hash stamps every artifact so stages
can refuse inputs produced under a different configuration.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, get_args, get_origin

from .errors import ConfigError


@dataclass(frozen=True)
class DataSection:
    # dataset roots; pre-training pools all of them, later stages use the first
    roots: tuple[str, ...] = ()


@dataclass(frozen=True)
class SynthSection:
    n_machines: int = 4
    attrs_per_machine: int = 3
    clips_per_attr_train: int = 12
    clips_per_attr_test: int = 8
    unattributed_machines: int = -1
    sample_rate: int = 16000
    clip_seconds: float = 2.0
    target_fraction: float = 0.1


@dataclass(frozen=True)
class FrontendSection:
    sample_rate: int = 16000
    clip_seconds: float = 10.0
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    n_mels: int = 128
    patch_size: int = 16
    padded_frames: int = 1024
    standardize: bool = True


@dataclass(frozen=True)
class EncoderSection:
    depth: int = 4
    dim: int = 128
    heads: int = 4
    mlp_ratio: int = 4


@dataclass(frozen=True)
class PretrainSection:
    mask_ratio: float = 0.8
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    ema_start: float = 0.998
    ema_end: float = 0.9999
    decoder_depth: int = 1
    normalize_teacher_targets: bool = True


@dataclass(frozen=True)
class ClusterSection:
    policy: str = "silhouette:2:8"
    l2_normalize: bool = True
    backend: str = "auto"


@dataclass(frozen=True)
class FinetuneSection:
    epochs: int = 20
    batch_size: int = 32
    lr_peak: float = 5e-5
    warmup_steps: int = 120
    weight_decay: float = 0.01
    margin: float = 0.5
    scale: float = 30.0
    mixup: bool = True
    mixup_alpha: float = 0.5
    spec_augment: bool = True
    n_freq_masks: int = 2
    freq_mask_width: int = 8
    n_time_masks: int = 2
    time_mask_width: int = 16
    use_cls: bool = False


@dataclass(frozen=True)
class BackendSection:
    k: int = 1
    per_domain_min: bool = False


@dataclass(frozen=True)
class MetricsSection:
    pauc_p: float = 0.1
    dev_machines: tuple[str, ...] = ()
    eval_machines: tuple[str, ...] = ()


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    output_dir: str = "out"


@dataclass(frozen=True)
class PipelineConfig:
    data: DataSection = field(default_factory=DataSection)
    synth: SynthSection = field(default_factory=SynthSection)
    frontend: FrontendSection = field(default_factory=FrontendSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    cluster: ClusterSection = field(default_factory=ClusterSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    backend: BackendSection = field(default_factory=BackendSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    run: RunSection = field(default_factory=RunSection)


_SECTION_FIELDS = {f.name: f.type for f in fields(PipelineConfig)}


def _convert(raw: str, annotation: Any, where: str) -> Any:
    text = raw.strip()
    if annotation in (int, "int"):
        try:
            return int(text)
        except ValueError as e:
            raise ConfigError(f"{where}: expected an integer, got {text!r}") from e
    if annotation in (float, "float"):
        try:
            return float(text)
        except ValueError as e:
            raise ConfigError(f"{where}: expected a number, got {text!r}") from e
    if annotation in (bool, "bool"):
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {text!r}")
    if annotation in (str, "str"):
        return text
    origin = get_origin(annotation) if not isinstance(annotation, str) else tuple
    if origin is tuple or (isinstance(annotation, str) and annotation.startswith("tuple")):
        if not text:
            return ()
        return tuple(part.strip() for part in text.split(",") if part.strip())
    raise ConfigError(f"{where}: unsupported field type {annotation!r}")


def _set_value(config: PipelineConfig, section: str, key: str, raw: str,
               where: str) -> PipelineConfig:
    if section not in _SECTION_FIELDS:
        raise ConfigError(f"{where}: unknown section [{section}]")
    section_obj = getattr(config, section)
    section_fields = {f.name: f for f in fields(section_obj)}
    if key not in section_fields:
        raise ConfigError(f"{where}: unknown key {key!r} in section [{section}]")
    value = _convert(raw, section_fields[key].type, where)
    return replace(config, **{section: replace(section_obj, **{key: value})})


def parse_config(path: Path | str) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    config = PipelineConfig()
    section: str | None = None
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        where = f"{path}:{lineno}"
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if text.startswith("[") and text.endswith("]"):
            section = text[1:-1].strip()
            if section not in _SECTION_FIELDS:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in text:
            raise ConfigError(f"{where}: expected 'key = value', got {line.strip()!r}")
        if section is None:
            raise ConfigError(f"{where}: key outside of any [section]")
        key, raw = (part.strip() for part in text.split("=", 1))
        config = _set_value(config, section, key, raw, where)
    return config


def apply_overrides(config: PipelineConfig, overrides: list[str]) -> PipelineConfig:
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        config = _set_value(config, section.strip(), key.strip(), raw, f"--set {item}")
    return config


# the output location does not affect results, so it stays out of the hash
_UNHASHED = {"run.output_dir"}


def canonical_text(config: PipelineConfig) -> str:
    lines = []
    for section_field in fields(config):
        section_obj = getattr(config, section_field.name)
        for f in fields(section_obj):
            if f"{section_field.name}.{f.name}" in _UNHASHED:
                continue
            value = getattr(section_obj, f.name)
            if isinstance(value, tuple):
                rendered = ",".join(str(v) for v in value)
            else:
                rendered = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{section_field.name}.{f.name}={rendered}")
    return "\n".join(sorted(lines))


def config_hash(config: PipelineConfig) -> str:
    return hashlib.sha256(canonical_text(config).encode("utf-8")).hexdigest()[:12]


def stamp_of(config: PipelineConfig) -> str:
    return f"config_hash={config_hash(config)} seed={config.run.seed}"
