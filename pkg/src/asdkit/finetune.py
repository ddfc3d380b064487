"""Supervised adaptation: (machine, attribute) label space and ArcFace fine-tuning.

Attributed machines contribute their ground-truth attribute classes; machines
without attributes contribute pseudo-attribute classes from clustering, or a
single (machine, noAttr) class when pseudo labels are disabled. The classifier
head applies an additive angular margin on the true class and feeds a
cross-entropy loss; the encoder input is the mean-pooled patch embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .corpus import DatasetManifest
from .encoder import PatchTransformer, _trunc_normal_
from .errors import NumericalError
from .frontend import FrontendParams, extract_features, patchify, spec_augment
from .pseudolabel import PseudoLabeling

PSEUDO_ATTR_PREFIX = "pseudo"
NO_ATTR_TOKEN = "noAttr"


@dataclass(frozen=True)
class LabelSpace:
    classes: tuple[tuple[str, str], ...]       # ordered (machine, attribute) pairs
    class_of: Mapping[str, int]                # train clip path -> class index

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def index_of(self, machine: str, attribute: str) -> int:
        return self.classes.index((machine, attribute))


def build_label_space(manifest: DatasetManifest,
                      pseudo_labelings: Mapping[str, PseudoLabeling] | None = None,
                      no_pseudo: bool = False) -> LabelSpace:
    """Enumerate (machine, attribute) classes and map every train clip to one."""
    pseudo_labelings = pseudo_labelings or {}
    for machine in pseudo_labelings:
        if machine in manifest.attributed_machines:
            raise ValueError(f"machine {machine!r} has ground-truth attributes")

    classes: list[tuple[str, str]] = []
    class_of: dict[str, int] = {}
    for machine in sorted(manifest.machines):
        train = manifest.train_clips(machine)
        if machine in manifest.attributed_machines:
            attrs = sorted({c.attribute for c in train})
            for attr in attrs:
                if attr.startswith(PSEUDO_ATTR_PREFIX):
                    raise ValueError(
                        f"ground-truth attribute {attr!r} collides with the reserved "
                        f"{PSEUDO_ATTR_PREFIX!r} prefix")
            base = len(classes)
            classes.extend((machine, a) for a in attrs)
            for c in train:
                class_of[c.path] = base + attrs.index(c.attribute)
        elif no_pseudo:
            classes.append((machine, NO_ATTR_TOKEN))
            for c in train:
                class_of[c.path] = len(classes) - 1
        else:
            labeling = pseudo_labelings.get(machine)
            if labeling is None:
                raise ValueError(f"no pseudo labels for unattributed machine {machine!r}")
            base = len(classes)
            classes.extend((machine, f"{PSEUDO_ATTR_PREFIX}{i}") for i in range(labeling.k))
            for c in train:
                if c.path not in labeling.labels:
                    raise ValueError(f"pseudo labeling misses clip {c.path}")
                class_of[c.path] = base + labeling.labels[c.path]
    return LabelSpace(classes=tuple(classes), class_of=class_of)


class ArcFaceHead(nn.Module):
    """Cosine classifier with an additive angular margin on the true class."""

    def __init__(self, n_classes: int, dim: int, margin: float = 0.5, scale: float = 30.0,
                 seed: int = 0) -> None:
        super().__init__()
        if margin < 0:
            raise ValueError("margin must be >= 0")
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.margin = margin
        self.scale = scale
        self.weight = nn.Parameter(torch.zeros(n_classes, dim))
        _trunc_normal_(self.weight, 0.02, torch.Generator().manual_seed(seed))

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]


def arcface_logits(embedding: torch.Tensor, head: ArcFaceHead,
                   true_class: int | torch.Tensor | None = None) -> torch.Tensor:
    """Scaled cosine logits; with a true class, its angle gets the additive margin.

    Past the point where the margin would wrap (theta + m > pi) the standard
    monotone fallback s*(cos theta - m*sin m) is used.
    """
    squeeze = embedding.ndim == 1
    e = embedding.unsqueeze(0) if squeeze else embedding
    norms = e.norm(dim=-1)
    if bool((norms == 0).any()):
        raise ValueError("zero embedding cannot be angle-normalized")
    e_n = e / norms.unsqueeze(-1)
    w_n = head.weight / head.weight.norm(dim=-1, keepdim=True)
    cos = (e_n @ w_n.T).clamp(-1.0, 1.0)

    if true_class is not None:
        y = torch.as_tensor(true_class, dtype=torch.long, device=cos.device).reshape(-1)
        if y.shape[0] == 1 and cos.shape[0] > 1:
            y = y.expand(cos.shape[0])
        m = head.margin
        cos_y = cos.gather(1, y.unsqueeze(1)).squeeze(1)
        sin_y = torch.sqrt((1.0 - cos_y ** 2).clamp(min=0.0))
        with_margin = cos_y * math.cos(m) - sin_y * math.sin(m)
        fallback = cos_y - m * math.sin(m)
        phi = torch.where(cos_y > math.cos(math.pi - m), with_margin, fallback)
        cos = cos.scatter(1, y.unsqueeze(1), phi.unsqueeze(1))

    logits = head.scale * cos
    return logits[0] if squeeze else logits


def asd_loss(logits: torch.Tensor, soft_label: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of softmax(logits) against a soft (possibly two-hot) label."""
    if logits.shape != soft_label.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(soft_label.shape)}")
    sums = soft_label.sum(dim=-1)
    if not torch.allclose(sums, torch.ones_like(sums), atol=1e-5):
        raise ValueError("soft labels must sum to 1")
    log_probs = torch.log_softmax(logits, dim=-1)
    return -(soft_label * log_probs).sum(dim=-1).mean()


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 20
    batch_size: int = 32
    lr_peak: float = 5e-5
    warmup_steps: int = 120
    total_steps: int | None = None  # filled in by finetune_run
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
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

    def validate(self) -> None:
        if min(self.epochs, self.batch_size, self.warmup_steps) < 1:
            raise ValueError("epochs, batch_size and warmup_steps must be >= 1")
        if self.lr_peak <= 0:
            raise ValueError("lr_peak must be positive")
        if self.total_steps is not None and self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def lr_schedule(step: int, config: FinetuneConfig) -> float:
    """Linear 0 -> lr_peak over the warm-up, then cosine decay to 0 at total_steps."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step <= config.warmup_steps:
        return config.lr_peak * step / config.warmup_steps
    if config.total_steps is None:
        raise ValueError("total_steps must be set for the decay phase")
    if step >= config.total_steps:
        return 0.0
    frac = (step - config.warmup_steps) / (config.total_steps - config.warmup_steps)
    return config.lr_peak * 0.5 * (1.0 + math.cos(math.pi * frac))


def _soft_labels(labels: np.ndarray, partner: np.ndarray, lam: float, n_classes: int) -> np.ndarray:
    soft = np.zeros((len(labels), n_classes), dtype=np.float64)
    soft[np.arange(len(labels)), labels] += lam
    soft[np.arange(len(labels)), partner] += 1.0 - lam
    return soft


def finetune_run(manifest: DatasetManifest, label_space: LabelSpace,
                 encoder: PatchTransformer, fparams: FrontendParams,
                 config: FinetuneConfig, seed: int,
                 head: ArcFaceHead | None = None, normalize_features: bool = True,
                 ) -> tuple[PatchTransformer, ArcFaceHead, list[tuple[int, float, float, float]]]:
    """Fine-tune encoder + margin head on the attribute classes.

    Curve rows are (step, lr, loss, batch accuracy). Deterministic given seed.
    """
    config.validate()
    if head is None:
        head = ArcFaceHead(label_space.n_classes, encoder.config.dim,
                           margin=config.margin, scale=config.scale, seed=seed)
    if head.n_classes != label_space.n_classes:
        raise ValueError(f"head has {head.n_classes} classes, label space {label_space.n_classes}")

    clips = [c for c in manifest.train_clips() if c.path in label_space.class_of]
    if not clips:
        raise ValueError("label space covers no train clips of this manifest")
    specs = np.stack([
        extract_features(manifest.abspath(c), fparams, normalize_features) for c in clips
    ])
    labels = np.array([label_space.class_of[c.path] for c in clips], dtype=np.int64)

    n_clips = len(clips)
    steps_per_epoch = (n_clips + config.batch_size - 1) // config.batch_size
    if config.total_steps is None:
        config = replace(config, total_steps=config.epochs * steps_per_epoch)

    opt = torch.optim.AdamW(
        list(encoder.parameters()) + list(head.parameters()),
        lr=config.lr_peak, betas=config.betas, weight_decay=config.weight_decay)
    rng = np.random.default_rng(seed)

    curve: list[tuple[int, float, float, float]] = []
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n_clips)
        for b0 in range(0, n_clips, config.batch_size):
            idx = order[b0:b0 + config.batch_size]
            batch = specs[idx].copy()
            batch_labels = labels[idx]

            if config.spec_augment:
                for i in range(len(batch)):
                    batch[i] = spec_augment(batch[i], config.n_freq_masks, config.freq_mask_width,
                                            config.n_time_masks, config.time_mask_width, rng)
            if config.mixup:
                lam = float(rng.beta(config.mixup_alpha, config.mixup_alpha))
                partner = rng.permutation(len(batch))
                batch = lam * batch + (1.0 - lam) * batch[partner]
                partner_labels = batch_labels[partner]
                soft = _soft_labels(batch_labels, partner_labels, lam, label_space.n_classes)
                dominant = np.where(lam >= 0.5, batch_labels, partner_labels)
            else:
                soft = _soft_labels(batch_labels, batch_labels, 1.0, label_space.n_classes)
                dominant = batch_labels

            patches = torch.from_numpy(np.stack([patchify(s, fparams) for s in batch]))
            out = encoder(patches)
            pooled = out.cls_out if config.use_cls else out.z.mean(dim=1)
            dom = torch.from_numpy(dominant)
            logits = arcface_logits(pooled, head, dom)
            loss = asd_loss(logits, torch.from_numpy(soft).to(logits.dtype))
            if not torch.isfinite(loss):
                raise NumericalError("non-finite fine-tuning loss", step=step,
                                     batch=[clips[i].path for i in idx])

            lr = lr_schedule(step, config)
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()

            with torch.no_grad():
                eval_logits = arcface_logits(pooled.detach(), head)
                acc = float((eval_logits.argmax(dim=-1) == dom).float().mean())
            curve.append((step, lr, loss.item(), acc))
            step += 1

    return encoder, head, curve


def class_token(label_space: LabelSpace, index: int) -> str:
    machine, attr = label_space.classes[index]
    return f"{machine}/{attr}"


def head_state(head: ArcFaceHead) -> dict[str, np.ndarray]:
    return {
        "head.weight": head.weight.detach().cpu().numpy(),
        "head.margin": np.array([head.margin], dtype=np.float32),
        "head.scale": np.array([head.scale], dtype=np.float32),
    }


def head_from_state(params: Mapping[str, np.ndarray], dim: int) -> ArcFaceHead:
    weight = np.asarray(params["head.weight"])
    head = ArcFaceHead(weight.shape[0], dim,
                       margin=float(params["head.margin"][0]),
                       scale=float(params["head.scale"][0]))
    with torch.no_grad():
        head.weight.copy_(torch.from_numpy(weight))
    return head
