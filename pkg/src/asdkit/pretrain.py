"""Self-supervised pre-training of the patch encoder.

A student encoder sees a masked patch sequence, a light decoder reconstructs
embeddings at every position, and a teacher (EMA copy of the student encoder)
provides layer-averaged targets. The objective sums a masked frame
reconstruction error and an utterance-level CLS-to-global-target error.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import ClipMeta, DatasetManifest
from .encoder import Block, EncoderConfig, PatchEmbeddings, PatchTransformer, init_module, init_params
from .errors import NumericalError
from .frontend import FrontendParams, extract_features, patchify


@dataclass(frozen=True)
class PretrainConfig:
    mask_ratio: float = 0.8
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    ema_start: float = 0.998
    ema_end: float = 0.9999
    decoder_depth: int = 1
    normalize_teacher_targets: bool = True

    def validate(self) -> None:
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie strictly between 0 and 1")
        if not (0.0 <= self.ema_start <= 1.0 and 0.0 <= self.ema_end <= 1.0):
            raise ValueError("EMA decay must lie in [0, 1]")
        if min(self.epochs, self.batch_size, self.decoder_depth) < 1:
            raise ValueError("epochs, batch_size and decoder_depth must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


class ReconstructionDecoder(nn.Module):
    """Re-inserts a learned mask token at masked positions and refines the grid."""

    def __init__(self, dim: int, n_patches: int, depth: int = 1,
                 heads: int = 4, mlp_ratio: int = 4) -> None:
        super().__init__()
        self.n_patches = n_patches
        self.mask_token = nn.Parameter(torch.zeros(dim))
        self.pos_embed = nn.Parameter(torch.zeros(n_patches, dim))
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, dim)

    def forward(self, visible_tokens: torch.Tensor, visible: torch.Tensor | None) -> torch.Tensor:
        squeeze = visible_tokens.ndim == 2
        if squeeze:
            visible_tokens = visible_tokens.unsqueeze(0)
            visible = None if visible is None else visible.unsqueeze(0)
        b, _, d = visible_tokens.shape
        if visible is None:
            x = visible_tokens
        else:
            x = self.mask_token.expand(b, self.n_patches, d).clone()
            x = x.scatter(1, visible.unsqueeze(-1).expand(-1, -1, d), visible_tokens)
        x = x + self.pos_embed
        for block in self.blocks:
            x = block(x)
        out = self.head(self.norm(x))
        return out[0] if squeeze else out


@dataclass
class StudentTeacherState:
    student: PatchTransformer
    decoder: ReconstructionDecoder
    teacher: PatchTransformer
    step: int = 0


def build_pretrain_state(enc_config: EncoderConfig, config: PretrainConfig, seed: int) -> StudentTeacherState:
    config.validate()
    student = init_params(enc_config, seed)
    decoder = ReconstructionDecoder(enc_config.dim, enc_config.n_patches,
                                    depth=config.decoder_depth, heads=enc_config.heads,
                                    mlp_ratio=enc_config.mlp_ratio)
    init_module(decoder, torch.Generator().manual_seed(seed + 1))
    teacher = copy.deepcopy(student)
    teacher.requires_grad_(False)
    return StudentTeacherState(student=student, decoder=decoder, teacher=teacher)


def make_mask(n_patches: int, mask_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices of round(P * ratio) patches, sampled without replacement."""
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError("mask_ratio must lie strictly between 0 and 1")
    count = int(round(n_patches * mask_ratio))
    return np.sort(rng.choice(n_patches, size=count, replace=False)).astype(np.int64)


def student_forward(patches: torch.Tensor, mask: np.ndarray | torch.Tensor | None,
                    student: PatchTransformer, decoder: ReconstructionDecoder
                    ) -> tuple[torch.Tensor, torch.Tensor]:
    """Masked encode + decode; returns the full reconstruction grid and the CLS output."""
    out: PatchEmbeddings = student(patches, mask=mask if mask is not None and len(mask) else None)
    x_o = decoder(out.z, out.visible)
    return x_o, out.cls_out


def teacher_forward(patches: torch.Tensor, teacher: PatchTransformer,
                    normalize_targets: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Layer-averaged patch targets and their patch-mean global target (no gradients)."""
    with torch.no_grad():
        out = teacher(patches)
        layers = out.per_layer
        if normalize_targets:
            layers = F.layer_norm(layers, (layers.shape[-1],))
        y_o = layers.mean(dim=0)
        y = y_o.mean(dim=-2)
    return y_o, y


def ufo_loss(x_o: torch.Tensor, y_o: torch.Tensor, c: torch.Tensor, y: torch.Tensor,
             mask: np.ndarray | torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Masked frame MSE plus utterance MSE; returns (frame, utterance, total)."""
    if x_o.shape != y_o.shape:
        raise ValueError(f"shape mismatch: {tuple(x_o.shape)} vs {tuple(y_o.shape)}")
    if c.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(c.shape)} vs {tuple(y.shape)}")
    m = torch.as_tensor(np.asarray(mask), dtype=torch.long, device=x_o.device)
    if m.numel() == 0:
        loss_f = x_o.new_zeros(())
    else:
        if x_o.ndim == 3 and m.ndim == 1:
            m = m.unsqueeze(0).expand(x_o.shape[0], -1)
        idx = m.unsqueeze(-1).expand(*m.shape, x_o.shape[-1])
        diff = torch.gather(x_o, -2, idx) - torch.gather(y_o, -2, idx)
        loss_f = (diff ** 2).mean()
    loss_u = ((c - y) ** 2).mean()
    return loss_f, loss_u, loss_f + loss_u


def ema_update(teacher: nn.Module, student: nn.Module, tau: float) -> None:
    """theta_t <- tau * theta_t + (1 - tau) * theta_s, parameter by parameter."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ValueError("teacher and student parameter sets differ")
    with torch.no_grad():
        for name, p_t in t_params.items():
            p_s = s_params[name]
            if p_t.shape != p_s.shape:
                raise ValueError(f"shape mismatch for {name}: {tuple(p_t.shape)} vs {tuple(p_s.shape)}")
            p_t.mul_(tau).add_(p_s, alpha=1.0 - tau)


def ema_schedule(step: int, total_steps: int, start: float, end: float) -> float:
    if total_steps <= 1:
        return end
    frac = min(step / (total_steps - 1), 1.0)
    return start + (end - start) * frac


def load_patch_features(clips: Sequence[ClipMeta], manifest: DatasetManifest,
                        fparams: FrontendParams, normalize: bool = True) -> np.ndarray:
    feats = [patchify(extract_features(manifest.abspath(c), fparams, normalize), fparams)
             for c in clips]
    return np.stack(feats).astype(np.float32)


def pretrain_run(manifests: Sequence[DatasetManifest], fparams: FrontendParams,
                 enc_config: EncoderConfig, config: PretrainConfig, seed: int,
                 normalize_features: bool = True,
                 ) -> tuple[PatchTransformer, list[tuple[int, float, float, float]], StudentTeacherState]:
    """Train on the pooled train clips of all manifests.

    Returns (teacher encoder, loss curve, full student/teacher state); curve
    rows are (step, frame_loss, utterance_loss, total).
    """
    config.validate()
    if not manifests:
        raise ValueError("need at least one dataset manifest")
    clip_index: list[tuple[DatasetManifest, ClipMeta]] = []
    for man in manifests:
        for clip in man.train_clips():
            clip_index.append((man, clip))
    if not clip_index:
        raise ValueError("manifests contain no train clips")

    features = np.stack([
        patchify(extract_features(man.abspath(c), fparams, normalize_features), fparams)
        for man, c in clip_index
    ]).astype(np.float32)
    n_clips, n_patches, _ = features.shape

    state = build_pretrain_state(enc_config, config, seed)
    opt = torch.optim.AdamW(
        list(state.student.parameters()) + list(state.decoder.parameters()),
        lr=config.lr, betas=config.betas, weight_decay=config.weight_decay)
    rng = np.random.default_rng(seed)
    steps_per_epoch = (n_clips + config.batch_size - 1) // config.batch_size
    total_steps = config.epochs * steps_per_epoch
    n_masked = int(round(n_patches * config.mask_ratio))

    curve: list[tuple[int, float, float, float]] = []
    for _ in range(config.epochs):
        order = rng.permutation(n_clips)
        for b0 in range(0, n_clips, config.batch_size):
            batch_idx = order[b0:b0 + config.batch_size]
            batch = torch.from_numpy(features[batch_idx])
            masks = np.stack([
                np.sort(rng.choice(n_patches, size=n_masked, replace=False))
                for _ in batch_idx
            ]).astype(np.int64)

            x_o, c = student_forward(batch, masks, state.student, state.decoder)
            y_o, y = teacher_forward(batch, state.teacher, config.normalize_teacher_targets)
            loss_f, loss_u, loss = ufo_loss(x_o, y_o, c, y, masks)
            if not torch.isfinite(loss):
                paths = [clip_index[i][1].path for i in batch_idx]
                raise NumericalError("non-finite pre-training loss", step=state.step, batch=paths)

            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            tau = ema_schedule(state.step, total_steps, config.ema_start, config.ema_end)
            ema_update(state.teacher, state.student, tau)

            curve.append((state.step, loss_f.item(), loss_u.item(), loss.item()))
            state.step += 1

    return state.teacher, curve, state
