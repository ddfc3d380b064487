"""Patch-transformer encoder: per-patch embeddings, CLS token, pooled clip embedding.

Pre-norm blocks with learned positional embeddings. When a mask is supplied the
masked patches are dropped from the input sequence (the CLS token is always
kept), which is what the masked pre-training stage relies on.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

CHECKPOINT_MAGIC = b"AENC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 4
    dim: int = 128
    heads: int = 4
    mlp_ratio: int = 4
    patch_dim: int = 256
    n_patches: int = 512

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")
        if min(self.dim, self.heads, self.mlp_ratio, self.patch_dim, self.n_patches) < 1:
            raise ValueError("all sizes must be positive")


@dataclass
class PatchEmbeddings:
    """Outputs of one forward pass; `z` holds the kept patch positions only."""

    z: torch.Tensor           # (B, S, D) or (S, D)
    cls_out: torch.Tensor     # (B, D) or (D,)
    per_layer: torch.Tensor   # (depth, B, S, D) or (depth, S, D)
    visible: torch.Tensor | None  # kept patch indices, (B, S) or (S,); None if unmasked


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int) -> None:
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, s, d = x.shape
        qkv = self.qkv(x).reshape(b, s, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, s, d)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class PatchTransformer(nn.Module):
    def __init__(self, config: EncoderConfig) -> None:
        super().__init__()
        config.validate()
        self.config = config
        self.patch_proj = nn.Linear(config.patch_dim, config.dim)
        self.cls_token = nn.Parameter(torch.zeros(config.dim))
        self.pos_embed = nn.Parameter(torch.zeros(config.n_patches + 1, config.dim))
        self.blocks = nn.ModuleList(
            Block(config.dim, config.heads, config.mlp_ratio) for _ in range(config.depth)
        )

    def forward(self, patches: torch.Tensor, mask: torch.Tensor | None = None) -> PatchEmbeddings:
        squeeze = patches.ndim == 2
        if squeeze:
            patches = patches.unsqueeze(0)
        b, p, c = patches.shape
        if p != self.config.n_patches:
            raise ValueError(f"got {p} patches, positional table expects {self.config.n_patches}")
        if not torch.isfinite(patches).all():
            raise ValueError("non-finite values in encoder input")

        tokens = self.patch_proj(patches) + self.pos_embed[1:]
        visible: torch.Tensor | None = None
        if mask is not None:
            visible = visible_indices(p, mask, batch=b, device=patches.device)
            tokens = torch.gather(tokens, 1, visible.unsqueeze(-1).expand(-1, -1, tokens.shape[-1]))

        cls = (self.cls_token + self.pos_embed[0]).expand(b, 1, -1)
        x = torch.cat([cls, tokens], dim=1)
        layer_outputs = []
        for block in self.blocks:
            x = block(x)
            layer_outputs.append(x[:, 1:, :])
        per_layer = torch.stack(layer_outputs)

        z, cls_out = x[:, 1:, :], x[:, 0, :]
        if squeeze:
            z, cls_out, per_layer = z[0], cls_out[0], per_layer[:, 0]
            if visible is not None:
                visible = visible[0]
        return PatchEmbeddings(z=z, cls_out=cls_out, per_layer=per_layer, visible=visible)


def visible_indices(n_patches: int, mask: torch.Tensor | np.ndarray,
                    batch: int, device: torch.device | None = None) -> torch.Tensor:
    """Complement of the masked index set, sorted, shape (batch, n_visible)."""
    m = torch.as_tensor(np.asarray(mask), dtype=torch.long, device=device)
    if m.ndim == 1:
        m = m.unsqueeze(0).expand(batch, -1)
    if m.ndim != 2 or m.shape[0] != batch:
        raise ValueError(f"mask shape {tuple(m.shape)} incompatible with batch {batch}")
    keep = torch.ones(batch, n_patches, dtype=torch.bool, device=device)
    if m.shape[1] > 0:
        keep.scatter_(1, m, False)
    n_visible = n_patches - m.shape[1]
    return keep.nonzero(as_tuple=True)[1].reshape(batch, n_visible)


def _trunc_normal_(tensor: torch.Tensor, std: float, generator: torch.Generator) -> None:
    """Truncated normal in [-2*std, 2*std] via inverse-CDF sampling."""
    if std == 0.0:
        tensor.zero_()
        return
    lo = 0.5 * (1.0 + math.erf(-2.0 / math.sqrt(2.0)))
    hi = 0.5 * (1.0 + math.erf(2.0 / math.sqrt(2.0)))
    with torch.no_grad():
        tensor.uniform_(lo, hi, generator=generator)
        tensor.mul_(2.0).sub_(1.0).erfinv_().mul_(math.sqrt(2.0) * std)


def init_module(module: nn.Module, generator: torch.Generator, init_std: float = 0.02) -> None:
    """Weights: truncated normal; norms: identity; biases: zero."""
    norm_params = set()
    for mod_name, mod in module.named_modules():
        if isinstance(mod, nn.LayerNorm):
            for pname, _ in mod.named_parameters(recurse=False):
                norm_params.add(f"{mod_name}.{pname}" if mod_name else pname)
    with torch.no_grad():
        for name, param in module.named_parameters():
            if name in norm_params:
                if name.endswith("weight"):
                    param.fill_(1.0)
                else:
                    param.zero_()
            elif name.endswith("bias"):
                param.zero_()
            else:
                _trunc_normal_(param, init_std, generator)


def init_params(config: EncoderConfig, seed: int, init_std: float = 0.02) -> PatchTransformer:
    """Deterministically initialized encoder."""
    model = PatchTransformer(config)
    generator = torch.Generator().manual_seed(seed)
    init_module(model, generator, init_std)
    return model


def pool_embedding(z: np.ndarray) -> np.ndarray:
    """Mean over patch rows: the clip embedding used for clustering and scoring."""
    z = np.asarray(z)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ValueError("need a non-empty (P, D) array of patch embeddings")
    return z.mean(axis=0)


# ---------------------------------------------------------------------------
# Checkpoint format: magic, version, config ints, seed, tag, config hash,
# then named float32 blobs (name, rank, dims, payload), all little-endian.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Checkpoint:
    config: EncoderConfig
    tag: str
    config_hash: str
    seed: int
    params: dict[str, np.ndarray]


def _write_str(f, s: str) -> None:
    raw = s.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def _read_str(f) -> str:
    (n,) = struct.unpack("<I", f.read(4))
    return f.read(n).decode("utf-8")


def save_checkpoint(path: Path | str, params: Mapping[str, np.ndarray | torch.Tensor],
                    config: EncoderConfig, tag: str, config_hash: str = "", seed: int = 0) -> None:
    with Path(path).open("wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<6I", config.depth, config.dim, config.heads,
                            config.mlp_ratio, config.patch_dim, config.n_patches))
        f.write(struct.pack("<q", seed))
        _write_str(f, tag)
        _write_str(f, config_hash)
        f.write(struct.pack("<I", len(params)))
        for name, value in params.items():
            arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
            arr = np.ascontiguousarray(arr, dtype="<f4")
            _write_str(f, name)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path: Path | str) -> Checkpoint:
    with Path(path).open("rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not an encoder checkpoint (magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        depth, dim, heads, mlp_ratio, patch_dim, n_patches = struct.unpack("<6I", f.read(24))
        (seed,) = struct.unpack("<q", f.read(8))
        tag = _read_str(f)
        config_hash = _read_str(f)
        (count,) = struct.unpack("<I", f.read(4))
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            name = _read_str(f)
            (rank,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n_items = int(np.prod(shape)) if shape else 1
            params[name] = np.frombuffer(f.read(4 * n_items), dtype="<f4").reshape(shape).copy()
    config = EncoderConfig(depth=depth, dim=dim, heads=heads, mlp_ratio=mlp_ratio,
                           patch_dim=patch_dim, n_patches=n_patches)
    return Checkpoint(config=config, tag=tag, config_hash=config_hash, seed=seed, params=params)


def encoder_state(model: nn.Module, prefix: str = "encoder.") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def load_encoder(path: Path | str) -> tuple[PatchTransformer, Checkpoint]:
    """Rebuild an encoder from the `encoder.`-prefixed blobs of a checkpoint."""
    ckpt = load_checkpoint(path)
    model = PatchTransformer(ckpt.config)
    state = {k[len("encoder."):]: torch.from_numpy(v)
             for k, v in ckpt.params.items() if k.startswith("encoder.")}
    model.load_state_dict(state)
    return model, ckpt
