"""Modalities combiner: symmetric co-attention, aggregation and pooling."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError
from .nn_core import DTYPE, AttentionConfig, LayerNorm, Linear, Mask, TransformerBlock, layer_norm


@dataclass
class AttentionCapture:
    """Per-layer cross-attention weights, each ``(..., H, n_query, n_key)``."""

    video_audio: list[torch.Tensor] = field(default_factory=list)
    audio_video: list[torch.Tensor] = field(default_factory=list)


@dataclass
class FusionOutput:
    z_v: torch.Tensor
    z_a: torch.Tensor
    z_va: torch.Tensor
    memory_valid: torch.Tensor
    c_v: torch.Tensor | None = None
    c_a: torch.Tensor | None = None
    attention: AttentionCapture | None = None


def co_attend(x_v, x_a, video_blocks, audio_blocks, audio_valid=None, video_valid=None,
              capture: AttentionCapture | None = None):
    """Stacked co-attention with simultaneous branch updates.

    Layer l computes ``z_v = T_v(z_v', z_a')`` and ``z_a = T_a(z_a', z_v')``
    where primes are layer l-1 outputs.  Masks are key-validity vectors of
    the *opposite* branch.
    """
    if len(video_blocks) != len(audio_blocks) or len(video_blocks) < 1:
        raise ConfigError("co-attention needs L >= 1 layers in both branches")
    if x_v.shape[-1] != x_a.shape[-1]:
        raise ShapeError(f"branch widths differ: {x_v.shape[-1]} vs {x_a.shape[-1]}")
    to_audio = None if audio_valid is None else Mask.padding(audio_valid)
    to_video = None if video_valid is None else Mask.padding(video_valid)
    z_v, z_a = x_v, x_a
    for vb, ab in zip(video_blocks, audio_blocks):
        v_caps = [] if capture is not None else None
        a_caps = [] if capture is not None else None
        new_v = vb(z_v, z_a, to_audio, v_caps)
        new_a = ab(z_a, z_v, to_video, a_caps)
        z_v, z_a = new_v, new_a
        if capture is not None:
            capture.video_audio.extend(v_caps)
            capture.audio_video.extend(a_caps)
    return z_v, z_a


def aggregate(z_v: torch.Tensor, z_a: torch.Tensor, gain, bias) -> torch.Tensor:
    """LayerNorm over features of the sequence concatenation ``[z_v; z_a]``."""
    if z_v.shape[-1] != z_a.shape[-1]:
        raise ShapeError(f"feature dims differ: {z_v.shape[-1]} vs {z_a.shape[-1]}")
    return layer_norm(torch.cat([z_v, z_a], dim=-2), gain, bias)


def pool_first(z: torch.Tensor, weight, bias) -> torch.Tensor:
    """tanh of an affine map of the first row."""
    if z.shape[-2] == 0:
        raise ConfigError("cannot pool an empty branch")
    return torch.tanh(z[..., 0, :] @ weight + bias)


def pool_modalities(z_v, z_a, video_pool: Linear, audio_pool: Linear):
    return (pool_first(z_v, video_pool.weight, video_pool.bias),
            pool_first(z_a, audio_pool.weight, audio_pool.bias))


class ModalitiesCombiner(nn.Module):
    def __init__(self, dim: int, heads: int, layers: int):
        super().__init__()
        if layers < 1:
            raise ConfigError("num_layers must be >= 1")
        cfg = AttentionConfig(dim, heads)
        self.video_cls = nn.Parameter(torch.randn(dim, dtype=DTYPE) * 0.02)
        self.video_blocks = nn.ModuleList(TransformerBlock(cfg) for _ in range(layers))
        self.audio_blocks = nn.ModuleList(TransformerBlock(cfg) for _ in range(layers))
        self.norm = LayerNorm(dim)
        self.video_pool = Linear(dim, dim)
        self.audio_pool = Linear(dim, dim)

    def prepend_cls(self, x_v: torch.Tensor) -> torch.Tensor:
        cls = self.video_cls.expand(*x_v.shape[:-2], 1, x_v.shape[-1])
        return torch.cat([cls, x_v], dim=-2)

    def forward(self, x_v, x_a, audio_valid, capture: AttentionCapture | None = None) -> FusionOutput:
        """``x_v`` excludes the video [VCLS] row; it is prepended here."""
        xv = self.prepend_cls(x_v)
        z_v, z_a = co_attend(xv, x_a, self.video_blocks, self.audio_blocks,
                             audio_valid=audio_valid, capture=capture)
        z_va = aggregate(z_v, z_a, self.norm.gain, self.norm.bias)
        video_valid = torch.ones(z_v.shape[:-1], dtype=torch.bool)
        c_v, c_a = pool_modalities(z_v, z_a, self.video_pool, self.audio_pool)
        return FusionOutput(z_v, z_a, z_va, torch.cat([video_valid, audio_valid.bool()], dim=-1),
                            c_v, c_a, capture)

    def single(self, x: torch.Tensor, valid: torch.Tensor) -> FusionOutput:
        """Single-modality path: no co-attention, ``z_va = norm(x)``."""
        empty = x[..., :0, :]
        z_va = aggregate(x, empty, self.norm.gain, self.norm.bias)
        return FusionOutput(x, empty, z_va, valid.bool())
