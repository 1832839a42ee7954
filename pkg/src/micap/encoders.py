"""Video and audio-caption encoders.

Small trainable stand-ins for the pretrained backbones: a patch embedding
plus self-attention stack per frame (video) and a token embedding plus
self-attention stack (audio caption).  Both produce ``D``-wide rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import CapacityError, ConfigError, ShapeError, TokenizationError
from .nn_core import DTYPE, AttentionConfig, Linear, Mask, TransformerBlock

PAD_ID = 0


@dataclass
class VideoClip:
    """``frames`` is a ``(T, h, w, 3)`` uint8 array."""

    frames: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4 or f.shape[-1] != 3:
            raise ShapeError(f"frames must be (T, h, w, 3), got {f.shape}")
        if f.shape[0] < 1:
            raise ShapeError("a clip needs at least one frame")
        self.frames = f

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    def pixels(self) -> torch.Tensor:
        """Frames scaled to [0, 1] as float64."""
        return torch.from_numpy(self.frames.astype(np.float64) / 255.0)


@dataclass
class AudioCaption:
    token_ids: list[int]
    valid: list[bool]

    def __post_init__(self):
        if len(self.token_ids) != len(self.valid):
            raise ShapeError("token_ids and valid mask differ in length")
        seen_pad = False
        for ok in self.valid:
            if not ok:
                seen_pad = True
            elif seen_pad:
                raise ShapeError("padding must be a suffix")

    @classmethod
    def from_ids(cls, ids: list[int], length: int) -> "AudioCaption":
        if len(ids) > length:
            ids = ids[:length]
        n = len(ids)
        return cls(list(ids) + [PAD_ID] * (length - n), [True] * n + [False] * (length - n))


@dataclass
class VideoFeatures:
    tokens: torch.Tensor  # (..., T*P, D), frame-major
    frames: int
    patches: int


def check_patch_dims(h: int, w: int, patch: int) -> tuple[int, int]:
    if h % patch or w % patch:
        raise ConfigError(f"frame {h}x{w} not divisible by patch size {patch}")
    return h // patch, w // patch


def patchify(pixels: torch.Tensor, patch: int) -> torch.Tensor:
    """``(..., h, w, 3)`` → ``(..., P, patch*patch*3)``, row-major over the patch grid."""
    *lead, h, w, c = pixels.shape
    gh, gw = check_patch_dims(h, w, patch)
    x = pixels.reshape(*lead, gh, patch, gw, patch, c)
    x = x.movedim(-4, -3)  # (..., gh, gw, patch, patch, c)
    return x.reshape(*lead, gh * gw, patch * patch * c)


def patch_embed(pixels: torch.Tensor, patch: int, weight, bias, position) -> torch.Tensor:
    return patchify(pixels, patch) @ weight + bias + position


class SelfAttnEncoder(nn.Module):
    def __init__(self, cfg: AttentionConfig, layers: int):
        super().__init__()
        self.blocks = nn.ModuleList(TransformerBlock(cfg) for _ in range(layers))

    def forward(self, x, mask=None):
        for block in self.blocks:
            x = block(x, None, mask)
        return x


class VideoEncoder(nn.Module):
    def __init__(self, dim: int, heads: int, layers: int, frame_hw: tuple[int, int],
                 patch: int, max_frames: int):
        super().__init__()
        gh, gw = check_patch_dims(*frame_hw, patch)
        self.patch = patch
        self.frame_hw = tuple(frame_hw)
        self.grid = (gh, gw)
        self.max_frames = max_frames
        self.proj = Linear(patch * patch * 3, dim)
        self.spatial = nn.Parameter(torch.randn(gh * gw, dim, dtype=DTYPE) * 0.02)
        self.temporal = nn.Parameter(torch.randn(max_frames, dim, dtype=DTYPE) * 0.02)
        self.encoder = SelfAttnEncoder(AttentionConfig(dim, heads), layers)

    @property
    def patches_per_frame(self) -> int:
        return self.grid[0] * self.grid[1]

    def embed_frame(self, pixels: torch.Tensor) -> torch.Tensor:
        return patch_embed(pixels, self.patch, self.proj.weight, self.proj.bias, self.spatial)

    def encode_frames(self, pixels: torch.Tensor) -> torch.Tensor:
        """Per-frame encoder without temporal embeddings: ``(..., T, P, D)``."""
        return self.encoder(self.embed_frame(pixels))

    def forward(self, pixels: torch.Tensor) -> VideoFeatures:
        """``pixels``: ``(..., T, h, w, 3)`` in [0, 1]."""
        t = pixels.shape[-4]
        if t > self.max_frames:
            raise CapacityError(f"{t} frames exceeds max_frames {self.max_frames}")
        if tuple(pixels.shape[-3:-1]) != self.frame_hw:
            raise ShapeError(f"frame size {tuple(pixels.shape[-3:-1])} != {self.frame_hw}")
        per_frame = self.encode_frames(pixels)
        x = per_frame + self.temporal[:t].unsqueeze(-2)
        *lead, _, p, d = x.shape
        return VideoFeatures(x.reshape(*lead, t * p, d), t, p)


class AudioCaptionEncoder(nn.Module):
    def __init__(self, dim: int, heads: int, layers: int, vocab_size: int, max_len: int):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.token = nn.Parameter(torch.randn(vocab_size, dim, dtype=DTYPE) * 0.1)
        self.position = nn.Parameter(torch.randn(max_len, dim, dtype=DTYPE) * 0.02)
        self.encoder = SelfAttnEncoder(AttentionConfig(dim, heads), layers)

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise TokenizationError(f"token id outside vocabulary of size {self.vocab_size}")
        return self.token[ids]

    def encode_embeddings(self, emb: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        s = emb.shape[-2]
        if s > self.max_len:
            raise CapacityError(f"audio caption length {s} exceeds {self.max_len}")
        return self.encoder(emb + self.position[:s], Mask.padding(valid))

    def forward(self, ids: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        return self.encode_embeddings(self.embed_tokens(ids), valid)
