"""Attention heatmaps, input-gradient saliency, and pooled-embedding export."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .combiner import AttentionCapture
from .decoder import CLS_ID, DecoderCapture
from .errors import ConfigError, DataError, RangeError
from .losses import similarity_matrix
from .model import MICapModel, make_batch
from .synthdata import Sample, Vocabulary

BRANCHES = ("video_audio", "audio_video", "decoder")
TARGETS = {"video_audio": "audio_tokens", "audio_video": "video_patches", "decoder": "decoder_tokens"}


@dataclass
class AttentionHeatmap:
    target: str
    grid: np.ndarray  # normalized, max 1
    raw: np.ndarray  # head-aggregated weights before normalization
    layer: int
    head_agg: str
    token_index: int
    labels: list[str] = field(default_factory=list)


def normalize_scores(scores: np.ndarray) -> np.ndarray:
    """Scale non-negative scores so the maximum is 1."""
    scores = np.asarray(scores, dtype=np.float64)
    if (scores < 0).any():
        raise ConfigError("heatmap scores must be non-negative")
    peak = scores.max() if scores.size else 0.0
    if peak <= 0:
        raise ConfigError("cannot normalize an all-zero heatmap")
    return scores / peak


def aggregate_heads(weights: torch.Tensor, head_agg: str | int) -> torch.Tensor:
    """``(H, ...)`` → ``(...)``."""
    if head_agg == "mean":
        return weights.mean(0)
    if head_agg == "max":
        return weights.amax(0)
    try:
        k = int(head_agg)
    except (TypeError, ValueError):
        raise ConfigError(f"head aggregation {head_agg!r} is not mean, max or a head index") from None
    if not 0 <= k < weights.shape[0]:
        raise RangeError(f"head {k} outside 0..{weights.shape[0] - 1}")
    return weights[k]


def _pick_layer(maps: Sequence[torch.Tensor], layer: str | int) -> tuple[int, torch.Tensor]:
    if not maps:
        raise ConfigError("no attention maps were captured for this branch")
    idx = len(maps) - 1 if layer == "last" else int(layer)
    if not 0 <= idx < len(maps):
        raise RangeError(f"layer {layer} outside 0..{len(maps) - 1}")
    return idx, maps[idx]


@dataclass
class Explained:
    """One captured forward pass over a sample and its generated caption."""

    caption: list[int]
    attention: AttentionCapture
    decoder: DecoderCapture
    audio_valid: torch.Tensor | None
    frames: int
    grid: tuple[int, int]


def capture_pass(model: MICapModel, sample: Sample, vocab: Vocabulary, variant: str,
                 caption: list[int] | None = None, beam: int = 5) -> Explained:
    batch = make_batch([sample], vocab, model.cfg, variant)
    if caption is None:
        caption = model.generate(batch, variant, beam)[0]
    att, dcap = AttentionCapture(), DecoderCapture()
    with torch.no_grad():
        fusion = model.encode(variant, batch.pixels, batch.audio_ids, batch.audio_valid, capture=att)
        prefix = torch.tensor([[CLS_ID] + list(caption)])
        model.decoder(prefix, fusion.z_va, fusion.memory_valid, dcap)
    ve = model.video_encoder
    return Explained(list(caption), att, dcap,
                     None if batch.audio_valid is None else batch.audio_valid[0],
                     sample.frames.shape[0], ve.grid)


def extract_cross_attention(explained: Explained, branch: str, token_index: int,
                            layer: str | int = "last", head_agg: str | int = "mean",
                            vocab: Vocabulary | None = None) -> AttentionHeatmap:
    """Heatmap for one attention surface.

    ``video_audio``: the video [VCLS] query over audio-caption tokens.
    ``audio_video``: the audio [CLS] query over video patches, shaped
    ``(frames, grid_h, grid_w)``.  ``decoder``: decoder self-attention of the
    position predicting generated token ``token_index`` over the prefix.
    """
    if branch not in BRANCHES:
        raise ConfigError(f"unknown branch {branch!r}; expected one of {BRANCHES}")
    if not 0 <= token_index < max(len(explained.caption), 1):
        raise RangeError(f"token index {token_index} outside generated caption of "
                         f"length {len(explained.caption)}")
    labels: list[str] = []
    if branch == "video_audio":
        idx, maps = _pick_layer(explained.attention.video_audio, layer)
        rows = maps[0, :, 0, :]  # (H, S)
        n_valid = int(explained.audio_valid.sum())
        raw = aggregate_heads(rows, head_agg)[:n_valid].numpy()[None, :]
    elif branch == "audio_video":
        idx, maps = _pick_layer(explained.attention.audio_video, layer)
        rows = maps[0, :, 0, 1:]  # drop the [VCLS] key
        raw = aggregate_heads(rows, head_agg).numpy().reshape(explained.frames, *explained.grid)
    else:
        idx, maps = _pick_layer(explained.decoder.self_attn, layer)
        rows = maps[0, :, token_index, :token_index + 1]
        raw = aggregate_heads(rows, head_agg).numpy()[None, :]
        if vocab is not None:
            labels = ["[CLS]"] + [vocab.tokens[t] for t in explained.caption[:token_index]]
    return AttentionHeatmap(TARGETS[branch], normalize_scores(raw), raw, idx, str(head_agg),
                            token_index, labels)


# ---------------------------------------------------------------- saliency


def selected_logit(model: MICapModel, variant: str, pixels, audio_embeddings, audio_valid,
                   caption: Sequence[int], token_index: int) -> torch.Tensor:
    """Logit of ``caption[token_index]`` given the prefix before it."""
    fusion = model.encode(variant, pixels, audio_valid=audio_valid, audio_embeddings=audio_embeddings)
    prefix = torch.tensor([[CLS_ID] + list(caption[:token_index])])
    logits = model.decoder(prefix, fusion.z_va, fusion.memory_valid)
    return logits[0, -1, caption[token_index]]


@dataclass
class Saliency:
    video_pixels: np.ndarray | None  # (T, h, w), normalized
    video_patches: np.ndarray | None  # (T, grid_h, grid_w), normalized
    audio_tokens: np.ndarray | None  # (S,), normalized
    pixel_grad: np.ndarray | None
    embedding_grad: np.ndarray | None


def _safe_normalize(x: np.ndarray) -> np.ndarray:
    peak = x.max() if x.size else 0.0
    return x / peak if peak > 0 else x


def input_saliency(model: MICapModel, sample: Sample, vocab: Vocabulary, variant: str,
                   token_index: int, caption: list[int] | None = None, beam: int = 5) -> Saliency:
    """Gradient of one generated token's logit w.r.t. pixels and audio embeddings."""
    batch = make_batch([sample], vocab, model.cfg, variant)
    if caption is None:
        caption = model.generate(batch, variant, beam)[0]
    if not 0 <= token_index < len(caption):
        raise RangeError(f"token index {token_index} outside generated caption of length {len(caption)}")
    pixels = emb = None
    if batch.pixels is not None:
        pixels = batch.pixels.clone().requires_grad_(True)
    if batch.audio_ids is not None:
        emb = model.audio_encoder.embed_tokens(batch.audio_ids).detach().requires_grad_(True)
    logit = selected_logit(model, variant, pixels, emb, batch.audio_valid, caption, token_index)
    inputs = [t for t in (pixels, emb) if t is not None]
    grads = torch.autograd.grad(logit, inputs)
    out = dict(video_pixels=None, video_patches=None, audio_tokens=None, pixel_grad=None,
               embedding_grad=None)
    gi = iter(grads)
    if pixels is not None:
        g = next(gi)[0]  # (T, h, w, 3)
        p = model.cfg.patch
        t, h, w, _ = g.shape
        per_pixel = torch.linalg.vector_norm(g, dim=-1)
        per_patch = torch.linalg.vector_norm(
            g.reshape(t, h // p, p, w // p, p, 3), dim=(2, 4, 5))
        out.update(video_pixels=_safe_normalize(per_pixel.numpy()),
                   video_patches=_safe_normalize(per_patch.numpy()),
                   pixel_grad=g.numpy())
    if emb is not None:
        g = next(gi)[0]  # (S, D)
        out.update(audio_tokens=_safe_normalize(torch.linalg.vector_norm(g, dim=-1).numpy()),
                   embedding_grad=g.numpy())
    return Saliency(**out)


# ---------------------------------------------------------------- embeddings


@dataclass
class AlignmentSummary:
    samples: int
    positive_cosine: float
    negative_cosine: float

    @property
    def gap(self) -> float:
        return self.positive_cosine - self.negative_cosine


def pooled_embeddings(model: MICapModel, samples: Sequence[Sample], vocab: Vocabulary,
                      variant: str = "micap", chunk: int = 64) -> tuple[torch.Tensor, torch.Tensor]:
    if variant not in ("fusion", "micap"):
        raise ConfigError(f"variant {variant} has no paired pooled features")
    cvs, cas = [], []
    with torch.no_grad():
        for i in range(0, len(samples), chunk):
            b = make_batch(samples[i:i + chunk], vocab, model.cfg, variant)
            f = model.encode(variant, b.pixels, b.audio_ids, b.audio_valid)
            cvs.append(f.c_v)
            cas.append(f.c_a)
    return torch.cat(cvs), torch.cat(cas)


def alignment_summary(c_v: torch.Tensor, c_a: torch.Tensor) -> AlignmentSummary:
    sim = similarity_matrix(c_a, c_v)
    n = sim.shape[0]
    pos = sim.diagonal().mean().item()
    neg = ((sim.sum() - sim.diagonal().sum()) / (n * (n - 1))).item() if n > 1 else 0.0
    return AlignmentSummary(n, pos, neg)


def export_pair_embeddings(model: MICapModel, samples: Sequence[Sample], vocab: Vocabulary,
                           path: str | Path, variant: str = "micap") -> AlignmentSummary:
    """Write one JSON line per sample and a ``.summary.json`` sidecar."""
    if not samples:
        raise DataError("cannot export embeddings of an empty dataset")
    c_v, c_a = pooled_embeddings(model, samples, vocab, variant)
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for s, v, a in zip(samples, c_v.tolist(), c_a.tolist()):
            fh.write(json.dumps({"video_id": s.id, "c_v": v, "c_a": a, "split": s.split}) + "\n")
    summary = alignment_summary(c_v, c_a)
    path.with_suffix(".summary.json").write_text(json.dumps(
        {"samples": summary.samples, "positive_cosine": summary.positive_cosine,
         "negative_cosine": summary.negative_cosine, "gap": summary.gap}, indent=2) + "\n",
        encoding="utf-8")
    return summary


def read_embeddings(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------- rendering

_PPM_HEADER = re.compile(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s")
TINT = np.array([255.0, 0.0, 0.0])


def upsample(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resize of a 2-D grid to ``(h, w)``."""
    gh, gw = grid.shape
    rows = (np.arange(h) * gh) // h
    cols = (np.arange(w) * gw) // w
    return grid[rows][:, cols]


def heatmap_image(grid: np.ndarray, size: tuple[int, int] | None = None,
                  overlay: np.ndarray | None = None) -> np.ndarray:
    """``(h, w, 3)`` uint8 tint image, optionally blended 50/50 over ``overlay``."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ConfigError(f"render needs a 2-D grid, got shape {grid.shape}")
    if overlay is not None:
        size = overlay.shape[:2]
    h, w = size if size is not None else grid.shape
    tinted = upsample(grid, h, w)[..., None] * TINT
    if overlay is not None:
        tinted = 0.5 * overlay.astype(np.float64) + 0.5 * tinted
    return np.clip(np.rint(tinted), 0, 255).astype(np.uint8)


def write_ppm(image: np.ndarray, path: str | Path) -> None:
    h, w, _ = image.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def write_svg(image: np.ndarray, path: str | Path, cell: int = 8) -> None:
    h, w, _ = image.shape
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * cell}" height="{h * cell}">']
    for y in range(h):
        for x in range(w):
            r, g, b = (int(c) for c in image[y, x])
            parts.append(f'<rect x="{x * cell}" y="{y * cell}" width="{cell}" height="{cell}" '
                         f'fill="rgb({r},{g},{b})"/>')
    parts.append("</svg>")
    try:
        Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def render_heatmap(grid: np.ndarray, path: str | Path, overlay_frame: np.ndarray | None = None,
                   size: tuple[int, int] | None = None) -> np.ndarray:
    """Write ``grid`` as PPM (``.ppm``) or SVG (``.svg``); returns the image."""
    image = heatmap_image(grid, size, overlay_frame)
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        write_ppm(image, path)
    elif suffix == ".svg":
        write_svg(image, path)
    else:
        raise ConfigError(f"unsupported heatmap format {suffix!r} (use .ppm or .svg)")
    return image


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = _PPM_HEADER.match(data)
    if m is None:
        raise DataError(f"{path}: not a binary PPM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    pixels = data[m.end():]
    if len(pixels) != 3 * w * h:
        raise DataError(f"{path}: expected {3 * w * h} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)
