"""Full captioning model: encoders → combiner → decoder, per variant."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .combiner import AttentionCapture, FusionOutput, ModalitiesCombiner
from .decoder import CaptionDecoder, DecoderCapture, beam_search, greedy_decode
from .encoders import AudioCaptionEncoder, VideoEncoder
from .errors import ConfigError
from .synthdata import Sample, Vocabulary, encode_caption

VARIANTS = ("vision_based", "audio_based", "fusion", "micap")
CLI_VARIANTS = {"vision": "vision_based", "audio": "audio_based", "fusion": "fusion", "micap": "micap"}


def uses_video(variant: str) -> bool:
    return variant != "audio_based"


def uses_audio(variant: str) -> bool:
    return variant != "vision_based"


def check_variant(variant: str) -> str:
    variant = CLI_VARIANTS.get(variant, variant)
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return variant


@dataclass
class ModelConfig:
    vocab_size: int
    dim: int = 64
    heads: int = 4
    encoder_layers: int = 2
    combiner_layers: int = 2
    decoder_layers: int = 2
    frame_hw: tuple[int, int] = (32, 32)
    patch: int = 8
    max_frames: int = 8
    audio_len: int = 12
    caption_len: int = 16  # padded teacher-forcing length incl. [CLS]/[EOS]
    max_len: int = 20  # generated tokens, [EOS] included

    def __post_init__(self):
        self.frame_hw = tuple(self.frame_hw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frame_hw"] = list(self.frame_hw)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# full-size input geometry, kept as a preset
PAPER_PRESET = {"frame_hw": (224, 224), "patch": 16, "audio_len": 67}


@dataclass
class Batch:
    pixels: torch.Tensor | None  # (B, T, h, w, 3) in [0, 1]
    audio_ids: torch.Tensor | None  # (B, S)
    audio_valid: torch.Tensor | None
    caption_ids: torch.Tensor  # (B, L)
    caption_valid: torch.Tensor
    ids: list[str] = field(default_factory=list)


def make_batch(samples: Sequence[Sample], vocab: Vocabulary, cfg: ModelConfig, variant: str) -> Batch:
    """Tensorize samples; the modality a variant does not use is never read."""
    pixels = audio_ids = audio_valid = None
    if uses_video(variant):
        pixels = torch.from_numpy(np.stack([s.frames for s in samples]).astype(np.float64) / 255.0)
    if uses_audio(variant):
        enc = [encode_caption(s.audio_caption, vocab, cfg.audio_len) for s in samples]
        audio_ids = torch.tensor([e[0] for e in enc])
        audio_valid = torch.tensor([e[1] for e in enc])
    cap = [encode_caption(s.video_caption, vocab, cfg.caption_len) for s in samples]
    return Batch(pixels, audio_ids, audio_valid, torch.tensor([c[0] for c in cap]),
                 torch.tensor([c[1] for c in cap]), [s.id for s in samples])


@dataclass
class ModelOutput:
    logits: torch.Tensor
    targets: torch.Tensor
    target_valid: torch.Tensor
    fusion: FusionOutput
    decoder_capture: DecoderCapture | None = None


class MICapModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.video_encoder = VideoEncoder(cfg.dim, cfg.heads, cfg.encoder_layers, cfg.frame_hw,
                                          cfg.patch, cfg.max_frames)
        self.audio_encoder = AudioCaptionEncoder(cfg.dim, cfg.heads, cfg.encoder_layers,
                                                 cfg.vocab_size, cfg.audio_len)
        self.combiner = ModalitiesCombiner(cfg.dim, cfg.heads, cfg.combiner_layers)
        self.decoder = CaptionDecoder(cfg.dim, cfg.heads, cfg.decoder_layers, cfg.vocab_size,
                                      max(cfg.max_len + 1, cfg.caption_len))

    def parameter_groups(self) -> dict[str, list[str]]:
        """Parameter names per learning-rate group."""
        groups = {"encoders": [], "decoder_combiner": []}
        for name, _ in self.named_parameters():
            key = "encoders" if name.startswith(("video_encoder.", "audio_encoder.")) else "decoder_combiner"
            groups[key].append(name)
        return groups

    def encode(self, variant: str, pixels=None, audio_ids=None, audio_valid=None,
               audio_embeddings=None, capture: AttentionCapture | None = None) -> FusionOutput:
        """``audio_embeddings`` replaces the token lookup (used for saliency)."""
        x_v = x_a = None
        if uses_video(variant):
            x_v = self.video_encoder(pixels).tokens
        if uses_audio(variant):
            emb = audio_embeddings if audio_embeddings is not None else \
                self.audio_encoder.embed_tokens(audio_ids)
            x_a = self.audio_encoder.encode_embeddings(emb, audio_valid)
        if variant == "vision_based":
            return self.combiner.single(x_v, torch.ones(x_v.shape[:-1], dtype=torch.bool))
        if variant == "audio_based":
            return self.combiner.single(x_a, audio_valid)
        return self.combiner(x_v, x_a, audio_valid, capture)

    def forward(self, batch: Batch, variant: str, capture: bool = False) -> ModelOutput:
        att = AttentionCapture() if capture else None
        dcap = DecoderCapture() if capture else None
        fusion = self.encode(variant, batch.pixels, batch.audio_ids, batch.audio_valid, capture=att)
        inp = batch.caption_ids[..., :-1]
        logits = self.decoder(inp, fusion.z_va, fusion.memory_valid, dcap)
        return ModelOutput(logits, batch.caption_ids[..., 1:], batch.caption_valid[..., 1:],
                           fusion, dcap)

    def generate(self, batch: Batch, variant: str, beam: int = 5, max_len: int | None = None) -> list[list[int]]:
        """Caption token ids (no specials) for every sample in ``batch``."""
        max_len = self.cfg.max_len if max_len is None else max_len
        with torch.no_grad():
            fusion = self.encode(variant, batch.pixels, batch.audio_ids, batch.audio_valid)
        out = []
        for i in range(fusion.z_va.shape[0]):
            mem, valid = fusion.z_va[i:i + 1], fusion.memory_valid[i:i + 1]
            if beam == 1:
                out.append(greedy_decode(self.decoder, mem, valid, max_len))
            else:
                out.append(beam_search(self.decoder, mem, valid, beam, max_len)[0])
        return out
