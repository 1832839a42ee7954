"""Autoregressive caption decoder with greedy and beam-search generation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn as nn

from .errors import CapacityError, ConfigError
from .nn_core import (
    DTYPE,
    AttentionConfig,
    LayerNorm,
    Linear,
    Mask,
    MultiHeadAttention,
    TransformerBlock,
    layer_norm,
    multi_head_attention,
    transformer_block,
)

PAD_ID, CLS_ID, EOS_ID = 0, 1, 2

# tokens generation may never emit
BANNED = (PAD_ID, CLS_ID)


class DecoderLayer(nn.Module):
    """Causal self-attention sublayer followed by Transformer(x, z_va)."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        self.self_norm = LayerNorm(cfg.model_dim)
        self.self_attn = MultiHeadAttention(cfg)
        self.cross = TransformerBlock(cfg)

    def forward(self, x, memory, memory_valid, self_capture=None, cross_capture=None):
        n = x.shape[-2]
        xn = layer_norm(x, self.self_norm.gain, self.self_norm.bias)
        sa, w = multi_head_attention(xn, xn, self.cfg, self.self_attn.params(),
                                     Mask.causal(n), self.training)
        if self_capture is not None:
            self_capture.append(w.detach())
        x = x + sa
        return transformer_block(x, memory, self.cfg, self.cross.params(),
                                 Mask.padding(memory_valid), cross_capture, self.training)


@dataclass
class DecoderCapture:
    self_attn: list[torch.Tensor] = field(default_factory=list)
    cross_attn: list[torch.Tensor] = field(default_factory=list)


class CaptionDecoder(nn.Module):
    def __init__(self, dim: int, heads: int, layers: int, vocab_size: int, max_positions: int):
        super().__init__()
        cfg = AttentionConfig(dim, heads)
        self.vocab_size = vocab_size
        self.max_positions = max_positions
        self.token = nn.Parameter(torch.randn(vocab_size, dim, dtype=DTYPE) * 0.1)
        self.position = nn.Parameter(torch.randn(max_positions, dim, dtype=DTYPE) * 0.02)
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(layers))
        self.final_norm = LayerNorm(dim)
        self.out = Linear(dim, vocab_size)

    def forward(self, prefix: torch.Tensor, memory: torch.Tensor, memory_valid: torch.Tensor,
                capture: DecoderCapture | None = None) -> torch.Tensor:
        """Logits ``(..., t, |V|)`` for every prefix position."""
        t = prefix.shape[-1]
        if t < 1:
            raise ConfigError("prefix must contain at least the [CLS] token")
        if t > self.max_positions:
            raise CapacityError(f"prefix length {t} exceeds max {self.max_positions}")
        x = self.token[prefix] + self.position[:t]
        for layer in self.layers:
            x = layer(x, memory, memory_valid,
                      None if capture is None else capture.self_attn,
                      None if capture is None else capture.cross_attn)
        return self.out(self.final_norm(x))


def decode_step(decoder: CaptionDecoder, prefix: Sequence[int], memory, memory_valid) -> torch.Tensor:
    """Logits at every position of a single prefix starting with [CLS]."""
    if not prefix or prefix[0] != CLS_ID:
        raise ConfigError("prefix must begin with [CLS]")
    return decoder(torch.tensor(list(prefix)), memory, memory_valid)


def generation_log_probs(logits: torch.Tensor) -> torch.Tensor:
    """Log-softmax over the tokens generation may emit (PAD and CLS removed)."""
    masked = logits.clone()
    masked[..., list(BANNED)] = float("-inf")
    return torch.log_softmax(masked, dim=-1)


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]  # generated tokens, [CLS] excluded
    score: float
    finished: bool


# next_log_probs: batch of generated-token tuples -> (batch, |V|) log-probabilities
NextLogProbs = Callable[[list[tuple[int, ...]]], torch.Tensor]


def _rank(h: Hypothesis):
    return (-h.score, h.tokens)


def beam_search_core(next_log_probs: NextLogProbs, width: int, max_len: int) -> Hypothesis:
    """Length-bounded beam search on total log-probability.

    A hypothesis is complete when it emits [EOS] or reaches ``max_len``
    generated tokens; the best complete hypothesis is returned.  Ties are
    broken towards the lexicographically smaller token sequence.
    """
    if width < 1:
        raise ConfigError(f"beam width must be >= 1, got {width}")
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    live = [Hypothesis((), 0.0, False)]
    complete: list[Hypothesis] = []
    for step in range(max_len):
        lp = next_log_probs([h.tokens for h in live])
        candidates = []
        for h, row in zip(live, lp.tolist()):
            for tok, val in enumerate(row):
                if val == float("-inf"):
                    continue
                candidates.append(Hypothesis(h.tokens + (tok,), h.score + val,
                                             tok == EOS_ID or step + 1 == max_len))
        candidates.sort(key=_rank)
        kept = candidates[:width]
        complete.extend(c for c in kept if c.finished)
        live = [c for c in kept if not c.finished]
        if not live:
            break
        # scores only decrease under extension
        if complete and min(complete, key=_rank).score >= live[0].score:
            break
    return min(complete, key=_rank)


def _memory_fn(decoder: CaptionDecoder, memory, memory_valid) -> NextLogProbs:
    def fn(batch):
        prefixes = torch.tensor([(CLS_ID,) + toks for toks in batch])
        n = prefixes.shape[0]
        mem = memory.expand(n, *memory.shape[-2:])
        valid = memory_valid.expand(n, memory_valid.shape[-1])
        with torch.no_grad():
            logits = decoder(prefixes, mem, valid)[:, -1, :]
        return generation_log_probs(logits)

    return fn


def strip_eos(tokens: Sequence[int]) -> list[int]:
    out = list(tokens)
    return out[:-1] if out and out[-1] == EOS_ID else out


def beam_search(decoder: CaptionDecoder, memory, memory_valid, width: int = 5,
                max_len: int = 20) -> tuple[list[int], float]:
    """Best caption (no [CLS]/[EOS]) and its total log-probability."""
    best = beam_search_core(_memory_fn(decoder, memory, memory_valid), width, max_len)
    return strip_eos(best.tokens), best.score


def greedy_decode(decoder: CaptionDecoder, memory, memory_valid, max_len: int = 20) -> list[int]:
    """Argmax decoding; lowest token id wins ties."""
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    fn = _memory_fn(decoder, memory, memory_valid)
    tokens: tuple[int, ...] = ()
    for _ in range(max_len):
        row = fn([tokens])[0]
        # argmax returns the first maximal index
        tok = int(torch.argmax(row))
        tokens += (tok,)
        if tok == EOS_ID:
            break
    return strip_eos(tokens)

