"""Differentiable building blocks: attention, layer norm, transformer block.

Every operation here is a plain function over float64 torch tensors and an
explicit parameter mapping, so it can be composed by hand in tests and
differentiated by autograd.  The ``nn.Module`` classes at the bottom only
own parameters and forward to the functional form.

Shapes follow the row convention: a sequence is ``(..., n, D)`` and an
affine map is ``x @ w + b`` with ``w`` of shape ``(in, out)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, MutableSequence, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, MaskError, ShapeError

DTYPE = torch.float64
LN_EPS = 1e-5

Params = Mapping[str, torch.Tensor]


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int
    num_heads: int
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.model_dim <= 0 or self.num_heads <= 0:
            raise ConfigError("model_dim and num_heads must be positive")
        if self.model_dim % self.num_heads:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate {self.dropout_rate} outside [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


@dataclass(frozen=True)
class Mask:
    """Boolean attention mask; ``allowed[..., i, j]`` is True when query i may see key j.

    ``allowed`` broadcasts against the score matrix, so a padding mask may
    carry a singleton query axis.
    """

    kind: str
    allowed: torch.Tensor | None = None

    @classmethod
    def none(cls) -> "Mask":
        return cls("none", None)

    @classmethod
    def causal(cls, n: int) -> "Mask":
        return cls("causal", torch.ones(n, n, dtype=torch.bool).tril())

    @classmethod
    def padding(cls, key_valid: torch.Tensor) -> "Mask":
        """From a ``(..., Nv)`` validity vector; broadcasts over all queries."""
        return cls("padding", key_valid.to(torch.bool).unsqueeze(-2))


def softmax(scores: torch.Tensor, dim: int = -1) -> torch.Tensor:
    # max-subtraction keeps exp() in range; -inf entries become exact zeros
    shifted = scores - scores.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def _allowed(mask) -> torch.Tensor | None:
    if mask is None:
        return None
    if isinstance(mask, Mask):
        return mask.allowed
    return mask.to(torch.bool)


def scaled_dot_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    mask: Mask | torch.Tensor | None = None,
    dropout_rate: float = 0.0,
    training: bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """softmax(Q Kᵀ / √d) V over the last two axes.

    Returns ``(out, weights)``; the weights are the post-softmax matrix
    before any dropout.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"Q inner dim {q.shape[-1]} != K inner dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"K rows {k.shape[-2]} != V rows {v.shape[-2]}")
    nq, nv = q.shape[-2], k.shape[-2]
    if nv == 0:
        raise MaskError("fully masked row: no keys")
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    allowed = _allowed(mask)
    if allowed is not None:
        if allowed.shape[-1] != nv or allowed.shape[-2] not in (1, nq):
            raise ShapeError(
                f"mask dims {tuple(allowed.shape[-2:])} do not match ({nq}, {nv})"
            )
        if not allowed.any(dim=-1).all():
            raise MaskError("fully masked row")
        scores = scores.masked_fill(~allowed, float("-inf"))
    weights = softmax(scores)
    attn = weights
    if training and dropout_rate > 0.0:
        attn = F.dropout(weights, p=dropout_rate, training=True)
    return attn @ v, weights


def _split_heads(x: torch.Tensor, num_heads: int) -> torch.Tensor:
    *lead, n, dm = x.shape
    return x.reshape(*lead, n, num_heads, dm // num_heads).transpose(-3, -2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    *lead, h, n, d = x.shape
    return x.transpose(-3, -2).reshape(*lead, n, h * d)


def multi_head_attention(
    x: torch.Tensor,
    z: torch.Tensor,
    cfg: AttentionConfig,
    params: Params,
    mask: Mask | torch.Tensor | None = None,
    training: bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Queries from ``x``, keys and values from ``z``.

    ``params`` holds ``w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o``; head ``h``
    uses columns ``h*d:(h+1)*d`` of each input projection.  Returns the
    ``(..., n, D)`` output and ``(..., H, n, m)`` per-head weights.
    """
    dm = cfg.model_dim
    if x.shape[-1] != dm or z.shape[-1] != dm:
        raise ShapeError(f"X dim {x.shape[-1]} / Z dim {z.shape[-1]} != model_dim {dm}")
    q = _split_heads(x @ params["w_q"] + params["b_q"], cfg.num_heads)
    k = _split_heads(z @ params["w_k"] + params["b_k"], cfg.num_heads)
    v = _split_heads(z @ params["w_v"] + params["b_v"], cfg.num_heads)
    allowed = _allowed(mask)
    if allowed is not None:
        allowed = allowed.unsqueeze(-3)  # broadcast over heads
    heads, weights = scaled_dot_attention(
        q, k, v, allowed, dropout_rate=cfg.dropout_rate, training=training
    )
    out = _merge_heads(heads) @ params["w_o"] + params["b_o"]
    return out, weights


def layer_norm(
    x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = LN_EPS
) -> torch.Tensor:
    var, mean = torch.var_mean(x, dim=-1, unbiased=False, keepdim=True)
    return torch.addcmul(bias, (x - mean) * torch.rsqrt(var + eps), gain)


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Exact (erf) GELU."""
    return F.gelu(x)


def feed_forward(x: torch.Tensor, params: Params) -> torch.Tensor:
    return gelu(x @ params["w1"] + params["b1"]) @ params["w2"] + params["b2"]


def transformer_block(
    x: torch.Tensor,
    z: torch.Tensor,
    cfg: AttentionConfig,
    params: Mapping[str, Params],
    mask: Mask | torch.Tensor | None = None,
    capture: MutableSequence[torch.Tensor] | None = None,
    training: bool = False,
) -> torch.Tensor:
    """Pre-norm FFB(MHA(X, Z, Z)).

    ``h = X + MHA(LN1(X), LN1(Z))`` then ``h + FFB(LN2(h))``.  The same
    norm is applied to both sides so that ``X is Z`` is exactly a
    self-attention encoder block.  Attention weights are appended to
    ``capture`` when given.
    """
    n1 = params["norm1"]
    xn = layer_norm(x, n1["gain"], n1["bias"])
    zn = xn if z is x else layer_norm(z, n1["gain"], n1["bias"])
    attn, weights = multi_head_attention(xn, zn, cfg, params["attn"], mask, training)
    if capture is not None:
        capture.append(weights.detach())
    h = x + attn
    n2 = params["norm2"]
    return h + feed_forward(layer_norm(h, n2["gain"], n2["bias"]), params["ffn"])


def grad_check(
    op: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    eps: float = 1e-5,
) -> float:
    """Max relative error between autograd and central differences.

    ``op(*inputs)`` must return a scalar.  The relative error per entry is
    ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    leaves = [t.detach().clone().to(DTYPE).requires_grad_(True) for t in inputs]
    out = op(*leaves)
    if out.numel() != 1:
        raise ConfigError(f"grad_check needs a scalar output, got shape {tuple(out.shape)}")
    grads = torch.autograd.grad(out.reshape(()), leaves, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        base = [t.detach().clone() for t in leaves]
        for i, g in enumerate(grads):
            analytic = torch.zeros_like(base[i]) if g is None else g
            flat = base[i].view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + eps
                f_plus = op(*base).item()
                flat[j] = orig - eps
                f_minus = op(*base).item()
                flat[j] = orig
                numeric = (f_plus - f_minus) / (2 * eps)
                a = analytic.view(-1)[j].item()
                rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                worst = max(worst, rel)
    return worst


# --------------------------------------------------------------------------
# parameter holders


def _affine(fan_in: int, fan_out: int) -> tuple[nn.Parameter, nn.Parameter]:
    bound = 1.0 / math.sqrt(fan_in)
    w = nn.Parameter(torch.empty(fan_in, fan_out, dtype=DTYPE).uniform_(-bound, bound))
    b = nn.Parameter(torch.zeros(fan_out, dtype=DTYPE))
    return w, b


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=DTYPE))

    def params(self) -> dict[str, torch.Tensor]:
        return {"gain": self.gain, "bias": self.bias}

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias)


class Linear(nn.Module):
    def __init__(self, fan_in: int, fan_out: int):
        super().__init__()
        self.weight, self.bias = _affine(fan_in, fan_out)

    def forward(self, x):
        return x @ self.weight + self.bias


class MultiHeadAttention(nn.Module):
    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        dm = cfg.model_dim
        self.w_q, self.b_q = _affine(dm, dm)
        self.w_k, self.b_k = _affine(dm, dm)
        self.w_v, self.b_v = _affine(dm, dm)
        self.w_o, self.b_o = _affine(dm, dm)

    def params(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in
                ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o")}

    def forward(self, x, z, mask=None):
        return multi_head_attention(x, z, self.cfg, self.params(), mask, self.training)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.w1, self.b1 = _affine(dim, hidden)
        self.w2, self.b2 = _affine(hidden, dim)

    def params(self) -> dict[str, torch.Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def forward(self, x):
        return feed_forward(x, self.params())


class TransformerBlock(nn.Module):
    def __init__(self, cfg: AttentionConfig, ffn_mult: int = 4):
        super().__init__()
        self.cfg = cfg
        self.norm1 = LayerNorm(cfg.model_dim)
        self.attn = MultiHeadAttention(cfg)
        self.norm2 = LayerNorm(cfg.model_dim)
        self.ffn = FeedForward(cfg.model_dim, ffn_mult * cfg.model_dim)

    def params(self) -> dict[str, dict[str, torch.Tensor]]:
        return {
            "norm1": self.norm1.params(),
            "attn": self.attn.params(),
            "norm2": self.norm2.params(),
            "ffn": self.ffn.params(),
        }

    def forward(self, x, z=None, mask=None, capture=None):
        return transformer_block(
            x, x if z is None else z, self.cfg, self.params(), mask, capture, self.training
        )
