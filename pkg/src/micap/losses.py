"""Caption negative log-likelihood, symmetric InfoNCE and their sum."""

from __future__ import annotations

import torch

from .errors import ConfigError

DEFAULT_TAU = 0.07


def caption_nll(logits: torch.Tensor, targets: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Mean of -log softmax(logits)[target] over valid (non-pad) positions.

    ``logits`` is ``(..., T, V)``; ``targets`` and ``valid`` are ``(..., T)``.
    Logits at pad positions never reach the result.
    """
    valid = valid.bool()
    count = int(valid.sum())
    if count == 0:
        raise ConfigError("caption_nll: every position is padding")
    logp = torch.log_softmax(logits, dim=-1)
    picked = logp.gather(-1, targets.long().unsqueeze(-1)).squeeze(-1)
    return -torch.where(valid, picked, torch.zeros_like(picked)).sum() / count


def cosine_sim(a: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    na, nv = torch.linalg.vector_norm(a, dim=-1), torch.linalg.vector_norm(v, dim=-1)
    if (na == 0).any() or (nv == 0).any():
        raise ConfigError("cosine similarity of a zero vector")
    return ((a * v).sum(-1) / (na * nv)).clamp(-1.0, 1.0)


def similarity_matrix(c_a: torch.Tensor, c_v: torch.Tensor) -> torch.Tensor:
    """``S[i, j] = s(c_a[i], c_v[j])`` for ``(B, D)`` inputs."""
    na = torch.linalg.vector_norm(c_a, dim=-1, keepdim=True)
    nv = torch.linalg.vector_norm(c_v, dim=-1, keepdim=True)
    if (na == 0).any() or (nv == 0).any():
        raise ConfigError("cosine similarity of a zero vector")
    return ((c_a / na) @ (c_v / nv).T).clamp(-1.0, 1.0)


def nce_loss(c_v: torch.Tensor, c_a: torch.Tensor, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Symmetric in-batch InfoNCE with identity pairing.

    Row i of ``c_v`` pairs with row i of ``c_a``.  The audio→video and
    video→audio cross-entropies are averaged over the batch and halved.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if c_v.shape != c_a.shape or c_v.ndim != 2:
        raise ConfigError(f"feature batches must both be (B, D); got {tuple(c_v.shape)}, {tuple(c_a.shape)}")
    if c_v.shape[0] < 2:
        raise ConfigError("contrastive loss needs a batch of at least 2")
    sim = similarity_matrix(c_a, c_v) / tau
    diag = torch.arange(sim.shape[0])
    a2v = -torch.log_softmax(sim, dim=1)[diag, diag]  # each audio over all videos
    v2a = -torch.log_softmax(sim, dim=0)[diag, diag]  # each video over all audios
    return 0.5 * (a2v.mean() + v2a.mean())


def combined_loss(caption_term: torch.Tensor, nce_term: torch.Tensor | None,
                  caption_weight: float = 1.0, nce_weight: float = 1.0) -> torch.Tensor:
    if nce_term is None:
        return caption_weight * caption_term
    return nce_weight * nce_term + caption_weight * caption_term
