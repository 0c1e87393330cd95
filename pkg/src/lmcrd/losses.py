"""Hierarchical and view-level contrastive losses.

Sample-level losses use time-pooled branch representations; only the temporal
loss works per timestep.  Where a loss has positives and negatives, the
denominator sums over negatives only unless ``standard_infonce`` is set, in
which case each positive is added to its own denominator.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

COMPONENTS = ("L_S", "L_R", "L_E", "L_T", "L_IRV", "L_IAV")


class DegenerateBatchWarning(UserWarning):
    pass


@dataclass
class LossConfig:
    temperature: float = 0.1
    lambda_s: float = 1.0
    lambda_r: float = 1.0
    lambda_e: float = 1.0
    lambda_t: float = 1.0
    lambda_v: float = 2.0
    similarity: str = "cosine"
    time_pool: str = "mean"
    standard_infonce: bool = False

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if min(self.lambda_s, self.lambda_r, self.lambda_e, self.lambda_t, self.lambda_v) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.similarity not in ("cosine", "dot"):
            raise ValueError(f"unknown similarity {self.similarity!r}")
        if self.time_pool != "mean":
            raise ValueError("only mean time pooling is supported")


@dataclass
class ContrastiveBatch:
    h1: torch.Tensor
    h2: torch.Tensor
    g1: torch.Tensor | None
    g2: torch.Tensor | None
    subject_ids: Sequence[str]
    trial_ids: Sequence[str]

    def __post_init__(self):
        M = self.h1.shape[0]
        if self.h2.shape != self.h1.shape:
            raise ValueError("branch representations differ in shape")
        if len(self.subject_ids) != M or len(self.trial_ids) != M:
            raise ValueError("id arrays are not aligned with the batch")
        if (self.g1 is None) != (self.g2 is None):
            raise ValueError("view tensors must be given for both branches or neither")

    @property
    def M(self) -> int:
        return self.h1.shape[0]


def _flag(flags, message: str) -> None:
    if flags is None:
        warnings.warn(message, DegenerateBatchWarning, stacklevel=3)
    else:
        flags.append(message)


def similarity_matrix(a: torch.Tensor, b: torch.Tensor, kind: str = "cosine") -> torch.Tensor:
    if kind == "cosine":
        a = F.normalize(a, dim=-1, eps=1e-12)
        b = F.normalize(b, dim=-1, eps=1e-12)
    elif kind != "dot":
        raise ValueError(f"unknown similarity {kind!r}")
    return a @ b.transpose(-1, -2)


def _same(ids: Sequence[str]) -> torch.Tensor:
    codes = np.unique(np.asarray(ids, dtype=object).astype(str), return_inverse=True)[1]
    c = torch.as_tensor(codes)
    return c[:, None] == c[None, :]


def _grouped(sim: torch.Tensor, pos: torch.Tensor, neg: torch.Tensor, standard: bool, what: str, flags):
    """Mean over surviving anchors of -sum_pos log(exp(s_pos) / sum_neg exp(s_neg))."""
    # rows without negatives get a finite dummy so backward stays NaN-free
    has_neg = neg.any(dim=-1, keepdim=True)
    filled = sim.masked_fill(~neg, float("-inf")).masked_fill(~has_neg, 0.0)
    lse_neg = filled.logsumexp(dim=-1, keepdim=True)
    log_den = torch.logaddexp(lse_neg, sim) if standard else lse_neg.expand_as(sim)
    terms = torch.where(pos, sim - log_den, torch.zeros_like(sim))
    valid = pos.any(dim=-1) & neg.any(dim=-1)
    if not bool(valid.any()):
        empty = "positive" if not bool(pos.any()) else "negative"
        _flag(flags, f"{what}: every anchor has an empty {empty} set; loss set to 0")
        return sim.sum() * 0.0
    return -(terms.sum(dim=-1)[valid]).sum() / valid.sum()


def _pooled(x: torch.Tensor) -> torch.Tensor:
    return x.mean(dim=1)


def subject_loss(batch: ContrastiveBatch, cfg: LossConfig | None = None, flags=None) -> torch.Tensor:
    cfg = cfg or LossConfig()
    z = _pooled(batch.h1)
    sim = similarity_matrix(z, z, cfg.similarity) / cfg.temperature
    same = _same(batch.subject_ids)
    eye = torch.eye(batch.M, dtype=torch.bool)
    return _grouped(sim, same & ~eye, ~same, cfg.standard_infonce, "subject loss", flags)


def trial_loss(batch: ContrastiveBatch, cfg: LossConfig | None = None, flags=None) -> torch.Tensor:
    cfg = cfg or LossConfig()
    z = _pooled(batch.h1)
    sim = similarity_matrix(z, z, cfg.similarity) / cfg.temperature
    same = _same(batch.trial_ids)
    eye = torch.eye(batch.M, dtype=torch.bool)
    return _grouped(sim, same & ~eye, ~same, cfg.standard_infonce, "trial loss", flags)


def _pair_loss(a: torch.Tensor, b: torch.Tensor, standard: bool) -> torch.Tensor:
    """Per-anchor -log(exp(a_i.b_i) / sum_{j!=i} exp(a_i.a_j) + exp(a_i.b_j)).

    ``a`` and ``b`` are ``(..., N, D)``; the anchor axis is N.
    """
    N = a.shape[-2]
    s_aa = a @ a.transpose(-1, -2)
    s_ab = a @ b.transpose(-1, -2)
    off = ~torch.eye(N, dtype=torch.bool)
    logits = torch.cat([s_aa.masked_fill(~off, float("-inf")), s_ab.masked_fill(~off, float("-inf"))], dim=-1)
    num = torch.diagonal(s_ab, dim1=-2, dim2=-1)
    if standard:
        logits = torch.cat([logits, num.unsqueeze(-1)], dim=-1)
    return logits.logsumexp(dim=-1) - num


def epoch_loss(batch: ContrastiveBatch, cfg: LossConfig | None = None) -> torch.Tensor:
    if batch.M < 2:
        raise ValueError("epoch loss needs at least 2 samples")
    standard = bool(cfg and cfg.standard_infonce)
    return _pair_loss(_pooled(batch.h1), _pooled(batch.h2), standard).mean()


def temporal_loss(batch: ContrastiveBatch, cfg: LossConfig | None = None) -> torch.Tensor:
    if batch.h1.shape[1] < 2:
        raise ValueError("temporal loss needs at least 2 timesteps")
    standard = bool(cfg and cfg.standard_infonce)
    return _pair_loss(batch.h1, batch.h2, standard).mean()


def inter_view_loss(batch: ContrastiveBatch, cfg: LossConfig | None = None) -> torch.Tensor:
    """Views aggregated by their mean over samples and time, compared across branches."""
    cfg = cfg or LossConfig()
    if batch.g1 is None:
        raise ValueError("inter-view loss needs view representations")
    V = batch.g1.shape[2]
    if V < 2:
        raise ValueError("inter-view loss needs at least 2 views")
    agg1 = batch.g1.mean(dim=(0, 1))
    agg2 = batch.g2.mean(dim=(0, 1))
    sim = similarity_matrix(agg1, agg2, cfg.similarity)
    eye = torch.eye(V, dtype=torch.bool)
    pos = torch.diagonal(sim)
    lse_neg = sim.masked_fill(eye, float("-inf")).logsumexp(dim=-1)
    log_den = torch.logaddexp(lse_neg, pos) if cfg.standard_infonce else lse_neg
    return (log_den - pos).mean()


def intra_view_loss(batch: ContrastiveBatch, cfg: LossConfig | None = None, flags=None) -> torch.Tensor:
    """Per view: branch-1 anchor vs branch-2 samples, positives share the subject."""
    cfg = cfg or LossConfig()
    if batch.g1 is None:
        raise ValueError("intra-view loss needs view representations")
    p1 = _pooled(batch.g1).transpose(0, 1)
    p2 = _pooled(batch.g2).transpose(0, 1)
    sim = similarity_matrix(p1, p2, cfg.similarity) / cfg.temperature
    same = _same(batch.subject_ids).expand(sim.shape)
    V, M = sim.shape[:2]
    return _grouped(
        sim.reshape(V * M, M), same.reshape(V * M, M), ~same.reshape(V * M, M),
        cfg.standard_infonce, "intra-view loss", flags,
    )


def total_loss(batch: ContrastiveBatch, cfg: LossConfig | None = None, flags=None):
    """Weighted sum of all components; view terms are skipped without views.

    Returns ``(total, components)`` with components keyed by ``COMPONENTS``.
    """
    cfg = cfg or LossConfig()
    parts = {
        "L_S": subject_loss(batch, cfg, flags),
        "L_R": trial_loss(batch, cfg, flags),
        "L_E": epoch_loss(batch, cfg),
        "L_T": temporal_loss(batch, cfg),
    }
    total = (
        cfg.lambda_s * parts["L_S"] + cfg.lambda_r * parts["L_R"]
        + cfg.lambda_e * parts["L_E"] + cfg.lambda_t * parts["L_T"]
    )
    if batch.g1 is not None:
        parts["L_IRV"] = inter_view_loss(batch, cfg)
        parts["L_IAV"] = intra_view_loss(batch, cfg, flags)
        total = total + cfg.lambda_v * (parts["L_IRV"] + parts["L_IAV"])
    return total, parts
