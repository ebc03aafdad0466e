"""Sequence-level rewards for k-token rollouts."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

REWARD_KINDS = ("cosine", "binary", "hybrid")


@dataclass(frozen=True)
class RewardSpec:
    kind: str = "cosine"

    def __post_init__(self):
        if self.kind not in REWARD_KINDS:
            raise ValueError(f"reward kind must be one of {REWARD_KINDS}, got {self.kind!r}")

    def __call__(self, h_pred, h_gt, pred_tokens, gt_tokens) -> float:
        if self.kind == "cosine":
            return reward_cosine(h_pred, h_gt)
        if self.kind == "binary":
            return reward_binary(pred_tokens, gt_tokens)
        return reward_hybrid(h_pred, h_gt, pred_tokens, gt_tokens)


def reward_cosine(h_pred, h_gt) -> float:
    """Mean row-wise cosine similarity between predicted and reference hidden states.

    A row with zero norm on either side contributes 0.
    """
    a = np.atleast_2d(np.asarray(h_pred, dtype=np.float64))
    b = np.atleast_2d(np.asarray(h_gt, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"reward_cosine: shapes {a.shape} and {b.shape} differ")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    if not ok.all():
        log.warning("reward_cosine: %d zero-norm row(s) scored as 0", int((~ok).sum()))
    cos = np.zeros(len(a))
    cos[ok] = (a[ok] * b[ok]).sum(axis=1) / (na[ok] * nb[ok])
    return float(np.clip(cos, -1.0, 1.0).mean())


def reward_binary(pred_tokens, gt_tokens) -> float:
    """Fraction of positions where the generated token equals the reference token."""
    p = np.asarray(pred_tokens).reshape(-1)
    g = np.asarray(gt_tokens).reshape(-1)
    if p.shape != g.shape or p.size == 0:
        raise ValueError(f"reward_binary: lengths {p.size} and {g.size} must match and be > 0")
    return float((p == g).mean())


def reward_hybrid(h_pred, h_gt, pred_tokens, gt_tokens) -> float:
    return reward_cosine(h_pred, h_gt) + reward_binary(pred_tokens, gt_tokens)
