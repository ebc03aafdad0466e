"""Rollouts from truncated prefixes and their ground-truth counterparts."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .model import (FastWeightState, ForwardOutput, ModelParams, PrefixState, forward_sequence,
                    generate, state_at)
from .rewards import RewardSpec
from .selection import SelectionConfig, select_for_logits


@dataclass(frozen=True)
class RolloutConfig:
    k: int = 5
    n: int = 1
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("RolloutConfig requires k >= 1")
        if self.n < 1:
            raise ValueError("RolloutConfig requires n >= 1")
        if self.temperature < 0:
            raise ValueError("RolloutConfig requires temperature >= 0")


@dataclass
class RolloutRecord:
    seq_id: int
    position: int
    context: np.ndarray = field(repr=False)   # x[: position + 1]
    tokens: np.ndarray = None
    logprobs: np.ndarray = None               # under the generating policy
    h_pred: np.ndarray = field(default=None, repr=False)
    h_gt: np.ndarray = field(default=None, repr=False)
    gt_tokens: np.ndarray = None
    reward: float | None = None
    advantage: float | None = None

    def to_json(self, **extra) -> dict:
        rec = {"seq_id": int(self.seq_id), "t": int(self.position),
               "tokens": [int(x) for x in self.tokens],
               "logprobs": [float(x) for x in self.logprobs],
               "reward": None if self.reward is None else float(self.reward),
               "advantage": None if self.advantage is None else float(self.advantage)}
        rec.update(extra)
        return rec


def build_prefix_states(params: ModelParams, forward_output: ForwardOutput,
                        positions) -> list[PrefixState]:
    """Memory after ``x[:t]`` (plus the unread token ``x[t]``) for each position.

    Per-token mode reads the states captured by the forward pass; chunked mode
    re-runs each prefix from scratch.
    """
    cfg = params.config
    ids = forward_output.ids
    T = len(ids)
    out = []
    for t in positions:
        t = int(t)
        if not 0 <= t < T:
            raise IndexError(f"position {t} outside sequence of length {T}")
        if cfg.update_mode == "per_token_delta":
            state = state_at(forward_output, t, cfg)
        elif t == 0:
            state = FastWeightState.zeros(cfg)
        else:
            state = forward_sequence(params, ids[:t]).final_state
        out.append(PrefixState(state, int(ids[t])))
    return out


def extract_gt_hidden(forward_output: ForwardOutput, t: int, k: int) -> np.ndarray:
    """Teacher-forced hidden rows t+1 .. t+k of the original forward pass."""
    T = forward_output.length
    if t < 0 or k < 1 or t + k > T - 1:
        raise IndexError(f"ground-truth window [{t + 1}, {t + k}] outside sequence of length {T}")
    return forward_output.hidden.data[t + 1:t + k + 1].copy()


def rollout(params: ModelParams, prefix: PrefixState, config: RolloutConfig,
            key: tuple[int, ...] = (), seq_id: int = 0, context=None) -> list[RolloutRecord]:
    """``config.n`` sampled k-token continuations of one prefix.

    Rollout i draws from its own generator seeded by ``(config.seed, *key, i)``
    so results do not depend on the order positions are processed in.
    """
    records = []
    for i in range(config.n):
        rng = np.random.default_rng([config.seed, *key, i])
        gen = generate(params, prefix, config.k, config.temperature, rng)
        records.append(RolloutRecord(seq_id, prefix.position,
                                     None if context is None else np.asarray(context),
                                     gen.tokens, gen.logprobs, gen.hidden))
    return records


def rollout_sequence(params: ModelParams, seq, seq_id: int, selection: SelectionConfig,
                     config: RolloutConfig, reward: RewardSpec, key: tuple[int, ...] = ()):
    """Forward one sequence, choose positions, roll out and score.

    Returns ``(forward_output, entropy_profile, records)``.
    """
    ids = np.asarray(getattr(seq, "ids", seq), dtype=np.int64)
    per_token = params.config.update_mode == "per_token_delta"
    out = forward_sequence(params, ids, capture_states=per_token)
    sel_rng = np.random.default_rng([selection.seed, *key, seq_id])
    profile, chosen = select_for_logits(out.logits, selection, config.k, sel_rng)
    prefixes = build_prefix_states(params, out, chosen.positions)
    records = []
    for t, prefix in zip(chosen.positions, prefixes):
        t = int(t)
        h_gt = extract_gt_hidden(out, t, config.k)
        gt_tokens = ids[t + 1:t + config.k + 1]
        for rec in rollout(params, prefix, config, (*key, seq_id, t), seq_id, ids[:t + 1]):
            rec.h_gt = h_gt
            rec.gt_tokens = gt_tokens
            rec.reward = reward(rec.h_pred, h_gt, rec.tokens, gt_tokens)
            records.append(rec)
    return out, profile, records


def write_rollout_dump(path, records, **extra) -> None:
    """Append records as JSONL diagnostics lines."""
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(**extra)) + "\n")
