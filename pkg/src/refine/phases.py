"""Mid-training, nested post-training and test-time adaptation loops."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import TaskSample, TokenSequence
from .evaluation import eval_ntp
from .model import ModelParams, greedy_continue, save_checkpoint
from .numerics import Array
from .rewards import RewardSpec
from .rollout import RolloutConfig, RolloutRecord, rollout_sequence, write_rollout_dump
from .selection import SelectionConfig
from .trainer import (AdamState, TrainerConfig, combined_step, group_by_sequence, sft_step,
                      span_mask, standardize_advantages)

log = logging.getLogger(__name__)

PHASES = ("mid", "post", "ttt")
POST_MODES = ("sft", "nested_sft", "nested_refine")

# per-phase reward, RL weight, batch and PPO mini-batch
PHASE_DEFAULTS = {
    "mid": dict(reward="cosine", lambda_rl=0.2, batch_size=128, ppo_mini_batch=32),
    "post": dict(reward="hybrid", lambda_rl=0.2, batch_size=64, ppo_mini_batch=16),
    "ttt": dict(reward="binary", lambda_rl=0.4, batch_size=8, ppo_mini_batch=4),
}


@dataclass(frozen=True)
class PhaseConfig:
    phase: str = "mid"
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    reward: RewardSpec = field(default_factory=RewardSpec)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    steps: int = 100
    eval_every: int = 0          # 0 disables periodic evaluation and checkpoints
    seed: int = 0
    ttt_steps: int = 1
    rollback_inner: bool = False

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.steps < 0 or self.eval_every < 0 or self.ttt_steps < 0:
            raise ValueError("steps, eval_every and ttt_steps must be >= 0")

    @classmethod
    def defaults(cls, phase: str, seed: int = 0, **overrides) -> PhaseConfig:
        """Per-phase defaults, with selection and rollout seeds tied to ``seed``."""
        if phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {phase!r}")
        d = PHASE_DEFAULTS[phase]
        cfg = cls(phase=phase,
                  selection=SelectionConfig(c=8, seed=seed),
                  rollout=RolloutConfig(k=5, n=1, temperature=1.0, seed=seed),
                  reward=RewardSpec(d["reward"]),
                  trainer=TrainerConfig(lambda_rl=d["lambda_rl"], batch_size=d["batch_size"],
                                        ppo_mini_batch=d["ppo_mini_batch"]),
                  seed=seed)
        return replace(cfg, **overrides) if overrides else cfg

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: ModelParams
    metrics: list[dict]
    optimizer: AdamState | None = None


class BatchStream:
    """Endless batches drawn without replacement, reshuffled each pass."""

    def __init__(self, items, batch_size: int, seed: int):
        self.items = list(items)
        if not self.items:
            raise ValueError("BatchStream needs a non-empty corpus")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.batch_size = batch_size
        self.rng = np.random.default_rng([seed, 1])
        self.order = self.rng.permutation(len(self.items))
        self.cursor = 0
        self.epoch = 0

    def next_batch(self) -> list:
        out = []
        while len(out) < self.batch_size:
            if self.cursor == len(self.items):
                self.epoch += 1
                self.order = self.rng.permutation(len(self.items))
                self.cursor = 0
                log.info("corpus exhausted; reshuffled for pass %d", self.epoch)
            out.append(self.items[self.order[self.cursor]])
            self.cursor += 1
        return out


def _ids(seq) -> np.ndarray:
    return np.asarray(getattr(seq, "ids", seq), dtype=np.int64)


def _fits(n_tokens: int, config: PhaseConfig) -> bool:
    return n_tokens >= config.selection.c * (config.rollout.k + 1)


class _RunLog:
    """Metrics JSONL, rollout dump and checkpoints under one output directory."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir) if out_dir is not None else None
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)
            for name in ("metrics.jsonl", "rollouts.jsonl"):
                (self.dir / name).unlink(missing_ok=True)
        self.rows: list[dict] = []

    def step(self, row: dict) -> None:
        self.rows.append(row)
        if self.dir is not None:
            with open(self.dir / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row) + "\n")

    def rollouts(self, records, step: int) -> None:
        if self.dir is not None and records:
            write_rollout_dump(self.dir / "rollouts.jsonl", records, step=step)

    def checkpoint(self, params: ModelParams, tag: str) -> None:
        if self.dir is not None:
            save_checkpoint(params, self.dir / f"checkpoint_{tag}.rfnw")


def _maybe_eval(row: dict, params, step: int, config: PhaseConfig, eval_set, run: _RunLog) -> None:
    if config.eval_every and step % config.eval_every == 0:
        if eval_set:
            acc, loss = eval_ntp(params, eval_set)
            row["eval_acc"], row["eval_loss"] = acc, loss
        run.checkpoint(params, f"step{step}")


def collect_rollouts(params: ModelParams, batch, config: PhaseConfig, step: int) -> list[RolloutRecord]:
    """Select, roll out, score and standardise for every sequence in a batch.

    Sequences too short for ``c`` chunks of ``k + 1`` tokens contribute no rollouts.
    """
    records = []
    for i, seq in enumerate(batch):
        ids = _ids(seq)
        if not _fits(len(ids), config):
            continue
        _, _, recs = rollout_sequence(params, ids, i, config.selection, config.rollout,
                                      config.reward, key=(step,))
        records.extend(recs)
    for group in group_by_sequence(records).values():
        standardize_advantages(group, config.trainer.std_eps)
    return records


def mid_train(params: ModelParams, corpus, config: PhaseConfig, eval_set=None,
              out_dir=None) -> TrainResult:
    """Mid-training: rollouts and rewards on each batch, then a combined step."""
    stream = BatchStream(corpus, config.trainer.batch_size, config.seed)
    run = _RunLog(out_dir)
    state = AdamState()
    for step in range(1, config.steps + 1):
        batch = [_ids(s) for s in stream.next_batch()]
        records = collect_rollouts(params, batch, config, step)
        run.rollouts(records, step)
        params, state, metrics = combined_step(params, state, batch, records, config.trainer)
        row = {"step": step, "phase": "mid", **metrics, "n_rollouts": len(records)}
        _maybe_eval(row, params, step, config, eval_set, run)
        run.step(row)
    run.checkpoint(params, "final")
    return TrainResult(params, run.rows, state)


def train_sft(params: ModelParams, corpus, config: PhaseConfig, eval_set=None,
              out_dir=None) -> TrainResult:
    """Plain next-token training over the same batch stream as :func:`mid_train`."""
    stream = BatchStream(corpus, config.trainer.batch_size, config.seed)
    run = _RunLog(out_dir)
    state = AdamState()
    for step in range(1, config.steps + 1):
        batch = [_ids(s) for s in stream.next_batch()]
        params, state, metrics = sft_step(params, state, batch, config.trainer)
        row = {"step": step, "phase": "sft", **metrics, "n_rollouts": 0}
        _maybe_eval(row, params, step, config, eval_set, run)
        run.step(row)
    run.checkpoint(params, "final")
    return TrainResult(params, run.rows, state)


def _as_spanned(sample) -> TokenSequence:
    if isinstance(sample, TaskSample):
        return sample.to_sequence()
    if getattr(sample, "prompt_len", None) is None:
        raise ValueError("post-training samples need prompt/response span labels")
    return sample


def _shift(params: ModelParams, before: ModelParams, after: ModelParams) -> ModelParams:
    """``params + (after - before)`` per tensor."""
    out = {}
    for name, p in params.tensors.items():
        d = after[name].data.astype(np.float64) - before[name].data.astype(np.float64)
        out[name] = Array._wrap((p.data.astype(np.float64) + d).astype(p.data.dtype))
    return params.replace(out)


def post_train_nested(params: ModelParams, samples, config: PhaseConfig, mode: str = "nested_refine",
                      eval_set=None, out_dir=None) -> TrainResult:
    """Post-training on prompt/response samples.

    ``sft`` trains on whole sequences. The nested modes first update on the
    prompt alone (next-token only for ``nested_sft``, a full rollout-and-reward
    step for ``nested_refine``) and then take a next-token step on the response
    span.
    Inner updates persist unless ``config.rollback_inner`` is set, in which
    case only the outer update is kept.
    """
    if mode not in POST_MODES:
        raise ValueError(f"mode must be one of {POST_MODES}, got {mode!r}")
    seqs = [_as_spanned(s) for s in samples]
    for s in seqs:
        if len(s) - s.prompt_len < 1:
            raise ValueError("post-training sample has an empty response span")
    stream = BatchStream(seqs, config.trainer.batch_size, config.seed)
    run = _RunLog(out_dir)
    inner_state, outer_state = AdamState(), AdamState()
    for step in range(1, config.steps + 1):
        batch = stream.next_batch()
        row = {"step": step, "phase": "post", "mode": mode}
        if mode == "sft":
            params, outer_state, m = sft_step(params, outer_state, [s.ids for s in batch], config.trainer)
            row.update(loss_outer=m["loss_ntp"], grad_norm=m["grad_norm"])
        else:
            prompts = [s.ids[:s.prompt_len] for s in batch if s.prompt_len >= 2]
            start = params
            if prompts:
                if mode == "nested_refine":
                    records = collect_rollouts(params, prompts, config, step)
                    run.rollouts(records, step)
                    params, inner_state, m = combined_step(params, inner_state, prompts, records,
                                                           config.trainer)
                    row.update(reward_mean=m["reward_mean"], reward_std=m["reward_std"],
                               loss_inner_rl=m["loss_rl"], n_rollouts=len(records))
                else:
                    params, inner_state, m = sft_step(params, inner_state, prompts, config.trainer)
                row["loss_inner_ntp"] = m["loss_ntp"]
            inner = params
            masks = [span_mask(s, "response") for s in batch]
            params, outer_state, m = sft_step(params, outer_state, [s.ids for s in batch],
                                              config.trainer, masks)
            if config.rollback_inner and inner is not start:
                params = _shift(start, inner, params)
            row.update(loss_outer=m["loss_ntp"], grad_norm=m["grad_norm"])
        _maybe_eval(row, params, step, config, eval_set, run)
        run.step(row)
    run.checkpoint(params, "final")
    return TrainResult(params, run.rows, outer_state)


@dataclass
class TTTResult:
    params: ModelParams
    response: np.ndarray
    adapted: bool
    metrics: list[dict]


def ttt_adapt(params: ModelParams, prompt, config: PhaseConfig, gen_len: int = 32,
              steps: int | None = None) -> TTTResult:
    """Adapt a copy of ``params`` on the prompt alone, then decode greedily.

    Each step fills a batch with copies of the prompt; the copies differ only
    in the randomness of their rollouts. Prompts shorter than ``c * (k + 1)``
    are decoded without adaptation.
    """
    ids = _ids(prompt)
    steps = config.ttt_steps if steps is None else steps
    adapted = params
    metrics = []
    if steps > 0 and not _fits(len(ids), config):
        log.warning("prompt of %d tokens too short for c=%d, k=%d; decoding without adaptation",
                    len(ids), config.selection.c, config.rollout.k)
        steps = 0
    state = AdamState()
    for step in range(1, steps + 1):
        batch = [ids] * config.trainer.batch_size
        records = collect_rollouts(adapted, batch, config, step)
        adapted, state, m = combined_step(adapted, state, batch, records, config.trainer)
        metrics.append({"step": step, "phase": "ttt", **m})
    response = greedy_continue(adapted, ids, gen_len) if gen_len > 0 else np.zeros(0, np.int64)
    return TTTResult(adapted, response, steps > 0, metrics)
