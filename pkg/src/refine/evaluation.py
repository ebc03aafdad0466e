"""Held-out next-token metrics, needle recall, and diagnostic CSV dumps."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import TaskSample, decode_bytes, encode
from .model import ModelParams, forward_sequence, greedy_continue
from .selection import token_entropy

METRIC_RANGES = {
    "ntp_accuracy": (0.0, 1.0),
    "ntp_loss": (0.0, math.inf),
    "niah_recall": (0.0, 1.0),
    "copy_exact_match": (0.0, 1.0),
    "answer_recall": (0.0, 1.0),
}


def config_digest(obj) -> str:
    """Short stable hash of a JSON-serialisable config."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass(frozen=True)
class EvalReport:
    task: str
    metric: str
    value: float
    n_samples: int
    seed: int = 0
    config_digest: str = ""

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ValueError("EvalReport needs at least one sample")
        lo, hi = METRIC_RANGES.get(self.metric, (-math.inf, math.inf))
        if not lo <= self.value <= hi:
            raise ValueError(f"{self.metric}={self.value} outside [{lo}, {hi}]")

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def write_reports(path, reports) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")


def _ids(seq) -> np.ndarray:
    return np.asarray(getattr(seq, "ids", seq), dtype=np.int64)


def eval_ntp(params: ModelParams, sequences) -> tuple[float, float]:
    """Token-weighted (accuracy, mean cross-entropy) over every next-token target."""
    hits, total, nll = 0, 0, 0.0
    for seq in sequences:
        ids = _ids(seq)
        if len(ids) < 2:
            continue
        logits = forward_sequence(params, ids).logits.data[:-1].astype(np.float64)
        targets = ids[1:]
        hits += int((logits.argmax(axis=1) == targets).sum())
        m = logits.max(axis=1, keepdims=True)
        lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]
        nll += float((lse - logits[np.arange(len(targets)), targets]).sum())
        total += len(targets)
    if total == 0:
        raise ValueError("eval_ntp needs at least one sequence of length >= 2")
    return hits / total, nll / total


def needle_recall(decoded: str, values) -> float:
    """Fraction of ``values`` that occur verbatim in ``decoded``."""
    values = list(values)
    if not values:
        raise ValueError("needle_recall needs at least one queried value")
    return sum(v in decoded for v in values) / len(values)


def _queried_values(task: TaskSample) -> list[str]:
    if task.needles:
        return list(task.needles)
    return [v.strip() for v in task.answer.split(",") if v.strip()]


def eval_niah_recall(params: ModelParams, tasks, gen_len: int | None = None) -> float:
    """Mean recall of queried needle values in greedy continuations of each prompt."""
    tasks = list(tasks)
    if not tasks:
        raise ValueError("eval_niah_recall needs at least one task")
    scores = []
    for task in tasks:
        values = _queried_values(task)
        n = gen_len if gen_len is not None else max(len(v) for v in values) + 16
        out = greedy_continue(params, encode(task.prompt), n)
        text = decode_bytes(out).decode("utf-8", errors="replace")
        scores.append(needle_recall(text, values))
    return float(np.mean(scores))


def eval_copy_exact(params: ModelParams, tasks) -> float:
    """Fraction of tasks whose greedy continuation starts with the expected answer."""
    tasks = list(tasks)
    if not tasks:
        raise ValueError("eval_copy_exact needs at least one task")
    hits = 0
    for task in tasks:
        want = encode(task.answer)
        got = greedy_continue(params, encode(task.prompt), len(want))
        hits += bool(np.array_equal(got[:len(want)], want))
    return hits / len(tasks)


def prompt_logprob(params: ModelParams, ids) -> float:
    """Mean log-probability the model assigns to each prompt token after the first."""
    ids = _ids(ids)
    logits = forward_sequence(params, ids).logits.data[:-1].astype(np.float64)
    m = logits.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]
    return float((logits[np.arange(len(ids) - 1), ids[1:]] - lse).mean())


# -------------------------------------------------------------- diagnostics

def _read_jsonl(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"diagnostics input {path} does not exist")
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def reward_series(metrics_path) -> list[tuple[int, float, float]]:
    rows = [r for r in _read_jsonl(metrics_path) if "reward_mean" in r]
    return [(int(r["step"]), float(r["reward_mean"]), float(r["reward_std"])) for r in rows]


def rollout_reward_stats(rollouts_path) -> dict[int, tuple[float, float]]:
    """Per-step reward mean and population std recomputed from rollout records."""
    by_step: dict[int, list[float]] = {}
    for r in _read_jsonl(rollouts_path):
        by_step.setdefault(int(r["step"]), []).append(float(r["reward"]))
    return {s: (float(np.mean(v)), float(np.std(v))) for s, v in sorted(by_step.items())}


def dump_diagnostics(metrics_path, out_dir, params: ModelParams | None = None,
                     sample=None) -> list[Path]:
    """Write ``reward_series.csv`` and, given a model and a sample, ``entropy_profile.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    path = out_dir / "reward_series.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "reward_mean", "reward_std"])
        for step, mean, std in reward_series(metrics_path):
            w.writerow([step, repr(mean), repr(std)])
    written.append(path)
    if params is not None and sample is not None:
        ids = _ids(sample)
        prof = token_entropy(forward_sequence(params, ids).logits.data)
        path = out_dir / "entropy_profile.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["position", "token", "entropy"])
            for t, (tok, h) in enumerate(zip(ids, prof.raw)):
                w.writerow([t, int(tok), repr(float(h))])
        written.append(path)
    return written
