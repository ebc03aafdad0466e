"""Flat ``key = value`` run configuration with dotted namespaces.

Example file::

    # comments and blank lines are ignored
    phase = mid
    seed = 3
    model.d_model = 32
    phase.k = 5
    phase.lambda_rl = 0.2
    data.train = corpus.jsonl

Resolution order for every key is flags, then file, then (for ``seed`` only)
the ``REFINE_SEED`` environment variable, then the built-in default. Keys
whose default depends on the phase (reward, RL weight, batch sizes) take the
per-phase value when unset.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

from .model import UPDATE_MODES, ModelConfig
from .phases import PHASE_DEFAULTS, PHASES, POST_MODES, PhaseConfig
from .rewards import REWARD_KINDS, RewardSpec
from .rollout import RolloutConfig
from .selection import STRATEGIES, SelectionConfig
from .trainer import TrainerConfig


class ConfigError(ValueError):
    """A config key is unknown, mistyped, or violates its constraint."""


_PHASE_DEPENDENT = object()

_STRATEGY_ALIASES = {"argmax": "argmax_entropy", "argmin": "argmin_entropy"}


def _positive(x):
    return x >= 1


def _nonneg(x):
    return x >= 0


def _gt0(x):
    return x > 0


def _unit_open(x):
    return 0 < x < 1


def _one_of(options):
    return lambda x: x in options


# key -> (type, default, constraint, constraint text)
SCHEMA: dict[str, tuple] = {
    "phase": (str, "mid", _one_of(PHASES), f"one of {', '.join(PHASES)}"),
    "seed": (int, 0, _nonneg, "seed ≥ 0"),
    "output_dir": (str, "runs/default", None, ""),
    "init_checkpoint": (str, "", None, ""),

    "model.vocab_size": (int, 258, _positive, "vocab_size ≥ 1"),
    "model.d_model": (int, 32, _positive, "d_model ≥ 1"),
    "model.n_layers": (int, 2, _positive, "n_layers ≥ 1"),
    "model.d_fast": (int, 16, _positive, "d_fast ≥ 1"),
    "model.d_ff": (int, 0, _nonneg, "d_ff ≥ 0 (0 means 4·d_model)"),
    "model.eta": (float, 0.5, _gt0, "eta > 0"),
    "model.update_mode": (str, "per_token_delta", _one_of(UPDATE_MODES),
                          f"one of {', '.join(UPDATE_MODES)}"),
    "model.chunk_size": (int, 16, _positive, "chunk_size ≥ 1"),
    "model.max_seq_len": (int, 512, _positive, "max_seq_len ≥ 1"),

    "phase.c": (int, 8, _positive, "c ≥ 1"),
    "phase.k": (int, 5, _positive, "k ≥ 1"),
    "phase.n": (int, 1, _positive, "n ≥ 1"),
    "phase.tau": (float, 1.0, _gt0, "tau > 0"),
    "phase.strategy": (str, "entropy_weighted", _one_of(STRATEGIES),
                       f"one of {', '.join(STRATEGIES)}"),
    "phase.pool_kernel": (int, 0, _nonneg, "pool_kernel ≥ 0 (0 means k)"),
    "phase.temperature": (float, 1.0, _nonneg, "temperature ≥ 0"),
    "phase.reward": (str, _PHASE_DEPENDENT, _one_of(REWARD_KINDS), f"one of {', '.join(REWARD_KINDS)}"),
    "phase.lambda_sft": (float, 1.0, _nonneg, "lambda_sft ≥ 0"),
    "phase.lambda_rl": (float, _PHASE_DEPENDENT, _nonneg, "lambda_rl ≥ 0"),
    "phase.clip_ratio": (float, 0.2, _unit_open, "0 < clip_ratio < 1"),
    "phase.grad_clip_norm": (float, 0.2, _gt0, "grad_clip_norm > 0"),
    "phase.lr": (float, 1e-6, _gt0, "lr > 0"),
    "phase.beta1": (float, 0.9, lambda x: 0 <= x < 1, "0 ≤ beta1 < 1"),
    "phase.beta2": (float, 0.999, lambda x: 0 <= x < 1, "0 ≤ beta2 < 1"),
    "phase.adam_eps": (float, 1e-8, _gt0, "adam_eps > 0"),
    "phase.weight_decay": (float, 0.01, _nonneg, "weight_decay ≥ 0"),
    "phase.batch_size": (int, _PHASE_DEPENDENT, _positive, "batch_size ≥ 1"),
    "phase.ppo_mini_batch": (int, _PHASE_DEPENDENT, _positive, "ppo_mini_batch ≥ 1"),
    "phase.std_eps": (float, 1e-6, _gt0, "std_eps > 0"),
    "phase.steps": (int, 100, _nonneg, "steps ≥ 0"),
    "phase.eval_every": (int, 0, _nonneg, "eval_every ≥ 0"),
    "phase.ttt_steps": (int, 1, _nonneg, "ttt_steps ≥ 0"),
    "phase.rollback_inner": (bool, False, None, ""),
    "phase.mode": (str, "nested_refine", _one_of(POST_MODES), f"one of {', '.join(POST_MODES)}"),
    "phase.gen_len": (int, 0, _nonneg, "gen_len ≥ 0 (0 means answer length + 16)"),

    "data.train": (str, "", None, ""),
    "data.eval": (str, "", None, ""),
    "data.tasks": (str, "", None, ""),
    "data.stride": (int, 0, _nonneg, "stride ≥ 0 (0 means max_seq_len)"),
    "data.holdout": (int, 20, _nonneg, "holdout ≥ 0"),
    "data.synthetic_seqs": (int, 200, _positive, "synthetic_seqs ≥ 1"),
    "data.synthetic_len": (int, 256, _positive, "synthetic_len ≥ 1"),
}

# short names accepted by flags and sweeps
ALIASES = {key.split(".", 1)[1]: key for key in SCHEMA if key.startswith("phase.")}
ALIASES.update({"d_model": "model.d_model", "n_layers": "model.n_layers",
                "d_fast": "model.d_fast", "update_mode": "model.update_mode"})

_PHASE_DEFAULT_KEYS = {"phase.reward": "reward", "phase.lambda_rl": "lambda_rl",
                       "phase.batch_size": "batch_size", "phase.ppo_mini_batch": "ppo_mini_batch"}


def canonical_key(key: str) -> str:
    key = key.strip()
    if key in SCHEMA:
        return key
    if key in ALIASES:
        return ALIASES[key]
    raise ConfigError(f"unknown config key {key!r}")


def coerce(key: str, raw) -> object:
    """Parse ``raw`` for ``key`` and enforce its constraint."""
    key = canonical_key(key)
    typ, _, check, form = SCHEMA[key]
    text = raw.strip() if isinstance(raw, str) else raw
    try:
        if typ is bool:
            if isinstance(text, bool):
                value = text
            elif str(text).lower() in ("true", "1", "yes"):
                value = True
            elif str(text).lower() in ("false", "0", "no"):
                value = False
            else:
                raise ValueError
        elif typ is int:
            if isinstance(text, float) or (isinstance(text, str) and not text.lstrip("+-").isdigit()):
                raise ValueError
            value = int(text)
        elif typ is float:
            value = float(text)
        else:
            value = str(text)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {typ.__name__}, got {raw!r}") from None
    if key == "phase.strategy":
        value = _STRATEGY_ALIASES.get(value, value)
    if check is not None and not check(value):
        raise ConfigError(f"{key} = {raw!r} violates constraint: {form}")
    return value


def read_config_file(path) -> dict[str, object]:
    """Parse a flat key-value file. Duplicate keys are rejected."""
    out: dict[str, object] = {}
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                key = canonical_key(key)
                if key in out:
                    raise ConfigError(f"duplicate key {key!r}")
                out[key] = coerce(key, value)
            except ConfigError as err:
                raise ConfigError(f"{path}:{lineno}: {err}") from None
    return out


@dataclass
class RunConfig:
    model: ModelConfig
    phase: PhaseConfig
    values: dict = field(default_factory=dict)   # every key, fully resolved

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def output_dir(self) -> Path:
        return Path(self.values["output_dir"])

    @property
    def data(self) -> dict:
        return {k[5:]: v for k, v in self.values.items() if k.startswith("data.")}

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(self.values.items()))

    def write(self, directory=None) -> Path:
        """Write the resolved config as a re-loadable file next to the outputs."""
        d = Path(directory) if directory is not None else self.output_dir
        d.mkdir(parents=True, exist_ok=True)
        path = d / "resolved_config.txt"
        path.write_text(self.to_text(), encoding="utf-8")
        return path


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def resolve(file_values: dict | None = None, flag_values: dict | None = None,
            env: dict | None = None) -> dict[str, object]:
    env = os.environ if env is None else env
    merged: dict[str, object] = {}
    for source in (file_values or {}, flag_values or {}):
        for key, value in source.items():
            merged[canonical_key(key)] = coerce(key, value)
    if "seed" not in merged and env.get("REFINE_SEED") not in (None, ""):
        try:
            merged["seed"] = coerce("seed", env["REFINE_SEED"])
        except ConfigError as err:
            raise ConfigError(f"REFINE_SEED: {err}") from None
    phase = merged.get("phase", SCHEMA["phase"][1])
    values = {}
    for key, (_, default, _, _) in SCHEMA.items():
        if key in merged:
            values[key] = merged[key]
        elif default is _PHASE_DEPENDENT:
            values[key] = PHASE_DEFAULTS[phase][_PHASE_DEFAULT_KEYS[key]]
        else:
            values[key] = default
    return values


def build(values: dict) -> RunConfig:
    """Typed model and phase configs from resolved values."""
    v = values
    try:
        model = ModelConfig(vocab_size=v["model.vocab_size"], d_model=v["model.d_model"],
                            n_layers=v["model.n_layers"], d_fast=v["model.d_fast"],
                            eta=v["model.eta"], update_mode=v["model.update_mode"],
                            chunk_size=v["model.chunk_size"], max_seq_len=v["model.max_seq_len"],
                            d_ff=v["model.d_ff"] or None)
        seed = v["seed"]
        phase = PhaseConfig(
            phase=v["phase"],
            selection=SelectionConfig(c=v["phase.c"], tau=v["phase.tau"], strategy=v["phase.strategy"],
                                      pool_kernel=v["phase.pool_kernel"] or None, seed=seed),
            rollout=RolloutConfig(k=v["phase.k"], n=v["phase.n"], temperature=v["phase.temperature"],
                                  seed=seed),
            reward=RewardSpec(v["phase.reward"]),
            trainer=TrainerConfig(lambda_sft=v["phase.lambda_sft"], lambda_rl=v["phase.lambda_rl"],
                                  clip_ratio=v["phase.clip_ratio"],
                                  grad_clip_norm=v["phase.grad_clip_norm"], lr=v["phase.lr"],
                                  beta1=v["phase.beta1"], beta2=v["phase.beta2"],
                                  adam_eps=v["phase.adam_eps"], weight_decay=v["phase.weight_decay"],
                                  batch_size=v["phase.batch_size"],
                                  ppo_mini_batch=v["phase.ppo_mini_batch"], std_eps=v["phase.std_eps"]),
            steps=v["phase.steps"], eval_every=v["phase.eval_every"], seed=seed,
            ttt_steps=v["phase.ttt_steps"], rollback_inner=v["phase.rollback_inner"])
    except ValueError as err:
        raise ConfigError(str(err)) from None
    return RunConfig(model, phase, dict(values))


def parse_config(path=None, flags: dict | None = None, env: dict | None = None) -> RunConfig:
    """Resolve a run config from an optional file and flag overrides."""
    file_values = read_config_file(path) if path else {}
    return build(resolve(file_values, flags, env))
