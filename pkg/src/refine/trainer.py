"""Policy-gradient and next-token losses, and the optimiser step that mixes them."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .model import ForwardOutput, ModelParams, forward_sequence
from .numerics import Array
from .rollout import RolloutRecord


@dataclass(frozen=True)
class TrainerConfig:
    lambda_sft: float = 1.0
    lambda_rl: float = 0.2
    clip_ratio: float = 0.2
    grad_clip_norm: float = 0.2
    lr: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 128
    ppo_mini_batch: int = 32
    std_eps: float = 1e-6

    def __post_init__(self):
        if self.lambda_sft < 0 or self.lambda_rl < 0:
            raise ValueError("lambda_sft and lambda_rl must be >= 0")
        if not 0 < self.clip_ratio < 1:
            raise ValueError("clip_ratio must lie in (0, 1)")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be > 0")
        if self.batch_size < 1 or self.ppo_mini_batch < 1:
            raise ValueError("batch_size and ppo_mini_batch must be >= 1")


@dataclass(frozen=True)
class PolicySnapshot:
    """The policy that generated a rollout batch (pi_old)."""

    params: ModelParams


# ---------------------------------------------------------------- advantages

def standardize_advantages(records: list[RolloutRecord], std_eps: float = 1e-6) -> list[RolloutRecord]:
    """Set ``A_i = (R_i - mean R) / (std R + eps)`` within one group, in place.

    Uses the population standard deviation; a group whose rewards are all
    equal gets zero advantages.
    """
    if not records:
        return records
    R = np.array([r.reward for r in records], dtype=np.float64)
    if np.all(R == R[0]):
        adv = np.zeros_like(R)
    else:
        adv = (R - R.mean()) / (R.std() + std_eps)
    for rec, a in zip(records, adv):
        rec.advantage = float(a)
    return records


def group_by_sequence(records) -> dict[int, list[RolloutRecord]]:
    groups: dict[int, list[RolloutRecord]] = {}
    for rec in records:
        groups.setdefault(rec.seq_id, []).append(rec)
    return groups


# -------------------------------------------------------------------- losses

def _ids(seq) -> np.ndarray:
    return np.asarray(getattr(seq, "ids", seq), dtype=np.int64)


def span_mask(seq, span: str) -> np.ndarray:
    """Boolean mask over next-token targets 1..T-1 that fall in ``span``."""
    P = getattr(seq, "prompt_len", None)
    if P is None:
        raise ValueError("sequence has no prompt/response span labels")
    target_pos = np.arange(1, len(_ids(seq)))
    if span == "prompt":
        return target_pos < P
    if span == "response":
        return target_pos >= P
    raise ValueError(f"unknown span {span!r}")


def ntp_from_forward(out: ForwardOutput, mask=None) -> Array:
    """Mean next-token cross-entropy from a forward pass over the same tokens."""
    ids = out.ids
    if len(ids) < 2:
        raise ValueError("ntp_loss needs a sequence of length >= 2")
    logits = nx.slice_rows(out.logits, 0, len(ids) - 1)
    token_lp = nx.pick(nx.log_softmax(logits), ids[1:])
    if mask is None:
        return nx.neg(nx.mean(token_lp))
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (len(ids) - 1,):
        raise ValueError(f"mask must cover the {len(ids) - 1} next-token targets")
    if not mask.any():
        raise ValueError("ntp_loss: every target is masked out")
    return nx.neg(nx.mean(nx.gather_rows(token_lp, np.flatnonzero(mask))))


def ntp_loss(params: ModelParams, seq, mask=None) -> Array:
    """Mean cross-entropy of next-token predictions over unmasked targets."""
    ids = _ids(seq)
    if len(ids) < 2:
        raise ValueError("ntp_loss needs a sequence of length >= 2")
    return ntp_from_forward(forward_sequence(params, ids), mask)


def policy_logprobs(params: ModelParams, record: RolloutRecord,
                    forward: ForwardOutput | None = None) -> Array:
    """log pi_theta of the record's generated tokens, tracked when params are.

    With a per-token forward of the record's sequence the rollout branches off
    the captured memory at its position, so gradients reach the whole prefix;
    otherwise the prefix is re-run together with the rollout.
    """
    t = record.position
    tokens = np.asarray(record.tokens, dtype=np.int64)
    k = len(tokens)
    cfg = params.config
    if forward is not None and forward.states is not None and cfg.update_mode == "per_token_delta":
        first = nx.slice_rows(forward.logits, t, t + 1)
        rows = [first]
        if k > 1:
            init = [S[t + 1] for S in forward.states]
            branch = forward_sequence(params, tokens[:-1], init_matrices=init, position=t + 1)
            rows.append(branch.logits)
        logits = nx.concat_rows(rows) if len(rows) > 1 else first
    else:
        ids = np.concatenate([np.asarray(record.context, dtype=np.int64), tokens[:-1]])
        out = forward_sequence(params, ids)
        logits = nx.slice_rows(out.logits, t, t + k)
    return nx.pick(nx.log_softmax(logits), tokens)


def grpo_loss(records: list[RolloutRecord], params: ModelParams,
              snapshot: PolicySnapshot | None = None, clip_ratio: float = 0.2,
              forwards: dict[int, ForwardOutput] | None = None) -> Array:
    """Clipped-surrogate policy loss averaged over all rollout tokens.

    Each token's ratio is ``exp(logp_theta - logp_old)``; the rollout's
    advantage is shared by all its tokens. Old log-probabilities come from the
    records, or are recomputed under ``snapshot`` when given.
    """
    if not records:
        raise ValueError("grpo_loss needs at least one record")
    forwards = forwards or {}
    lp_new, lp_old, adv = [], [], []
    for rec in records:
        if rec.advantage is None:
            raise ValueError(f"record at position {rec.position} has no advantage")
        lp_new.append(policy_logprobs(params, rec, forwards.get(rec.seq_id)))
        if snapshot is not None:
            lp_old.append(policy_logprobs(snapshot.params, rec).data.astype(np.float64))
        else:
            lp_old.append(np.asarray(rec.logprobs, dtype=np.float64))
        adv.append(np.full(len(rec.tokens), rec.advantage))
    new = nx.concat_rows(lp_new)
    dt = new.data.dtype
    old = Array._wrap(np.concatenate(lp_old).astype(dt))
    A = Array._wrap(np.concatenate(adv).astype(dt))
    ratio = nx.exp(nx.sub(new, old))
    eps = clip_ratio
    surrogate = nx.minimum(nx.mul(ratio, A), nx.mul(nx.clip(ratio, 1.0 - eps, 1.0 + eps), A))
    return nx.neg(nx.mean(surrogate))


# ----------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict, float]:
    """Scale gradients so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if norm > max_norm:
        factor = max_norm / (norm + 1e-6)
        grads = {k: (g * factor).astype(g.dtype) for k, g in grads.items()}
    return grads, norm


def adam_update(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState,
                config: TrainerConfig) -> tuple[ModelParams, AdamState]:
    """AdamW with decoupled weight decay. Returns new params and state."""
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    lr, wd = config.lr, config.weight_decay
    new_m, new_v, tensors = {}, {}, {}
    for name, p in params.tensors.items():
        g = grads[name].astype(np.float64)
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        x = p.data.astype(np.float64)
        x = x * (1.0 - lr * wd) - lr * mhat / (np.sqrt(vhat) + config.adam_eps)
        new_m[name], new_v[name] = m, v
        tensors[name] = Array._wrap(x.astype(p.data.dtype))
    return params.replace(tensors), AdamState(t, new_m, new_v)


def _gradients(params: ModelParams, loss_fn) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    tp = params.tracked()
    with nx.Tape() as tape:
        loss, parts = loss_fn(tp)
    value = loss.item()
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value} ({parts}); step aborted")
    raw = tape.backward(loss, wrt=tp.tensors.values())
    return {name: raw[arr] for name, arr in tp.tensors.items()}, parts


def _minibatches(n: int, size: int) -> list[range]:
    return [range(i, min(n, i + size)) for i in range(0, n, size)]


def combined_step(params: ModelParams, state: AdamState, batch: list, records: list[RolloutRecord],
                  config: TrainerConfig) -> tuple[ModelParams, AdamState, dict]:
    """One training step on ``lambda_sft * L_ntp + lambda_rl * L_grpo``.

    The batch is consumed in ``ceil(len(batch) / ppo_mini_batch)`` updates;
    records belong to the sequence whose batch index equals ``seq_id`` and
    carry log-probabilities from the policy that generated them.
    """
    by_seq = group_by_sequence(records)
    ntp_vals, rl_vals, norms = [], [], []
    for mb in _minibatches(len(batch), config.ppo_mini_batch):
        mb_records = [r for i in mb for r in by_seq.get(i, [])]

        def loss_fn(tp):
            fwds = {i: forward_sequence(tp, batch[i], capture_states=True) for i in mb}
            ntp = nx.mean(nx.concat_rows([nx.reshape(ntp_from_forward(fwds[i]), (1,)) for i in mb]))
            total = nx.scale(ntp, config.lambda_sft)
            parts = {"ntp": ntp.item(), "rl": 0.0}
            if mb_records:
                rl = grpo_loss(mb_records, tp, clip_ratio=config.clip_ratio, forwards=fwds)
                total = nx.add(total, nx.scale(rl, config.lambda_rl))
                parts["rl"] = rl.item()
            return total, parts

        grads, parts = _gradients(params, loss_fn)
        grads, norm = clip_grad_norm(grads, config.grad_clip_norm)
        params, state = adam_update(params, grads, state, config)
        ntp_vals.append(parts["ntp"])
        rl_vals.append(parts["rl"])
        norms.append(norm)
    rewards = np.array([r.reward for r in records], dtype=np.float64)
    metrics = {
        "loss_ntp": float(np.mean(ntp_vals)),
        "loss_rl": float(np.mean(rl_vals)),
        "reward_mean": float(rewards.mean()) if len(rewards) else 0.0,
        "reward_std": float(rewards.std()) if len(rewards) else 0.0,
        "grad_norm": float(np.mean(norms)),
        "lr": config.lr,
    }
    return params, state, metrics


def sft_step(params: ModelParams, state: AdamState, batch: list, config: TrainerConfig,
             masks: list | None = None) -> tuple[ModelParams, AdamState, dict]:
    """Pure next-token step with the same mini-batching and optimiser as :func:`combined_step`."""
    ntp_vals, norms = [], []
    for mb in _minibatches(len(batch), config.ppo_mini_batch):

        def loss_fn(tp):
            losses = []
            for i in mb:
                out = forward_sequence(tp, batch[i], capture_states=True)
                mask = None if masks is None else masks[i]
                losses.append(nx.reshape(ntp_from_forward(out, mask), (1,)))
            ntp = nx.mean(nx.concat_rows(losses))
            return nx.scale(ntp, config.lambda_sft), {"ntp": ntp.item()}

        grads, parts = _gradients(params, loss_fn)
        grads, norm = clip_grad_norm(grads, config.grad_clip_norm)
        params, state = adam_update(params, grads, state, config)
        ntp_vals.append(parts["ntp"])
        norms.append(norm)
    return params, state, {"loss_ntp": float(np.mean(ntp_vals)), "loss_rl": 0.0,
                           "reward_mean": 0.0, "reward_std": 0.0,
                           "grad_norm": float(np.mean(norms)), "lr": config.lr}

