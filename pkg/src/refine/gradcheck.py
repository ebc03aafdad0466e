"""Finite-difference checks of the full model's gradients on a toy configuration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .model import ModelConfig, forward_sequence, init_params
from .rewards import RewardSpec
from .rollout import RolloutConfig, rollout_sequence
from .selection import SelectionConfig
from .trainer import grpo_loss, ntp_from_forward, standardize_advantages

TOY_MODEL = dict(vocab_size=64, d_model=16, n_layers=2, d_fast=8, max_seq_len=64)


@dataclass(frozen=True)
class GradCheckResult:
    ntp_error: float
    combined_error: float
    n_params: int

    @property
    def worst(self) -> float:
        return max(self.ntp_error, self.combined_error)


def toy_grad_check(seed: int = 0, seq_len: int = 8, lambda_sft: float = 1.0, lambda_rl: float = 0.2,
                   step: float = 1e-3, update_mode: str = "per_token_delta",
                   **model_overrides) -> GradCheckResult:
    """Max relative gradient error of the next-token loss and of the combined loss.

    Runs in float64. The combined loss uses two rollout chunks of three tokens
    so the policy term touches several prefixes of the sequence.
    """
    with nx.precision(np.float64):
        cfg = ModelConfig(**{**TOY_MODEL, "update_mode": update_mode,
                             "chunk_size": 3, **model_overrides})
        params = init_params(cfg, seed)
        seq = np.random.default_rng(seed).integers(0, cfg.vocab_size, seq_len)
        capture = update_mode == "per_token_delta"

        def ntp(ps):
            return ntp_from_forward(forward_sequence(params.replace(ps), seq))

        ntp_err = nx.finite_diff_check(ntp, params.tensors, step)

        _, _, records = rollout_sequence(params, seq, 0, SelectionConfig(c=2, seed=seed),
                                         RolloutConfig(k=3, seed=seed), RewardSpec("cosine"))
        standardize_advantages(records)

        def combined(ps):
            p = params.replace(ps)
            fw = {0: forward_sequence(p, seq, capture_states=capture)}
            return nx.add(nx.scale(ntp_from_forward(fw[0]), lambda_sft),
                          nx.scale(grpo_loss(records, p, forwards=fw), lambda_rl))

        comb_err = nx.finite_diff_check(combined, params.tensors, step)
    return GradCheckResult(float(ntp_err), float(comb_err), params.num_parameters())
