"""Fast-weight byte-level language models trained with next-token and next-sequence objectives.

The pieces compose in order: :mod:`refine.numerics` (tape autodiff),
:mod:`refine.model` (fast-weight network), :mod:`refine.data`,
:mod:`refine.selection` (entropy-guided positions), :mod:`refine.rollout`,
:mod:`refine.rewards`, :mod:`refine.trainer` (GRPO + NTP step),
:mod:`refine.phases` (training loops), :mod:`refine.evaluation` and
:mod:`refine.config` / :mod:`refine.cli`.
"""

from .config import RunConfig, parse_config
from .data import TaskSample, TokenSequence, decode, encode, gen_copy_task, gen_corpus, gen_niah
from .evaluation import EvalReport, dump_diagnostics, eval_niah_recall, eval_ntp
from .model import (FastWeightState, ModelConfig, ModelParams, forward_sequence, generate,
                    init_params, load_checkpoint, save_checkpoint)
from .phases import PhaseConfig, mid_train, post_train_nested, train_sft, ttt_adapt
from .rewards import RewardSpec
from .rollout import RolloutConfig, RolloutRecord, rollout_sequence
from .selection import SelectionConfig, sample_positions, token_entropy
from .trainer import TrainerConfig, combined_step, grpo_loss, ntp_loss, standardize_advantages

__version__ = "0.1.0"

__all__ = [
    "EvalReport", "FastWeightState", "ModelConfig", "ModelParams", "PhaseConfig", "RewardSpec",
    "RolloutConfig", "RolloutRecord", "RunConfig", "SelectionConfig", "TaskSample", "TokenSequence",
    "TrainerConfig", "combined_step", "decode", "dump_diagnostics", "encode", "eval_niah_recall",
    "eval_ntp", "forward_sequence", "gen_copy_task", "gen_corpus", "gen_niah", "generate",
    "grpo_loss", "init_params", "load_checkpoint", "mid_train", "ntp_loss", "parse_config",
    "post_train_nested", "rollout_sequence", "sample_positions", "save_checkpoint",
    "standardize_advantages", "token_entropy", "train_sft", "ttt_adapt",
]
