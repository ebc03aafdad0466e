# Rollouts, rewards and one group-relative policy update.

# %%
import numpy as np

from refine.data import encode, gen_corpus
from refine.model import ModelConfig, init_params
from refine.rewards import RewardSpec, reward_binary, reward_cosine
from refine.rollout import RolloutConfig, rollout_sequence
from refine.selection import SelectionConfig
from refine.trainer import AdamState, TrainerConfig, combined_step, standardize_advantages

print("cosine, identical rows:", reward_cosine(np.ones((2, 3)), np.ones((2, 3))))
print("binary, 4 of 5 tokens:", reward_binary([1, 2, 3, 4, 5], [1, 2, 3, 4, 0]))

# %% roll out k tokens at the selected positions of one sequence
params = init_params(ModelConfig(max_seq_len=256), 0)
ids = encode(gen_corpus(1, 96, 1)[0])
_, sel, records = rollout_sequence(params, ids, 0, SelectionConfig(c=4), RolloutConfig(k=5, n=2),
                                   RewardSpec("hybrid"))
for r in records:
    print(f"t={r.position:3d} reward={r.reward:+.3f}")

# %% advantages are rewards standardised within the sequence's group
standardize_advantages(records)
print("advantages", np.round([r.advantage for r in records], 3))

# %% one update on next-token loss plus the clipped policy term
cfg = TrainerConfig(lambda_rl=0.2, batch_size=1, ppo_mini_batch=1, lr=1e-3)
new, state, metrics = combined_step(params, AdamState(), [ids], records, cfg)
print({k: round(v, 4) for k, v in metrics.items() if isinstance(v, float)})
