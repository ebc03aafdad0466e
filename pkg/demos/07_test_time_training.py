# Test-time training: adapt a copy of the model on the prompt alone, then answer.
# The base parameters are never touched.

# %%
import numpy as np

from refine.data import decode, encode, gen_copy_task
from refine.evaluation import prompt_logprob
from refine.model import ModelConfig, init_params
from refine.phases import PhaseConfig, ttt_adapt

params = init_params(ModelConfig(max_seq_len=512), 0)
cfg = PhaseConfig.defaults("ttt", seed=0)

task = gen_copy_task(4, 12, distractors=3, seed=0, repeats=2)
ids = encode(task.prompt)
print(task.prompt[:120], "...")

res = ttt_adapt(params, ids, cfg, gen_len=12)
print("prompt logprob before", round(prompt_logprob(params, ids), 4))
print("prompt logprob after ", round(prompt_logprob(res.params, ids), 4))
print("answer", repr(task.answer), "model says", repr(decode(res.response)))

# %% across 20 prompts
wins = 0
for s in range(20):
    ids = encode(gen_copy_task(4, 12, distractors=3, seed=s, repeats=2).prompt)
    adapted = ttt_adapt(params, ids, cfg, gen_len=1).params
    wins += prompt_logprob(adapted, ids) > prompt_logprob(params, ids)
print(f"{wins}/20 prompts better fit after one step")
