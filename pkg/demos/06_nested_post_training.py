# Post-training: an inner update on each prompt, then supervised loss on the response.

# %%
from dataclasses import replace

from refine.data import gen_copy_task
from refine.model import ModelConfig, init_params
from refine.phases import PhaseConfig, post_train_nested
from refine.trainer import ntp_loss

params = init_params(ModelConfig(max_seq_len=256), 0)
tasks = [gen_copy_task(4, 8, distractors=2, seed=s) for s in range(16)]

cfg = PhaseConfig.defaults("post", seed=0, steps=10)
cfg = replace(cfg, trainer=replace(cfg.trainer, batch_size=4, ppo_mini_batch=2, lr=3e-3))


def response_loss(p):
    from refine.trainer import span_mask
    seqs = [t.to_sequence() for t in tasks]
    return sum(float(ntp_loss(p, s, span_mask(s, "response")).data) for s in seqs) / len(seqs)


print("response loss before", round(response_loss(params), 3))

# %%
for mode in ("sft", "nested_sft", "nested_refine"):
    res = post_train_nested(params, tasks, cfg, mode=mode)
    print(f"{mode:14s} response loss after {response_loss(res.params):.3f}")
