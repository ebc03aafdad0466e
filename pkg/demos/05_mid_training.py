# Mid-training on a synthetic corpus, with held-out next-token loss before and after.
# About two minutes on one core.

# %%
from dataclasses import replace

from refine.data import encode, gen_corpus
from refine.evaluation import eval_ntp
from refine.model import ModelConfig, init_params
from refine.phases import PhaseConfig, mid_train

params = init_params(ModelConfig(max_seq_len=256), 0)
seqs = [encode(t) for t in gen_corpus(200, 256, 0)]
train, held = seqs[:180], seqs[180:]

cfg = PhaseConfig.defaults("mid", seed=0, steps=200, eval_every=50)
cfg = replace(cfg, trainer=replace(cfg.trainer, batch_size=8, ppo_mini_batch=4, lr=3e-3))

acc, loss = eval_ntp(params, held)
print(f"before: acc {acc:.3f} loss {loss:.3f}")

# %%
res = mid_train(params, train, cfg, eval_set=held)
for row in res.metrics:
    if "eval_loss" in row:
        print(f"step {row['step']:3d} reward {row['reward_mean']:+.3f} held-out loss {row['eval_loss']:.3f}")
acc, loss = eval_ntp(res.params, held)
print(f"after:  acc {acc:.3f} loss {loss:.3f}")
