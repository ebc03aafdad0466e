# Fast-weight memory: a d x d matrix written by the delta rule as tokens arrive.

# %%
import numpy as np

from refine.model import apply, chunked_update_step, delta_rule_step

d = 4
W = np.zeros((d, d))
keys = np.eye(d)
values = np.array([[1.0, 0, 0, 0], [0, 2.0, 0, 0], [0, 0, 0, -1.0], [0.5, 0.5, 0, 0]])

# write each (key, value) pair once with a full step
for k, v in zip(keys, values):
    W = delta_rule_step(W, k, v, eta=1.0)

for k, v in zip(keys, values):
    print("read", apply(W, k), "stored", v)

# %% a smaller step only moves part of the way, but never away from the target
W = np.zeros((d, d))
k, v = keys[0], values[0]
for i in range(5):
    W = delta_rule_step(W, k, v, eta=0.5)
    print(i, "error", np.linalg.norm(apply(W, k) - v).round(4))

# %% chunked writes apply the mean gradient of a block of tokens at once
W1 = chunked_update_step(np.zeros((d, d)), keys[:2], values[:2], eta=1.0)
print(W1)

# %% inside the model, memory after every prefix can be cached and reused
from refine.model import ModelConfig, forward_sequence, init_params, state_at

params = init_params(ModelConfig(d_model=16, d_fast=8, max_seq_len=64), 0)
ids = np.frombuffer(b"the cat sat on the mat", dtype=np.uint8).astype(np.int64)
out = forward_sequence(params, ids, capture_states=True)
cached = state_at(out, 10, params.config)
fresh = forward_sequence(params, ids[:10]).final_state
print("cached state equals a fresh prefix pass:",
      all(np.array_equal(a, b) for a, b in zip(cached.matrices, fresh.matrices)))
