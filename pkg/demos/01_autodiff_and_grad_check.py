# Reverse-mode autodiff on a tape, checked against finite differences.
#
# Every op records its inputs and a backward closure on the active tape.
# Arrays are float32 by default; the checks below switch to float64.

# %%
import numpy as np

from refine import numerics as nx

with nx.precision(np.float64):
    tape = nx.Tape()
    with tape:
        x = nx.Array(np.array([[0.5, -1.0, 2.0]]), requires_grad=True)
        w = nx.Array(np.array([[1.0], [0.5], [-0.25]]), requires_grad=True)
        loss = nx.sum(nx.silu(nx.matmul(x, w)))
    grads = nx.backward(tape, loss, [x, w])

print("loss", float(loss.data))
print("dL/dw", grads[w].ravel())

# %% the same gradient by central differences
with nx.precision(np.float64):
    err = nx.finite_diff_check(lambda p: nx.sum(nx.silu(nx.matmul(x, p["w"]))), {"w": w})
print("max relative error", err)

# %% the full model: next-token loss and the combined loss with the policy term
from refine.gradcheck import toy_grad_check

res = toy_grad_check(seed=0, seq_len=8)
print(f"next-token loss  max rel err {res.ntp_error:.2e}")
print(f"combined loss    max rel err {res.combined_error:.2e}")
print("parameters checked", res.n_params)
