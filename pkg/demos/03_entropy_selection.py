# Where to roll out: positions are drawn per chunk, weighted by how uncertain
# the model is about the next token.

# %%
import numpy as np

from refine.data import encode, gen_corpus
from refine.model import ModelConfig, forward_sequence, init_params
from refine.selection import SelectionConfig, chunk_candidates, select_for_logits, smooth_entropy, token_entropy

params = init_params(ModelConfig(max_seq_len=256), 0)
ids = encode(gen_corpus(1, 128, 0)[0])
logits = forward_sequence(params, ids).logits.data

prof = smooth_entropy(token_entropy(logits), kernel=5)
print("entropy range", prof.raw.min().round(3), prof.raw.max().round(3))

# %% an untrained model is almost equally unsure everywhere, so use a
# hand-made profile to see how sharply tau favours high-entropy positions
from refine.selection import EntropyProfile

bumpy = EntropyProfile(np.abs(np.sin(np.arange(48) / 3.0)) * 3)
for tau in (0.05, 1.0, 10.0):
    cfg = SelectionConfig(c=4, tau=tau)
    cand, p = chunk_candidates(bumpy, cfg, k=5)[0]
    print(f"tau={tau:<5} top prob in chunk 0: {p.max():.3f} over {len(cand)} candidates")

# %% one draw per chunk, for each strategy (same rng: on a near-flat profile
# entropy_weighted and uniform land on the same positions)
for strategy in ("entropy_weighted", "uniform", "argmax_entropy", "argmin_entropy"):
    _, sel = select_for_logits(logits, SelectionConfig(c=4, strategy=strategy), k=5,
                            rng=np.random.default_rng(0))
    print(f"{strategy:17s}", sel.positions)
