# Needle-in-a-haystack: key-value needles hidden in filler, queried at the end.

# %%
from refine.data import gen_niah
from refine.evaluation import eval_niah_recall, needle_recall
from refine.model import ModelConfig, init_params

task = gen_niah(512, n_needles=3, n_queries=2, seed=0)
print(task.prompt[-160:])
print("expected", task.needles)

# recall is the fraction of queried values found verbatim in the output
print(needle_recall(f"the answer is {task.needles[0]}", task.needles))

# %% an untrained model recalls nothing; the harness still runs end to end
params = init_params(ModelConfig(max_seq_len=1024), 0)
tasks = [gen_niah(512, 2, 1, seed=s) for s in range(3)]
print("recall", eval_niah_recall(params, tasks))
