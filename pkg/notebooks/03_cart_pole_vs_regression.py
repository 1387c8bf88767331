# %% [markdown]
# # Cart-pole: GPRL against symbolic regression of a neural teacher
#
# Both pipelines share one world model. GPRL scores expressions by their
# return on the model; the baseline scores them by how well they imitate a
# neural policy trained on the same model. The comparison runs on real
# dynamics.

# %%
import numpy as np

from gprl.cli import experiment_config, stage_collect, stage_run, stage_train_model, \
    stage_train_teacher
from gprl.envs import CartPole
from gprl.genetics import squash_fronts
from gprl.rl import RolloutConfig, evaluate_real, fitness

env = CartPole()
small = {"ga": {"generations": 10}, "regress": {"generations": 10, "population_size": 300},
         "model": {"epochs": 200}, "teacher": {"iterations": 100}}
cfg = experiment_config("cpb", "desk", seed=0, overrides=small)

# %% [markdown]
# ## Shared world model and teacher
# Random-walk forces, episodes cut at the first failure.

# %%
data = stage_collect(cfg)
model, reports = stage_train_model(cfg, data)
print({k: round(r.gen_r2, 3) for k, r in reports.items()})
teacher, rep = stage_train_teacher(cfg, model)
print("teacher model penalty", round(-rep.fitness, 3))

# %% [markdown]
# How does the teacher compare with doing nothing, on the real system?

# %%
test = RolloutConfig(100, 0.05, env.sample_starts(100, np.random.default_rng(7)))
print("teacher real penalty", round(-fitness(teacher, env.step, test), 2))
print("zero force real penalty", round(-fitness(lambda s: np.zeros((len(s), 1)), env.step, test), 2))

# %% [markdown]
# ## Two short runs per pipeline

# %%
fronts = {}
for mode in ("gprl", "regress"):
    per_run = []
    for seed in (0, 1):
        c = experiment_config("cpb", "desk", seed=seed, mode=mode, overrides=small)
        res = stage_run(c, model, teacher if mode == "regress" else None)
        rows = evaluate_real(res.archive, env, test, env.state_names)
        per_run.append([(r.complexity, r.real_penalty) for r in rows])
    fronts[mode] = squash_fronts([], penalties=per_run)

# %% [markdown]
# Median cumulative best real penalty per complexity (lower is better).

# %%
reg = {r.complexity: r.median for r in fronts["regress"]}
for r in fronts["gprl"][:25]:
    other = reg.get(r.complexity, float("nan"))
    print(f"c={r.complexity:3d}  gprl {r.median:7.2f}  regression {other:7.2f}")
