# %% [markdown]
# # Mountain car, start to finish
#
# Collect random transitions, fit the per-variable world model, evolve
# policies on it and check them on the real dynamics. Sizes are cut down so
# the script runs in a few minutes; `gprl --profile desk` uses the full
# desk-scale settings.

# %%
import time
from dataclasses import replace

import numpy as np

from gprl.envs import MountainCar
from gprl.expr import DEFAULT_WEIGHTS
from gprl.genetics import GAConfig, PolicySpace, run_gprl
from gprl.rl import ModelFitness, RolloutConfig, evaluate_real
from gprl.worldmodel import WORLD_MODEL_TRAIN, ModelConfig, build_world_model, collect_transitions

env = MountainCar()
rng = np.random.default_rng(0)

# %% [markdown]
# ## Data
# Uniform random actions from random positions, 100-step episodes.

# %%
data = collect_transitions(env, 10_000, rng)
print(len(data), "transitions;", np.mean(data.sn[:, 0] >= 0.6).round(3), "share at the goal")

# %% [markdown]
# ## World model
# Two delta networks (position, velocity) and a reward network, 80/10/10 split.
# Fewer epochs than the default keep this quick.

# %%
t0 = time.time()
model, reports = build_world_model(data, ModelConfig(replace(WORLD_MODEL_TRAIN, epochs=300), seed=0))
for k, r in reports.items():
    print(f"{k:8s} gen R2 {r.gen_r2:.3f}  best epoch {r.best_epoch}")
print(f"{time.time() - t0:.0f} s")

# %% [markdown]
# ## Evolution
# Fitness is the mean discounted return over 30 start states, T=200, with the
# last reward weighted 0.05.

# %%
starts = env.sample_starts(30, rng)
cfg = RolloutConfig(200, 0.05, starts)
print("gamma", round(cfg.gamma, 5))
space = PolicySpace(2, tuple(env.action_low), tuple(env.action_high))
ga = GAConfig(population_size=100, generations=15, seed=0)
res = run_gprl(ga, ModelFitness(model, cfg), space, DEFAULT_WEIGHTS)
print(res.generations, "generations,", res.evaluations, "evaluations,", round(res.wall_time), "s")

# %% [markdown]
# ## Front on the real dynamics
# Fresh start states, never seen during evolution.

# %%
test = RolloutConfig(200, 0.05, env.sample_starts(100, np.random.default_rng(99)))
for row in evaluate_real(res.archive, env, test, env.state_names):
    print(f"c={row.complexity:3d}  model {row.model_penalty:7.2f}  real {row.real_penalty:7.2f}"
          f"  goal {row.success_rate:4.0%}  {row.expression}")
