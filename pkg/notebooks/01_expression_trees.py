# %% [markdown]
# # Expression trees
#
# Policies are vectors of typed expression trees. This notebook builds a few
# by hand, scores their complexity and shows how constant folding shrinks them.

# %%
import numpy as np

from gprl.expr import Policy, auto_cancel, complexity_of, format_tree, grow, parse_tree

names = ["rho", "rho_dot"]

# %% [markdown]
# Text goes in and out through `parse_tree` / `format_tree`. Variables can be
# named or written positionally as `x0`, `x1`, ...

# %%
t = parse_tree("if(rho_dot > 0, 1.0, -1.0)", names)
print(format_tree(t, names), "complexity", complexity_of(t))
print(format_tree(t))

# %% [markdown]
# Trees evaluate on whole batches of states at once.

# %%
states = np.array([[-0.5, 0.03], [-0.5, -0.02], [0.1, 0.0]])
print(t(states))

# %% [markdown]
# Complexity weights favour cheap arithmetic: `+ - *` cost 1, `/` costs 2,
# `tanh`/`abs` and the boolean connectives cost 4, `if` costs 5.

# %%
for text in ["rho_dot", "rho_dot * 3", "rho_dot / rho", "tanh(rho_dot)", "abs(rho) * rho_dot"]:
    print(f"{text:22s} {complexity_of(parse_tree(text, names))}")

# %% [markdown]
# Constant subtrees fold into single terminals. The result evaluates the
# same and is never more complex.

# %%
messy = parse_tree("(2 + 3) * rho_dot + tanh(0) * rho + if(1 > 2, rho, rho_dot)", names)
clean = auto_cancel(messy)
print(format_tree(messy, names), complexity_of(messy))
print(format_tree(clean, names), complexity_of(clean))
probe = np.random.default_rng(0).normal(size=(5, 2))
print(np.abs(messy(probe) - clean(probe)).max())

# %% [markdown]
# Random trees come from the grow method: one child chain reaches the drawn
# depth, the rest are random.

# %%
rng = np.random.default_rng(1)
for _ in range(5):
    r = grow(rng, 1, 4, 2)
    print(r.depth(), complexity_of(r), format_tree(r, names))

# %% [markdown]
# A `Policy` bundles one tree per action dimension with the action bounds.
# Outputs are clamped, so `rho_dot * 1000` is a bang-bang controller.

# %%
p = Policy((parse_tree("rho_dot * 1000", names),), (-1.0,), (1.0,))
print(p.act(states)[:, 0], p.format(names))
