"""Learned transition models: one delta regressor per state variable plus a reward model."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .regressor import Regressor, TrainConfig, TrainReport, train_regressor

DATASET_SCHEMA_VERSION = 1
MODEL_SCHEMA_VERSION = 1


@dataclass
class TransitionDataset:
    s: np.ndarray
    a: np.ndarray
    sn: np.ndarray
    r: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.s = np.atleast_2d(np.asarray(self.s, dtype=float))
        self.a = np.asarray(self.a, dtype=float).reshape(len(self.s), -1)
        self.sn = np.atleast_2d(np.asarray(self.sn, dtype=float))
        self.r = np.asarray(self.r, dtype=float).reshape(-1)
        n = len(self.s)
        if n < 1:
            raise ValueError("empty dataset")
        if not (len(self.a) == len(self.sn) == len(self.r) == n):
            raise ValueError("dataset columns have different lengths")
        if self.sn.shape[1] != self.s.shape[1]:
            raise ValueError("state and next-state dimensions differ")

    def __len__(self):
        return len(self.s)

    @property
    def state_dim(self):
        return self.s.shape[1]

    @property
    def action_dim(self):
        return self.a.shape[1]

    def subset(self, idx) -> TransitionDataset:
        return TransitionDataset(self.s[idx], self.a[idx], self.sn[idx], self.r[idx], dict(self.meta))

    def write_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for s, a, sn, r in zip(self.s, self.a, self.sn, self.r):
                f.write(json.dumps({"s": s.tolist(), "a": a.tolist(), "sn": sn.tolist(),
                                    "r": float(r)}) + "\n")

    @classmethod
    def read_jsonl(cls, path, meta=None) -> TransitionDataset:
        rows = []
        with open(path) as f:
            for line in f:
                if line.strip():
                    rows.append(json.loads(line))
        if not rows:
            raise ValueError(f"{path}: no transitions")
        return cls([r["s"] for r in rows], [r["a"] for r in rows], [r["sn"] for r in rows],
                   [r["r"] for r in rows], meta or {})


def split_dataset(d: TransitionDataset, rng: np.random.Generator, fractions=(0.8, 0.1, 0.1)):
    """Shuffled, disjoint train/validation/generalization split.

    Validation and generalization sizes are floored; the remainder goes to training.
    """
    n = len(d)
    if n < 10:
        raise ValueError(f"need at least 10 rows to split, got {n}")
    n_val = int(math.floor(n * fractions[1]))
    n_gen = int(math.floor(n * fractions[2]))
    perm = rng.permutation(n)
    n_train = n - n_val - n_gen
    return (d.subset(perm[:n_train]), d.subset(perm[n_train:n_train + n_val]),
            d.subset(perm[n_train + n_val:]))


@dataclass
class WorldModel:
    """Approximate step function ``s' = s + delta(s, a)``, ``r = reward(s, a, s')``.

    When ``state_low``/``state_high`` are set, predicted states are clipped to
    that box (the range seen in the data); likewise the reward to
    ``[reward_low, reward_high]``.
    """

    delta_models: list[Regressor]
    reward_model: Regressor
    state_dim: int
    action_dim: int
    state_low: np.ndarray | None = None
    state_high: np.ndarray | None = None
    reward_low: float | None = None
    reward_high: float | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.delta_models) != self.state_dim:
            raise ValueError("need one delta model per state variable")

    def step(self, states: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        s = np.asarray(states, dtype=float).reshape(-1, self.state_dim)
        a = np.asarray(actions, dtype=float).reshape(len(s), self.action_dim)
        sa = np.concatenate([s, a], axis=1)
        nxt = s + np.concatenate([m.predict(sa) for m in self.delta_models], axis=1)
        if self.state_low is not None:
            nxt = np.clip(nxt, self.state_low, self.state_high)
        r = self.reward_model.predict(np.concatenate([sa, nxt], axis=1))[:, 0]
        if self.reward_low is not None:
            r = np.clip(r, self.reward_low, self.reward_high)
        return nxt, r

    __call__ = step

    @classmethod
    def identity(cls, state_dim: int, action_dim: int) -> WorldModel:
        """All-zero regressors: state stays put, reward is 0."""
        def zero(n_in, role):
            return Regressor.init([n_in, 1], "linear", zero_output=True, role=role)
        deltas = [zero(state_dim + action_dim, f"delta_{i}") for i in range(state_dim)]
        return cls(deltas, zero(2 * state_dim + action_dim, "reward"), state_dim, action_dim)

    def to_dict(self) -> dict:
        return {
            "schema_version": MODEL_SCHEMA_VERSION,
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "models": [m.to_dict() for m in self.delta_models],
            "reward_model": self.reward_model.to_dict(),
            "clip": None if self.state_low is None else {
                "state_low": self.state_low.tolist(), "state_high": self.state_high.tolist(),
                "reward_low": self.reward_low, "reward_high": self.reward_high},
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> WorldModel:
        clip = d.get("clip") or {}
        return cls([Regressor.from_dict(m) for m in d["models"]],
                   Regressor.from_dict(d["reward_model"]), d["state_dim"], d["action_dim"],
                   None if not clip else np.array(clip["state_low"], dtype=float),
                   None if not clip else np.array(clip["state_high"], dtype=float),
                   clip.get("reward_low"), clip.get("reward_high"),
                   d.get("provenance", {}))

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path) -> WorldModel:
        with open(path) as f:
            return cls.from_dict(json.load(f))


def model_step(m: WorldModel, s, a):
    """Single-state convenience around :meth:`WorldModel.step`."""
    nxt, r = m.step(np.asarray(s, dtype=float)[None, :], np.atleast_1d(a)[None, :])
    return nxt[0], float(r[0])


# Plain SGD with a decaying rate fits the rare, discontinuous wall-collision
# rows of mountain car more reliably than the variance-normalised default.
WORLD_MODEL_TRAIN = TrainConfig(optimizer="sgd", learning_rate=0.05, epochs=1000, patience=300,
                                lr_half_life=200.0)


@dataclass
class ModelConfig:
    train: TrainConfig = field(default_factory=lambda: replace(WORLD_MODEL_TRAIN))
    clip_to_data: bool = True
    seed: int = 0


def build_world_model(d: TransitionDataset, config: ModelConfig | None = None,
                      rng: np.random.Generator | None = None
                      ) -> tuple[WorldModel, dict[str, TrainReport]]:
    """Train ``state_dim`` delta models on (s, a) -> s' - s and a reward model on (s, a, s') -> r.

    All sub-models share one seeded 80/10/10 split.
    """
    config = config or ModelConfig()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    train, val, gen = split_dataset(d, rng)

    def sa(part):
        return np.concatenate([part.s, part.a], axis=1)

    def sas(part):
        return np.concatenate([part.s, part.a, part.sn], axis=1)

    seeds = rng.integers(2**63, size=d.state_dim + 1)
    deltas, reports = [], {}
    for i in range(d.state_dim):
        cfg = replace(config.train, seed=int(seeds[i]))
        target = lambda part: (part.sn - part.s)[:, i]  # noqa: E731
        m, rep = train_regressor(sa(train), target(train), cfg,
                                 validation=(sa(val), target(val)),
                                 generalization=(sa(gen), target(gen)))
        m.role = f"delta_{i}"
        deltas.append(m)
        reports[m.role] = rep
    cfg = replace(config.train, seed=int(seeds[-1]))
    rm, rep = train_regressor(sas(train), train.r, cfg, validation=(sas(val), val.r),
                              generalization=(sas(gen), gen.r))
    rm.role = "reward"
    reports["reward"] = rep
    low = high = rlo = rhi = None
    if config.clip_to_data:
        both = np.concatenate([d.s, d.sn])
        low, high = both.min(axis=0), both.max(axis=0)
        rlo, rhi = float(d.r.min()), float(d.r.max())
    model = WorldModel(deltas, rm, d.state_dim, d.action_dim, low, high, rlo, rhi,
                       provenance=dict(d.meta))
    return model, reports


def collect_transitions(env, n: int, rng: np.random.Generator, episode_length: int = 100,
                        exploration: str | None = None, walk_scale: float = 1.0,
                        stop_on_absorption: bool = False) -> TransitionDataset:
    """Roll exploratory trajectories on ``env`` until ``n`` transitions are collected.

    ``exploration="random"`` draws i.i.d. uniform actions; ``"random_walk"``
    uses ``a_{t+1} = clip(a_t + U[-2, 2] * walk_scale)``. Episodes start from
    ``env.sample_starts`` and run for ``episode_length`` transitions; absorbed
    (frozen) transitions are recorded too unless ``stop_on_absorption``.
    """
    if exploration is None:
        exploration = "random_walk" if env.name == "cpb" else "random"
    lo, hi = env.action_low, env.action_high
    S, A, SN, R = [], [], [], []
    count = 0
    while count < n:
        s = env.sample_starts(1, rng)
        a = rng.uniform(lo, hi)[None, :]
        for _ in range(min(episode_length, n - count)):
            if exploration == "random":
                a = rng.uniform(lo, hi)[None, :]
            elif exploration == "random_walk":
                a = np.clip(a + rng.uniform(-2.0, 2.0, size=a.shape) * walk_scale, lo, hi)
            else:
                raise ValueError(f"unknown exploration {exploration!r}")
            sn, r = env.step(s, a)
            S.append(s[0]); A.append(a[0]); SN.append(sn[0]); R.append(r[0])
            count += 1
            s = sn
            if stop_on_absorption and env.absorption(s)[0] != "none":
                break
    meta = {"env": env.name, "env_config": env.config(), "sampler": exploration,
            "episode_length": episode_length, "size": n,
            "stop_on_absorption": stop_on_absorption,
            "schema_version": DATASET_SCHEMA_VERSION}
    return TransitionDataset(np.array(S), np.array(A), np.array(SN), np.array(R), meta)
