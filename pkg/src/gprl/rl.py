"""Returns, fitness, rollouts, real-dynamics evaluation and the neural teacher.

A *step function* maps ``(states (B, d), actions (B, a))`` to ``(next_states,
rewards)``. Both :meth:`Environment.step` and :meth:`WorldModel.step` follow
this contract, so every rollout helper works unchanged on real dynamics and on
learned models.

A *policy* is anything with ``act_flagged(states) -> (actions, flags)`` or a
plain callable ``states -> actions``; actions are clamped before each step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .envs import Environment, make_env
from .expr import Policy
from .regressor import Regressor
from .worldmodel import WorldModel

log = logging.getLogger(__name__)

StepFn = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def discount_for(T: int, q: float) -> float:
    """Discount making the last of ``T`` rewards weigh ``q``: ``q ** (1 / (T - 1))``."""
    if int(T) != T or T <= 1:
        raise ValueError(f"horizon must be an integer > 1, got {T}")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    return float(q ** (1.0 / (T - 1)))


@dataclass
class RolloutConfig:
    """Horizon, terminal weight and start states of a fitness evaluation.

    ``weights`` are start-state probabilities (uniform when omitted); they are
    normalised to sum to 1.
    """

    horizon: int
    q: float
    starts: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.starts = np.atleast_2d(np.asarray(self.starts, dtype=float))
        if len(self.starts) < 1:
            raise ValueError("need at least one start state")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        w = np.ones(len(self.starts)) if self.weights is None else np.asarray(self.weights, float)
        if w.shape != (len(self.starts),) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be non-negative, one per start, not all zero")
        self.weights = w / w.sum()

    @property
    def gamma(self) -> float:
        return 1.0 if self.horizon == 1 else discount_for(self.horizon, self.q)

    def to_dict(self) -> dict:
        return {"horizon": self.horizon, "q": self.q, "gamma": self.gamma,
                "n_starts": len(self.starts)}


def _actions(policy, states):
    if hasattr(policy, "act_flagged"):
        return policy.act_flagged(states)
    a = np.asarray(policy(states), dtype=float).reshape(len(states), -1)
    return a, ~np.isfinite(a).all(axis=1)


@dataclass
class Trajectory:
    states: np.ndarray  # (T + 1, B, d)
    actions: np.ndarray  # (T, B, a)
    rewards: np.ndarray  # (T, B)
    flagged: np.ndarray  # (B,) any non-finite policy output along the way


def simulate(step: StepFn, policy, starts, T: int) -> Trajectory:
    """Roll ``policy`` for ``T`` steps from every start state."""
    s = np.atleast_2d(np.asarray(starts, dtype=float))
    states, acts, rews = [s], [], []
    flagged = np.zeros(len(s), dtype=bool)
    for _ in range(T):
        a, bad = _actions(policy, s)
        flagged |= bad
        s, r = step(s, a)
        states.append(s)
        acts.append(a)
        rews.append(np.asarray(r, dtype=float).reshape(-1))
    return Trajectory(np.stack(states), np.stack(acts) if acts else np.zeros((0, len(s), 0)),
                      np.stack(rews) if rews else np.zeros((0, len(s))), flagged)


def discounted(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """Sum over the leading (time) axis of ``gamma**k * r_k``."""
    rewards = np.asarray(rewards, dtype=float)
    disc = gamma ** np.arange(len(rewards))
    return np.tensordot(disc, rewards, axes=(0, 0))


def rollout_returns(step: StepFn, policy, starts, T: int, gamma: float) -> np.ndarray:
    """Discounted return of ``T`` rewards from each start state."""
    if T < 1:
        raise ValueError("horizon must be >= 1")
    return discounted(simulate(step, policy, starts, T).rewards, gamma)


def rollout_return(step: StepFn, policy, s0, T: int, gamma: float) -> float:
    return float(rollout_returns(step, policy, np.asarray(s0, dtype=float)[None, :], T, gamma)[0])


def fitness(policy, step: StepFn, cfg: RolloutConfig) -> float:
    """Probability-weighted mean return over the configured start states.

    Equivalent to ``(1/|S|) * sum(w_s * R_s)`` with ``w_s = |S| * p_s``, so
    uniform weights give the plain mean.
    """
    R = rollout_returns(step, policy, cfg.starts, cfg.horizon, cfg.gamma)
    return float(np.dot(cfg.weights, R))


def penalty(policy, step: StepFn, cfg: RolloutConfig) -> float:
    return -fitness(policy, step, cfg)


def _batch_actions(policies: Sequence, s: np.ndarray, S: int) -> np.ndarray:
    """Actions of policy ``i`` on rows ``i*S:(i+1)*S`` of ``s``."""
    out = None
    for i, p in enumerate(policies):
        block = s[i * S:(i + 1) * S]
        if isinstance(p, Policy):
            if out is None:
                out = np.empty((len(s), p.action_dim))
            for k, t in enumerate(p.trees):
                out[i * S:(i + 1) * S, k] = t.evaluate(block)
        else:
            a = _actions(p, block)[0]
            if out is None:
                out = np.empty((len(s), a.shape[1]))
            out[i * S:(i + 1) * S] = a
    return out


def batch_returns(step: StepFn, policies: Sequence, starts, T: int, gamma: float) -> np.ndarray:
    """Returns of many policies at once, shape (P, S).

    All policy/start pairs are stacked so the step function runs once per time step.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    P, S = len(policies), len(starts)
    if P == 0:
        return np.zeros((0, S))
    lo = np.repeat([np.asarray(getattr(p, "action_low", -np.inf), float) for p in policies],
                   S, axis=0)
    hi = np.repeat([np.asarray(getattr(p, "action_high", np.inf), float) for p in policies],
                   S, axis=0)
    s = np.tile(starts, (P, 1))
    total = np.zeros(P * S)
    disc = 1.0
    for _ in range(T):
        with np.errstate(all="ignore"):
            a = _batch_actions(policies, s, S)
        a = np.clip(np.where(np.isnan(a), lo, a), lo, hi)
        s, r = step(s, a)
        total += disc * np.asarray(r, dtype=float).reshape(-1)
        disc *= gamma
    return total.reshape(P, S)


class ModelFitness:
    """Batch fitness of policies on a world model (picklable for worker pools).

    ``reward="model"`` uses the learned reward model; ``"analytic"`` applies
    the benchmark's known reward function to the predicted next states.
    """

    def __init__(self, model: WorldModel, cfg: RolloutConfig, reward: str = "model",
                 env: str | None = None):
        if reward not in ("model", "analytic"):
            raise ValueError(f"unknown reward mode {reward!r}")
        if reward == "analytic" and env is None:
            raise ValueError("analytic reward needs an environment name")
        self.model, self.cfg, self.reward, self.env = model, cfg, reward, env
        self._env = make_env(env) if env else None

    def step(self, s, a):
        nxt, r = self.model.step(s, a)
        if self.reward == "analytic":
            r = self._env.reward(nxt)
        return nxt, r

    def __call__(self, policies: Sequence) -> list[float]:
        R = batch_returns(self.step, policies, self.cfg.starts, self.cfg.horizon, self.cfg.gamma)
        return [float(v) for v in R @ self.cfg.weights]


class RealFitness(ModelFitness):
    """Same contract as :class:`ModelFitness` on the true dynamics."""

    def __init__(self, env: Environment, cfg: RolloutConfig):
        self.env_obj, self.cfg = env, cfg

    def step(self, s, a):
        return self.env_obj.step(s, a)


# -- evaluation on real dynamics ------------------------------------------------

@dataclass
class EvalRow:
    complexity: int
    model_penalty: float
    real_penalty: float
    success_rate: float
    expression: str

    def to_dict(self):
        return dict(self.__dict__)


def success_rate(policy, env: Environment, starts, T: int) -> float:
    """MC: share of starts reaching the goal; CPB: share never failing within ``T``."""
    traj = simulate(env.step, policy, starts, T)
    codes = np.stack([env.absorption(s) for s in traj.states[1:]])
    if env.name == "mc":
        ok = (codes == "goal").any(axis=0)
    else:
        ok = ~(codes == "failure").any(axis=0)
    return float(np.mean(ok))


def evaluate_real(front: Sequence, env: Environment, cfg: RolloutConfig,
                  names: Sequence[str] | None = None) -> list[EvalRow]:
    """Real-dynamics penalty (and success rate) of every front member.

    ``front`` holds :class:`ScoredIndividual`-like objects (``policy``,
    ``fitness``, ``complexity``); their model fitness is reported as a penalty.
    """
    members = front.front() if hasattr(front, "front") else list(front)
    if not members:
        return []
    real = RealFitness(env, cfg)([m.policy for m in members])
    rows = []
    for m, f in zip(members, real):
        rows.append(EvalRow(m.complexity, -m.fitness, -f,
                            success_rate(m.policy, env, cfg.starts, cfg.horizon),
                            " | ".join(m.policy.format(names))))
    return rows


# -- neural teacher ---------------------------------------------------------------

@dataclass
class TeacherPolicy:
    """Neural state -> action policy; outputs are tanh-squashed into the bounds."""

    nets: list[Regressor]
    action_low: np.ndarray
    action_high: np.ndarray

    def __post_init__(self):
        self.action_low = np.asarray(self.action_low, dtype=float)
        self.action_high = np.asarray(self.action_high, dtype=float)

    @classmethod
    def init(cls, state_dim, action_low, action_high, rng, hidden=(10, 10),
             state_mean=None, state_std=None):
        nets = []
        for k in range(len(action_low)):
            net = Regressor.init([state_dim, *hidden, 1], "tanh", rng, role=f"teacher_{k}")
            if state_mean is not None:
                net.x_mean = np.asarray(state_mean, dtype=float).copy()
                net.x_std = np.where(np.asarray(state_std) > 0, state_std, 1.0).astype(float)
            nets.append(net)
        return cls(nets, action_low, action_high)

    @property
    def action_dim(self):
        return len(self.nets)

    def _squash(self, z):
        mid = 0.5 * (self.action_high + self.action_low)
        half = 0.5 * (self.action_high - self.action_low)
        return mid + half * np.tanh(z)

    def act(self, states):
        s = np.atleast_2d(np.asarray(states, dtype=float))
        z = np.concatenate([n.forward(n.normalize(s)) for n in self.nets], axis=1)
        return self._squash(z)

    def act_flagged(self, states):
        a = self.act(states)
        return a, np.zeros(len(a), dtype=bool)

    __call__ = act

    def params(self):
        return [p for n in self.nets for p in n.params()]

    def copy(self) -> TeacherPolicy:
        return TeacherPolicy([n.copy() for n in self.nets], self.action_low.copy(),
                             self.action_high.copy())

    def to_dict(self) -> dict:
        return {"role": "teacher", "action_low": self.action_low.tolist(),
                "action_high": self.action_high.tolist(),
                "models": [n.to_dict() for n in self.nets]}

    @classmethod
    def from_dict(cls, d) -> TeacherPolicy:
        return cls([Regressor.from_dict(m) for m in d["models"]], d["action_low"], d["action_high"])


@dataclass
class TeacherConfig:
    method: str = "bptt"  # or "hillclimb"
    iterations: int = 300
    learning_rate: float = 0.01
    clip_norm: float = 1.0
    hidden: tuple[int, ...] = (10, 10)
    restarts: int = 3
    population: int = 16  # hill climbing: perturbations per iteration
    sigma: float = 0.1  # hill climbing: perturbation scale


@dataclass
class TeacherReport:
    method: str
    fitness: float
    history: list[float] = field(default_factory=list, repr=False)
    restarts_used: int = 0


def _rollout_grad(teacher: TeacherPolicy, model: WorldModel, cfg: RolloutConfig):
    """Model fitness of ``teacher`` and its gradient w.r.t. the teacher parameters."""
    T, gamma = cfg.horizon, cfg.gamma
    s = cfg.starts.copy()
    d = model.state_dim
    mid = 0.5 * (teacher.action_high + teacher.action_low)
    half = 0.5 * (teacher.action_high - teacher.action_low)
    tape = []
    total = 0.0
    for t in range(T):
        t_memos, zs = [], []
        for net in teacher.nets:
            z, memo = net.forward(net.normalize(s), cache=True)
            t_memos.append(memo)
            zs.append(z)
        th = np.tanh(np.concatenate(zs, axis=1))
        a = mid + half * th
        sa = np.concatenate([s, a], axis=1)
        d_memos, deltas = [], []
        for m in model.delta_models:
            out, memo = m.forward(m.normalize(sa), cache=True)
            d_memos.append(memo)
            deltas.append(out * m.y_std + m.y_mean)
        nxt = s + np.concatenate(deltas, axis=1)
        free = np.ones_like(nxt, dtype=bool)
        if model.state_low is not None:
            free = (nxt > model.state_low) & (nxt < model.state_high)
            nxt = np.clip(nxt, model.state_low, model.state_high)
        rm = model.reward_model
        rin = np.concatenate([sa, nxt], axis=1)
        rout, r_memo = rm.forward(rm.normalize(rin), cache=True)
        r = (rout * rm.y_std + rm.y_mean)[:, 0]
        r_free = np.ones_like(r, dtype=bool)
        if model.reward_low is not None:
            r_free = (r > model.reward_low) & (r < model.reward_high)
            r = np.clip(r, model.reward_low, model.reward_high)
        total += gamma**t * float(cfg.weights @ r)
        tape.append((t_memos, th, d_memos, free, r_memo, r_free))
        s = nxt

    grads = [np.zeros_like(p) for p in teacher.params()]
    ds_next = np.zeros_like(cfg.starts)
    for t in range(T - 1, -1, -1):
        t_memos, th, d_memos, free, r_memo, r_free = tape[t]
        dr = (gamma**t * cfg.weights * r_free)[:, None]
        _, _, din = rm.backward(r_memo, dr * rm.y_std)
        din = din / rm.x_std
        ds = din[:, :d].copy()
        da = din[:, d:-d].copy()
        dnxt = (din[:, -d:] + ds_next) * free
        ds += dnxt
        for i, m in enumerate(model.delta_models):
            _, _, dm = m.backward(d_memos[i], dnxt[:, i:i + 1] * m.y_std)
            dm = dm / m.x_std
            ds += dm[:, :d]
            da += dm[:, d:]
        dz = da * half * (1.0 - th * th)
        k = 0
        for j, net in enumerate(teacher.nets):
            gw, gb, dx = net.backward(t_memos[j], dz[:, j:j + 1])
            for g in gw + gb:
                grads[k] += g
                k += 1
            ds += dx / net.x_std
        ds_next = ds
    return total, grads


def _model_fitness(policy, model: WorldModel, cfg: RolloutConfig) -> float:
    return fitness(policy, model.step, cfg)


def train_teacher(model: WorldModel, cfg: RolloutConfig, rng: np.random.Generator,
                  config: TeacherConfig | None = None, state_mean=None, state_std=None,
                  action_low=None, action_high=None) -> tuple[TeacherPolicy, TeacherReport]:
    """Model-based training of a neural teacher; returns the best parameters found.

    ``bptt`` ascends the exact gradient of the unrolled model rollout (Adam with
    gradient-norm clipping, restarting from a fresh initialisation if the
    fitness turns non-finite); ``hillclimb`` is a derivative-free fallback that
    keeps the best of Gaussian perturbations each iteration.
    """
    config = config or TeacherConfig()
    if action_low is None:
        raise ValueError("action bounds are required")
    if state_mean is None:
        state_mean, state_std = cfg.starts.mean(axis=0), cfg.starts.std(axis=0)
    init = lambda: TeacherPolicy.init(model.state_dim, action_low, action_high, rng,  # noqa: E731
                                      config.hidden, state_mean, state_std)
    teacher = init()
    best, best_f = teacher.copy(), _model_fitness(teacher, model, cfg)
    history = [best_f]
    if config.iterations <= 0:
        return best, TeacherReport(config.method, best_f, history)
    if config.method == "hillclimb":
        return _hillclimb(teacher, best_f, model, cfg, rng, config)
    if config.method != "bptt":
        raise ValueError(f"unknown teacher method {config.method!r}")

    restarts = 0
    while True:
        params = teacher.params()
        m1 = [np.zeros_like(p) for p in params]
        m2 = [np.zeros_like(p) for p in params]
        diverged = False
        for it in range(1, config.iterations + 1):
            f, grads = _rollout_grad(teacher, model, cfg)
            if not math.isfinite(f) or not all(np.isfinite(g).all() for g in grads):
                diverged = True
                break
            history.append(f)
            if f > best_f:
                best, best_f = teacher.copy(), f
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
            scale = min(1.0, config.clip_norm / norm) if norm > 0 else 1.0
            for p, g, a1, a2 in zip(params, grads, m1, m2):
                g = g * scale
                a1 *= 0.9
                a1 += 0.1 * g
                a2 *= 0.999
                a2 += 0.001 * g * g
                step = config.learning_rate * (a1 / (1 - 0.9**it)) / (
                    np.sqrt(a2 / (1 - 0.999**it)) + 1e-8)
                p += step  # ascent
        if not diverged or restarts >= config.restarts:
            break
        restarts += 1
        log.warning("teacher training diverged; restart %d", restarts)
        teacher = init()
    final = _model_fitness(best, model, cfg)
    return best, TeacherReport("bptt", final, history, restarts)


def _hillclimb(teacher, best_f, model, cfg, rng, config):
    history = [best_f]
    best = teacher
    for _ in range(config.iterations):
        cands = []
        for _ in range(config.population):
            c = best.copy()
            for p in c.params():
                p += rng.normal(0.0, config.sigma, size=p.shape)
            cands.append(c)
        scores = ModelFitness(model, cfg)(cands)
        j = int(np.argmax(scores))
        if scores[j] > best_f:
            best, best_f = cands[j], scores[j]
        history.append(best_f)
    return best, TeacherReport("hillclimb", best_f, history)


# -- symbolic-regression baseline -------------------------------------------------

@dataclass
class ImitationDataset:
    states: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.actions = np.asarray(self.actions, dtype=float).reshape(len(self.states), -1)

    def __len__(self):
        return len(self.states)


def make_imitation_dataset(teacher, model: WorldModel, starts, T: int) -> ImitationDataset:
    """(state, teacher action) pairs along teacher rollouts on the world model."""
    traj = simulate(model.step, teacher, starts, T)
    S = traj.states[:-1].reshape(-1, model.state_dim)
    A = traj.actions.reshape(len(S), -1)
    return ImitationDataset(S, A)


def regression_fitness(policy: Policy, data: ImitationDataset) -> float:
    """Negative MSE between clamped policy outputs and teacher actions, summed over dimensions."""
    if len(data) == 0:
        raise ValueError("empty imitation dataset")
    a = policy.act(data.states) if hasattr(policy, "act") else np.asarray(policy(data.states))
    return -float(np.sum(np.mean((a - data.actions) ** 2, axis=0)))


class RegressionFitness:
    """Picklable batch wrapper around :func:`regression_fitness`."""

    def __init__(self, data: ImitationDataset):
        self.data = data

    def __call__(self, policies: Sequence) -> list[float]:
        return [regression_fitness(p, self.data) for p in policies]
