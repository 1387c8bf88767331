"""Small fully connected regressors trained with per-weight variance-normalised steps.

Inputs and targets are z-scored with statistics of the training split. The
network works in normalised units internally; :meth:`Regressor.predict` maps
raw inputs to raw outputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def _act(name):
    if name == "relu":
        return (lambda z: np.maximum(z, 0.0)), (lambda z, a: (z > 0.0).astype(float))
    if name == "tanh":
        return np.tanh, (lambda z, a: 1.0 - a * a)
    if name == "linear":
        return (lambda z: z), (lambda z, a: np.ones_like(z))
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class Regressor:
    sizes: list[int]
    activation: str
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray
    role: str = ""

    @classmethod
    def init(cls, sizes, activation="relu", rng=None, zero_output=False, role=""):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
        rng = rng if rng is not None else np.random.default_rng(0)
        ws, bs = [], []
        for k, (i, o) in enumerate(zip(sizes[:-1], sizes[1:])):
            lim = 1.0 / np.sqrt(i)
            w = rng.uniform(-lim, lim, size=(i, o))
            if zero_output and k == len(sizes) - 2:
                w[:] = 0.0
            ws.append(w)
            bs.append(np.zeros(o))
        return cls(list(sizes), activation, ws, bs,
                   np.zeros(sizes[0]), np.ones(sizes[0]),
                   np.zeros(sizes[-1]), np.ones(sizes[-1]), role)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def set_normalization(self, x, y=None):
        self.x_mean, self.x_std = _stats(x)
        if y is not None:
            self.y_mean, self.y_std = _stats(y)

    def normalize(self, x):
        return (x - self.x_mean) / self.x_std

    def denormalize(self, xn):
        return xn * self.x_std + self.x_mean

    # forward/backward in normalised units -------------------------------

    def forward(self, xn: np.ndarray, cache: bool = False):
        f, _ = _act(self.activation)
        h = xn
        zs, hs = [], [xn]
        last = self.n_layers - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if k == last else f(z)
            if cache:
                zs.append(z)
                hs.append(h)
        return (h, (zs, hs)) if cache else h

    def backward(self, memo, dout: np.ndarray):
        """Gradients w.r.t. parameters and normalised inputs for upstream ``dout``."""
        _, df = _act(self.activation)
        zs, hs = memo
        gw = [None] * self.n_layers
        gb = [None] * self.n_layers
        d = dout
        for k in range(self.n_layers - 1, -1, -1):
            if k != self.n_layers - 1:
                d = d * df(zs[k], hs[k + 1])
            gw[k] = hs[k].T @ d
            gb[k] = d.sum(axis=0)
            d = d @ self.weights[k].T
        return gw, gb, d

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Raw inputs (B, in) to raw outputs (B, out)."""
        return self.forward(self.normalize(np.asarray(x, dtype=float))) * self.y_std + self.y_mean

    def params(self):
        return self.weights + self.biases

    def copy(self) -> Regressor:
        return Regressor(list(self.sizes), self.activation,
                         [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         self.x_mean.copy(), self.x_std.copy(),
                         self.y_mean.copy(), self.y_std.copy(), self.role)

    def to_dict(self) -> dict:
        return {
            "sizes": list(self.sizes),
            "activation": self.activation,
            "role": self.role,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "norm": {"x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
                     "y_mean": self.y_mean.tolist(), "y_std": self.y_std.tolist()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> Regressor:
        n = d["norm"]
        return cls(list(d["sizes"]), d["activation"],
                   [np.array(w, dtype=float) for w in d["weights"]],
                   [np.array(b, dtype=float) for b in d["biases"]],
                   np.array(n["x_mean"], dtype=float), np.array(n["x_std"], dtype=float),
                   np.array(n["y_mean"], dtype=float), np.array(n["y_std"], dtype=float),
                   d.get("role", ""))


def _stats(a):
    a = np.asarray(a, dtype=float)
    mu = a.mean(axis=0)
    sd = a.std(axis=0)
    return mu, np.where(sd > 0, sd, 1.0)


@dataclass
class TrainConfig:
    hidden: tuple[int, ...] = (10, 10, 10)
    activation: str = "relu"
    optimizer: str = "vario_eta"  # or "sgd"
    learning_rate: float = 0.01
    batch_size: int = 32
    epochs: int = 500
    patience: int = 50
    eps: float = 1e-8
    variance_decay: float = 0.9
    lr_half_life: float | None = None  # epochs; None keeps the rate constant
    zero_output: bool = False
    seed: int = 0


@dataclass
class TrainReport:
    train_mse: float
    val_mse: float
    gen_mse: float
    epochs: int
    best_epoch: int
    gen_r2: float = float("nan")
    history: list[float] = field(default_factory=list, repr=False)

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items() if k != "history"}


def _mse(model: Regressor, x, y) -> float:
    if len(x) == 0:
        return float("nan")
    return float(np.mean((model.predict(x) - y) ** 2))


def r2_score(y, pred) -> float:
    y = np.asarray(y, dtype=float)
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean(axis=0)) ** 2))
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")


def train_regressor(inputs, targets, config: TrainConfig | None = None, *,
                    validation=None, generalization=None, rng=None) -> tuple[Regressor, TrainReport]:
    """Mini-batch training; returns the snapshot with the lowest validation MSE.

    ``validation``/``generalization`` are ``(x, y)`` pairs; when omitted the
    training validation score falls back to the training set. Generalization
    error is computed once, for the selected snapshot only.

    Vario-eta: each weight moves by ``lr * g / (eps + sigma)`` where ``g`` is
    the batch-mean gradient and ``sigma`` the spread (root mean square) of the
    per-example gradients, smoothed across batches. Since ``|g| <= sigma`` no
    single step exceeds ``lr``.
    """
    config = config or TrainConfig()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if len(x) < 1:
        raise ValueError("need at least one training row")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("training data contains non-finite values")
    vx, vy = (x, y) if validation is None else (np.asarray(validation[0], float),
                                                 np.asarray(validation[1], float).reshape(len(validation[0]), -1))
    sizes = [x.shape[1], *config.hidden, y.shape[1]]
    model = Regressor.init(sizes, config.activation, rng, zero_output=config.zero_output)
    model.set_normalization(x, y)
    xn = model.normalize(x)
    yn = (y - model.y_mean) / model.y_std

    best = model.copy()
    best_val = _mse(model, vx, vy)
    best_epoch = 0
    history = [best_val]
    var = [np.zeros_like(p) for p in model.params()]
    have_var = False
    n = len(x)
    bs = min(config.batch_size, n)
    epoch = 0
    _, df = _act(model.activation)
    for epoch in range(1, config.epochs + 1):
        lr = config.learning_rate
        if config.lr_half_life:
            lr *= 0.5 ** ((epoch - 1) / config.lr_half_life)
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            xb, yb = xn[idx], yn[idx]
            out, memo = model.forward(xb, cache=True)
            m = len(idx)
            dout = 2.0 * (out - yb) / (m * yb.shape[1])
            if config.optimizer == "sgd":
                gw, gb, _ = model.backward(memo, dout)
                for p, g in zip(model.params(), gw + gb):
                    p -= lr * g
                continue
            gw, gb, sq_w, sq_b = _grads_with_moments(model, memo, dout, df)
            grads = gw + gb
            # second moment of the per-example gradients g_i = m * (per-row term)
            for k, s in enumerate(sq_w + sq_b):
                v = m * s
                var[k] = v if not have_var else (config.variance_decay * var[k]
                                                  + (1 - config.variance_decay) * v)
            have_var = True
            for p, g, v in zip(model.params(), grads, var):
                p -= lr * g / (config.eps + np.sqrt(v))
        val = _mse(model, vx, vy)
        history.append(val)
        if not np.isfinite(val):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        if val < best_val:
            best, best_val, best_epoch = model.copy(), val, epoch
        elif epoch - best_epoch >= config.patience:
            break
    report = TrainReport(_mse(best, x, y), best_val, float("nan"), epoch, best_epoch,
                         history=history)
    if generalization is not None:
        gx = np.asarray(generalization[0], dtype=float)
        gy = np.asarray(generalization[1], dtype=float).reshape(len(gx), -1)
        report.gen_mse = _mse(best, gx, gy)
        report.gen_r2 = r2_score(gy, best.predict(gx))
    return best, report


def _grads_with_moments(model: Regressor, memo, dout, df):
    """Batch gradients plus per-example squared-gradient means for every parameter."""
    zs, hs = memo
    L = model.n_layers
    gw, gb, sw, sb = [None] * L, [None] * L, [None] * L, [None] * L
    m = len(dout)
    d = dout
    for k in range(L - 1, -1, -1):
        if k != L - 1:
            d = d * df(zs[k], hs[k + 1])
        h = hs[k]
        gw[k] = h.T @ d
        gb[k] = d.sum(axis=0)
        # mean over examples of (m * h_i d_i)^2 / m, scaled back below
        sw[k] = (h * h).T @ (d * d)
        sb[k] = (d * d).sum(axis=0)
        d = d @ model.weights[k].T
    return gw, gb, sw, sb
