"""Typed expression trees used as policy equations.

A tree is stored as a flat tuple of :class:`Gene` in prefix order, which makes
subtrees contiguous slices (cheap crossover) and lets a tree be compiled into a
single vectorised numpy expression.

Two node types exist, ``FLOAT`` and ``BOOL``. Every operator has a fixed arity,
return type and child signature (strongly-typed GP), so ``if(x0 > 1, x1, 2)``
is valid while ``x0 and 1.0`` is not.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

FLOAT = "float"
BOOL = "bool"

# terminals
CONST = "const"
TRUTH = "truth"
VAR = "var"

ARITY = {
    CONST: 0, TRUTH: 0, VAR: 0,
    "tanh": 1, "abs": 1,
    "+": 2, "-": 2, "*": 2, "/": 2,
    "and": 2, "or": 2,
    ">": 2, "<": 2,
    "if": 3,
}

RETURN_TYPE = {op: FLOAT for op in ARITY}
RETURN_TYPE.update({TRUTH: BOOL, "and": BOOL, "or": BOOL, ">": BOOL, "<": BOOL})

CHILD_TYPES = {
    "tanh": (FLOAT,), "abs": (FLOAT,),
    "+": (FLOAT, FLOAT), "-": (FLOAT, FLOAT), "*": (FLOAT, FLOAT), "/": (FLOAT, FLOAT),
    "and": (BOOL, BOOL), "or": (BOOL, BOOL),
    ">": (FLOAT, FLOAT), "<": (FLOAT, FLOAT),
    "if": (BOOL, FLOAT, FLOAT),
}

FUNCTIONS = {
    FLOAT: ("+", "-", "*", "/", "tanh", "abs", "if"),
    BOOL: ("and", "or", ">", "<"),
}

MAX_DEPTH = 5
MAX_GENES = 100
MAX_COMPLEXITY = 100
CONST_RANGE = (-20.0, 20.0)
DIV_EPS = 1e-8


class ExpressionError(ValueError):
    """Raised for malformed expression text or ill-typed trees."""

    def __init__(self, message: str, position: int | None = None):
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)
        self.position = position


class ExpressionTypeError(ExpressionError):
    pass


class Gene(NamedTuple):
    op: str
    value: float | bool | int | None = None

    @property
    def arity(self) -> int:
        return ARITY[self.op]

    @property
    def rtype(self) -> str:
        return RETURN_TYPE[self.op]


@dataclass(frozen=True)
class ComplexityWeights:
    """Per-gene-class complexity weights (defaults follow Eureqa's table)."""

    variable: int = 1
    terminal: int = 1
    basic: int = 1  # + - *
    division: int = 2
    logic: int = 4  # and, or
    unary: int = 4  # tanh, abs
    conditional: int = 5
    comparison: int = 1  # > <

    def weight(self, op: str) -> int:
        if op == VAR:
            return self.variable
        if op in (CONST, TRUTH):
            return self.terminal
        if op in ("+", "-", "*"):
            return self.basic
        if op == "/":
            return self.division
        if op in ("and", "or"):
            return self.logic
        if op in ("tanh", "abs"):
            return self.unary
        if op == "if":
            return self.conditional
        if op in (">", "<"):
            return self.comparison
        raise KeyError(op)


DEFAULT_WEIGHTS = ComplexityWeights()


def _pdiv(a, b):
    ok = ~(np.abs(b) < DIV_EPS)
    return np.where(ok, a / np.where(ok, b, 1.0), 1.0)


_NAMESPACE = {
    "_pdiv": _pdiv,
    "_tanh": np.tanh,
    "_abs": np.abs,
    "_and": np.logical_and,
    "_or": np.logical_or,
    "_gt": np.greater,
    "_lt": np.less,
    "_where": np.where,
}


def subtree_end(genes: Sequence[Gene], start: int) -> int:
    """Index one past the last gene of the subtree rooted at ``start``."""
    need = 1
    i = start
    while need:
        need += ARITY[genes[i].op] - 1
        i += 1
    return i


@dataclass(frozen=True, eq=True)
class ExpressionTree:
    """Immutable typed expression tree in prefix order."""

    genes: tuple[Gene, ...]
    _fn: object = field(default=None, init=False, repr=False, compare=False, hash=False)
    _max_var: int = field(default=-1, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        genes = tuple(Gene(*g) for g in self.genes)
        object.__setattr__(self, "genes", genes)
        object.__setattr__(self, "_max_var",
                           max((int(g.value) for g in genes if g.op == VAR), default=-1))

    def __len__(self) -> int:
        return len(self.genes)

    @property
    def rtype(self) -> str:
        return self.genes[0].rtype

    def depth(self) -> int:
        """Edges on the longest root-to-leaf path (a lone terminal has depth 0)."""
        return max(self.node_depths())

    def node_depths(self) -> list[int]:
        out = []
        pending: list[int] = []
        for g in self.genes:
            d = pending.pop() if pending else 0
            out.append(d)
            pending.extend([d + 1] * g.arity)
        return out

    def node_types(self) -> list[str]:
        return [g.rtype for g in self.genes]

    def subtree(self, i: int) -> ExpressionTree:
        return ExpressionTree(self.genes[i:subtree_end(self.genes, i)])

    def variables(self) -> set[int]:
        return {int(g.value) for g in self.genes if g.op == VAR}

    def constants(self) -> list[float]:
        return [float(g.value) for g in self.genes if g.op == CONST]

    def complexity(self, weights: ComplexityWeights = DEFAULT_WEIGHTS) -> int:
        return sum(weights.weight(g.op) for g in self.genes)

    def __call__(self, states: np.ndarray) -> np.ndarray:
        """Evaluate on a batch of states, shape (B, d) -> (B,)."""
        states = np.asarray(states, dtype=float)
        if states.ndim == 1:
            states = states[None, :]
        with np.errstate(all="ignore"):
            return self.evaluate(states)

    def evaluate(self, states: np.ndarray) -> np.ndarray:
        """Like calling the tree, but expects a 2-d float array and leaves the
        floating-point error state to the caller."""
        if self._max_var >= states.shape[1]:
            raise IndexError(f"tree uses variable x{self._max_var} "
                             f"but states have {states.shape[1]} columns")
        fn = self._fn
        if fn is None:
            fn = _compile(self.genes)
            object.__setattr__(self, "_fn", fn)
        out = fn(states)
        if np.shape(out) == states.shape[:1]:
            return out
        return np.broadcast_to(out, states.shape[:1])

    def __str__(self) -> str:
        return format_tree(self)

    def __getstate__(self):
        return {"genes": self.genes}

    def __setstate__(self, state):
        self.__init__(state["genes"])


def _source(genes: Sequence[Gene], i: int) -> tuple[str, int]:
    g = genes[i]
    if g.op == CONST:
        return repr(float(g.value)), i + 1
    if g.op == TRUTH:
        return repr(bool(g.value)), i + 1
    if g.op == VAR:
        return f"X[:, {int(g.value)}]", i + 1
    args = []
    j = i + 1
    for _ in range(g.arity):
        s, j = _source(genes, j)
        args.append(s)
    if g.op in ("+", "-", "*"):
        return f"({args[0]} {g.op} {args[1]})", j
    name = {"/": "_pdiv", "tanh": "_tanh", "abs": "_abs", "and": "_and",
            "or": "_or", ">": "_gt", "<": "_lt", "if": "_where"}[g.op]
    return f"{name}({', '.join(args)})", j


def _compile(genes: Sequence[Gene]):
    src, _ = _source(genes, 0)
    return eval(f"lambda X: {src}", dict(_NAMESPACE))


def eval_tree(tree: ExpressionTree, state: Sequence[float]) -> float:
    """Evaluate ``tree`` on one state vector."""
    if tree.rtype != FLOAT:
        raise ExpressionTypeError("policy trees must return FLOAT")
    return float(tree(np.asarray(state, dtype=float)[None, :])[0])


def check_tree(tree: ExpressionTree, want: str = FLOAT) -> None:
    """Raise :class:`ExpressionTypeError` unless every node matches its signature."""
    genes = tree.genes
    end = _check(genes, 0, want)
    if end != len(genes):
        raise ExpressionError(f"trailing genes after position {end}")


def _check(genes, i, want):
    if i >= len(genes):
        raise ExpressionError("truncated tree")
    g = genes[i]
    if g.op not in ARITY:
        raise ExpressionError(f"unknown gene {g.op!r}")
    if g.rtype != want:
        raise ExpressionTypeError(f"gene {g.op!r} returns {g.rtype}, expected {want}")
    j = i + 1
    for t in CHILD_TYPES.get(g.op, ()):
        j = _check(genes, j, t)
    return j


def within_limits(tree: ExpressionTree, max_depth=MAX_DEPTH, max_genes=MAX_GENES,
                  max_complexity=MAX_COMPLEXITY, weights=DEFAULT_WEIGHTS) -> bool:
    return (len(tree) <= max_genes and tree.depth() <= max_depth
            and tree.complexity(weights) <= max_complexity)


def complexity_of(obj, weights: ComplexityWeights = DEFAULT_WEIGHTS) -> int:
    """Weighted node count of a tree, or the sum over a policy's trees."""
    if isinstance(obj, ExpressionTree):
        return obj.complexity(weights)
    return sum(t.complexity(weights) for t in obj.trees)


# -- constant folding -------------------------------------------------------

def auto_cancel(tree: ExpressionTree) -> ExpressionTree:
    """Fold variable-free subtrees into single terminals.

    ``if`` nodes with a constant condition collapse to the selected branch.
    Folding reuses the compiled evaluator so results are bit-identical.
    """
    genes, _ = _fold(tree.genes, 0)
    if genes == tree.genes:
        return tree
    return ExpressionTree(genes)


def _fold(genes, i):
    g = genes[i]
    if g.arity == 0:
        return (g,), i + 1
    kids = []
    j = i + 1
    for _ in range(g.arity):
        k, j = _fold(genes, j)
        kids.append(k)
    if all(len(k) == 1 and k[0].op in (CONST, TRUTH) for k in kids):
        sub = (g,) + tuple(k[0] for k in kids)
        value = _compile(sub)(None)
        if g.rtype == BOOL:
            return (Gene(TRUTH, bool(value)),), j
        return (Gene(CONST, float(value)),), j
    if g.op == "if" and len(kids[0]) == 1 and kids[0][0].op == TRUTH:
        return (kids[1] if kids[0][0].value else kids[2]), j
    return (g,) + tuple(x for k in kids for x in k), j


# -- random generation ------------------------------------------------------

def _terminal(rng: np.random.Generator, want: str, n_vars: int,
              const_range=CONST_RANGE) -> Gene:
    if want == BOOL:
        return Gene(TRUTH, bool(rng.integers(2)))
    if n_vars > 0 and rng.random() < 0.5:
        return Gene(VAR, int(rng.integers(n_vars)))
    return Gene(CONST, float(rng.uniform(*const_range)))


def _select_next_gene(rng, d, want, n_vars, out, const_range, deepest=None):
    if d < 1:
        out.append(_terminal(rng, want, n_vars, const_range))
        return
    funcs = FUNCTIONS[want]
    op = funcs[rng.integers(len(funcs))]
    out.append(Gene(op))
    child_types = CHILD_TYPES[op]
    full = int(rng.integers(len(child_types)))
    if deepest is not None:
        deepest.append(full)
    for slot, t in enumerate(child_types):
        dj = d - 1 if slot == full else int(rng.integers(0, d))
        _select_next_gene(rng, dj, t, n_vars, out, const_range)


def grow(rng: np.random.Generator, d_min: int, d_max: int, n_vars: int, want: str = FLOAT,
         *, max_depth=MAX_DEPTH, max_genes=MAX_GENES, max_complexity=MAX_COMPLEXITY,
         weights=DEFAULT_WEIGHTS, const_range=CONST_RANGE) -> ExpressionTree:
    """Random tree by the grow method.

    A depth ``d`` is drawn uniformly from ``[d_min, d_max]``; one randomly chosen
    child of every function node is built with depth ``d - 1`` and every other
    child gets an independent depth from ``[0, d - 1]``. Trees breaking the gene
    or complexity caps are redrawn.
    """
    if not 0 <= d_min <= d_max <= max_depth:
        raise ValueError(f"need 0 <= d_min <= d_max <= {max_depth}, got {d_min}, {d_max}")
    while True:
        d = int(rng.integers(d_min, d_max + 1))
        out: list[Gene] = []
        _select_next_gene(rng, d, want, n_vars, out, const_range)
        tree = ExpressionTree(tuple(out))
        if len(tree) <= max_genes and tree.complexity(weights) <= max_complexity:
            return tree


# -- text format ------------------------------------------------------------

_PREC = {"or": 1, "and": 2, ">": 3, "<": 3, "+": 4, "-": 4, "*": 5, "/": 5}


def _fmt_const(v: float) -> str:
    return repr(float(v))


def format_tree(tree: ExpressionTree, names: Sequence[str] | None = None) -> str:
    """Infix text; constants are printed exactly (``repr``), so parsing round-trips."""
    s, _, _ = _fmt(tree.genes, 0, names)
    return s


def _fmt(genes, i, names):
    g = genes[i]
    if g.op == CONST:
        return _fmt_const(g.value), 9, i + 1
    if g.op == TRUTH:
        return ("true" if g.value else "false"), 9, i + 1
    if g.op == VAR:
        k = int(g.value)
        return (names[k] if names else f"x{k}"), 9, i + 1
    parts = []
    j = i + 1
    for _ in range(g.arity):
        s, p, j = _fmt(genes, j, names)
        parts.append((s, p))
    if g.op in ("tanh", "abs", "if"):
        return f"{g.op}({', '.join(s for s, _ in parts)})", 9, j
    prec = _PREC[g.op]
    (ls, lp), (rs, rp) = parts
    comparison = g.op in (">", "<")
    if lp < prec or (comparison and lp == prec):
        ls = f"({ls})"
    if rp <= prec:
        rs = f"({rs})"
    return f"{ls} {g.op} {rs}", prec, j


_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/(),<>])
""", re.VERBOSE)

_KEYWORDS = {"and", "or", "if", "tanh", "abs", "true", "false"}


def _tokenize(text: str):
    pos = 0
    out = []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise ExpressionError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            out.append((kind, m.group(), pos))
        pos = m.end()
    out.append(("end", "", len(text)))
    return out


class _Parser:
    def __init__(self, text: str, names: Sequence[str] | None):
        self.toks = _tokenize(text)
        self.i = 0
        self.lookup = {n: k for k, n in enumerate(names or ())}

    def peek(self):
        return self.toks[self.i]

    def take(self, value=None):
        tok = self.toks[self.i]
        if value is not None and tok[1] != value:
            raise ExpressionError(f"expected {value!r}, found {tok[1] or 'end of input'!r}", tok[2])
        self.i += 1
        return tok

    def binary(self, ops, sub, in_types, out_type):
        genes, t = sub()
        while self.peek()[1] in ops:
            op = self.take()[1]
            pos = self.peek()[2]
            rhs, rt = sub()
            if t != in_types or rt != in_types:
                raise ExpressionTypeError(
                    f"{op!r} expects {in_types} operands, got {t} and {rt}", pos)
            genes, t = [Gene(op)] + genes + rhs, out_type
        return genes, t

    def expr(self):
        return self.binary(("or",), self.conj, BOOL, BOOL)

    def conj(self):
        return self.binary(("and",), self.comparison, BOOL, BOOL)

    def comparison(self):
        lhs, lt = self.additive()
        if self.peek()[1] in (">", "<"):
            op = self.take()[1]
            pos = self.peek()[2]
            rhs, rt = self.additive()
            if lt != FLOAT or rt != FLOAT:
                raise ExpressionTypeError(f"{op!r} expects float operands", pos)
            if self.peek()[1] in (">", "<"):
                raise ExpressionError("comparisons do not chain", self.peek()[2])
            return [Gene(op)] + lhs + rhs, BOOL
        return lhs, lt

    def additive(self):
        return self.binary(("+", "-"), self.multiplicative, FLOAT, FLOAT)

    def multiplicative(self):
        return self.binary(("*", "/"), self.atom, FLOAT, FLOAT)

    def atom(self):
        kind, text, pos = self.take()
        if kind == "op" and text == "-" and self.peek()[0] == "num":
            return [Gene(CONST, -float(self.take()[1]))], FLOAT
        if kind == "num":
            return [Gene(CONST, float(text))], FLOAT
        if kind == "op" and text == "(":
            out = self.expr()
            self.take(")")
            return out
        if kind == "name":
            if text in ("true", "false"):
                return [Gene(TRUTH, text == "true")], BOOL
            if text in ("tanh", "abs", "if"):
                return self.call(text, pos)
            if text in self.lookup:
                return [Gene(VAR, self.lookup[text])], FLOAT
            m = re.fullmatch(r"x(\d+)", text)
            if m:
                return [Gene(VAR, int(m.group(1)))], FLOAT
            raise ExpressionError(f"unknown name {text!r}", pos)
        raise ExpressionError(f"unexpected {text or 'end of input'!r}", pos)

    def call(self, fn, pos):
        self.take("(")
        args = [self.expr()]
        while self.peek()[1] == ",":
            self.take(",")
            args.append(self.expr())
        self.take(")")
        sig = CHILD_TYPES[fn]
        if len(args) != len(sig):
            raise ExpressionError(f"{fn}() takes {len(sig)} arguments, got {len(args)}", pos)
        for (genes, t), want in zip(args, sig):
            if t != want:
                raise ExpressionTypeError(f"{fn}() argument must be {want}, got {t}", pos)
        return [Gene(fn)] + [g for genes, _ in args for g in genes], FLOAT


def parse_tree(text: str, names: Sequence[str] | None = None) -> ExpressionTree:
    """Parse infix text (``x0``-style or named variables) into a FLOAT tree."""
    p = _Parser(text, names)
    genes, t = p.expr()
    tok = p.peek()
    if tok[0] != "end":
        raise ExpressionError(f"unexpected {tok[1]!r}", tok[2])
    if t != FLOAT:
        raise ExpressionTypeError("expression must be FLOAT-valued", 0)
    return ExpressionTree(tuple(genes))


# -- policies ---------------------------------------------------------------

@dataclass(frozen=True)
class Policy:
    """One FLOAT tree per action dimension with clamping bounds."""

    trees: tuple[ExpressionTree, ...]
    action_low: tuple[float, ...]
    action_high: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "trees", tuple(self.trees))
        object.__setattr__(self, "action_low", tuple(float(v) for v in self.action_low))
        object.__setattr__(self, "action_high", tuple(float(v) for v in self.action_high))
        if not (len(self.trees) == len(self.action_low) == len(self.action_high)):
            raise ValueError("one tree and one bound pair per action dimension")

    @property
    def action_dim(self) -> int:
        return len(self.trees)

    def complexity(self, weights: ComplexityWeights = DEFAULT_WEIGHTS) -> int:
        return sum(t.complexity(weights) for t in self.trees)

    def raw(self, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        with np.errstate(all="ignore"):
            return np.stack([t.evaluate(states) for t in self.trees], axis=-1)

    def act_flagged(self, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Clamped actions plus a per-row flag marking non-finite raw outputs.

        NaN maps to the lower bound, infinities to the matching bound.
        """
        raw = self.raw(states)
        bad = ~np.isfinite(raw)
        lo = np.asarray(self.action_low)
        hi = np.asarray(self.action_high)
        if bad.any():
            raw = np.where(np.isnan(raw), lo, raw)
        return np.clip(raw, lo, hi), bad.any(axis=-1)

    def act(self, states: np.ndarray) -> np.ndarray:
        return self.act_flagged(states)[0]

    def format(self, names: Sequence[str] | None = None) -> list[str]:
        return [format_tree(t, names) for t in self.trees]

    def __str__(self) -> str:
        return " | ".join(self.format())


def policy_from_text(lines: Iterable[str], action_low, action_high,
                     names: Sequence[str] | None = None) -> Policy:
    trees = [parse_tree(s, names) for s in lines]
    return Policy(tuple(trees), tuple(action_low), tuple(action_high))


def write_policy(path, policy: Policy, names: Sequence[str] | None = None) -> None:
    """Policy text file: a variable-name header, then one expression per action."""
    names = list(names) if names else [f"x{i}" for i in range(_n_vars(policy))]
    lines = ["# variables: " + ", ".join(names),
             "# action_bounds: " + ", ".join(
                 f"[{lo!r}, {hi!r}]" for lo, hi in zip(policy.action_low, policy.action_high))]
    lines += policy.format(names)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _n_vars(policy: Policy) -> int:
    return 1 + max((max(t.variables(), default=-1) for t in policy.trees), default=-1)


def read_policy(path, action_low=None, action_high=None) -> Policy:
    names = None
    bounds = None
    exprs = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("variables:"):
                    names = [n.strip() for n in body[len("variables:"):].split(",") if n.strip()]
                elif body.startswith("action_bounds:"):
                    pairs = re.findall(r"\[([^,\]]+),([^\]]+)\]", body)
                    bounds = [(float(a), float(b)) for a, b in pairs]
                continue
            exprs.append(line)
    if action_low is None:
        if bounds is None:
            raise ExpressionError(f"{path}: no action bounds in header or arguments")
        action_low = [b[0] for b in bounds]
        action_high = [b[1] for b in bounds]
    return policy_from_text(exprs, action_low, action_high, names)
