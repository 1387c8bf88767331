"""Independent reference implementations used to check the library.

Nothing here imports library internals beyond the public gene representation:
each oracle re-derives its answer from first principles.
"""

from __future__ import annotations

import math

# complexity weights by gene class, written out independently of the library
WEIGHTS = {
    "var": 1, "const": 1, "truth": 1,
    "+": 1, "-": 1, "*": 1, "/": 2,
    "and": 4, "or": 4,
    "tanh": 4, "abs": 4,
    "if": 5,
    ">": 1, "<": 1,
}
ARITY = {"var": 0, "const": 0, "truth": 0, "tanh": 1, "abs": 1, "if": 3,
         "+": 2, "-": 2, "*": 2, "/": 2, "and": 2, "or": 2, ">": 2, "<": 2}


def node_walk_complexity(genes) -> int:
    """Brute-force recursive walk summing per-node weights."""
    def walk(i):
        g = genes[i]
        total = WEIGHTS[g.op]
        j = i + 1
        for _ in range(ARITY[g.op]):
            sub, j = walk(j)
            total += sub
        return total, j
    total, end = walk(0)
    assert end == len(genes)
    return total


def interpret(genes, state) -> float | bool:
    """Scalar recursive interpreter over prefix-ordered genes."""
    def ev(i):
        g = genes[i]
        op = g.op
        if op == "const":
            return float(g.value), i + 1
        if op == "truth":
            return bool(g.value), i + 1
        if op == "var":
            return float(state[int(g.value)]), i + 1
        args = []
        j = i + 1
        for _ in range(ARITY[op]):
            v, j = ev(j)
            args.append(v)
        if op == "+":
            return args[0] + args[1], j
        if op == "-":
            return args[0] - args[1], j
        if op == "*":
            return args[0] * args[1], j
        if op == "/":
            return (1.0 if abs(args[1]) < 1e-8 else args[0] / args[1]), j
        if op == "tanh":
            return math.tanh(args[0]), j
        if op == "abs":
            return abs(args[0]), j
        if op == "and":
            return bool(args[0] and args[1]), j
        if op == "or":
            return bool(args[0] or args[1]), j
        if op == ">":
            return args[0] > args[1], j
        if op == "<":
            return args[0] < args[1], j
        if op == "if":
            return (args[1] if args[0] else args[2]), j
        raise KeyError(op)
    return ev(0)[0]


def geometric_return(r: float, gamma: float, T: int) -> float:
    """Closed form of sum_{k<T} gamma^k r."""
    if gamma == 1.0:
        return r * T
    return r * (1.0 - gamma**T) / (1.0 - gamma)


def tournament_best_win_probability(n: int, k: int) -> float:
    """Chance the unique best of n is among k draws with replacement."""
    return 1.0 - ((n - 1) / n) ** k


def mc_hand_step(p, v, a, dt=0.01):
    """Mountain-car update written out by hand (velocity per unit time)."""
    a = max(-1.0, min(1.0, a))
    if p >= 0.6:
        return p, v, 0.0
    vmax = 0.07 / dt
    v2 = v + (0.001 * a - 0.0025 * math.cos(3 * p)) / dt
    v2 = max(-vmax, min(vmax, v2))
    p2 = p + v2 * dt
    if p2 <= -1.2:
        p2, v2 = -1.2, 0.0
    p2 = min(p2, 0.6)
    return p2, v2, (0.0 if p2 >= 0.6 else -1.0)


def median(xs):
    s = sorted(xs)
    n = len(s)
    return s[n // 2] if n % 2 else 0.5 * (s[n // 2 - 1] + s[n // 2])
