"""Genetic algorithm over policy trees with a per-complexity Pareto archive.

Fitness functions are batch callables: ``fitness_fn(policies) -> sequence of
floats`` (higher is better). They must be pure; scoring is split into chunks of
fixed size so serial and multi-process runs produce bit-identical results.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .expr import (
    CONST, DEFAULT_WEIGHTS, FLOAT, ComplexityWeights, ExpressionTree, Gene, Policy,
    auto_cancel, grow, parse_tree, subtree_end,
)

log = logging.getLogger(__name__)

WORST_FITNESS = -1e300
ARCHIVE_SCHEMA_VERSION = 1

FitnessFn = Callable[[Sequence[Policy]], Sequence[float]]


@dataclass
class GAConfig:
    population_size: int = 100
    generations: int = 1000
    crossover_ratio: float = 0.45
    reproduction_ratio: float = 0.05
    auto_cancel_ratio: float = 0.1
    terminal_mutation_ratio: float = 0.1
    new_random_ratio: float = 0.3
    tournament_size: int = 3
    d_min: int = 0
    d_max: int = 5
    max_depth: int = 5
    max_genes: int = 100
    max_complexity: int = 100
    const_low: float = -20.0
    const_high: float = 20.0
    seed: int = 0
    time_budget: float | None = None  # seconds
    patience: int | None = None  # generations without archive improvement
    workers: int = 1
    chunk_size: int = 16

    def __post_init__(self):
        total = (self.crossover_ratio + self.reproduction_ratio + self.auto_cancel_ratio
                 + self.terminal_mutation_ratio + self.new_random_ratio)
        if total > 1 + 1e-12:
            raise ValueError(f"operator ratios sum to {total} > 1")
        if self.population_size < 1 or self.tournament_size < 1:
            raise ValueError("population_size and tournament_size must be positive")
        if not 0 <= self.d_min <= self.d_max <= self.max_depth:
            raise ValueError("need 0 <= d_min <= d_max <= max_depth")

    def bucket(self, ratio: float) -> int:
        return int(math.floor(self.population_size * ratio + 1e-9))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PolicySpace:
    """What a random policy looks like: input count and per-action clamp bounds."""

    n_vars: int
    action_low: tuple[float, ...]
    action_high: tuple[float, ...]

    @property
    def action_dim(self) -> int:
        return len(self.action_low)


@dataclass(frozen=True)
class ScoredIndividual:
    policy: Policy
    fitness: float
    complexity: int


class ParetoArchive:
    """Best individual seen so far at every integer complexity level."""

    def __init__(self):
        self.slots: dict[int, ScoredIndividual] = {}

    def __len__(self):
        return len(self.slots)

    def update(self, ind: ScoredIndividual) -> bool:
        cur = self.slots.get(ind.complexity)
        if cur is None or ind.fitness > cur.fitness:
            self.slots[ind.complexity] = ind
            return True
        return False

    def update_many(self, inds: Iterable[ScoredIndividual]) -> int:
        return sum(self.update(i) for i in inds)

    def snapshot(self) -> dict[int, float]:
        return {c: s.fitness for c, s in sorted(self.slots.items())}

    def front(self) -> list[ScoredIndividual]:
        """Non-dominated entries: fitness strictly increases with complexity."""
        out = []
        best = -math.inf
        for c in sorted(self.slots):
            ind = self.slots[c]
            if ind.fitness > best:
                out.append(ind)
                best = ind.fitness
        return out

    def members(self) -> list[ScoredIndividual]:
        return [self.slots[c] for c in sorted(self.slots)]


# -- scoring ----------------------------------------------------------------

def _safe(v) -> float:
    try:
        v = float(v)
    except (TypeError, ValueError):
        return WORST_FITNESS
    return v if math.isfinite(v) else WORST_FITNESS


def _score_chunk(fitness_fn: FitnessFn, policies: Sequence[Policy]) -> list[float]:
    try:
        values = list(fitness_fn(policies))
        if len(values) != len(policies):
            raise ValueError("fitness function returned wrong number of values")
        return [_safe(v) for v in values]
    except Exception:
        if len(policies) == 1:
            log.debug("fitness evaluation failed", exc_info=True)
            return [WORST_FITNESS]
    return [v for p in policies for v in _score_chunk(fitness_fn, [p])]


_WORKER_FN: FitnessFn | None = None


def _init_worker(fn):
    global _WORKER_FN
    _WORKER_FN = fn


def _worker_chunk(policies):
    return _score_chunk(_WORKER_FN, policies)


class Scorer:
    """Evaluates policies in fixed-size chunks, serially or in a process pool.

    Results are merged in input order, so the worker count never changes them.
    """

    def __init__(self, fitness_fn: FitnessFn, workers: int = 1, chunk_size: int = 16):
        self.fitness_fn = fitness_fn
        self.chunk_size = max(1, chunk_size)
        self.pool = None
        if workers > 1:
            self.pool = ProcessPoolExecutor(workers, initializer=_init_worker,
                                            initargs=(fitness_fn,))
        self.evaluations = 0

    def __call__(self, policies: Sequence[Policy]) -> list[float]:
        policies = list(policies)
        self.evaluations += len(policies)
        chunks = [policies[i:i + self.chunk_size]
                  for i in range(0, len(policies), self.chunk_size)]
        if self.pool is None:
            parts = [_score_chunk(self.fitness_fn, c) for c in chunks]
        else:
            parts = list(self.pool.map(_worker_chunk, chunks))
        return [v for part in parts for v in part]

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()
            self.pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def score(policies: Sequence[Policy], scorer: Callable, weights=DEFAULT_WEIGHTS,
          known: dict | None = None) -> list[ScoredIndividual]:
    """Score policies, reusing fitness values from ``known`` for identical policies."""
    known = known or {}
    todo = [p for p in policies if p not in known]
    fresh = dict(zip(todo, scorer(todo))) if todo else {}
    out = []
    for p in policies:
        f = known[p] if p in known else fresh[p]
        out.append(ScoredIndividual(p, f, p.complexity(weights)))
    return out


# -- operators --------------------------------------------------------------

def random_policy(rng: np.random.Generator, space: PolicySpace, config: GAConfig,
                  weights=DEFAULT_WEIGHTS) -> Policy:
    trees = []
    budget = config.max_complexity
    for k in range(space.action_dim):
        # share the complexity cap between action dimensions
        remaining = space.action_dim - k - 1
        while True:
            t = grow(rng, config.d_min, config.d_max, space.n_vars, FLOAT,
                     max_depth=config.max_depth, max_genes=config.max_genes,
                     max_complexity=config.max_complexity, weights=weights,
                     const_range=(config.const_low, config.const_high))
            if t.complexity(weights) <= budget - remaining:
                break
        budget -= t.complexity(weights)
        trees.append(t)
    return Policy(tuple(trees), space.action_low, space.action_high)


def _sort_key(ind: ScoredIndividual, index: int):
    return (-ind.fitness, ind.complexity, index)


def tournament_select(population: Sequence[ScoredIndividual], k: int,
                      rng: np.random.Generator) -> ScoredIndividual:
    """Best of ``k`` uniform draws with replacement.

    Ties go to lower complexity, then to the lower population index.
    """
    if not population:
        raise ValueError("tournament on an empty population")
    if k < 1:
        raise ValueError("tournament size must be >= 1")
    idx = rng.integers(len(population), size=k)
    best = min(idx, key=lambda i: _sort_key(population[i], int(i)))
    return population[int(best)]


def _fits(policy: Policy, config: GAConfig, weights) -> bool:
    if policy.complexity(weights) > config.max_complexity:
        return False
    return all(len(t) <= config.max_genes and t.depth() <= config.max_depth
               for t in policy.trees)


def crossover(a: Policy, b: Policy, rng: np.random.Generator, config: GAConfig | None = None,
              weights=DEFAULT_WEIGHTS, max_tries: int = 10) -> tuple[Policy, Policy]:
    """Swap type-compatible subtrees in one randomly chosen action dimension.

    Offspring breaking a size limit cause a redraw of the cut points; after
    ``max_tries`` failed draws the parents are returned unchanged.
    """
    if a.action_dim != b.action_dim:
        raise ValueError("parents have different action dimensions")
    config = config or GAConfig()
    for _ in range(max_tries):
        k = int(rng.integers(a.action_dim))
        ga, gb = a.trees[k].genes, b.trees[k].genes
        i = int(rng.integers(len(ga)))
        want = ga[i].rtype
        candidates = [j for j, g in enumerate(gb) if g.rtype == want]
        if not candidates:
            continue
        j = candidates[int(rng.integers(len(candidates)))]
        ei, ej = subtree_end(ga, i), subtree_end(gb, j)
        ta = ExpressionTree(ga[:i] + gb[j:ej] + ga[ei:])
        tb = ExpressionTree(gb[:j] + ga[i:ei] + gb[ej:])
        ca = Policy(a.trees[:k] + (ta,) + a.trees[k + 1:], a.action_low, a.action_high)
        cb = Policy(b.trees[:k] + (tb,) + b.trees[k + 1:], b.action_low, b.action_high)
        if _fits(ca, config, weights) and _fits(cb, config, weights):
            return ca, cb
    return a, b


def mutate_terminals(p: Policy, rng: np.random.Generator, scale: float = 0.1) -> Policy:
    """Replace every float constant z by a draw from N(z, scale*|z|)."""
    trees = []
    for t in p.trees:
        genes = tuple(
            Gene(CONST, float(rng.normal(g.value, scale * abs(g.value)))) if g.op == CONST else g
            for g in t.genes)
        trees.append(ExpressionTree(genes))
    return Policy(tuple(trees), p.action_low, p.action_high)


def cancel_policy(p: Policy) -> Policy:
    trees = tuple(auto_cancel(t) for t in p.trees)
    if trees == p.trees:
        return p
    return Policy(trees, p.action_low, p.action_high)


def _has_constants(p: Policy) -> bool:
    return any(g.op == CONST for t in p.trees for g in t.genes)


# -- generations ------------------------------------------------------------

def _slot_rngs(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    base = int(rng.integers(2**63))
    return [np.random.default_rng(np.random.SeedSequence([base, i])) for i in range(n)]


def evolve_generation(population: Sequence[ScoredIndividual], scorer: Callable,
                      config: GAConfig, archive: ParetoArchive, rng: np.random.Generator,
                      space: PolicySpace, weights=DEFAULT_WEIGHTS) -> list[ScoredIndividual]:
    """One generation: crossover, reproduction, auto-cancelation, terminal
    adjustment and fresh random individuals, then scoring and archiving."""
    n = config.population_size
    n_cross = config.bucket(config.crossover_ratio)
    n_repro = config.bucket(config.reproduction_ratio)
    n_cancel = config.bucket(config.auto_cancel_ratio)
    n_adjust = config.bucket(config.terminal_mutation_ratio)
    n_copies = config.bucket(config.auto_cancel_ratio)
    known = {ind.policy: ind.fitness for ind in population}
    k = config.tournament_size

    streams = iter(_slot_rngs(rng, 4))
    cross_rng, repro_rng, adjust_rng, new_rng = (next(streams) for _ in range(4))

    # crossover and reproduction
    bred: list[Policy] = []
    while len(bred) < n_cross:
        pa = tournament_select(population, k, cross_rng).policy
        pb = tournament_select(population, k, cross_rng).policy
        bred.extend(crossover(pa, pb, cross_rng, config, weights))
    bred = bred[:n_cross]
    bred += [tournament_select(population, k, repro_rng).policy for _ in range(n_repro)]

    # auto-cancelation of the best individuals
    order = sorted(range(len(population)), key=lambda i: _sort_key(population[i], i))
    bred += [cancel_policy(population[i].policy) for i in order[:n_cancel]]

    # terminal adjustment: best per complexity level spawns mutated copies
    adjusted: list[ScoredIndividual] = []
    if n_adjust > 0 and n_copies > 0:
        best_at: dict[int, ScoredIndividual] = {}
        for i in order:
            ind = population[i]
            best_at.setdefault(ind.complexity, ind)
        originals = [ind for c, ind in sorted(best_at.items()) if _has_constants(ind.policy)]
        copies = [mutate_terminals(ind.policy, adjust_rng)
                  for ind in originals for _ in range(n_copies)]
        scored_copies = score(copies, scorer, weights)
        archive.update_many(scored_copies)
        winners = []
        for o, ind in enumerate(originals):
            group = scored_copies[o * n_copies:(o + 1) * n_copies]
            top = max(group, key=lambda s: s.fitness)
            if top.fitness > ind.fitness:
                winners.append(top)
        winners.sort(key=lambda s: (-s.fitness, s.complexity))
        adjusted = winners[:n_adjust]

    # fill the remainder with fresh random individuals
    n_new = max(0, n - len(bred) - len(adjusted))
    bred += [random_policy(new_rng, space, config, weights) for _ in range(n_new)]

    scored = score(bred, scorer, weights, known)
    archive.update_many(scored)
    return (scored + adjusted)[:n]


@dataclass
class RunResult:
    archive: ParetoArchive
    generations: int
    evaluations: int
    wall_time: float
    history: list[dict[int, float]] = field(default_factory=list)
    population: list[ScoredIndividual] = field(default_factory=list)


def run_gprl(config: GAConfig, fitness_fn: FitnessFn, space: PolicySpace,
             weights: ComplexityWeights = DEFAULT_WEIGHTS,
             on_generation: Callable | None = None) -> RunResult:
    """Evolve policies and return the per-complexity archive of the best ones.

    Stops after ``config.generations`` generations, when the optional time
    budget is spent, or when the archive has not improved for ``patience``
    generations.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    archive = ParetoArchive()
    with Scorer(fitness_fn, config.workers, config.chunk_size) as scorer:
        init_rngs = _slot_rngs(rng, config.population_size)
        pop = score([random_policy(r, space, config, weights) for r in init_rngs],
                    scorer, weights)
        archive.update_many(pop)
        history = [archive.snapshot()]
        if on_generation:
            on_generation(0, pop, archive)
        stale = 0
        gen = 0
        while gen < config.generations:
            if config.time_budget is not None and time.perf_counter() - t0 > config.time_budget:
                break
            before = history[-1]
            pop = evolve_generation(pop, scorer, config, archive, rng, space, weights)
            gen += 1
            history.append(archive.snapshot())
            if on_generation:
                on_generation(gen, pop, archive)
            stale = 0 if history[-1] != before else stale + 1
            if config.patience is not None and stale >= config.patience:
                break
        evaluations = scorer.evaluations
    return RunResult(archive, gen, evaluations, time.perf_counter() - t0, history, pop)


# -- squashed fronts ----------------------------------------------------------

@dataclass(frozen=True)
class SquashedRow:
    complexity: int
    median: float
    min: float
    max: float
    runs: int


def cumulative_best(front: Sequence[tuple[int, float]], grid: Sequence[int]) -> list[float]:
    """Lowest penalty among members with complexity <= c, for each c in grid (NaN if none)."""
    pts = sorted(front)
    out = []
    best = math.nan
    i = 0
    for c in grid:
        while i < len(pts) and pts[i][0] <= c:
            p = pts[i][1]
            best = p if math.isnan(best) else min(best, p)
            i += 1
        out.append(best)
    return out


def squash_fronts(archives: Sequence[ParetoArchive | Sequence[ScoredIndividual]],
                  evaluate: Callable[[Policy], float] | None = None,
                  penalties: Sequence[Sequence[tuple[int, float]]] | None = None,
                  ) -> list[SquashedRow]:
    """Per-complexity median/min/max of each run's cumulative best penalty.

    Either re-evaluate every front member with ``evaluate`` (policy -> penalty)
    or pass precomputed ``(complexity, penalty)`` lists per run.
    """
    if penalties is None:
        if not archives:
            raise ValueError("need at least one archive")
        penalties = []
        for arc in archives:
            members = arc.front() if isinstance(arc, ParetoArchive) else list(arc)
            penalties.append([(m.complexity, float(evaluate(m.policy))) for m in members])
    if not penalties:
        raise ValueError("need at least one archive")
    levels = sorted({c for run in penalties for c, _ in run})
    if not levels:
        return []
    grid = list(range(levels[0], levels[-1] + 1))
    curves = np.array([cumulative_best(run, grid) for run in penalties], dtype=float)
    rows = []
    for j, c in enumerate(grid):
        col = curves[:, j]
        col = col[~np.isnan(col)]
        if col.size == 0:
            continue
        rows.append(SquashedRow(c, float(np.median(col)), float(col.min()), float(col.max()),
                                int(col.size)))
    return rows


# -- persistence ----------------------------------------------------------------

def write_archive_csv(path, members: Sequence[ScoredIndividual],
                      real_penalty: dict[int, float] | None = None,
                      names: Sequence[str] | None = None) -> None:
    """CSV: schema_version, complexity, model_fitness, real_penalty, expression_per_dim.

    Expressions of a multi-output policy are joined with `` | ``.
    """
    with open(path, "w", newline="") as f:
        w = csv.writer(f, quoting=csv.QUOTE_NONNUMERIC)
        w.writerow(["schema_version", "complexity", "model_fitness", "real_penalty",
                    "expression_per_dim"])
        for m in members:
            rp = "" if not real_penalty or m.complexity not in real_penalty \
                else repr(real_penalty[m.complexity])
            w.writerow([ARCHIVE_SCHEMA_VERSION, m.complexity, repr(m.fitness), rp,
                        " | ".join(m.policy.format(names))])


def read_archive_csv(path, action_low, action_high, names: Sequence[str] | None = None,
                     weights=DEFAULT_WEIGHTS) -> tuple[ParetoArchive, dict[int, float]]:
    archive = ParetoArchive()
    real = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            trees = tuple(parse_tree(s, names) for s in row["expression_per_dim"].split(" | "))
            policy = Policy(trees, action_low, action_high)
            ind = ScoredIndividual(policy, float(row["model_fitness"]), policy.complexity(weights))
            archive.slots[ind.complexity] = ind
            if row.get("real_penalty") not in (None, ""):
                real[ind.complexity] = float(row["real_penalty"])
    return archive, real
