"""NSGA-II and random search over architecture masks (accuracy up, FLOPS down)."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .cost import flops as arch_flops
from .ranking import evaluate_oneshot
from .space import SearchSpaceSpec, sample_layer, sample_mask, stable_hash, substream, validate_mask

log = logging.getLogger(__name__)


class SearchTimeout(RuntimeError):
    """No admissible candidate was found within the attempt cap."""


class BudgetExhausted(Exception):
    """The unique-evaluation budget is used up."""


@dataclass
class Individual:
    mask: tuple
    acc: float | None = None
    flops: int | None = None
    rank: int | None = None
    crowding: float | None = None

    @property
    def evaluated(self) -> bool:
        return self.acc is not None and self.flops is not None

    def to_json(self) -> dict:
        return {"mask": list(self.mask), "acc": self.acc, "flops": self.flops, "rank": self.rank,
                "crowding": None if self.crowding is None or math.isinf(self.crowding) else self.crowding}


@dataclass
class SearchConfig:
    acc_min: float
    flops_max: int
    generations: int = 10
    pop_size: int = 20
    weights: tuple = (1.0, 1.0)
    tournament_size: int = 2
    crossover_rate: float = 1.0
    mutation_rate: float = 0.05
    pick_count: int = 5
    max_evals: int | None = None
    max_attempts: int = 2000
    bernoulli_p: float = 0.5

    def __post_init__(self):
        self.weights = tuple(float(w) for w in self.weights)
        if self.pop_size < 2 or self.pop_size % 2:
            raise ValueError("pop_size must be even and >= 2")
        if not 1 <= self.pick_count <= self.pop_size:
            raise ValueError("pick_count must be in [1, pop_size]")
        for r in (self.crossover_rate, self.mutation_rate):
            if not 0.0 <= r <= 1.0:
                raise ValueError("rates must lie in [0, 1]")
        if len(self.weights) != 2 or min(self.weights) <= 0:
            raise ValueError("weights must be two positive numbers")
        if self.generations < 0 or self.tournament_size < 1:
            raise ValueError("generations must be >= 0 and tournament_size >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = list(self.weights)
        return d

    def fingerprint(self) -> str:
        return stable_hash(self.to_dict())


# --------------------------------------------------------------------------
# Pareto machinery

def dominates(a: Individual, b: Individual) -> bool:
    """``a`` is at least as accurate and as cheap as ``b``, strictly better in one."""
    if not (a.evaluated and b.evaluated):
        raise ValueError("dominance needs evaluated individuals")
    no_worse = a.acc >= b.acc and a.flops <= b.flops
    better = a.acc > b.acc or a.flops < b.flops
    return no_worse and better


def non_dominated_sort(pop: list) -> list:
    """Fast non-dominated sorting; writes ``rank`` and returns the fronts in order."""
    n = len(pop)
    dominated_by = [[] for _ in range(n)]
    counts = [0] * n
    for i in range(n):
        for j in range(i + 1, n):
            if dominates(pop[i], pop[j]):
                dominated_by[i].append(j)
                counts[j] += 1
            elif dominates(pop[j], pop[i]):
                dominated_by[j].append(i)
                counts[i] += 1
    fronts = []
    current = [i for i in range(n) if counts[i] == 0]
    rank = 0
    while current:
        for i in current:
            pop[i].rank = rank
        fronts.append([pop[i] for i in current])
        nxt = []
        for i in current:
            for j in dominated_by[i]:
                counts[j] -= 1
                if counts[j] == 0:
                    nxt.append(j)
        current = sorted(nxt)
        rank += 1
    return fronts


def crowding_distance(front: list, weights=(1.0, 1.0)) -> None:
    """Weighted crowding distance, written to each member's ``crowding``."""
    if not front:
        return
    for ind in front:
        ind.crowding = 0.0
    if len(front) <= 2:
        for ind in front:
            ind.crowding = math.inf
        return
    for w, key in zip(weights, (lambda i: i.acc, lambda i: i.flops)):
        order = sorted(range(len(front)), key=lambda i: (key(front[i]), i))
        lo, hi = key(front[order[0]]), key(front[order[-1]])
        front[order[0]].crowding = math.inf
        front[order[-1]].crowding = math.inf
        span = hi - lo
        if span == 0:
            continue
        for pos in range(1, len(order) - 1):
            ind = front[order[pos]]
            if not math.isinf(ind.crowding):
                ind.crowding += w * (key(front[order[pos + 1]]) - key(front[order[pos - 1]])) / span


def _better(a: Individual, b: Individual) -> bool:
    if a.rank != b.rank:
        return a.rank < b.rank
    return a.crowding > b.crowding


def select_survivors(pop: list, n: int, weights) -> list:
    """Best ``n`` by (rank, crowding), preferring distinct masks before duplicates."""
    fronts = non_dominated_sort(pop)
    ordered = []
    for front in fronts:
        crowding_distance(front, weights)
        ordered.extend(sorted(front, key=lambda i: (-i.crowding, i.mask)))
    chosen, seen, dupes = [], set(), []
    for ind in ordered:
        if ind.mask in seen:
            dupes.append(ind)
            continue
        seen.add(ind.mask)
        chosen.append(ind)
    chosen = (chosen + dupes)[:n]
    return [Individual(i.mask, i.acc, i.flops, i.rank, i.crowding) for i in chosen]


def pareto_set(pop: list) -> list:
    """Non-dominated members with duplicates removed, sorted by FLOPS."""
    uniq = {}
    for ind in pop:
        uniq.setdefault(ind.mask, ind)
    inds = [Individual(i.mask, i.acc, i.flops) for i in uniq.values()]
    front = non_dominated_sort(inds)[0] if inds else []
    return sorted(front, key=lambda i: (i.flops, -i.acc, i.mask))


def equispaced_picks(front: list, k: int) -> list:
    """``k`` members at evenly spaced positions along the FLOPS-sorted front."""
    front = sorted(front, key=lambda i: (i.flops, -i.acc, i.mask))
    if k >= len(front):
        return front
    if k == 1:
        return [front[len(front) // 2]]
    idx = np.round(np.linspace(0, len(front) - 1, k)).astype(int)
    return [front[i] for i in idx]


def hypervolume(points, ref_acc: float, ref_flops: float) -> float:
    """Area dominated by ``(acc, flops)`` points, bounded by the reference corner."""
    pts = sorted((f, a) for a, f in points if a > ref_acc and f < ref_flops)
    area, best = 0.0, ref_acc
    for i, (f, a) in enumerate(pts):
        best = max(best, a)
        nxt = pts[i + 1][0] if i + 1 < len(pts) else ref_flops
        area += (nxt - f) * (best - ref_acc)
    return area


# --------------------------------------------------------------------------
# genetic operators

def tournament_select(pop: list, rng: np.random.Generator, size: int = 2) -> Individual:
    best = None
    for i in rng.integers(0, len(pop), size=size):
        cand = pop[int(i)]
        if best is None or _better(cand, best):
            best = cand
    return best


def crossover(a, b, rng: np.random.Generator) -> tuple:
    """Uniform per-layer exchange: each child layer is copied whole from one parent."""
    take = rng.random(len(a)) < 0.5
    return tuple(int(x) if t else int(y) for x, y, t in zip(a, b, take))


def mutate(mask, spec: SearchSpaceSpec, rate: float, rng: np.random.Generator, p: float = 0.5) -> tuple:
    if rate == 0:
        return tuple(mask)
    hits = rng.random(len(mask)) < rate
    return tuple(sample_layer(spec.n_paths, spec.max_paths, p, rng) if h else int(b)
                 for b, h in zip(mask, hits))


# --------------------------------------------------------------------------
# evaluators

class TableEvaluator:
    """Accuracy looked up in a bench table."""

    def __init__(self, table):
        self.table = table
        self._rows = table.lookup()

    def __call__(self, mask) -> float:
        try:
            return self._rows[tuple(mask)].accuracy
        except KeyError:
            raise KeyError(f"mask {tuple(mask)} is not in the bench table") from None


class SupernetEvaluator:
    """One-shot accuracy with inherited weights, optionally BN-calibrated."""

    def __init__(self, net, data: dict, calibrate: bool = True, calib_batches: int = 8,
                 batch_size: int = 32):
        self.net, self.data = net, data
        self.calibrate, self.calib_batches, self.batch_size = calibrate, calib_batches, batch_size

    def __call__(self, mask) -> float:
        return evaluate_oneshot(self.net, mask, self.data["x_val"], self.data["y_val"],
                                self.calibrate, self.data["x_train"], self.calib_batches,
                                self.batch_size)


class _Budget:
    """Memoizing wrapper that counts unique evaluations."""

    def __init__(self, evaluator, max_evals, audit, gen_ref):
        self.evaluator, self.max_evals, self.audit = evaluator, max_evals, audit
        self.cache: dict = {}
        self.gen_ref = gen_ref

    @property
    def used(self) -> int:
        return len(self.cache)

    def __call__(self, mask, flops):
        if mask in self.cache:
            return self.cache[mask]
        if self.max_evals is not None and self.used >= self.max_evals:
            raise BudgetExhausted
        acc = float(self.evaluator(mask))
        self.cache[mask] = acc
        self.audit.append({"event": "eval", "gen": self.gen_ref[0], "mask": list(mask),
                           "acc": acc, "flops": flops, "rank": None, "crowding": None})
        return acc


@dataclass
class SearchResult:
    population: list
    picks: list
    audit: list
    evaluations: int
    front: list = field(default_factory=list)
    exhausted: bool = False


def _fill(n, propose, cfg: SearchConfig, flops_of, budget: _Budget, out: list):
    """Append admissible candidates from ``propose`` to ``out`` until it holds ``n``."""
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > cfg.max_attempts:
            raise SearchTimeout(f"no admissible candidate after {cfg.max_attempts} attempts; "
                                f"check acc_min={cfg.acc_min} and flops_max={cfg.flops_max}")
        mask = propose()
        f = flops_of(mask)
        if f > cfg.flops_max:
            continue
        acc = budget(mask, f)
        if acc > cfg.acc_min:
            out.append(Individual(mask, acc, f))


def run_nsga2(spec: SearchSpaceSpec, cfg: SearchConfig, evaluator, seed: int) -> SearchResult:
    rng_init = substream(seed, "nsga2-init")
    rng_tour = substream(seed, "nsga2-tournament")
    rng_cross = substream(seed, "nsga2-crossover")
    rng_mut = substream(seed, "nsga2-mutation")
    audit: list = []
    gen = [0]
    budget = _Budget(evaluator, cfg.max_evals, audit, gen)
    flops_cache: dict = {}

    def flops_of(mask):
        if mask not in flops_cache:
            flops_cache[mask] = arch_flops(spec, mask)
        return flops_cache[mask]

    def snapshot(pop, g):
        for ind in pop:
            audit.append({"event": "population", "gen": g, **ind.to_json()})

    init = lambda: sample_mask(spec, cfg.bernoulli_p, rng_init)  # noqa: E731
    parents, offspring = [], []
    exhausted = False
    try:
        _fill(cfg.pop_size, init, cfg, flops_of, budget, parents)
        _fill(cfg.pop_size, init, cfg, flops_of, budget, offspring)
    except BudgetExhausted:
        exhausted = True
    population = select_survivors(parents + offspring, cfg.pop_size, cfg.weights) if cfg.generations \
        else select_survivors(parents, cfg.pop_size, cfg.weights)
    snapshot(population, 0)
    for g in range(1, cfg.generations + 1):
        if exhausted:
            break
        gen[0] = g
        # P_g is already selected from R_{g-1}; breed Q_g only if another selection follows
        if g == cfg.generations:
            break
        children: list = []

        def propose():
            a = tournament_select(population, rng_tour, cfg.tournament_size)
            b = tournament_select(population, rng_tour, cfg.tournament_size)
            child = crossover(a.mask, b.mask, rng_cross) if rng_cross.random() < cfg.crossover_rate else a.mask
            return validate_mask(spec, mutate(child, spec, cfg.mutation_rate, rng_mut, cfg.bernoulli_p))

        try:
            _fill(cfg.pop_size, propose, cfg, flops_of, budget, children)
        except BudgetExhausted:
            exhausted = True
        population = select_survivors(population + children, cfg.pop_size, cfg.weights)
        snapshot(population, g)
    front = pareto_set(population)
    picks = equispaced_picks(front, cfg.pick_count)
    return SearchResult(population, picks, audit, budget.used, front, exhausted)


def run_random_search(spec: SearchSpaceSpec, cfg: SearchConfig, evaluator, seed: int,
                      budget_evals: int | None = None) -> SearchResult:
    """Uniformly sampled masks under the same constraints and unique-evaluation budget."""
    rng = substream(seed, "random-search")
    limit = budget_evals if budget_evals is not None else cfg.max_evals
    if limit is None or limit < 1:
        raise ValueError("random search needs a positive evaluation budget")
    audit: list = []
    budget = _Budget(evaluator, limit, audit, [0])
    found: dict = {}
    attempts = 0
    misses = 0
    while budget.used < limit:
        attempts += 1
        mask = sample_mask(spec, cfg.bernoulli_p, rng)
        f = arch_flops(spec, mask)
        if f > cfg.flops_max or mask in budget.cache:
            misses += 1
            if misses > cfg.max_attempts:
                break
            continue
        misses = 0
        acc = budget(mask, f)
        if acc > cfg.acc_min:
            found[mask] = Individual(mask, acc, f)
    evaluated = list(found.values())
    front = pareto_set(evaluated)
    return SearchResult(evaluated, equispaced_picks(front, cfg.pick_count), audit, budget.used, front)
