"""Evolutionary minimisation of a critical flip set, plus iterative pruning.

Solutions are tuples of flat weight indices drawn from the initial subset.
Fitness is signed loss-per-flip and is maximised: candidates below the loss
threshold get negative fitness, so any qualifying set beats every
non-qualifying one.

Randomness comes from counter-based streams keyed by ``(seed, generation,
slot)``; fitness evaluation may run on a thread pool without affecting
results.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ._parallel import pmap
from .flipset import FlipSet
from .sensitivity import bflip_loss
from .toymodel import Dataset, ToyModel

Solution = tuple[int, ...]


@dataclass(frozen=True)
class GaConfig:
    loss_threshold: float
    population_m: int = 100
    max_generations_g: int = 150
    mutation_rate_mu: float = 0.1
    crossover_prob_pc: float = 0.9
    no_improve_N: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.population_m < 1 or self.max_generations_g < 1 or self.no_improve_N < 1:
            raise ValueError("population size, generations and no-improvement limit must be positive")
        if not 0.0 < self.mutation_rate_mu <= 1.0:
            raise ValueError("mutation rate must lie in (0, 1]")
        if not 0.0 <= self.crossover_prob_pc <= 1.0:
            raise ValueError("crossover probability must lie in [0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass(frozen=True)
class GenerationStats:
    generation: int
    best_fitness: float
    best_loss: float
    best_cardinality: int


@dataclass(frozen=True)
class GaResult:
    flipset: FlipSet
    loss: float
    fitness: float
    success: bool
    history: tuple[GenerationStats, ...]
    evaluations: int

    def history_csv(self) -> str:
        return history_to_csv(self.history)


def history_to_csv(history: Sequence[GenerationStats]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["generation", "best_fitness", "best_loss", "best_cardinality"])
    for h in history:
        writer.writerow([h.generation, repr(h.best_fitness), repr(h.best_loss), h.best_cardinality])
    return buf.getvalue()


def write_history_csv(history: Sequence[GenerationStats], path: str | Path) -> None:
    Path(path).write_text(history_to_csv(history), encoding="utf-8")


def stream(seed: int, generation: int, slot: int) -> np.random.Generator:
    """Independent RNG for one (generation, slot) pair."""
    return np.random.default_rng([seed, generation, slot])


def fitness(loss: float, l_th: float, cardinality: int) -> float:
    """sgn(loss - l_th) * loss / cardinality, with sgn(0) = +1."""
    if cardinality < 1:
        raise ValueError("fitness of an empty flip set is undefined")
    sign = 1.0 if loss - l_th >= 0 else -1.0
    return sign * loss / cardinality


def mutate(sol: Sequence[int], mu: float, rng: np.random.Generator) -> Solution:
    """Remove each index with one shared probability drawn from (0, mu].

    Never returns an empty solution: if everything was removed a single
    uniformly chosen survivor is kept.
    """
    if not sol:
        raise ValueError("cannot mutate an empty solution")
    p = mu * (1.0 - rng.random())
    keep = rng.random(len(sol)) >= p
    out = tuple(i for i, k in zip(sol, keep) if k)
    if not out:
        out = (sol[int(rng.integers(len(sol)))],)
    return out


def tournament_select(pop: Sequence[Solution], fitnesses: Sequence[float], rng: np.random.Generator) -> Solution:
    """Fitter of two distinct, uniformly drawn members; the first drawn wins ties."""
    if len(pop) < 2:
        raise ValueError("tournament selection needs at least two solutions")
    a, b = rng.choice(len(pop), size=2, replace=False)
    return pop[a] if fitnesses[a] >= fitnesses[b] else pop[b]


def crossover(parent: Sequence[int], best: Sequence[int], pc: float, rng: np.random.Generator) -> Solution:
    """Gene-wise mix of ``parent`` with the current best.

    Genes are aligned by position; each aligned gene comes from either source
    with probability 1/2 and each surplus gene of the longer list survives with
    probability 1/2. Duplicates keep their first occurrence.
    """
    parent = tuple(parent)
    if rng.random() >= pc:
        return parent
    n = min(len(parent), len(best))
    from_parent = rng.random(n) < 0.5
    genes = [p if take else b for p, b, take in zip(parent, best, from_parent)]
    longer = parent if len(parent) > len(best) else tuple(best)
    surplus = longer[n:]
    genes.extend(g for g, keep in zip(surplus, rng.random(len(surplus)) < 0.5) if keep)
    out = tuple(dict.fromkeys(genes))
    return out or parent


class _Evaluator:
    """Memoised flip-set loss keyed by the sorted index tuple."""

    def __init__(self, m: ToyModel, d: Dataset, layer: str, pos: int, threads: int | None):
        self.m, self.d, self.layer, self.pos, self.threads = m, d, layer, pos, threads
        self.cache: dict[tuple[int, ...], float] = {}

    def loss(self, sol: Sequence[int]) -> float:
        key = tuple(sorted(sol))
        if key not in self.cache:
            self.cache[key] = bflip_loss(self.m, FlipSet(self.layer, key, self.pos), self.d)
        return self.cache[key]

    def prime(self, sols: Sequence[Sequence[int]]) -> None:
        todo = list(dict.fromkeys(tuple(sorted(s)) for s in sols if tuple(sorted(s)) not in self.cache))
        losses = pmap(lambda k: bflip_loss(self.m, FlipSet(self.layer, k, self.pos), self.d), todo, self.threads)
        self.cache.update(zip(todo, losses))


def optimize(m: ToyModel, d: Dataset, w_sub: FlipSet, cfg: GaConfig, threads: int | None = 1,
             on_generation: Callable[[GenerationStats], None] | None = None) -> GaResult:
    """Shrink ``w_sub`` to a small flip set that still reaches the loss threshold."""
    space = tuple(w_sub.indices)
    if not space:
        raise ValueError("initial weight subset is empty")
    m.layer(w_sub.layer)
    ev = _Evaluator(m, d, w_sub.layer, w_sub.pos, threads)
    th, mu, pc = cfg.loss_threshold, cfg.mutation_rate_mu, cfg.crossover_prob_pc

    population: list[Solution] = [space]
    population += [mutate(space, mu, stream(cfg.seed, 0, j)) for j in range(1, cfg.population_m)]

    best: Solution = space
    best_fit = -math.inf
    stale = 0
    history: list[GenerationStats] = []
    for t in range(1, cfg.max_generations_g + 1):
        ev.prime(population)
        fits = [fitness(ev.loss(s), th, len(s)) for s in population]
        # stable: among equal fitness the earlier slot (the elite) wins
        leader = max(range(len(population)), key=lambda j: (fits[j], -j))
        if fits[leader] > best_fit:
            best, best_fit, stale = population[leader], fits[leader], 0
        else:
            stale += 1
        stats = GenerationStats(t, best_fit, ev.loss(best), len(best))
        history.append(stats)
        if on_generation is not None:
            on_generation(stats)
        if t == cfg.max_generations_g or stale >= cfg.no_improve_N:
            break

        nxt: list[Solution] = [best, mutate(best, mu, stream(cfg.seed, t, 0))]
        slot = 1
        while len(nxt) < cfg.population_m:
            rng = stream(cfg.seed, t, slot)
            slot += 1
            p1 = tournament_select(population, fits, rng)
            p2 = tournament_select(population, fits, rng)
            o1 = mutate(crossover(p1, best, pc, rng), mu, rng)
            o2 = mutate(crossover(p2, best, pc, rng), mu, rng)
            nxt += [o1, o2]
        population = nxt[: cfg.population_m]

    loss = ev.loss(best)
    return GaResult(
        flipset=w_sub.with_indices(sorted(best)),
        loss=loss,
        fitness=best_fit,
        success=best_fit >= 0,
        history=tuple(history),
        evaluations=len(ev.cache),
    )


# ---------------------------------------------------------------- pruning

DEFAULT_PRUNE_EPS_FRACTION = 0.01
DEFAULT_PRUNE_ITERS = 500
DEFAULT_PRUNE_NO_IMPROVE = 50


@dataclass(frozen=True)
class PruneResult:
    flipset: FlipSet
    reference_loss: float
    loss: float
    epsilon: float
    iterations: int
    # indices tried and rejected since the last accepted removal
    terminal_rejections: tuple[int, ...]


def prune_run(m: ToyModel, d: Dataset, best: FlipSet, epsilon: float | None = None,
              max_iters_T: int = DEFAULT_PRUNE_ITERS, no_improve_N: int = DEFAULT_PRUNE_NO_IMPROVE,
              rng: np.random.Generator | None = None) -> PruneResult:
    """Randomly drop indices whose removal moves the loss by less than ``epsilon``.

    The comparison is always against the loss of the *initial* set, so the
    final loss stays within ``epsilon`` of where it started. ``epsilon``
    defaults to 1% of that reference loss.
    """
    if not best.indices:
        raise ValueError("cannot prune an empty flip set")
    rng = rng if rng is not None else np.random.default_rng(0)
    ref = bflip_loss(m, best, d)
    eps = DEFAULT_PRUNE_EPS_FRACTION * abs(ref) if epsilon is None else float(epsilon)
    if not eps > 0:
        raise ValueError("epsilon must be positive")
    cur = list(best.indices)
    cur_loss = ref
    stale = 0
    rejected: list[int] = []
    it = 0
    while it < max_iters_T and stale < no_improve_N and len(cur) > 1:
        it += 1
        victim = cur[int(rng.integers(len(cur)))]
        cand = [i for i in cur if i != victim]
        loss = bflip_loss(m, best.with_indices(cand), d)
        if abs(ref - loss) < eps:
            cur, cur_loss, stale = cand, loss, 0
            rejected.clear()
        else:
            stale += 1
            rejected.append(victim)
    return PruneResult(best.with_indices(cur), ref, cur_loss, eps, it, tuple(dict.fromkeys(rejected)))


def prune(m: ToyModel, d: Dataset, best: FlipSet, epsilon: float | None = None,
          max_iters_T: int = DEFAULT_PRUNE_ITERS, no_improve_N: int = DEFAULT_PRUNE_NO_IMPROVE,
          rng: np.random.Generator | None = None) -> FlipSet:
    return prune_run(m, d, best, epsilon, max_iters_T, no_improve_N, rng).flipset
