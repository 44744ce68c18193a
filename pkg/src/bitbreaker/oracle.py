"""Brute-force reference searches used to check the heuristics on small instances."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from ._parallel import pmap
from .flipset import FlipSet
from .sensitivity import bflip_loss, top_k_indices
from .toymodel import Dataset, ToyModel

DEFAULT_GUARD = 10**7


class GuardExceeded(RuntimeError):
    """The requested enumeration is too large."""


@dataclass(frozen=True)
class OracleResult:
    min_cardinality: int | None
    witness: FlipSet | None
    subsets_examined: int
    witness_loss: float | None = None

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "min_cardinality": self.min_cardinality,
            "witness": None if self.witness is None else self.witness.to_dict(),
            "witness_loss": self.witness_loss,
            "subsets_examined": self.subsets_examined,
        }


def enumeration_size(n: int, max_size: int) -> int:
    return sum(math.comb(n, s) for s in range(1, min(max_size, n) + 1))


def exhaustive_min_flipset(m: ToyModel, d: Dataset, space: FlipSet, l_th: float, max_size: int,
                           guard: int = DEFAULT_GUARD, threads: int | None = 1) -> OracleResult:
    """Smallest subset of ``space`` (up to ``max_size``) whose flip loss reaches ``l_th``.

    Every subset of a size level is evaluated before moving to the next, so
    ``subsets_examined`` counts whole levels. The witness is the
    lexicographically least qualifying index tuple of the minimal size.
    """
    if max_size < 1:
        raise ValueError("max_size must be >= 1")
    idx = sorted(space.indices)
    total = enumeration_size(len(idx), max_size)
    if total > guard:
        raise GuardExceeded(f"{total} subsets of a {len(idx)}-element space exceed the guard of {guard}")
    examined = 0
    for size in range(1, min(max_size, len(idx)) + 1):
        combos = list(itertools.combinations(idx, size))
        losses = pmap(lambda c: bflip_loss(m, space.with_indices(c), d), combos, threads)
        examined += len(combos)
        for combo, loss in zip(combos, losses):
            if loss >= l_th:
                return OracleResult(size, space.with_indices(combo), examined, loss)
    return OracleResult(None, None, examined)


def verify_topk(s: np.ndarray, k: int) -> bool:
    """Compare top_k_indices against a plain full sort with the same tie rule."""
    flat = [float(v) for v in np.asarray(s, dtype=np.float64).reshape(-1)]
    expected = sorted(range(len(flat)), key=lambda i: (-flat[i], i))[:k]
    return top_k_indices(np.asarray(flat), k) == expected
