"""Smallest top-k weight subset that pushes the loss past a threshold."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from ._parallel import pmap
from .flipset import FlipSet
from .qtensor import QuantFormat, default_flip_position
from .sensitivity import (
    DEFAULT_ALPHA,
    SensitivityProfile,
    bflip_loss,
    layer_scores,
    model_gradients,
    top_k_count,
    top_k_indices,
)
from .toymodel import Dataset, ToyModel

DEFAULT_TOP_N = 1
DEFAULT_THRESHOLD_MULTIPLIER = 4.0


def default_rates() -> list[float]:
    """Log sweep of sampling rates in percent."""
    return [0.0001, 0.001, 0.01, 0.1, 1.0, 10.0]


@dataclass(frozen=True)
class SubsetConfig:
    loss_threshold: float
    rates_R: Sequence[float] = field(default_factory=default_rates)
    top_n_layers: int = DEFAULT_TOP_N
    alpha: float = DEFAULT_ALPHA
    flip_pos: Mapping[QuantFormat, int] = field(default_factory=dict)

    def __post_init__(self):
        rates = tuple(float(r) for r in self.rates_R)
        if not rates:
            raise ValueError("sampling-rate sweep is empty")
        if any(r <= 0 for r in rates) or any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError("sampling rates must be positive and strictly ascending")
        if self.top_n_layers < 1:
            raise ValueError("top_n_layers must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        object.__setattr__(self, "rates_R", rates)

    def pos_for(self, fmt: QuantFormat) -> int:
        return self.flip_pos.get(fmt, default_flip_position(fmt))


@dataclass(frozen=True)
class SweepPoint:
    layer: str
    r: float
    k: int
    loss: float
    qualified: bool
    rank: int


@dataclass(frozen=True)
class SubsetRecord:
    layer: str
    loss: float
    k: int
    r: float


@dataclass(frozen=True)
class SubsetSelection:
    flipset: FlipSet
    winner: SubsetRecord
    records: tuple[SubsetRecord, ...]
    sweep: tuple[SweepPoint, ...]

    def sweep_csv(self) -> str:
        return sweep_to_csv(self.sweep)


class ThresholdNotReached(RuntimeError):
    """No layer/rate combination reached the loss threshold."""

    def __init__(self, threshold: float, max_losses: dict[str, float], sweep: tuple[SweepPoint, ...]):
        self.threshold = threshold
        self.max_losses = max_losses
        self.sweep = sweep
        detail = ", ".join(f"{name}: {loss:.6g}" for name, loss in max_losses.items())
        super().__init__(f"loss threshold {threshold:.6g} not reached; max loss per layer: {detail}")


def sweep_to_csv(sweep: Sequence[SweepPoint]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "r", "k", "loss", "qualified"])
    for p in sweep:
        writer.writerow([p.layer, repr(p.r), p.k, repr(p.loss), str(p.qualified).lower()])
    return buf.getvalue()


def write_sweep_csv(sweep: Sequence[SweepPoint], path: str | Path) -> None:
    Path(path).write_text(sweep_to_csv(sweep), encoding="utf-8")


def select_subset(m: ToyModel, d: Dataset, profile: SensitivityProfile, cfg: SubsetConfig,
                  threads: int | None = 1) -> SubsetSelection:
    """Sweep rates over the top-n ranked layers; return the smallest qualifying top-k set.

    Within a layer rates are visited in ascending order and the sweep stops at
    the first rate whose flip loss reaches the threshold. Among qualifying
    layers the smallest k wins, then the higher loss, then the better rank.

    Raises :class:`ThresholdNotReached` if no layer qualifies.
    """
    if len(profile) == 0:
        raise ValueError("sensitivity profile is empty")
    top = profile.layers[: cfg.top_n_layers]
    grads = model_gradients(m, d, cfg.alpha)

    def sweep_layer(item):
        rank, name = item
        layer = m.layer(name)
        scores = layer_scores(m, name, grads, cfg.alpha)
        pos = cfg.pos_for(layer.weights.format)
        points = []
        for r in cfg.rates_R:
            k = top_k_count(layer.weights.size, r)
            fs = FlipSet(name, tuple(top_k_indices(scores, k)), pos)
            loss = bflip_loss(m, fs, d)
            hit = loss >= cfg.loss_threshold
            points.append(SweepPoint(name, r, k, loss, hit, rank))
            if hit:
                break
        return points

    per_layer = pmap(sweep_layer, list(enumerate(top)), threads)
    sweep = tuple(p for pts in per_layer for p in pts)
    hits = [pts[-1] for pts in per_layer if pts[-1].qualified]
    if not hits:
        max_losses = {pts[0].layer: max(p.loss for p in pts) for pts in per_layer}
        raise ThresholdNotReached(cfg.loss_threshold, max_losses, sweep)

    hits.sort(key=lambda p: (p.k, -p.loss, p.rank))
    best = hits[0]
    scores = layer_scores(m, best.layer, grads, cfg.alpha)
    fs = FlipSet(best.layer, tuple(top_k_indices(scores, best.k)), cfg.pos_for(m.layer(best.layer).weights.format))
    records = tuple(SubsetRecord(p.layer, p.loss, p.k, p.r) for p in hits)
    return SubsetSelection(fs, records[0], records, sweep)
