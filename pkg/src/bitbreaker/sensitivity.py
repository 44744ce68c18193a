"""Hybrid sensitivity scoring, top-k selection and per-layer bit-flip ranking."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from ._parallel import pmap
from .flipset import FlipSet
from .qtensor import QuantFormat, default_flip_position
from .toymodel import Dataset, ToyModel, forward_loss, gradients

DEFAULT_ALPHA = 0.5
DEFAULT_RANK_RATE = 0.1


@dataclass(frozen=True)
class SensitivityConfig:
    alpha: float = DEFAULT_ALPHA
    sampling_rate_r: float = DEFAULT_RANK_RATE
    flip_pos: Mapping[QuantFormat, int] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.sampling_rate_r > 0:
            raise ValueError(f"sampling rate must be positive, got {self.sampling_rate_r}")
        for fmt, pos in self.flip_pos.items():
            if not 0 <= pos < fmt.width:
                raise ValueError(f"flip position {pos} invalid for {fmt.value}")

    def pos_for(self, fmt: QuantFormat) -> int:
        return self.flip_pos.get(fmt, default_flip_position(fmt))


@dataclass(frozen=True)
class ProfileEntry:
    layer: str
    loss: float
    k: int


@dataclass(frozen=True)
class SensitivityProfile:
    entries: tuple[ProfileEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def layers(self) -> list[str]:
        return [e.layer for e in self.entries]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer_name", "k", "loss"])
        for e in self.entries:
            writer.writerow([e.layer, e.k, repr(e.loss)])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def normalize(v: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant input maps to all zeros."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("normalize requires finite input")
    if v.size == 0:
        return v.copy()
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def sscore(w_abs: np.ndarray, g_abs: np.ndarray, alpha: float) -> np.ndarray:
    w_abs = np.asarray(w_abs, dtype=np.float64)
    g_abs = np.asarray(g_abs, dtype=np.float64)
    if w_abs.shape != g_abs.shape:
        raise ValueError(f"weight/gradient shape mismatch: {w_abs.shape} vs {g_abs.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return normalize(w_abs)
    if alpha == 1.0:
        return normalize(g_abs)
    return alpha * normalize(g_abs) + (1.0 - alpha) * normalize(w_abs)


def top_k_count(n_params: int, r_percent: float) -> int:
    """k = floor(n * r / 100), clamped to [1, n]."""
    if n_params < 1 or not r_percent > 0:
        raise ValueError("top_k_count needs n_params >= 1 and r > 0")
    return min(n_params, max(1, math.floor(n_params * r_percent / 100)))


def top_k_indices(s: np.ndarray, k: int) -> list[int]:
    """Flat indices of the k largest scores, highest first; ties go to the lower index."""
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    if not 1 <= k <= s.size:
        raise ValueError(f"k={k} out of range for {s.size} scores")
    order = np.lexsort((np.arange(s.size), -s))
    return [int(i) for i in order[:k]]


def layer_scores(m: ToyModel, layer: str, grads: Mapping[str, np.ndarray] | None, alpha: float) -> np.ndarray:
    """Flat sensitivity scores of one layer. ``grads`` may be None only when alpha == 0."""
    w = np.abs(m.layer(layer).weights.dense()).reshape(-1)
    if alpha == 0.0:
        g = np.zeros_like(w)
    else:
        if grads is None:
            raise ValueError("gradients are required when alpha > 0")
        g = np.abs(grads[layer]).reshape(-1)
    return sscore(w, g, alpha)


def model_gradients(m: ToyModel, d: Dataset, alpha: float) -> dict[str, np.ndarray] | None:
    """Gradients when the score needs them; gradient-free (alpha == 0) runs never compute any."""
    return None if alpha == 0.0 else gradients(m, d)


def bflip_loss(m: ToyModel, fs: FlipSet, d: Dataset) -> float:
    return forward_loss(m, d, fs)


def rank_layers(m: ToyModel, d: Dataset, cfg: SensitivityConfig = SensitivityConfig(),
                threads: int | None = 1) -> SensitivityProfile:
    """Flip the top-r% scored weights of each layer in turn and sort layers by resulting loss."""
    grads = model_gradients(m, d, cfg.alpha)

    def probe(layer_name: str) -> ProfileEntry:
        layer = m.layer(layer_name)
        k = top_k_count(layer.weights.size, cfg.sampling_rate_r)
        idx = top_k_indices(layer_scores(m, layer_name, grads, cfg.alpha), k)
        fs = FlipSet(layer_name, tuple(idx), cfg.pos_for(layer.weights.format))
        return ProfileEntry(layer_name, bflip_loss(m, fs, d), k)

    entries = pmap(probe, m.layer_names, threads)
    order = sorted(range(len(entries)), key=lambda i: (-entries[i].loss, i))
    return SensitivityProfile(tuple(entries[i] for i in order))
