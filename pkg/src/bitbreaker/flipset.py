"""The attack vector: a set of weight indices in one layer and the bit to flip."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

FLIPSET_VERSION = 1


@dataclass(frozen=True)
class FlipSet:
    layer: str
    indices: tuple[int, ...]
    pos: int

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if len(set(idx)) != len(idx):
            raise ValueError(f"duplicate indices in flip set for layer {self.layer!r}")
        if any(i < 0 for i in idx):
            raise ValueError("flip indices must be non-negative")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "pos", int(self.pos))

    def __len__(self) -> int:
        return len(self.indices)

    def with_indices(self, indices: Iterable[int]) -> "FlipSet":
        return FlipSet(self.layer, tuple(indices), self.pos)

    def key(self) -> tuple[int, ...]:
        """Order-independent identity of the index set."""
        return tuple(sorted(self.indices))

    def to_dict(self) -> dict:
        return {"version": FLIPSET_VERSION, "layer": self.layer, "pos": self.pos, "indices": list(self.indices)}

    @classmethod
    def from_dict(cls, data: dict) -> "FlipSet":
        if not isinstance(data, dict):
            raise ValueError("flip set document must be a JSON object")
        if data.get("version") != FLIPSET_VERSION:
            raise ValueError(f"unsupported flip set version {data.get('version')!r}")
        for key, kind in (("layer", str), ("pos", int), ("indices", list)):
            if not isinstance(data.get(key), kind):
                raise ValueError(f"flip set field {key!r} missing or not {kind.__name__}")
        return cls(data["layer"], tuple(data["indices"]), data["pos"])


def save_flipset(fs: FlipSet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(fs.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_flipset(path: str | Path) -> FlipSet:
    return FlipSet.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
