"""Task duration models.

Durations are integer time units. A model is evaluated once per task at
instantiation (and by the simulator for the same task), so every consumer
of a graph sees identical numbers for a given seed.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Any

__all__ = ["DurationModel", "constant", "table", "uniform", "skewed"]

_KINDS = ("constant", "table", "random", "skewed")


@dataclass(frozen=True)
class DurationModel:
    """One of ``constant``, ``table``, ``random`` or ``skewed``.

    ``table`` indexes ``values`` by the task's flat row-major index in its
    launch grid. ``random`` draws an integer in ``[lo, hi]`` from a stream
    keyed by ``(seed, call index, flat index)``. ``skewed`` evaluates
    ``base`` and multiplies by ``factor`` when the task belongs to
    ``hot_group`` (the expert a GroupGEMM tile serves).
    """

    kind: str = "constant"
    value: int = 1
    values: tuple[int, ...] = ()
    lo: int = 0
    hi: int = 0
    base: "DurationModel | None" = None
    hot_group: int = 0
    factor: int = 1

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown duration model kind {self.kind!r}")
        if self.kind == "constant" and self.value < 0:
            raise ValueError("durations must be >= 0")
        if self.kind == "table" and any(v < 0 for v in self.values):
            raise ValueError("durations must be >= 0")
        if self.kind == "random" and not (0 <= self.lo <= self.hi):
            raise ValueError(f"random durations need 0 <= lo <= hi, got [{self.lo}, {self.hi}]")
        if self.kind == "skewed":
            if self.base is None:
                raise ValueError("skewed model needs a base model")
            if self.factor < 0:
                raise ValueError("skew factor must be >= 0")

    def sample(self, seed: int, call: int, flat: int, group: int | None = None) -> int:
        if self.kind == "constant":
            return self.value
        if self.kind == "table":
            if flat >= len(self.values):
                raise ValueError(f"duration table has {len(self.values)} entries, task index {flat}")
            return self.values[flat]
        if self.kind == "random":
            # str seeds hash through sha512: stable across processes
            return random.Random(f"{seed}:{call}:{flat}").randint(self.lo, self.hi)
        d = self.base.sample(seed, call, flat, group)
        return d * self.factor if group == self.hot_group else d

    def to_dict(self) -> dict[str, Any]:
        if self.kind == "constant":
            return {"kind": "constant", "value": self.value}
        if self.kind == "table":
            return {"kind": "table", "values": list(self.values)}
        if self.kind == "random":
            return {"kind": "random", "lo": self.lo, "hi": self.hi}
        return {
            "kind": "skewed",
            "base": self.base.to_dict(),
            "hot_group": self.hot_group,
            "factor": self.factor,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any] | int) -> "DurationModel":
        if isinstance(d, int):
            return constant(d)
        kind = d.get("kind", "constant")
        if kind == "constant":
            return constant(d["value"])
        if kind == "table":
            return table(d["values"])
        if kind == "random":
            return uniform(d["lo"], d["hi"])
        if kind == "skewed":
            return skewed(cls.from_dict(d["base"]), d["hot_group"], d["factor"])
        raise ValueError(f"unknown duration model kind {kind!r}")


def constant(value: int) -> DurationModel:
    return DurationModel("constant", value=int(value))


def table(values) -> DurationModel:
    return DurationModel("table", values=tuple(int(v) for v in values))


def uniform(lo: int, hi: int) -> DurationModel:
    return DurationModel("random", lo=int(lo), hi=int(hi))


def skewed(base: DurationModel, hot_group: int, factor: int) -> DurationModel:
    return DurationModel("skewed", base=base, hot_group=int(hot_group), factor=int(factor))
