"""Per-group prior precisions assembling a positive diagonal matrix."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TYING_MODES = ("single", "per-group")


@dataclass(frozen=True)
class PrecisionSpec:
    """Map group name -> precision; in ``single`` mode every group shares one value."""

    names: tuple
    values: tuple
    tying: str = "per-group"

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if self.tying not in TYING_MODES:
            raise ValueError(f"tying must be one of {TYING_MODES}, got {self.tying!r}")
        if len(self.names) != len(self.values):
            raise ValueError("one precision per group is required")
        if any(not (v > 0 and np.isfinite(v)) for v in self.values):
            raise ValueError("precisions must be positive and finite")
        if self.tying == "single" and len(set(self.values)) > 1:
            raise ValueError("single tying requires one shared value")

    @classmethod
    def isotropic(cls, groups, lam, tying="single"):
        return cls(tuple(g.name for g in groups), (lam,) * len(groups), tying)

    def as_dict(self):
        return dict(zip(self.names, self.values))

    def __getitem__(self, name):
        return self.as_dict()[name]

    def diagonal(self, groups):
        lookup = self.as_dict()
        parts = [np.full(g.length, lookup[g.name]) for g in groups]
        return np.concatenate(parts) if parts else np.zeros(0)

    def blocks(self, groups):
        """Index arrays of the independently optimised blocks."""
        if self.tying == "single":
            idx = [g.indices for g in groups]
            return [np.concatenate(idx) if idx else np.zeros(0, dtype=np.int64)]
        return [g.indices for g in groups]

    def block_values(self):
        return np.array(self.values[:1] if self.tying == "single" else self.values)

    def with_block_values(self, vals):
        vals = np.asarray(vals, dtype=np.float64).ravel()
        if self.tying == "single":
            return PrecisionSpec(self.names, (float(vals[0]),) * len(self.names), "single")
        return PrecisionSpec(self.names, tuple(vals), "per-group")
