"""Error statistics and per-stage timing."""

from __future__ import annotations

import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike


def nearest_rank(values: ArrayLike, percent: float) -> float:
    """Nearest-rank percentile: the smallest value with at least ``percent``% of the data at or below it."""
    data = np.sort(np.asarray(values, dtype=float).ravel())
    if data.size == 0:
        raise ValueError("no values")
    if not 0 < percent <= 100:
        raise ValueError("percent must be in (0, 100]")
    rank = max(1, math.ceil(percent / 100.0 * data.size))
    return float(data[rank - 1])


@dataclass
class MetricsReport:
    """Named error series plus per-stage runtimes (seconds)."""

    errors: dict[str, list[float]] = field(default_factory=dict)
    runtimes: dict[str, list[float]] = field(default_factory=dict)

    def add_error(self, name: str, value: float) -> None:
        if value < 0 or not math.isfinite(value):
            raise ValueError(f"error {name} must be finite and nonnegative, got {value}")
        self.errors.setdefault(name, []).append(float(value))

    def add_runtime(self, stage: str, seconds: float) -> None:
        self.runtimes.setdefault(stage, []).append(float(seconds))

    @contextmanager
    def timed(self, stage: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.add_runtime(stage, time.perf_counter() - start)

    def summary(self, with_runtimes: bool = True) -> dict:
        out = {
            "errors": {
                name: {"count": len(v), "p50": nearest_rank(v, 50), "p90": nearest_rank(v, 90)}
                for name, v in sorted(self.errors.items())
                if v
            }
        }
        if with_runtimes:
            out["runtimes_s"] = {
                stage: {
                    "count": len(v),
                    "median": float(np.median(v)),
                    "min": float(np.min(v)),
                    "max": float(np.max(v)),
                }
                for stage, v in sorted(self.runtimes.items())
                if v
            }
        return out
