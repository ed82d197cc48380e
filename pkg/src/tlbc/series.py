"""Sampled simulation output shared by the circuit and scenario runners."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

COLUMNS = ("t_s", "v_in", "v_ref", "duty", "i_l", "v_c1", "v_c2", "v_o",
           "kp_active", "ki_active")


@dataclass
class TimeSeries:
    """Column store with a uniform time grid.

    Open-loop runs leave ``v_ref``, ``kp_active`` and ``ki_active`` as NaN.
    ``diverged_at`` is set when a run stopped early on a non-finite state.
    """

    t_s: np.ndarray
    v_in: np.ndarray
    v_ref: np.ndarray
    duty: np.ndarray
    i_l: np.ndarray
    v_c1: np.ndarray
    v_c2: np.ndarray
    v_o: np.ndarray
    kp_active: np.ndarray
    ki_active: np.ndarray
    diverged_at: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.t_s)
        for name in COLUMNS:
            col = np.asarray(getattr(self, name), dtype=float)
            if col.shape != (n,):
                raise ValueError(f"column {name} has shape {col.shape}, expected ({n},)")
            setattr(self, name, col)
        if n > 1 and not np.all(np.diff(self.t_s) > 0):
            raise ValueError("time column must be strictly increasing")

    def __len__(self):
        return len(self.t_s)

    @property
    def sample_time(self) -> float:
        return float(self.t_s[1] - self.t_s[0]) if len(self) > 1 else float("nan")

    def column(self, name: str) -> np.ndarray:
        if name not in COLUMNS:
            raise KeyError(name)
        return getattr(self, name)

    def window(self, t_start: float, t_stop: float) -> TimeSeries:
        """Rows with ``t_start <= t < t_stop``."""
        mask = (self.t_s >= t_start) & (self.t_s < t_stop)
        return TimeSeries(**{c: getattr(self, c)[mask] for c in COLUMNS},
                          meta=dict(self.meta))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(COLUMNS)
            data = np.column_stack([getattr(self, c) for c in COLUMNS])
            for row in data:
                writer.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path: str | Path) -> TimeSeries:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != COLUMNS:
                raise ValueError(f"unexpected header {header!r}")
            rows = [[float(v) for v in row] for row in reader]
        data = np.array(rows, dtype=float).reshape(-1, len(COLUMNS))
        return cls(**{c: data[:, i] for i, c in enumerate(COLUMNS)})
