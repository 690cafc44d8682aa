"""Time-stamped boundary-signal histories with sliding-window retention."""
from __future__ import annotations

import csv

import numpy as np


class WindowError(LookupError):
    """Requested time lies outside the stored window."""

    def __init__(self, label, requested, available):
        self.requested = requested
        self.available = available
        lo, hi = requested
        super().__init__(f"trace {label!r}: requested [{lo:.6g}, {hi:.6g}] "
                         f"outside stored range [{available[0]:.6g}, {available[1]:.6g}]")


class BoundaryTrace:
    """Ring buffer of ``(t, value)`` samples with linear-interpolation lookup.

    Samples older than ``retention`` relative to the newest stamp are dropped.
    Storage is a doubled buffer so the live window is always a contiguous view.

    Parameters
    ----------
    label : str
        Signal name, used in error messages.
    dim : int
        Length of each sample vector.
    retention : float
        Window length kept behind the newest stamp.
    dt : float, optional
        Nominal sampling step; sizes the buffer. Without it the buffer grows.
    """

    def __init__(self, label: str, dim: int, retention: float, dt: float | None = None):
        if retention <= 0:
            raise ValueError("retention must be positive")
        self.label = label
        self.dim = int(dim)
        self.retention = float(retention)
        self.dt = dt
        cap = int(np.ceil(retention / dt)) + 2 if dt else 64
        self._cap = cap
        self._t = np.empty(2 * cap)
        self._v = np.empty((2 * cap, self.dim))
        self._lo = 0
        self._hi = 0

    def __len__(self) -> int:
        return self._hi - self._lo

    @property
    def times(self) -> np.ndarray:
        return self._t[self._lo:self._hi]

    @property
    def values(self) -> np.ndarray:
        return self._v[self._lo:self._hi]

    @property
    def span(self) -> tuple[float, float]:
        if not len(self):
            return (np.nan, np.nan)
        return (float(self._t[self._lo]), float(self._t[self._hi - 1]))

    def record(self, t: float, value) -> None:
        value = np.asarray(value, dtype=float).reshape(self.dim)
        if len(self) and t <= self._t[self._hi - 1]:
            raise ValueError(f"trace {self.label!r}: non-increasing stamp {t} after {self._t[self._hi - 1]}")
        if self._hi == len(self._t):
            self._compact(grow=self.dt is None)
        self._t[self._hi] = t
        self._v[self._hi] = value
        self._hi += 1
        # drop samples that are no longer needed to interpolate at t - retention
        cutoff = t - self.retention
        while self._hi - self._lo > 2 and self._t[self._lo + 1] <= cutoff:
            self._lo += 1

    def _compact(self, grow: bool) -> None:
        n = len(self)
        if grow and n > self._cap // 2:
            self._cap *= 2
            t_new = np.empty(2 * self._cap)
            v_new = np.empty((2 * self._cap, self.dim))
        else:
            t_new, v_new = self._t, self._v
        t_new[:n] = self._t[self._lo:self._hi]
        v_new[:n] = self._v[self._lo:self._hi]
        self._t, self._v = t_new, v_new
        self._lo, self._hi = 0, n

    def _check(self, lo: float, hi: float) -> None:
        t0, t1 = self.span
        eps = 1e-9 * max(1.0, abs(t1)) if len(self) else 0.0
        if not len(self) or lo < t0 - eps or hi > t1 + eps:
            raise WindowError(self.label, (lo, hi), (t0, t1))

    def sample(self, t) -> np.ndarray:
        """Value(s) at time(s) ``t``; exact at stamps, linear in between."""
        tq = np.asarray(t, dtype=float)
        self._check(float(tq.min()), float(tq.max()))
        ts, vs = self.times, self.values
        if len(ts) == 1:
            return np.broadcast_to(vs[0], tq.shape + (self.dim,)).copy()
        idx = np.clip(np.searchsorted(ts, tq, side="right") - 1, 0, len(ts) - 2)
        w = np.clip((tq - ts[idx]) / (ts[idx + 1] - ts[idx]), 0.0, 1.0)[..., None]
        return (1.0 - w) * vs[idx] + w * vs[idx + 1]

    def window_norm(self, t: float, r: float) -> float:
        """Trapezoid value of the integral of ``phi^T phi`` over the window of length ``|r|``.

        Positive ``r`` integrates over ``[t - r, t]``; negative ``r`` over ``[t, t - r]``.
        """
        lo, hi = (t - r, t) if r >= 0 else (t, t - r)
        if lo == hi:
            return 0.0
        self._check(lo, hi)
        ts = self.times
        inner = ts[(ts > lo) & (ts < hi)]
        grid = np.concatenate([[lo], inner, [hi]])
        vals = self.sample(grid)
        return float(np.trapezoid(np.sum(vals * vals, axis=-1), grid))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"{self.label}[{k}]" for k in range(self.dim)])
            for t, v in zip(self.times, self.values):
                w.writerow([repr(float(t))] + [repr(float(x)) for x in v])
