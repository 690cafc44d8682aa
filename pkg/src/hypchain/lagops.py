"""Linear operators on lagged samples of uniformly sampled signals.

A :class:`LagOp` maps named signal histories to an output vector::

    out(t) = sum_name sum_l W_name[..., l, :, :] @ s_name(t - (k0_name + l) dt)

Leading dimensions of ``W`` form a batch (for instance one entry per grid
node). Negative ``k0`` reads future samples. Lags are integers; fractional
delays are split linearly between neighbouring samples, which is the same as
reading the signal with linear interpolation.
"""
from __future__ import annotations

import numpy as np


def lag_quadrature(sigma: float, dt: float):
    """Trapezoid rule for ``int_0^sigma g(s) phi(t - s) ds`` on the sample grid.

    Returns ``(lags, weights, s_eval)``: the integral equals
    ``sum weights[q] * g(s_eval[q]) * phi(t - lags[q] dt)``. A fractional
    final interval uses the interpolated endpoint sample.
    """
    if sigma <= 0:
        return np.zeros(0, dtype=int), np.zeros(0), np.zeros(0)
    steps = sigma / dt
    L = int(np.floor(steps + 1e-9))
    r = steps - L
    if r < 1e-9:
        r = 0.0
    lags, wts, sev = [], [], []
    if L >= 1:
        w = np.full(L + 1, dt)
        w[0] = w[-1] = 0.5 * dt
        lags.extend(range(L + 1))
        wts.extend(w)
        sev.extend(np.arange(L + 1) * dt)
    if r > 0:
        half = 0.5 * r * dt
        lags += [L, L, L + 1]
        wts += [half, half * (1.0 - r), half * r]
        sev += [L * dt, sigma, sigma]
    return np.asarray(lags, dtype=int), np.asarray(wts), np.asarray(sev)


def split_lag(lag_steps: float) -> tuple[int, float]:
    """Integer floor and fractional weight of a real lag (tolerant to round-off)."""
    lo = int(np.floor(lag_steps + 1e-9))
    frac = lag_steps - lo
    if abs(frac) < 1e-9:
        frac = 0.0
    return lo, frac


class LagOp:
    """Sum of lag-weighted signal terms; see the module docstring."""

    def __init__(self, d_out: int, batch: tuple = (), terms: dict | None = None):
        self.d_out = int(d_out)
        self.batch = tuple(batch)
        self.terms: dict[str, tuple[int, np.ndarray]] = {}
        for name, (k0, W) in (terms or {}).items():
            self._add_term(name, int(k0), np.asarray(W, dtype=float))

    # -- construction ------------------------------------------------------
    def copy(self) -> "LagOp":
        return LagOp(self.d_out, self.batch, {k: (k0, W.copy()) for k, (k0, W) in self.terms.items()})

    def _add_term(self, name: str, k0: int, W: np.ndarray) -> None:
        nb = len(self.batch)
        if W.shape[:nb] != self.batch or W.shape[nb + 1] != self.d_out:
            raise ValueError(f"term {name!r} with shape {W.shape} does not fit batch {self.batch}, d_out {self.d_out}")
        if W.shape[nb] == 0:
            return
        if name not in self.terms:
            self.terms[name] = (k0, W.copy())
            return
        k1, V = self.terms[name]
        if V.shape[-1] != W.shape[-1]:
            raise ValueError(f"signal {name!r} used with two widths")
        lo = min(k0, k1)
        hi = max(k0 + W.shape[nb], k1 + V.shape[nb])
        out = np.zeros(self.batch + (hi - lo,) + V.shape[nb + 1:])
        idx = (slice(None),) * nb
        out[idx + (slice(k1 - lo, k1 - lo + V.shape[nb]),)] += V
        out[idx + (slice(k0 - lo, k0 - lo + W.shape[nb]),)] += W
        self.terms[name] = (lo, out)

    def add_point(self, name: str, M, lag_steps: float) -> "LagOp":
        """Add ``M @ s(t - lag_steps dt)`` (``M`` has shape ``batch + (d_out, d_in)``)."""
        M = np.asarray(M, dtype=float)
        M = np.broadcast_to(M, self.batch + M.shape[-2:])
        lo, frac = split_lag(lag_steps)
        if frac == 0.0:
            W = M[..., None, :, :]
        else:
            W = np.stack([(1.0 - frac) * M, frac * M], axis=len(self.batch))
        self._add_term(name, lo, W)
        return self

    def add_weights(self, name: str, k0: int, W) -> "LagOp":
        self._add_term(name, int(k0), np.asarray(W, dtype=float))
        return self

    @classmethod
    def point(cls, name: str, M, lag_steps: float = 0.0) -> "LagOp":
        M = np.atleast_2d(np.asarray(M, dtype=float))
        return cls(M.shape[0]).add_point(name, M, lag_steps)

    # -- algebra -----------------------------------------------------------
    def __add__(self, other: "LagOp") -> "LagOp":
        if other.d_out != self.d_out or other.batch != self.batch:
            raise ValueError("incompatible operators")
        out = self.copy()
        for name, (k0, W) in other.terms.items():
            out._add_term(name, k0, W)
        return out

    def __neg__(self) -> "LagOp":
        return self.scaled(-1.0)

    def __sub__(self, other: "LagOp") -> "LagOp":
        return self + (-other)

    def scaled(self, c: float) -> "LagOp":
        return LagOp(self.d_out, self.batch, {k: (k0, c * W) for k, (k0, W) in self.terms.items()})

    def left(self, M) -> "LagOp":
        """Left-multiply every weight by ``M`` (``(d_new, d_out)`` or batched)."""
        M = np.asarray(M, dtype=float)
        nb = len(self.batch)
        out = LagOp(M.shape[-2], self.batch)
        for name, (k0, W) in self.terms.items():
            if M.ndim == 2:
                V = np.einsum("no,...loi->...lni", M, W)
            else:
                V = np.einsum("...no,...loi->...lni", M, W)
            out._add_term(name, k0, V)
        return out

    def shift(self, lag_steps: float) -> "LagOp":
        """Delay the whole operator by a real number of steps (negative advances)."""
        lo, frac = split_lag(lag_steps)
        out = LagOp(self.d_out, self.batch)
        nb = len(self.batch)
        for name, (k0, W) in self.terms.items():
            if frac == 0.0:
                out._add_term(name, k0 + lo, W)
            else:
                pad = [(0, 0)] * W.ndim
                pad[nb] = (0, 1)
                Wp = np.pad(W, pad)
                Wq = np.roll(Wp, 1, axis=nb)
                out._add_term(name, k0 + lo, (1.0 - frac) * Wp + frac * Wq)
        return out

    def substitute(self, name: str, op: "LagOp") -> "LagOp":
        """Replace signal ``name`` by the unbatched operator ``op``."""
        if name not in self.terms:
            return self.copy()
        if op.batch:
            raise ValueError("substituted operator must be unbatched")
        nb = len(self.batch)
        k0a, Wa = self.terms[name]
        out = LagOp(self.d_out, self.batch, {k: v for k, v in self.terms.items() if k != name})
        La = Wa.shape[nb]
        for sname, (k0b, Wb) in op.terms.items():
            Lb = Wb.shape[0]
            C = np.zeros(self.batch + (La + Lb - 1, self.d_out, Wb.shape[-1]))
            if La <= Lb:
                for a in range(La):
                    C[..., a:a + Lb, :, :] += np.einsum("...oi,lij->...loj", Wa[..., a, :, :], Wb)
            else:
                for b in range(Lb):
                    C[..., b:b + La, :, :] += np.einsum("...loi,ij->...loj", Wa, Wb[b])
            out._add_term(sname, k0a + k0b, C)
        return out

    def contract(self, M) -> "LagOp":
        """Sum over the batch: ``sum_b M[b] @ op[b]`` with ``M`` of shape ``batch + (d_new, d_out)``."""
        M = np.asarray(M, dtype=float)
        nb = len(self.batch)
        letters = "bcdefg"[:nb]
        out = LagOp(M.shape[-2])
        for name, (k0, W) in self.terms.items():
            V = np.einsum(f"{letters}no,{letters}loi->lni", M, W)
            out._add_term(name, k0, V)
        return out

    def mix(self, M) -> "LagOp":
        """Recombine a single batch axis: ``out[i'] = sum_j M[i', :, j, :] @ op[j]``.

        ``M`` has shape ``(B_out, d_new, B_in, d_out)``.
        """
        M = np.asarray(M, dtype=float)
        if len(self.batch) != 1 or M.shape[2] != self.batch[0] or M.shape[3] != self.d_out:
            raise ValueError("mix needs one batch axis matching M")
        out = LagOp(M.shape[1], (M.shape[0],))
        for name, (k0, W) in self.terms.items():
            B, L, _, d_in = W.shape
            V = M.reshape(-1, B * self.d_out) @ W.transpose(0, 2, 1, 3).reshape(B * self.d_out, L * d_in)
            out._add_term(name, k0, V.reshape(M.shape[0], M.shape[1], L, d_in).transpose(0, 2, 1, 3))
        return out

    def rows(self, sl) -> "LagOp":
        """Keep the output components selected by ``sl``."""
        idx = np.arange(self.d_out)[sl]
        out = LagOp(idx.size, self.batch)
        for name, (k0, W) in self.terms.items():
            out._add_term(name, k0, W[..., idx, :])
        return out

    def take(self, idx) -> "LagOp":
        """Select one batch element (first batch axis)."""
        out = LagOp(self.d_out, self.batch[1:])
        for name, (k0, W) in self.terms.items():
            out._add_term(name, k0, W[idx])
        return out

    def stack_out(self, other: "LagOp") -> "LagOp":
        """Concatenate outputs (``self`` on top of ``other``)."""
        if other.batch != self.batch:
            raise ValueError("batch mismatch")
        nb = len(self.batch)
        out = LagOp(self.d_out + other.d_out, self.batch)
        for op, off in ((self, 0), (other, self.d_out)):
            for name, (k0, W) in op.terms.items():
                pad = [(0, 0)] * W.ndim
                pad[nb + 1] = (off, self.d_out + other.d_out - off - op.d_out)
                out._add_term(name, k0, np.pad(W, pad))
        return out

    def trimmed(self, tol: float = 0.0) -> "LagOp":
        """Drop leading and trailing lags whose weights are all within ``tol`` of zero."""
        nb = len(self.batch)
        out = LagOp(self.d_out, self.batch)
        for name, (k0, W) in self.terms.items():
            mag = np.abs(W).max(axis=tuple(a for a in range(W.ndim) if a != nb)) if W.size else np.zeros(0)
            nz = np.nonzero(mag > tol)[0]
            if nz.size == 0:
                continue
            out._add_term(name, k0 + nz[0], W[(slice(None),) * nb + (slice(nz[0], nz[-1] + 1),)])
        return out

    # -- inspection ----------------------------------------------------------
    def span(self, name: str | None = None) -> tuple[int, int]:
        """Smallest and largest lag (in steps) read by the operator."""
        names = [name] if name else list(self.terms)
        lo, hi = None, None
        for nm in names:
            if nm not in self.terms:
                continue
            k0, W = self.terms[nm]
            L = W.shape[len(self.batch)]
            lo = k0 if lo is None else min(lo, k0)
            hi = k0 + L - 1 if hi is None else max(hi, k0 + L - 1)
        return (0, 0) if lo is None else (lo, hi)

    def lag0(self, name: str) -> np.ndarray:
        """Weight applied to the current sample of ``name`` (zero if none)."""
        if name not in self.terms:
            return None
        k0, W = self.terms[name]
        nb = len(self.batch)
        if k0 <= 0 < k0 + W.shape[nb]:
            return W[(slice(None),) * nb + (-k0,)]
        return np.zeros(self.batch + W.shape[nb + 1:])

    def without_lag0(self, name: str) -> "LagOp":
        out = self.copy()
        if name in out.terms:
            k0, W = out.terms[name]
            nb = len(self.batch)
            if k0 <= 0 < k0 + W.shape[nb]:
                W = W.copy()
                W[(slice(None),) * nb + (-k0,)] = 0.0
                out.terms[name] = (k0, W)
        return out

    def apply(self, hist: dict, index) -> np.ndarray:
        """Evaluate at sample ``index`` of histories ``hist[name]`` (arrays ``(T, d_in)``)."""
        out = np.zeros(self.batch + (self.d_out,))
        nb = len(self.batch)
        for name, (k0, W) in self.terms.items():
            H = hist[name]
            L = W.shape[nb]
            lo = index - k0 - L + 1
            hi = index - k0 + 1
            if lo < 0 or hi > H.shape[0]:
                raise IndexError(f"signal {name!r}: samples [{lo}, {hi}) outside history of length {H.shape[0]}")
            seg = H[lo:hi][::-1]
            out += np.einsum("...loi,li->...o", W, seg)
        return out
