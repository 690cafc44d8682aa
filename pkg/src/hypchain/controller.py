"""Predictor-based backstepping controller for the chain.

The controller works on the boundary signals of the transformed state,
recorded on the time grid for every subsystem ``j``:
``a0_j = alpha_j(t, 0)``, ``a1_j = alpha_j(t, 1)`` and ``v0_j = v_j(t, 0)``.

For ``i = N .. 1`` it predicts these signals over the horizon
``Delta_i = D + sum_{r<i} 1/lambda_r^1`` (``D`` is the input delay seen by the
controller), computes the tracking input ``Uhat_i^tr`` that makes
``alpha_i(., 1)`` follow the reference ``zeta_i`` and subtracts the predicted
boundary feedback. The reference of subsystem ``i`` is the virtual input of
subsystem ``i + 1`` mapped through a right inverse of its coupling matrix.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numba import njit

from .chain_model import AssumptionError, ChainSpec, ConfigurationError, right_inverse
from .history import BoundaryTrace, WindowError
from .lagops import LagOp
from .simulator import ChainState
from .transforms import SubsystemOperators

log = logging.getLogger(__name__)


class StartupError(WindowError):
    """Controller or observer evaluated before its histories are populated."""

    def __init__(self, what: str, t: float, t_valid: float):
        self.t_valid = t_valid
        LookupError.__init__(self, f"{what} needs history up to t={t:.6g}; valid from t={t_valid:.6g}")


# --------------------------------------------------------------------------
# layout of the recorded signal vector

@dataclass(frozen=True)
class SignalLayout:
    """Column offsets of ``[a0_j, a1_j, v0_j]`` for ``j = 1 .. N`` in one row vector."""

    n: tuple
    m: tuple

    @property
    def N(self) -> int:
        return len(self.n)

    def off(self, j: int) -> int:
        return int(sum(2 * self.n[r] + self.m[r] for r in range(j)))

    def a0(self, j: int) -> slice:
        o = self.off(j)
        return slice(o, o + self.n[j])

    def a1(self, j: int) -> slice:
        o = self.off(j) + self.n[j]
        return slice(o, o + self.n[j])

    def v0(self, j: int) -> slice:
        o = self.off(j) + 2 * self.n[j]
        return slice(o, o + self.m[j])

    @property
    def width(self) -> int:
        return self.off(self.N)

    @classmethod
    def for_chain(cls, spec: ChainSpec) -> "SignalLayout":
        return cls(tuple(s.n for s in spec.subsystems), tuple(s.m for s in spec.subsystems))


class SignalRecord:
    """Growable table of signal rows indexed by time step."""

    def __init__(self, width: int, capacity: int = 1024):
        self.width = width
        self.Z = np.full((capacity, width), np.nan)
        self.count = 0

    def ensure(self, k: int) -> None:
        if k >= self.Z.shape[0]:
            cap = max(2 * self.Z.shape[0], k + 1)
            Z = np.full((cap, self.width), np.nan)
            Z[:self.Z.shape[0]] = self.Z
            self.Z = Z
        self.count = max(self.count, k + 1)

    def row(self, k: int) -> np.ndarray:
        self.ensure(k)
        return self.Z[k]


# --------------------------------------------------------------------------
# predictor recursion

@njit(cache=True)
def _predict(Z, r0, S, Wd, Lm, P, P_last, bvec, lo, hi):
    """Fill rows ``r0 .. r0+S-1`` of ``Z`` from the ``Lm`` rows before each one."""
    for q in range(S):
        r = r0 + q
        rv = Wd @ Z[r - Lm:r].reshape(-1)
        if q == S - 1:
            rv[lo:hi] = 0.0
            rv += bvec[q]
            Z[r] = P_last @ rv
        else:
            rv += bvec[q]
            Z[r] = P @ rv


@dataclass
class _Block:
    row: int
    col: int
    k0: int
    W: np.ndarray  # (L, dr, dc)


def _op_blocks(op: LagOp, row: int, cols: dict) -> list[_Block]:
    out = []
    for name, (k0, W) in op.terms.items():
        if name not in cols:
            raise ConfigurationError(f"operator reads unknown signal {name!r}")
        if cols[name] is None:
            continue
        out.append(_Block(row, cols[name], int(k0), W))
    return out


def chain_blocks(ops: list[SubsystemOperators], lay: SignalLayout) -> list[_Block]:
    """Every recurrence of the recorded signals as lag blocks on the full row layout."""
    blocks = []
    N = lay.N
    for j, o in enumerate(ops):
        vn = lay.v0(j + 1).start if j + 1 < N else None
        cols = {"a0": lay.a0(j).start, "a1": lay.a1(j).start, "v0": lay.v0(j).start, "vn": vn}
        blocks += _op_blocks(o.A1op, lay.a1(j).start, cols)
        blocks += _op_blocks(o.V0op, lay.v0(j).start, cols)
        blocks += _op_blocks(o.Phi, lay.a0(j).start, cols)
        if j > 0:
            blocks.append(_Block(lay.a0(j).start, lay.a1(j - 1).start, 0,
                                 o.ks.coupling.Q_prev[None].astype(float)))
    return blocks


class PredictorLevel:
    """Prediction of the signals of subsystems ``i .. N`` with the upstream term of ``i`` replaced.

    Within the level, ``a0_i = Uhat_i(s - Delta_i) + Phi_i`` on the predicted
    segment except at its final point, where ``a0_i`` is imposed.
    """

    def __init__(self, i: int, ops: list[SubsystemOperators], lay: SignalLayout, blocks: list[_Block]):
        self.i = i
        self.lay = lay
        c0 = lay.off(i)
        self.c0 = c0
        D = lay.width - c0
        self.D = D
        a0 = lay.a0(i)
        self.a0_lo, self.a0_hi = a0.start - c0, a0.stop - c0
        M0 = np.zeros((D, D))
        keep = []
        self.max_lag = 0
        for b in blocks:
            if b.row < c0 or b.col < c0:
                continue
            L, dr, dc = b.W.shape
            if b.k0 < 0:
                raise ConfigurationError("recurrence reads future samples")
            W = b.W
            k0 = b.k0
            if k0 == 0:
                M0[b.row - c0:b.row - c0 + dr, b.col - c0:b.col - c0 + dc] += W[0]
                W = W[1:]
                k0 = 1
            if W.shape[0] == 0 or not np.any(W):
                continue
            keep.append(_Block(b.row - c0, b.col - c0, k0, np.ascontiguousarray(W)))
            self.max_lag = max(self.max_lag, k0 + W.shape[0] - 1)
        I = np.eye(D)
        self.P = np.linalg.inv(I - M0)
        M0l = M0.copy()
        M0l[self.a0_lo:self.a0_hi] = 0.0
        self.P_last = np.linalg.inv(I - M0l)
        # dense weights on the flattened window of the max_lag previous rows
        Lm = self.max_lag
        Wd = np.zeros((D, Lm * D))
        for b in keep:
            L, dr, dc = b.W.shape
            for l in range(L):
                w = Lm - (b.k0 + l)
                Wd[b.row:b.row + dr, w * D + b.col:w * D + b.col + dc] += b.W[l]
        self.Wd = Wd
        o = ops[i]
        self.phi = o.Phi
        self.phi_cols = {"a0": a0.start - c0, "v0": lay.v0(i).start - c0,
                         "vn": lay.v0(i + 1).start - c0 if i + 1 < lay.N else None}

    def lookback(self, delta_steps: float) -> float:
        """Oldest step offset (relative to the current step) read by :meth:`predict`."""
        S = int(np.ceil(delta_steps - 1e-9)) if delta_steps > 1e-9 else 0
        return self.max_lag + S - delta_steps

    def predict(self, rec: SignalRecord, k: int, delta_steps: float, uhat: np.ndarray, imposed: np.ndarray):
        """Signals of subsystems ``>= i`` on ``t + Delta - r dt`` and ``Phi_i(t + Delta)``.

        ``uhat[q]`` is the virtual input of subsystem ``i`` at ``t - (S - 1 - q) dt``.
        Returns ``(Z, phi)`` with ``Z`` ordered oldest first.
        """
        S = int(np.ceil(delta_steps - 1e-9)) if delta_steps > 1e-9 else 0
        R = S + self.max_lag + 1
        pos = k + delta_steps - (R - 1 - np.arange(R - S))
        if pos[0] < -1e-9:
            raise StartupError("predictor", k, 0.0)
        pos = np.maximum(pos, 0.0)
        lo = np.minimum(np.floor(pos + 1e-9).astype(int), k)
        w = np.clip(pos - lo, 0.0, 1.0)
        hi = np.minimum(lo + 1, k)
        Zr = rec.Z[:, self.c0:]
        Z = np.empty((R, self.D))
        Z[:R - S] = (1.0 - w)[:, None] * Zr[lo] + w[:, None] * Zr[hi]
        if S:
            bvec = np.zeros((S, self.D))
            bvec[:, self.a0_lo:self.a0_hi] = uhat
            bvec[S - 1, self.a0_lo:self.a0_hi] = imposed
            _predict(Z, R - S, S, self.Wd, self.max_lag, self.P, self.P_last, bvec, self.a0_lo, self.a0_hi)
        else:
            Z[R - 1, self.a0_lo:self.a0_hi] = imposed
        hist = {name: Z[:, c:c + (self.lay.n[self.i] if name == "a0" else self._width(name))]
                for name, c in self.phi_cols.items() if c is not None}
        phi = self.phi.apply(hist, R - 1)
        return Z, phi

    def _width(self, name: str) -> int:
        if name == "v0":
            return self.lay.m[self.i]
        return self.lay.m[self.i + 1]


# --------------------------------------------------------------------------
# controller core

def cumulative_delays(spec: ChainSpec) -> np.ndarray:
    """``sum_{r<i} 1/lambda_r^1`` for ``i = 1 .. N``."""
    inv = np.asarray(spec.inv_lam1, dtype=float)
    return np.concatenate([[0.0], np.cumsum(inv)[:-1]])


def record_lookback(ops: list[SubsystemOperators], spec: ChainSpec, dt: float, delay: float = 0.0) -> float:
    """History length the controller reads behind the current time."""
    lay = SignalLayout.for_chain(spec)
    blocks = chain_blocks(ops, lay)
    cum = cumulative_delays(spec)
    need = 0.0
    for i in range(spec.N):
        lev = PredictorLevel(i, ops, lay, blocks)
        need = max(need, lev.lookback((delay + cum[i]) / dt) * dt)
    return need


class ChainController:
    """Backstepping law on recorded transformed boundary signals.

    Parameters
    ----------
    spec : ChainSpec
        Nominal chain.
    ops : list of SubsystemOperators
        Operators built on the control time step.
    dt : float
        Control (and recording) time step.
    delay : float
        Delay ``D`` between the emitted input and its arrival at ``u_1(t, 0)``
        as seen from the records.
    t_act : float
        Activation time; the output is zero before it.
    """

    def __init__(self, spec: ChainSpec, ops: list[SubsystemOperators], dt: float, delay: float, t_act: float,
                 ramp: float = 0.0):
        self.spec = spec
        self.ramp = float(ramp)
        self.ops = ops
        self.dt = float(dt)
        self.delay = float(delay)
        self.t_act = float(t_act)
        self.lay = SignalLayout.for_chain(spec)
        self.N = spec.N
        blocks = chain_blocks(ops, self.lay)
        self.levels = [PredictorLevel(i, ops, self.lay, blocks) for i in range(self.N)]
        self.delta = self.delay + cumulative_delays(spec)
        self.inv_lam1 = np.asarray(spec.inv_lam1, dtype=float)
        self.rinv = []
        for j in range(self.N):
            if j + 1 < self.N:
                self.rinv.append(right_inverse(spec.couplings[j + 1].Q_prev))
            else:
                self.rinv.append(None)
        self.rec = SignalRecord(self.lay.width)
        n = self.lay.n
        self.Uhat = [SignalRecord(n[j]) for j in range(self.N)]
        self.Utr = [SignalRecord(n[j]) for j in range(self.N)]
        self.k_act = int(np.ceil(self.t_act / self.dt - 1e-9))
        self.t_valid = record_lookback(ops, spec, dt, delay)
        if self.t_act < self.t_valid - 1e-9:
            raise ConfigurationError(f"activation time {self.t_act:.4g} precedes the controller validity time "
                                     f"{self.t_valid:.4g}")
        self._AR0 = [o.AopR.take(0) for o in ops]

    # -- helpers ---------------------------------------------------------------
    def blend(self, k: int) -> float:
        """Activation weight: 0 before ``t_act``, a raised-cosine ramp over ``ramp`` seconds, then 1."""
        if k < self.k_act:
            return 0.0
        if self.ramp <= 0.0:
            return 1.0
        r = min((k - self.k_act) * self.dt / self.ramp, 1.0)
        return 0.5 * (1.0 - np.cos(np.pi * r))

    def _tracking(self, i: int, k: int) -> np.ndarray:
        """``Uhat_i^tr(t)`` from the reference ``zeta_i``."""
        if i == self.N - 1:
            return np.zeros(self.lay.n[i])
        k0, W = self._AR0[i].terms["a1"]
        L = W.shape[0]
        # zeta_i(t + Delta_i - (k0 + l) dt) = Q^+ Uhat_{i+1}(t - 1/lambda_i^1 - (k0 + l) dt)
        tq = k * self.dt - self.inv_lam1[i] - (k0 + np.arange(L)) * self.dt
        pos = np.clip(tq / self.dt, 0.0, k)
        lo = np.minimum(np.floor(pos + 1e-9).astype(int), k)
        w = np.clip(pos - lo, 0.0, 1.0)[:, None]
        hi = np.minimum(lo + 1, k)
        U = self.Uhat[i + 1].Z
        vals = (1.0 - w) * U[lo] + w * U[hi]
        zeta = vals @ self.rinv[i].T
        return np.einsum("loi,li->o", W, zeta)

    def _uhat_window(self, i: int, k: int, S: int) -> np.ndarray:
        idx = k - (S - 1 - np.arange(S))
        out = np.zeros((S, self.lay.n[i]))
        ok = idx >= 0
        out[ok] = self.Uhat[i].Z[idx[ok]]
        return out

    # -- main entry --------------------------------------------------------------
    def plan(self, k: int, stop_at: int = 0):
        """Compute ``Uhat_i(t)`` for ``i = N-1 .. stop_at`` (zero-based) at step ``k``.

        Records of step ``k`` must be complete for subsystems ``>= 1`` (and for
        subsystem 0 when ``delay > 0``). Returns ``Uhat_tr`` of the last level.
        """
        for rec in self.Uhat + self.Utr:
            rec.row(k)[:] = 0.0
        if k < self.k_act:
            return np.zeros(self.lay.n[stop_at])
        utr = None
        for i in range(self.N - 1, stop_at - 1, -1):
            utr = self._tracking(i, k)
            self.Utr[i].row(k)[:] = utr
            if i == 0 and self.delay == 0.0:
                break
            lev = self.levels[i]
            steps = self.delta[i] / self.dt
            S = int(np.ceil(steps - 1e-9)) if steps > 1e-9 else 0
            _, phi = lev.predict(self.rec, k, steps, self._uhat_window(i, k, S), utr)
            self.Uhat[i].row(k)[:] = self.blend(k) * (utr - phi)
        return utr

    def traces(self, retention: float | None = None) -> dict[str, BoundaryTrace]:
        """Stored ``Uhat_i`` and ``Uhat_i^tr`` as :class:`BoundaryTrace` objects (1-based labels)."""
        out = {}
        K = self.rec.count
        retention = retention or max(K * self.dt, self.dt)
        for j in range(self.N):
            for name, recs in (("Uhat", self.Uhat), ("Uhat_tr", self.Utr)):
                tr = BoundaryTrace(f"{name}_{j + 1}", self.lay.n[j], retention, self.dt)
                for kk in range(min(recs[j].count, K)):
                    tr.record(kk * self.dt, recs[j].Z[kk])
                out[tr.label] = tr
        return out


def default_activation_time(spec: ChainSpec, ops: list[SubsystemOperators], dt: float, delay: float = 0.0,
                            margin: float = 1.0) -> float:
    """Earliest activation with populated histories, plus ``margin``, on the time grid."""
    t = record_lookback(ops, spec, dt, delay) + margin
    return float(np.ceil(t / dt - 1e-9) * dt)


def conservative_activation_time(spec: ChainSpec) -> float:
    """``sum_j 2 tau_j + max_i sum_{r<i} 1/lambda_r^1``."""
    return float(2.0 * np.sum(spec.taus) + np.max(cumulative_delays(spec)))


# --------------------------------------------------------------------------
# state feedback

class StateFeedback:
    """Full-state controller usable as ``simulate(..., controller=StateFeedback(...))``.

    Parameters
    ----------
    spec : ChainSpec
        Nominal chain (the plant may differ).
    ops : list of SubsystemOperators
        Operators on the simulation step.
    dt : float
        Simulation step.
    t_act : float, optional
        Activation time; defaults to :func:`default_activation_time`.
    input_delay : float
        Actuation delay of the plant, compensated by the predictors.
    output_filter : callable, optional
        Applied to every emitted sample (for instance a low-pass filter).
    ramp : float
        Length of the raised-cosine activation ramp in seconds; 0 switches on at once.
    """

    def __init__(self, spec: ChainSpec, ops: list[SubsystemOperators], dt: float, t_act: float | None = None,
                 input_delay: float = 0.0, output_filter=None, ramp: float = 1.0):
        if t_act is None:
            t_act = default_activation_time(spec, ops, dt, input_delay)
        self.core = ChainController(spec, ops, dt, input_delay, t_act, ramp)
        self.spec = spec
        self.ops = ops
        self.dt = dt
        self.input_delay = float(input_delay)
        self.filter = output_filter
        lay = self.core.lay
        self.lay = lay
        self.U = SignalRecord(spec.subsystems[0].n)
        ng = ops[0].ng
        self._rows = []
        for o in ops:
            r0 = [c * o.ng for c in range(o.n)]
            r1 = [c * o.ng + o.ng - 1 for c in range(o.n)]
            F1 = o.U1op.terms.get("vn")
            self._rows.append((o.A[r0], o.A[r1], F1))
        o = ops[0]
        u0cols = [c * ng for c in range(o.n)]
        self._u0cols = np.array(u0cols)
        self._other = np.setdiff1d(np.arange(o.A.shape[1]), self._u0cols)
        self._Mu0 = o.A[np.ix_(u0cols, u0cols)]

    @property
    def t_act(self) -> float:
        return self.core.t_act

    def _k(self, t: float) -> int:
        return int(round(t / self.dt))

    def _a1_F(self, j: int, k: int) -> np.ndarray:
        F1 = self._rows[j][2]
        if F1 is None:
            return 0.0
        k0, W = F1
        L = W.shape[0]
        idx = np.clip(k - k0 - np.arange(L), 0, k)
        vn = self.core.rec.Z[idx, self.lay.v0(j + 1)]
        # U1op carries -F; alpha(t, 1) adds +F
        return -np.einsum("loi,li->o", W, vn)

    def _applied(self, k: int) -> np.ndarray:
        if self.input_delay == 0.0:
            return self.U.Z[k]
        pos = k - self.input_delay / self.dt
        if pos < 0:
            return np.zeros(self.U.width)
        lo = int(np.floor(pos + 1e-9))
        w = pos - lo
        hi = min(lo + 1, k - 1)
        return (1 - w) * self.U.Z[lo] + w * self.U.Z[hi]

    def _record(self, k: int, state: ChainState, with_first: bool) -> None:
        row = self.core.rec.row(k)
        lay = self.lay
        for j in range(lay.N):
            row[lay.v0(j)] = state.v[j][:, 0]
        for j, o in enumerate(self.ops):
            z = np.concatenate([state.u[j], state.v[j]]).ravel()
            r0, r1, _ = self._rows[j]
            row[lay.a1(j)] = r1 @ z + self._a1_F(j, k)
            if j > 0 or with_first:
                row[lay.a0(j)] = r0 @ z

    def _filtered(self, k: int, U: np.ndarray) -> np.ndarray:
        U = np.array(U, dtype=float)
        if self.filter is not None:
            U = self.filter(U)
        self.core.Uhat[0].row(k)[:] = U
        return U

    def __call__(self, t: float, state: ChainState):
        k = self._k(t)
        self.U.row(k)
        c = self.spec.couplings[0]
        if self.input_delay > 0.0:
            st = state.copy()
            st.u[0][:, 0] = c.Q_ii @ st.v[0][:, 0] + self._applied(k)
            self._record(k, st, True)
            self.core.plan(k)
            U = self._filtered(k, self.core.Uhat[0].Z[k])
        else:
            self._record(k, state, False)
            utr = self.core.plan(k)
            if k < self.core.k_act:
                U = np.zeros(self.U.width)
            else:
                o = self.ops[0]
                z = np.concatenate([state.u[0], state.v[0]]).ravel()
                rest = o.A[self._u0cols][:, self._other] @ z[self._other]
                u0 = np.linalg.solve(self._Mu0, utr - rest)
                U = self.core.blend(k) * (u0 - c.Q_ii @ state.v[0][:, 0])
            U = self._filtered(k, U)
            st = state.copy()
            st.u[0][:, 0] = c.Q_ii @ st.v[0][:, 0] + U
            z = np.concatenate([st.u[0], st.v[0]]).ravel()
            self.core.rec.Z[k, self.lay.a0(0)] = self._rows[0][0] @ z
        self.U.Z[k] = U
        return U
