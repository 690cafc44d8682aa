"""Discrete backstepping transformation and the boundary-signal operators it induces.

For subsystem ``j`` the transformed state ``(alpha, beta)`` is determined by
boundary signals only:

* ``a0 = alpha_j(t, 0)`` and ``a1 = alpha_j(t, 1)``,
* ``v0 = v_j(t, 0)`` and ``vn = v_{j+1}(t, 0)`` (absent for the last subsystem).

All operators are :class:`~hypchain.lagops.LagOp` objects on the simulation
time grid, so the predictors and the observer can evaluate them on recorded or
predicted histories. The spatial quadrature matches the kernel mesh, which
must equal the simulation mesh.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .chain_model import ConfigurationError
from .kernels import FKernel, KernelSet
from .lagops import LagOp, lag_quadrature, split_lag


@njit(cache=True)
def _char_rows(G, lam, h, dt, Lmax, right):
    """Lag weights of ``alpha^k(t, x_i)`` in terms of one boundary trace of ``alpha``.

    ``right=False`` integrates back to ``x = 0`` (weights on past ``a0``);
    ``right=True`` integrates forward to ``x = 1`` (weights on future ``a1``).
    Returns ``W[k, i, l, c]``.
    """
    ng = G.shape[0]
    n = G.shape[1]
    W = np.zeros((n, ng, Lmax, n))
    sgn = -1.0 if right else 1.0
    for k in range(n - 1, -1, -1):
        lk = lam[k]
        for i in range(ng):
            x = i * h
            d = (1.0 - x) / lk if right else x / lk
            st = d / dt
            lo = int(np.floor(st + 1e-9))
            fr = st - lo
            if fr < 1e-9:
                fr = 0.0
            W[k, i, lo, k] += 1.0 - fr
            if fr > 0.0:
                W[k, i, lo + 1, k] += fr
            if k == n - 1 or d <= 0.0:
                continue
            # trapezoid nodes nu_q = q dt plus the endpoint d
            nq = lo + 1 + (1 if fr > 0.0 else 0)
            for q in range(nq):
                nu = q * dt if q <= lo else d
                if q <= lo:
                    left = dt if q > 0 else 0.0
                    rgt = dt if q < lo else fr * dt
                else:
                    left = fr * dt
                    rgt = 0.0
                wq = 0.5 * (left + rgt)
                if wq == 0.0:
                    continue
                y = x - sgn * lk * nu
                if y < 0.0:
                    y = 0.0
                elif y > 1.0:
                    y = 1.0
                fy = y / h
                i0 = int(np.floor(fy))
                if i0 > ng - 2:
                    i0 = ng - 2
                wy = fy - i0
                # G row at y
                sq = nu / dt
                q0 = int(np.floor(sq + 1e-9))
                fq = sq - q0
                if fq < 1e-9:
                    fq = 0.0
                for c in range(k + 1, n):
                    g = (1.0 - wy) * G[i0, k, c] + wy * G[i0 + 1, k, c]
                    coef = sgn * wq * g
                    if coef == 0.0:
                        continue
                    for l in range(Lmax):
                        for e in range(n):
                            val = (1.0 - wy) * W[c, i0, l, e] + wy * W[c, i0 + 1, l, e]
                            if val == 0.0:
                                continue
                            t0 = l + q0
                            if t0 < Lmax:
                                W[k, i, t0, e] += coef * (1.0 - fq) * val
                            if fq > 0.0 and t0 + 1 < Lmax:
                                W[k, i, t0 + 1, e] += coef * fq * val
    return W


def trapezoid_tail_weights(ng: int) -> np.ndarray:
    """``W[i, j]``: trapezoid weight of node ``j`` in the integral over ``[x_i, 1]``."""
    h = 1.0 / (ng - 1)
    W = np.triu(np.full((ng, ng), h))
    idx = np.arange(ng)
    W[idx, idx] = 0.5 * h
    W[:, -1] = 0.5 * h
    W[-1, -1] = 0.0
    W[np.tril_indices(ng, -1)] = 0.0
    return W


def _F_lag_weights(F: FKernel, x: np.ndarray, dt: float) -> tuple[int, np.ndarray]:
    """Weights of ``int_0^{x/lam_1} F(x, y) vn(t - y) dy`` for every ``x``: shape ``(len(x), L, n, m_next)``."""
    lam1 = F.lam[0]
    n, mn = F.shape
    quads = [lag_quadrature(xi / lam1, dt) for xi in x]
    L = max((q[0].max() + 1 if q[0].size else 0) for q in quads)
    W = np.zeros((len(x), max(L, 1), n, mn))
    pts_x, pts_y, owner = [], [], []
    for i, (lags, w, s) in enumerate(quads):
        pts_x.append(np.full(s.size, x[i]))
        pts_y.append(s)
        owner.append(np.full(s.size, i))
    if sum(p.size for p in pts_x):
        px = np.concatenate(pts_x)
        py = np.concatenate(pts_y)
        vals = F(px, py)
        pos = 0
        for i, (lags, w, s) in enumerate(quads):
            seg = vals[pos:pos + s.size] * w[:, None, None]
            np.add.at(W[i], lags, seg)
            pos += s.size
    return W


@dataclass
class SubsystemOperators:
    """Discrete transformation of one subsystem and its boundary-signal operators.

    Attributes
    ----------
    A, Ainv : ndarray
        ``I + K`` on the stacked node vector and its inverse (``(p ng, p ng)``,
        component-major ordering).
    Fop : LagOp or None
        Batched over nodes: the ``F`` term added to ``alpha`` (signal ``vn``).
    Hop : LagOp or None
        Batched over nodes: the ``vn`` term of the inverse transformation.
    Aop, AopR : LagOp
        ``alpha(t, x_i)`` from past ``a0`` and from future ``a1``.
    Bop : LagOp
        ``beta(t, x_i)`` over ``a1`` and ``vn``.
    A1op : LagOp
        ``a1`` from past ``a0``.
    UVop : LagOp
        Batched over nodes: ``(u, v)(t, x_i)`` over ``a0``, ``a1``, ``vn``.
    V0op : LagOp
        ``v0`` over ``a0``, ``a1`` (point delays only) and ``vn``.
    Phi : LagOp
        ``a0 - Q_prev a1_prev`` over ``a0``, ``v0`` and ``vn``; the ``a1_prev``
        signal of the upstream neighbour enters only through ``Q_prev``.
    """

    ks: KernelSet
    dt: float
    A: np.ndarray
    Ainv: np.ndarray
    Fop: LagOp | None
    Hop: LagOp | None
    Aop: LagOp
    AopR: LagOp
    Bop: LagOp
    A1op: LagOp
    U1op: LagOp
    UVop: LagOp
    V0op: LagOp
    V0_point: LagOp
    Phi: LagOp

    @property
    def n(self) -> int:
        return self.ks.n

    @property
    def m(self) -> int:
        return self.ks.m

    @property
    def m_next(self) -> int:
        return self.ks.m_next

    @property
    def ng(self) -> int:
        return self.ks.n_grid

    # -- state-level transforms ----------------------------------------------
    def _stack(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.concatenate([np.asarray(u).reshape(self.n, -1), np.asarray(v).reshape(self.m, -1)]).ravel()

    def _unstack(self, z: np.ndarray):
        z = z.reshape(self.n + self.m, self.ng)
        return z[:self.n].copy(), z[self.n:].copy()

    def _F_term(self, vn_hist: np.ndarray | None) -> np.ndarray:
        """``(n, ng)`` values of the ``F`` integral; ``vn_hist[l] = vn(t - l dt)``."""
        if self.Fop is None:
            return np.zeros((self.n, self.ng))
        if vn_hist is None:
            raise ValueError("a downstream history is required for this subsystem")
        hist = {"vn": np.asarray(vn_hist, dtype=float)[::-1]}
        return self.Fop.apply(hist, hist["vn"].shape[0] - 1).T

    def forward(self, u, v, vn_hist=None):
        """``(alpha, beta)`` node values from ``(u, v)`` and the recent ``vn`` history."""
        ab = self.A @ self._stack(u, v)
        a, b = self._unstack(ab)
        return a + self._F_term(vn_hist), b

    def inverse(self, alpha, beta, vn_hist=None):
        """``(u, v)`` node values from ``(alpha, beta)`` and the recent ``vn`` history."""
        a = np.asarray(alpha, dtype=float) - self._F_term(vn_hist)
        z = self.Ainv @ self._stack(a, beta)
        return self._unstack(z)


def _alpha_ops(ks: KernelSet, dt: float) -> tuple[LagOp, LagOp]:
    n, ng = ks.n, ks.n_grid
    lam = np.asarray(ks.sub.lam, dtype=float)
    Lmax = int(np.ceil(1.0 / (lam[0] * dt))) + 3
    WL = _char_rows(ks.G, lam, ks.h, dt, Lmax, False)
    WR = _char_rows(ks.G, lam, ks.h, dt, Lmax, True)
    # W[k, i, l, c] -> batch (i,), lag l, out k, in c
    Aop = LagOp(n, (ng,)).add_weights("a0", 0, WL.transpose(1, 2, 0, 3)).trimmed()
    WRr = WR.transpose(1, 2, 0, 3)[:, ::-1]
    AopR = LagOp(n, (ng,)).add_weights("a1", -(Lmax - 1), WRr).trimmed()
    return Aop, AopR


def _beta_op(ks: KernelSet, dt: float, with_u1_point: bool = True) -> LagOp:
    """``beta(t, x_i)`` over ``u1 = u(t, 1)`` and ``vn``."""
    n, m, mn, ng = ks.n, ks.m, ks.m_next, ks.n_grid
    mu = np.asarray(ks.sub.mu, dtype=float)
    x = ks.x
    R, Rn = ks.coupling.R_ii, ks.coupling.R_next
    Lmax = int(np.ceil(1.0 / (mu[0] * dt))) + 3
    Wu = np.zeros((ng, Lmax, m, n))
    Wv = np.zeros((ng, Lmax, m, mn))
    for i in range(ng):
        for k in range(m):
            sig = (1.0 - x[i]) / mu[k]
            lo, fr = split_lag(sig / dt)
            if with_u1_point:
                Wu[i, lo, k] += (1.0 - fr) * R[k]
                if fr:
                    Wu[i, lo + 1, k] += fr * R[k]
            if mn:
                Wv[i, lo, k] += (1.0 - fr) * Rn[k]
                if fr:
                    Wv[i, lo + 1, k] += fr * Rn[k]
            lags, w, s = lag_quadrature(sig, dt)
            if lags.size == 0:
                continue
            xs = np.clip(x[i] + mu[k] * s, 0.0, 1.0)
            gb = np.stack([np.interp(xs, x, ks.G_bar[:, k, c]) for c in range(n)], axis=-1)
            np.add.at(Wu[i, :, k], lags, w[:, None] * gb)
            if mn:
                fb = np.stack([np.interp(xs, x, ks.f_bar[:, k, c]) for c in range(mn)], axis=-1)
                np.add.at(Wv[i, :, k], lags, w[:, None] * fb)
    op = LagOp(m, (ng,)).add_weights("u1", 0, Wu)
    if mn:
        op.add_weights("vn", 0, Wv)
    return op.trimmed()


def _u1_op(ks: KernelSet, dt: float) -> LagOp:
    """``u(t, 1) = a1 - int_0^{1/lam_1} F(1, y) vn(t - y) dy``."""
    op = LagOp.point("a1", np.eye(ks.n))
    if ks.F is not None:
        W = _F_lag_weights(ks.F, np.array([1.0]), dt)[0]
        op.add_weights("vn", 0, -W)
    return op


def _prev_F_op(F_prev: FKernel, Q_prev: np.ndarray, dt: float) -> LagOp:
    """``Q_prev int_0^{1/lam_1} F_prev(1, y) v0(t - y) dy``."""
    W = _F_lag_weights(F_prev, np.array([1.0]), dt)[0]
    return LagOp(Q_prev.shape[0]).add_weights("v0", 0, np.einsum("ab,lbc->lac", Q_prev, W))


def build_subsystem_operators(ks: KernelSet, dt: float, F_prev: FKernel | None = None) -> SubsystemOperators:
    """Assemble the discrete transformation and boundary operators of one subsystem."""
    n, m, mn, ng = ks.n, ks.m, ks.m_next, ks.n_grid
    p = n + m
    x = ks.x
    Wt = trapezoid_tail_weights(ng)
    Kw = Wt[:, :, None, None] * ks.K
    A = np.eye(p * ng) + Kw.transpose(2, 0, 3, 1).reshape(p * ng, p * ng)
    Ainv = np.linalg.inv(A)
    Ainv4 = Ainv.reshape(p, ng, p, ng)

    Fop = Hop = None
    if ks.F is not None:
        Fw = _F_lag_weights(ks.F, x, dt)
        Fop = LagOp(n, (ng,)).add_weights("vn", 0, Fw)
        Hw = -np.einsum("ciaj,jlaq->ilcq", Ainv4[:, :, :n, :], Fw)
        Hop = LagOp(p, (ng,)).add_weights("vn", 0, Hw)

    Aop, AopR = _alpha_ops(ks, dt)
    A1op = Aop.take(ng - 1)
    U1op = _u1_op(ks, dt)
    Bop = _beta_op(ks, dt).substitute("u1", U1op)

    ab = Aop.stack_out(Bop)
    UVop = ab.mix(Ainv4.transpose(1, 0, 3, 2))
    if Hop is not None:
        UVop = UVop + Hop

    # v(t, 0): split off the point delays of a1 so the rest can use A1op
    mu = np.asarray(ks.sub.mu, dtype=float)
    V0_point = LagOp(m)
    for k in range(m):
        M = np.zeros((m, n))
        M[k] = ks.coupling.R_ii[k]
        V0_point.add_point("a1", M, 1.0 / (mu[k] * dt))
    rest = UVop.take(0).rows(slice(n, p)) - V0_point
    V0op = (V0_point + rest.substitute("a1", A1op)).trimmed(1e-300)

    # a0 - Q_prev a1_prev = Q v0 + int K(0, y) (u, v) dy - Q_prev int F_prev(1, y) v0(t - y) dy
    Kint = Aop.take(0) - UVop.take(0).rows(slice(0, n))
    Phi = Kint.substitute("a1", A1op) + LagOp.point("v0", ks.coupling.Q_ii)
    if F_prev is not None:
        Phi = Phi - _prev_F_op(F_prev, ks.coupling.Q_prev, dt)
    Phi = Phi.trimmed(1e-300)
    return SubsystemOperators(ks, dt, A, Ainv, Fop, Hop, Aop, AopR, Bop, A1op, U1op, UVop, V0op, V0_point, Phi)


def build_chain_operators(kernels: list[KernelSet], dt: float, nx: int | None = None) -> list[SubsystemOperators]:
    """Operators for every subsystem; ``nx`` (the simulation mesh) must equal the kernel mesh."""
    out = []
    for j, ks in enumerate(kernels):
        if nx is not None and ks.n_grid != nx:
            raise ConfigurationError(f"kernel mesh {ks.n_grid} differs from simulation mesh {nx}")
        F_prev = kernels[j - 1].F if j > 0 else None
        out.append(build_subsystem_operators(ks, dt, F_prev))
    return out


# --------------------------------------------------------------------------
# reporting helpers

def characteristic_kernels(ops: SubsystemOperators) -> dict[str, np.ndarray]:
    """Kernels of the characteristic representations of ``alpha``.

    ``G_tilde[i, l]`` weighs ``a0(t - l dt)`` in ``alpha(t, x_i)`` and
    ``G_check[i, l]`` weighs ``a1(t + l dt)``; both are divided by ``dt`` and
    exclude the point delay on the own component.
    """
    n, dt = ops.n, ops.dt
    out = {}
    for key, op, name in (("G_tilde", ops.Aop, "a0"), ("G_check", ops.AopR, "a1")):
        k0, W = op.terms[name]
        W = W.copy()
        L = W.shape[1]
        if key == "G_check":
            W = W[:, ::-1]
        for k in range(n):
            W[:, :, k, k] = 0.0
        out[key] = W / dt
    return out


def neutral_kernels(ops: SubsystemOperators) -> dict[str, np.ndarray]:
    """Distributed kernels of the neutral boundary relations, divided by ``dt``.

    ``g1``/``g2`` act on ``a0`` and ``vn`` in ``v0``; ``h1``, ``h2``, ``h3`` act on
    ``a0``, ``v0`` and ``vn`` in ``Phi``. Lag 0 is the first entry.
    """
    def dense(op, name):
        if name not in op.terms:
            return np.zeros((0, op.d_out, 0))
        k0, W = op.terms[name]
        if k0 > 0:
            W = np.concatenate([np.zeros((k0,) + W.shape[1:]), W])
        return W / ops.dt

    v_rest = ops.V0op - ops.V0_point
    Rn = ops.ks.coupling.R_next
    mu = np.asarray(ops.ks.sub.mu)
    if Rn.size:
        for k in range(ops.m):
            M = np.zeros_like(Rn)
            M[k] = Rn[k]
            v_rest = v_rest - LagOp(ops.m).add_point("vn", M, 1.0 / (mu[k] * ops.dt))
    phi_rest = ops.Phi - LagOp.point("v0", ops.ks.coupling.Q_ii)
    return {"g1": dense(v_rest, "a0"), "g2": dense(v_rest, "vn"),
            "h1": dense(phi_rest, "a0"), "h2": dense(phi_rest, "v0"), "h3": dense(phi_rest, "vn")}
