"""Backstepping kernels of one subsystem.

The Volterra kernel ``K`` lives on ``{0 <= x <= y <= 1}`` and solves::

    Lam K_x + K_y Lam = -K Sigma(y) + diag(G, 0) K
    Lam K(x, x) - K(x, x) Lam = Sigma(x) - diag(G, 0)
    K_uu(x, 1) Lam+ = K_uv(x, 1) Lam- R_ii

with ``Lam = diag(lam, -mu)`` and ``G`` strictly upper triangular. The
remaining free data of ``K_vv`` (``x = 0`` for ``k < l``, ``y = 1`` for
``l <= k``) is zero. Every entry is integrated along its own characteristic
back to its data boundary, and the coupled system is solved by Picard
iteration on those ray integrals.

The time-affine kernel ``F`` lives on ``{0 <= y <= x/lam_1}`` and solves::

    Lam+ F_x + F_y = G(x) F
    F(x, 0) = -K_uv(x, 1) Lam- R_next,   F_k(x, x/lam_1) = 0 for k > 1
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._numerics import bilinear_many, ray_integrals
from .chain_model import BoundaryCoupling, ChainSpecError, SubsystemSpec

DEFAULT_TOL = 1e-10
MAX_ITER = 200

# boundary codes for ray feet
TOP, DIAG, LEFT = 0, 1, 2


class KernelDivergenceError(RuntimeError):
    """Fixed-point iteration did not reach the requested tolerance."""

    def __init__(self, iterations: int, update: float):
        self.iterations = iterations
        self.update = update
        super().__init__(f"kernel iteration stalled after {iterations} sweeps (last update {update:.3e})")


def _fill_subdiagonal(f: np.ndarray) -> np.ndarray:
    """Set nodes ``(i+1, i)`` so bilinear interpolation is planar in diagonal cells."""
    ng = f.shape[0]
    i = np.arange(ng - 1)
    f[i + 1, i] = f[i, i] + f[i + 1, i + 1] - f[i, i + 1]
    return f


@dataclass
class _Ray:
    """Characteristic geometry of one kernel entry for every upper-triangle node."""

    d: tuple[float, float]
    sign: float
    s_end: np.ndarray
    kind: np.ndarray
    x_end: np.ndarray


def _entry_direction(a: int, b: int, n: int, speeds: np.ndarray) -> tuple[tuple[float, float], float]:
    """Direction toward the data boundary and its orientation against ``(Lam_a, Lam_b)``."""
    la, lb = speeds[a], speeds[b]
    if a < n and b >= n:           # uv: forward to the diagonal
        sign = 1.0
    elif a >= n and b < n:         # vu: backward to the diagonal
        sign = -1.0
    elif a < n:                    # uu: forward to y = 1 or the diagonal
        sign = 1.0
    else:
        k, l = a - n, b - n
        sign = -1.0 if l <= k else 1.0   # vv: backward to y = 1 / forward to x = 0 or diagonal
    return (sign * la, sign * lb), sign


def _ray_geometry(d, sign, X, Y) -> _Ray:
    dx, dy = d
    inf = np.full(X.shape, np.inf)
    s_top = (1.0 - Y) / dy if dy > 0 else inf
    s_diag = (Y - X) / (dx - dy) if dx > dy else inf
    s_left = X / (-dx) if dx < 0 else inf
    cand = np.stack([np.broadcast_to(s_top, X.shape), np.broadcast_to(s_diag, X.shape),
                     np.broadcast_to(s_left, X.shape)])
    kind = np.argmin(cand, axis=0)
    s_end = np.take_along_axis(cand, kind[None], axis=0)[0]
    if not np.all(np.isfinite(s_end)):
        raise RuntimeError("characteristic without data boundary")
    s_end = np.maximum(s_end, 0.0)
    x_end = np.clip(X + s_end * dx, 0.0, 1.0)
    return _Ray(d, sign, s_end, kind, x_end)


@dataclass
class FKernel:
    """Time-affine kernel on ``{0 <= y <= x/lam_1}`` sampled on a matching grid."""

    lam: np.ndarray
    h: float
    hy: float
    samples: np.ndarray            # (ng, ng, n, m_next), node (i, j) at (i h, j hy), valid for j <= i
    forcing: np.ndarray            # (n, m_next, ng, ng) node values of (G F) for bilinear reads
    data_row: np.ndarray           # (ng, n, m_next) values on y = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.samples.shape[2], self.samples.shape[3]

    def __call__(self, x, y) -> np.ndarray:
        """Evaluate ``F(x, y)`` by integrating along the row characteristics."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        x, y = np.broadcast_arrays(x, y)
        shp = x.shape
        x = x.ravel().copy()
        y = y.ravel().copy()
        n, mn = self.shape
        lam1 = self.lam[0]
        out = np.zeros((x.size, n, mn))
        inside = y <= x / lam1 * (1 + 1e-12) + 1e-15
        xg = np.linspace(0.0, 1.0, self.data_row.shape[0])
        for k in range(n):
            lk = self.lam[k]
            s_foot = y.copy()
            if k > 0:
                s_slant = (x - lam1 * y) / (lk - lam1)
                on_slant = s_slant < s_foot
                s_foot = np.where(on_slant, s_slant, s_foot)
            else:
                on_slant = np.zeros(x.size, dtype=bool)
            s_foot = np.maximum(s_foot, 0.0)
            xf = np.clip(x - lk * s_foot, 0.0, 1.0)
            for l in range(mn):
                base = np.where(on_slant, 0.0, np.interp(xf, xg, self.data_row[:, k, l]))
                if k < n - 1:
                    base = base + ray_integrals(self.forcing[k, l], self.h, self.hy, x, y,
                                                -lk, -1.0, s_foot, 1.0)
                out[:, k, l] = base
        out[~inside] = 0.0
        return out.reshape(shp + (n, mn))


@dataclass
class KernelSet:
    """Kernels of one subsystem on an ``n_grid`` mesh of [0, 1]."""

    sub: SubsystemSpec
    coupling: BoundaryCoupling
    n_grid: int
    K: np.ndarray                  # (ng, ng, p, p), node (i, j) at (x_i, y_j), valid for i <= j
    G: np.ndarray                  # (ng, n, n) strictly upper triangular
    F: FKernel | None
    G_bar: np.ndarray              # (ng, m, n)
    f_bar: np.ndarray              # (ng, m, m_next)
    iterations: int = 0
    last_update: float = 0.0
    extras: dict = field(default_factory=dict)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_grid)

    @property
    def h(self) -> float:
        return 1.0 / (self.n_grid - 1)

    @property
    def n(self) -> int:
        return self.sub.n

    @property
    def m(self) -> int:
        return self.sub.m

    @property
    def m_next(self) -> int:
        return self.f_bar.shape[2]

    def blocks(self) -> dict[str, np.ndarray]:
        n = self.n
        return {"uu": self.K[:, :, :n, :n], "uv": self.K[:, :, :n, n:],
                "vu": self.K[:, :, n:, :n], "vv": self.K[:, :, n:, n:]}

    def K_at(self, x, y) -> np.ndarray:
        """Piecewise-linear interpolation of ``K`` at points of the upper triangle."""
        x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
        y = np.atleast_1d(np.asarray(y, dtype=float)).ravel()
        p = self.K.shape[2]
        out = np.empty((x.size, p, p))
        for a in range(p):
            for b in range(p):
                f = _fill_subdiagonal(self.K[:, :, a, b].copy())
                out[:, a, b] = bilinear_many(f, self.h, self.h, x, y)
        return out

    def G_at(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.empty(x.shape + self.G.shape[1:])
        for k in range(self.n):
            for l in range(self.n):
                out[..., k, l] = np.interp(x, self.x, self.G[:, k, l])
        return out


def _diag_data(sub: SubsystemSpec, x: np.ndarray) -> np.ndarray:
    """Prescribed values of ``K(x, x)`` (NaN where the diagonal is not a data line)."""
    n, m = sub.n, sub.m
    lam, mu = np.asarray(sub.lam), np.asarray(sub.mu)
    p = n + m
    S = sub.sigma(x)
    out = np.full((x.size, p, p), np.nan)
    for k in range(n):
        for l in range(n):
            if k > l:
                out[:, k, l] = S[:, k, l] / (lam[k] - lam[l])
        for l in range(m):
            out[:, k, n + l] = S[:, k, n + l] / (lam[k] + mu[l])
            out[:, n + l, k] = -S[:, n + l, k] / (mu[l] + lam[k])
    for k in range(m):
        for l in range(m):
            if k != l:
                out[:, n + k, n + l] = S[:, n + k, n + l] / (mu[l] - mu[k])
    return out


def _check_speeds(sub: SubsystemSpec) -> None:
    lam, mu = np.asarray(sub.lam), np.asarray(sub.mu)
    if len(np.unique(lam)) != lam.size or len(np.unique(mu)) != mu.size:
        raise ChainSpecError("coincident transport speeds make the diagonal relation singular")


def solve_backstepping_kernels(sub: SubsystemSpec, coupling: BoundaryCoupling, n_grid: int = 101,
                               tol: float = DEFAULT_TOL, max_iter: int = MAX_ITER):
    """Solve for ``K`` and ``G``; returns ``(K, G, iterations, last_update)``."""
    if n_grid < 2:
        raise ValueError("n_grid must be at least 2")
    if tol <= 0:
        raise ValueError("tol must be positive")
    _check_speeds(sub)
    n, m = sub.n, sub.m
    p = n + m
    ng = n_grid
    h = 1.0 / (ng - 1)
    x = np.linspace(0.0, 1.0, ng)
    speeds = np.concatenate([np.asarray(sub.lam), -np.asarray(sub.mu)])
    lam = np.asarray(sub.lam)
    mu = np.asarray(sub.mu)
    I, J = np.triu_indices(ng)
    X, Y = x[I], x[J]
    sig_y = sub.sigma(x)                         # (ng, p, p) evaluated at y nodes
    spp = sub.sigma_pp(x)
    diag = _diag_data(sub, x)
    R = coupling.R_ii
    rays = {}
    for a in range(p):
        for b in range(p):
            d, sign = _entry_direction(a, b, n, speeds)
            rays[a, b] = _ray_geometry(d, sign, X, Y)
    # uv, vu, vv before uu so the top data of uu uses the fresh uv row
    order = [(a, b) for a in range(p) for b in range(p) if not (a < n and b < n)]
    order += [(a, b) for a in range(n) for b in range(n)]

    K = np.zeros((ng, ng, p, p))
    G = np.zeros((ng, n, n))
    for k in range(n):
        for l in range(k + 1, n):
            G[:, k, l] = spp[:, k, l]
    update = np.inf
    it = 0
    while it < max_iter:
        it += 1
        Ghat = np.zeros((ng, p, p))
        Ghat[:, :n, :n] = G
        rhs = -np.einsum("ijac,jcb->ijab", K, sig_y) + np.einsum("iac,ijcb->ijab", Ghat, K)
        K_new = np.zeros_like(K)
        for a, b in order:
            ray = rays[a, b]
            f = _fill_subdiagonal(rhs[:, :, a, b].copy())
            integral = ray_integrals(f, h, h, X, Y, ray.d[0], ray.d[1], ray.s_end, 1.0)
            base = np.zeros(X.size)
            top = ray.kind == TOP
            if a < n and b < n and np.any(top):
                # K_uu(x, 1) = (K_uv(x, 1) Lam- R)_{ab} / lam_b
                row = K_new[:, ng - 1, a, n:] * mu[None, :]
                coef = row @ R[:, b] / lam[b]
                base[top] = np.interp(ray.x_end[top], x, coef)
            dg = ray.kind == DIAG
            if np.any(dg):
                if np.isnan(diag[0, a, b]):
                    raise RuntimeError(f"entry {a},{b} reached the diagonal without data")
                base[dg] = np.interp(ray.x_end[dg], x, diag[:, a, b])
            K_new[I, J, a, b] = base - ray.sign * integral
        G_new = np.zeros_like(G)
        dK = np.einsum("iikl->ikl", K_new[:, :, :n, :n])
        for k in range(n):
            for l in range(k + 1, n):
                G_new[:, k, l] = spp[:, k, l] + (lam[l] - lam[k]) * dK[:, k, l]
        update = max(float(np.max(np.abs(K_new - K))), float(np.max(np.abs(G_new - G))))
        K, G = K_new, G_new
        if not np.isfinite(update):
            break
        if update < tol:
            return K, G, it, update
    raise KernelDivergenceError(it, update)


def solve_F_kernel(sub: SubsystemSpec, K: np.ndarray, G: np.ndarray, R_next: np.ndarray) -> FKernel | None:
    """Time-affine kernel by back substitution over rows ``n .. 1``; ``None`` without a downstream neighbour."""
    if R_next.size == 0:
        return None
    n, m = sub.n, sub.m
    ng = K.shape[0]
    h = 1.0 / (ng - 1)
    lam = np.asarray(sub.lam, dtype=float)
    mu = np.asarray(sub.mu, dtype=float)
    lam1 = lam[0]
    hy = h / lam1
    mn = R_next.shape[1]
    data_row = -np.einsum("ikm,m,ml->ikl", K[:, ng - 1, :n, n:], mu, R_next)
    samples = np.zeros((ng, ng, n, mn))
    forcing = np.zeros((n, mn, ng, ng))
    Fk = FKernel(lam, h, hy, samples, forcing, data_row)
    I, J = np.tril_indices(ng)
    xs, ys = I * h, J * hy
    for k in range(n - 1, -1, -1):
        # forcing of row k only involves rows > k, which are final here
        for l in range(mn):
            f = np.einsum("ic,ijc->ij", G[:, k, k + 1:], samples[:, :, k + 1:, l]) if k < n - 1 else np.zeros((ng, ng))
            i = np.arange(ng - 1)
            f[i, i + 1] = f[i, i] + f[i + 1, i + 1] - f[i + 1, i]
            forcing[k, l] = f
        vals = Fk(xs, ys)
        samples[I, J, k, :] = vals[:, k, :]
    return Fk


def target_coefficients(K: np.ndarray, sub: SubsystemSpec, coupling: BoundaryCoupling):
    """``G_bar = K_vv(x,1) Lam- R_ii - K_vu(x,1) Lam+`` and ``f_bar = K_vv(x,1) Lam- R_next``."""
    n = sub.n
    ng = K.shape[0]
    mu = np.asarray(sub.mu)
    lam = np.asarray(sub.lam)
    kvv = K[:, ng - 1, n:, n:] * mu[None, None, :]
    kvu = K[:, ng - 1, n:, :n] * lam[None, None, :]
    G_bar = kvv @ coupling.R_ii - kvu
    f_bar = kvv @ coupling.R_next if coupling.R_next.size else np.zeros((ng, sub.m, 0))
    return G_bar, f_bar


def compute_kernels(sub: SubsystemSpec, coupling: BoundaryCoupling, n_grid: int = 101,
                    tol: float = DEFAULT_TOL, max_iter: int = MAX_ITER) -> KernelSet:
    K, G, it, upd = solve_backstepping_kernels(sub, coupling, n_grid, tol, max_iter)
    F = solve_F_kernel(sub, K, G, coupling.R_next)
    G_bar, f_bar = target_coefficients(K, sub, coupling)
    return KernelSet(sub, coupling, n_grid, K, G, F, G_bar, f_bar, it, upd)


def compute_chain_kernels(spec, n_grid: int = 101, tol: float = DEFAULT_TOL) -> list[KernelSet]:
    return [compute_kernels(s, c, n_grid, tol) for s, c in zip(spec.subsystems, spec.couplings)]


def save_kernels(path, spec, kernels: list[KernelSet]) -> None:
    """Write the kernels of a chain to one ``.npz`` file tagged with the chain digest."""
    arrays = {"digest": np.array(spec.digest()), "n_grid": np.array(kernels[0].n_grid)}
    for j, ks in enumerate(kernels):
        arrays.update({f"{j}/K": ks.K, f"{j}/G": ks.G, f"{j}/G_bar": ks.G_bar, f"{j}/f_bar": ks.f_bar,
                       f"{j}/stats": np.array([ks.iterations, ks.last_update])})
        if ks.F is not None:
            arrays.update({f"{j}/F_samples": ks.F.samples, f"{j}/F_forcing": ks.F.forcing,
                           f"{j}/F_data": ks.F.data_row})
    np.savez_compressed(path, **arrays)


def load_kernels(path, spec, n_grid: int) -> list[KernelSet] | None:
    """Kernels stored by :func:`save_kernels`, or ``None`` if the file is for another chain or mesh."""
    try:
        data = np.load(path)
    except FileNotFoundError:
        return None
    with data:
        if str(data["digest"]) != spec.digest() or int(data["n_grid"]) != n_grid:
            return None
        out = []
        h = 1.0 / (n_grid - 1)
        for j, (sub, cpl) in enumerate(zip(spec.subsystems, spec.couplings)):
            F = None
            if f"{j}/F_samples" in data:
                lam = np.asarray(sub.lam, dtype=float)
                F = FKernel(lam, h, h / lam[0], data[f"{j}/F_samples"], data[f"{j}/F_forcing"], data[f"{j}/F_data"])
            it, upd = data[f"{j}/stats"]
            out.append(KernelSet(sub, cpl, n_grid, data[f"{j}/K"], data[f"{j}/G"], F,
                                 data[f"{j}/G_bar"], data[f"{j}/f_bar"], int(it), float(upd)))
    return out


# --------------------------------------------------------------------------
# residual diagnostics

def boundary_residuals(ks: KernelSet) -> dict[str, float]:
    """Largest violation of the diagonal relation, the ``y = 1`` relation and the ``F`` boundary data."""
    sub, n = ks.sub, ks.n
    x = ks.x
    ng = ks.n_grid
    lam = np.asarray(sub.lam)
    mu = np.asarray(sub.mu)
    Lam = np.concatenate([lam, -mu])
    Kd = np.einsum("iiab->iab", ks.K)
    Ghat = np.zeros_like(Kd)
    Ghat[:, :n, :n] = ks.G
    lhs = Lam[None, :, None] * Kd - Kd * Lam[None, None, :]
    res8 = lhs - (sub.sigma(x) - Ghat)
    # the y = 1 data wins at the corner for entries prescribed on both lines
    free = np.ones(res8.shape[1:], dtype=bool)
    for k in range(sub.m):
        free[n + k, n + k] = False           # K_vv(x, x) diagonal entries are unconstrained
    res8[:, ~free] = 0.0
    both = np.zeros_like(free)
    both[:n, :n] = np.tril(np.ones((n, n), dtype=bool), -1)
    both[n:, n:] = np.tril(np.ones((sub.m, sub.m), dtype=bool), -1)
    res8[-1, both] = 0.0
    top_uu = ks.K[:, ng - 1, :n, :n] * lam[None, None, :]
    top_uv = ks.K[:, ng - 1, :n, n:] * mu[None, None, :]
    res9 = top_uu - top_uv @ ks.coupling.R_ii
    out = {"diagonal": float(np.max(np.abs(res8))), "top": float(np.max(np.abs(res9)))}
    if ks.F is not None:
        xs = x
        f0 = ks.F(xs, np.zeros_like(xs))
        want = -np.einsum("ikm,m,ml->ikl", ks.K[:, ng - 1, :n, n:], mu, ks.coupling.R_next)
        slant = ks.F(xs[1:], xs[1:] / lam[0])  # the y = 0 data owns the corner
        out["F_bottom"] = float(np.max(np.abs(f0 - want)))
        out["F_slant"] = float(np.max(np.abs(slant[:, 1:, :]))) if n > 1 else 0.0
    else:
        out["F_bottom"] = out["F_slant"] = 0.0
    return out


def interior_residual(ks: KernelSet, lattice: int = 20, refine: int = 8) -> dict[str, float]:
    """Defect of the characteristic integral form on a coarse node lattice.

    For each lattice node and entry, the stored value is compared with the
    boundary data plus the integral of the right-hand side along the
    characteristic, evaluated with ``refine`` samples per cell from the
    interpolated kernel and the exact coupling fields. The lattice has
    ``lattice + 1`` points per axis so meshes whose size is a multiple share it.
    Returns the mean and the largest absolute defect.
    """
    sub, n = ks.sub, ks.n
    p = n + sub.m
    ng = ks.n_grid
    h = ks.h
    stride = max(1, (ng - 1) // lattice)
    lat = np.arange(0, ng, stride)
    I, J = np.meshgrid(lat, lat, indexing="ij")
    keep = I <= J
    I, J = I[keep], J[keep]
    X, Y = ks.x[I], ks.x[J]
    speeds = np.concatenate([np.asarray(sub.lam), -np.asarray(sub.mu)])
    diag = _diag_data(sub, ks.x)
    lam, mu = np.asarray(sub.lam), np.asarray(sub.mu)
    res = []
    for a in range(p):
        for b in range(p):
            d, sign = _entry_direction(a, b, n, speeds)
            ray = _ray_geometry(d, sign, X, Y)
            m_pts = np.maximum(2, np.ceil(np.maximum(np.abs(ray.s_end * d[0]), np.abs(ray.s_end * d[1])) / h * refine)
                               .astype(int) + 1)
            res.append(_entry_residual(ks, a, b, ray, X, Y, m_pts, diag, lam, mu))
    res = np.concatenate(res)
    return {"mean": float(np.mean(res)), "max": float(np.max(res))}


def _entry_residual(ks, a, b, ray, X, Y, m_pts, diag, lam, mu) -> float:
    n = ks.n
    ng = ks.n_grid
    res = np.empty(X.size)
    for P in range(X.size):
        s = np.linspace(0.0, ray.s_end[P], m_pts[P])
        xs = X[P] + s * ray.d[0]
        ys = Y[P] + s * ray.d[1]
        Kp = ks.K_at(xs, ys)
        Sy = ks.sub.sigma(ys)
        Gx = np.zeros((xs.size, Kp.shape[1], Kp.shape[1]))
        Gx[:, :n, :n] = ks.G_at(xs)
        rhs = -np.einsum("sc,sc->s", Kp[:, a, :], Sy[:, :, b]) + np.einsum("sc,sc->s", Gx[:, a, :], Kp[:, :, b])
        integral = np.trapezoid(rhs, s) if s.size > 1 else 0.0
        kind = ray.kind[P]
        xe = ray.x_end[P]
        if kind == TOP:
            if a < n and b < n:
                row = ks.K[:, ng - 1, a, n:] * mu[None, :]
                coef = row @ ks.coupling.R_ii[:, b] / lam[b]
                base = np.interp(xe, ks.x, coef)
            else:
                base = 0.0
        elif kind == DIAG:
            base = np.interp(xe, ks.x, diag[:, a, b])
        else:
            base = 0.0
        node = ks.K[int(round(X[P] / ks.h)), int(round(Y[P] / ks.h)), a, b]
        res[P] = abs(node - (base - ray.sign * integral))
    return res


def F_interior_residual(ks: KernelSet, refine: int = 8) -> float:
    """Largest defect of the characteristic form of the ``F`` equation on a coarse lattice."""
    if ks.F is None:
        return 0.0
    F = ks.F
    lam = F.lam
    n, mn = F.shape
    pts = [(x, y) for x in np.linspace(0.1, 1.0, 10) for y in np.linspace(0.0, x / lam[0], 6)[1:]]
    worst = 0.0
    for x, y in pts:
        for k in range(n):
            s_foot = y if k == 0 else min(y, (x - lam[0] * y) / (lam[k] - lam[0]))
            s = np.linspace(0.0, s_foot, max(2, int(np.ceil(s_foot * lam[k] / ks.h * refine)) + 1))
            xs, ys = x - lam[k] * s, y - s
            Fv = F(xs, ys)
            Gx = ks.G_at(xs)
            integrand = np.einsum("sc,scl->sl", Gx[:, k, :], Fv)
            foot = F(xs[-1:], ys[-1:])[0, k]
            val = F(np.array([x]), np.array([y]))[0, k]
            worst = max(worst, float(np.max(np.abs(val - foot - np.trapezoid(integrand, s, axis=0)))))
    return worst
