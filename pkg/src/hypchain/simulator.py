"""First-order upwind simulation of the interconnected chain."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .chain_model import ChainSpec, ConfigurationError

BLEND_CELLS = 5
BLOWUP = 1e12


class DivergenceError(FloatingPointError):
    """The explicit scheme produced non-finite or exploding values."""

    def __init__(self, t: float, detail: str = ""):
        self.t = t
        super().__init__(f"simulation diverged at t={t:.6g}{': ' + detail if detail else ''}")


@dataclass(frozen=True)
class Grid:
    """Uniform spatial mesh shared by all subsystems and the explicit time step."""

    nx: int
    dt: float
    vmax: float

    @classmethod
    def for_chain(cls, spec: ChainSpec, nx: int, dt: float | None = None) -> "Grid":
        if nx < 2 * BLEND_CELLS + 1:
            raise ConfigurationError(f"need at least {2 * BLEND_CELLS + 1} grid points, got {nx}")
        vmax = max(max(s.lam[-1], s.mu[-1]) for s in spec.subsystems)
        dx = 1.0 / (nx - 1)
        dt_cfl = dx / vmax
        if dt is None:
            dt = dt_cfl
        elif dt > dt_cfl * (1 + 1e-12):
            raise ConfigurationError(f"dt={dt} violates CFL (max {dt_cfl})")
        return cls(int(nx), float(dt), float(vmax))

    @property
    def dx(self) -> float:
        return 1.0 / (self.nx - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.nx)

    @property
    def cfl(self) -> float:
        return self.vmax * self.dt / self.dx


@dataclass
class ChainState:
    """Grid samples of every subsystem: ``u[i]`` is ``(n_i, nx)``, ``v[i]`` is ``(m_i, nx)``."""

    u: list
    v: list
    t: float = 0.0

    def copy(self) -> "ChainState":
        return ChainState([a.copy() for a in self.u], [a.copy() for a in self.v], self.t)

    @property
    def N(self) -> int:
        return len(self.u)


def l2_norm(state: ChainState) -> tuple[np.ndarray, float]:
    """Per-subsystem and total L2 norms, trapezoid in ``x``."""
    per = np.empty(state.N)
    for i, (u, v) in enumerate(zip(state.u, state.v)):
        nx = u.shape[1]
        dens = np.sum(u * u, axis=0) + np.sum(v * v, axis=0)
        per[i] = np.trapezoid(dens, dx=1.0 / (nx - 1))
    return np.sqrt(per), float(np.sqrt(per.sum()))


# --------------------------------------------------------------------------
# initial conditions

def _profile(ic: dict, x: np.ndarray, comp: int, rng: Optional[np.random.Generator]) -> np.ndarray:
    kind = ic.get("kind", "zero")
    if kind == "zero":
        return np.zeros_like(x)
    if kind == "constant":
        return np.full_like(x, float(ic.get("value", 1.0)))
    if kind == "sine":
        amp = float(ic.get("amplitude", 1.0))
        freq = float(ic.get("freq", 1.0))
        return amp * np.sin(2 * np.pi * freq * x + 0.7 * comp + float(ic.get("phase", 0.5)))
    if kind == "bump":
        amp = float(ic.get("amplitude", 1.0))
        a, b = (float(e) for e in ic.get("support", (0.2, 0.8)))
        r = np.clip((x - a) / (b - a), 0.0, 1.0)
        return amp * np.cos(0.7 * comp + float(ic.get("phase", 0.5))) * np.sin(np.pi * r) ** 4
    if kind == "polynomial":
        return np.polyval(np.asarray(ic.get("coeffs", [1.0]), dtype=float), x)
    if kind == "random":
        modes = int(ic.get("modes", 4))
        amp = float(ic.get("amplitude", 1.0))
        a = rng.normal(size=modes) / np.arange(1, modes + 1)
        ph = rng.uniform(0, 2 * np.pi, size=modes)
        k = np.arange(1, modes + 1)[:, None]
        return amp * np.sum(a[:, None] * np.sin(np.pi * k * x[None] + ph[:, None]), axis=0)
    raise ConfigurationError(f"unknown initial-condition kind {kind!r}")


def init_state(spec: ChainSpec, grid: Grid, ic: dict | None = None) -> ChainState:
    """Sample the initial profiles and make boundary values compatible with ``U(0) = 0``.

    Inflow values are replaced by the coupling relations; the mismatch is
    blended linearly into the first few cells next to each inflow boundary.
    With ``ic["blend_width"] = w`` the mismatch is instead spread over a
    fixed length ``w`` with the C1 weight ``(1 - x/w)^2``, so the initial
    profile does not steepen under mesh refinement.
    """
    ic = ic or {"kind": "zero"}
    rng = np.random.default_rng(ic.get("seed", 0)) if ic.get("kind") == "random" else None
    x = grid.x
    us, vs, comp = [], [], 0
    for s in spec.subsystems:
        u = np.empty((s.n, grid.nx))
        v = np.empty((s.m, grid.nx))
        for k in range(s.n):
            u[k] = _profile(ic, x, comp, rng)
            comp += 1
        for k in range(s.m):
            v[k] = _profile(ic, x, comp, rng)
            comp += 1
        us.append(u)
        vs.append(v)
    state = ChainState(us, vs, 0.0)
    width = ic.get("blend_width")
    if width is None:
        ramp = np.zeros(grid.nx)
        ramp[:BLEND_CELLS] = 1.0 - np.arange(BLEND_CELLS) / BLEND_CELLS
    else:
        width = float(width)
        if not 0.0 < width <= 1.0:
            raise ConfigurationError(f"blend_width must lie in (0, 1], got {width}")
        ramp = np.clip(1.0 - x / width, 0.0, None) ** 2
    for i, c in enumerate(spec.couplings):
        target_u = _inflow_u(spec, state, i, np.zeros(spec.subsystems[0].n))
        target_v = _inflow_v(spec, state, i)
        du = target_u - state.u[i][:, 0]
        dv = target_v - state.v[i][:, -1]
        state.u[i] += du[:, None] * ramp[None]
        state.v[i] += dv[:, None] * ramp[None, ::-1]
    return state


def _inflow_u(spec: ChainSpec, state: ChainState, i: int, U) -> np.ndarray:
    c = spec.couplings[i]
    upstream = U if i == 0 else state.u[i - 1][:, -1]
    return c.Q_ii @ state.v[i][:, 0] + c.Q_prev @ upstream


def _inflow_v(spec: ChainSpec, state: ChainState, i: int) -> np.ndarray:
    c = spec.couplings[i]
    val = c.R_ii @ state.u[i][:, -1]
    if i + 1 < spec.N:
        val = val + c.R_next @ state.v[i + 1][:, 0]
    return val


def boundary_residual(spec: ChainSpec, state: ChainState, U=None) -> float:
    """Largest mismatch in the boundary relations at the grid end nodes."""
    U = np.zeros(spec.subsystems[0].n) if U is None else np.asarray(U, dtype=float)
    res = 0.0
    for i in range(spec.N):
        res = max(res, float(np.max(np.abs(_inflow_u(spec, state, i, U) - state.u[i][:, 0]))))
        res = max(res, float(np.max(np.abs(_inflow_v(spec, state, i) - state.v[i][:, -1]))))
    return res


# --------------------------------------------------------------------------
# stepping

class Stepper:
    """Precomputed upwind coefficients for one chain on one grid."""

    def __init__(self, spec: ChainSpec, grid: Grid):
        self.spec = spec
        self.grid = grid
        x = grid.x
        ratio = grid.dt / grid.dx
        self.cu = [np.asarray(s.lam)[:, None] * ratio for s in spec.subsystems]
        self.cv = [np.asarray(s.mu)[:, None] * ratio for s in spec.subsystems]
        # (n+m, n+m, nx) coupling samples, None when identically zero
        self.S = []
        for s in spec.subsystems:
            self.S.append(None if s.uncoupled else np.moveaxis(s.sigma(x), 0, -1) * grid.dt)

    def interior(self, state: ChainState) -> ChainState:
        """Advance interior and outflow nodes by one step; inflow nodes keep stale values."""
        new_u, new_v = [], []
        for i, s in enumerate(self.spec.subsystems):
            u, v = state.u[i], state.v[i]
            un = u.copy()
            vn = v.copy()
            un[:, 1:] -= self.cu[i] * (u[:, 1:] - u[:, :-1])
            vn[:, :-1] += self.cv[i] * (v[:, 1:] - v[:, :-1])
            S = self.S[i]
            if S is not None:
                w = np.concatenate([u, v], axis=0)
                src = np.einsum("abx,bx->ax", S, w)
                un[:, 1:] += src[:s.n, 1:]
                vn[:, :-1] += src[s.n:, :-1]
            new_u.append(un)
            new_v.append(vn)
        return ChainState(new_u, new_v, state.t + self.grid.dt)

    def close(self, state: ChainState, U, skip_first: bool = False) -> None:
        """Set all inflow nodes from the boundary relations (in place)."""
        for i in range(self.spec.N):
            state.v[i][:, -1] = _inflow_v(self.spec, state, i)
        for i in range(self.spec.N):
            if i == 0 and skip_first:
                continue
            state.u[i][:, 0] = _inflow_u(self.spec, state, i, U)


def step(state: ChainState, U, spec: ChainSpec, grid: Grid, stepper: Stepper | None = None) -> ChainState:
    """One explicit upwind step with input ``U`` applied at the left end of subsystem 1."""
    stepper = stepper or Stepper(spec, grid)
    new = stepper.interior(state)
    stepper.close(new, np.asarray(U, dtype=float))
    _check_finite(new)
    return new


def _check_finite(state: ChainState) -> None:
    for a in state.u + state.v:
        if not np.all(np.isfinite(a)) or np.max(np.abs(a)) > BLOWUP:
            raise DivergenceError(state.t)


# --------------------------------------------------------------------------
# trajectories

@dataclass
class Trajectory:
    t: np.ndarray
    norms: np.ndarray
    norm_total: np.ndarray
    U: np.ndarray
    U_applied: np.ndarray
    boundary: dict = field(default_factory=dict)
    snapshots: list = field(default_factory=list)

    def norm_at(self, t: float) -> float:
        return float(np.interp(t, self.t, self.norm_total))

    def to_csv(self, norms_path, control_path=None) -> None:
        N = self.norms.shape[1]
        with open(norms_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "norm_total"] + [f"norm_{i + 1}" for i in range(N)])
            for k in range(len(self.t)):
                w.writerow([repr(float(self.t[k])), repr(float(self.norm_total[k]))]
                           + [repr(float(v)) for v in self.norms[k]])
        if control_path is not None:
            d = self.U.shape[1]
            with open(control_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["t"] + [f"U_{k + 1}" for k in range(d)] + [f"U_applied_{k + 1}" for k in range(d)])
                for k in range(len(self.t)):
                    w.writerow([repr(float(self.t[k]))] + [repr(float(v)) for v in self.U[k]]
                               + [repr(float(v)) for v in self.U_applied[k]])


ControlFn = Callable[[float, ChainState], object]


def simulate(spec: ChainSpec, controller: ControlFn | None, T: float, grid: Grid,
             state: ChainState | None = None, ic: dict | None = None, input_delay: float = 0.0,
             snapshot_every: int | None = None, on_step: Callable | None = None) -> Trajectory:
    """Integrate the chain on ``[0, T]``.

    ``controller(t, state)`` is called after the interior update of each step,
    when every node except the actuated one already holds its new value, and
    returns ``U(t)`` (``None`` means zero). With ``input_delay`` the plant
    receives ``U(t - input_delay)`` (zero before time 0).
    Boundary traces ``u0, u1, v0, v1`` of every subsystem are kept in
    ``Trajectory.boundary[i]``.
    """
    if T < 0:
        raise ConfigurationError("horizon must be non-negative")
    if state is None:
        state = init_state(spec, grid, ic)
    stepper = Stepper(spec, grid)
    dt = grid.dt
    K = int(round(T / dt))
    n1 = spec.subsystems[0].n
    N = spec.N
    ts = np.arange(K + 1) * dt
    norms = np.empty((K + 1, N))
    total = np.empty(K + 1)
    Us = np.zeros((K + 1, n1))
    Ua = np.zeros((K + 1, n1))
    bnd = [{"u0": np.empty((K + 1, s.n)), "u1": np.empty((K + 1, s.n)),
            "v0": np.empty((K + 1, s.m)), "v1": np.empty((K + 1, s.m))} for s in spec.subsystems]
    snaps = []
    lag = input_delay / dt

    def applied(k: int) -> np.ndarray:
        if lag == 0.0:
            return Us[k]
        pos = k - lag
        if pos < 0:
            return np.zeros(n1)
        lo = int(np.floor(pos))
        w = pos - lo
        hi = min(lo + 1, k)
        return (1 - w) * Us[lo] + w * Us[hi]

    def actuate(k: int, st: ChainState) -> None:
        U = controller(st.t, st) if controller is not None else None
        Us[k] = 0.0 if U is None else np.asarray(U, dtype=float)
        Ua[k] = applied(k)
        c = spec.couplings[0]
        st.u[0][:, 0] = c.Q_ii @ st.v[0][:, 0] + Ua[k]

    def record(k: int, st: ChainState) -> None:
        norms[k], total[k] = l2_norm(st)
        if not np.isfinite(total[k]) or total[k] > BLOWUP:
            raise DivergenceError(st.t, "norm overflow")
        for i in range(N):
            bnd[i]["u0"][k] = st.u[i][:, 0]
            bnd[i]["u1"][k] = st.u[i][:, -1]
            bnd[i]["v0"][k] = st.v[i][:, 0]
            bnd[i]["v1"][k] = st.v[i][:, -1]
        if snapshot_every and k % snapshot_every == 0 or k == K or k == 0:
            snaps.append(st.copy())
        if on_step is not None:
            on_step(k, st)

    state = state.copy()
    state.t = 0.0
    actuate(0, state)
    record(0, state)
    for k in range(1, K + 1):
        new = stepper.interior(state)
        new.t = ts[k]
        stepper.close(new, None, skip_first=True)
        actuate(k, new)
        state = new
        record(k, state)
    return Trajectory(ts, norms, total, Us, Ua, bnd, snaps)
