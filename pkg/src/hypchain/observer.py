"""Delayed-state estimation from the single measurement ``y = u_N(t, 1)`` and output feedback.

The observer reconstructs the boundary signals of the transformed state at
``t - tau`` by walking the chain downstream to upstream:

* ``a1_N = y``;
* ``a0_j`` from future ``a1_j`` (the ``alpha`` characteristics read backwards);
* ``v0_j`` from the neutral relation over ``a0_j``, ``a1_j`` and ``v0_{j+1}``;
* ``a1_{j-1} = Q_prev^+ (a0_j - Phi_j)`` with a left inverse of ``Q_prev``.

Each upstream step consumes ``1/lambda_j^1`` of look-ahead, so every signal is
available at ``t - tau`` whenever ``tau > sum_j 1/lambda_j^1``. The controller
then runs on the delayed chain with an input delay of ``tau + d``.
"""
from __future__ import annotations

import numpy as np

from .chain_model import ChainSpec, ConfigurationError, left_inverse
from .controller import ChainController, SignalLayout, SignalRecord, record_lookback
from .lagops import LagOp
from .simulator import ChainState
from .transforms import SubsystemOperators


class LowPassFilter:
    """Cascade of identical first-order sections ``w_c/(s + w_c)``, bilinear map at ``dt``.

    Parameters
    ----------
    dim : int
        Number of channels.
    dt : float
        Sampling step; ``dt * w_c < 1`` is required.
    bandwidth : float
        Cutoff ``w_c`` in rad/s.
    order : int
        Number of sections.
    """

    def __init__(self, dim: int, dt: float, bandwidth: float = 125.0, order: int = 4):
        if order < 1:
            raise ConfigurationError("filter order must be at least 1")
        if dt * bandwidth >= 1.0:
            raise ConfigurationError(f"filter sampling too coarse: dt*w_c = {dt * bandwidth:.3g} >= 1")
        self.dim, self.dt, self.bandwidth, self.order = int(dim), float(dt), float(bandwidth), int(order)
        k = 2.0 / dt
        self.a = (k - bandwidth) / (k + bandwidth)
        self.b = bandwidth / (k + bandwidth)
        self.reset()

    def reset(self) -> None:
        self._x = np.zeros((self.order, self.dim))
        self._y = np.zeros((self.order, self.dim))

    @property
    def dc_gain(self) -> float:
        return (2.0 * self.b / (1.0 - self.a)) ** self.order

    def __call__(self, sample) -> np.ndarray:
        x = np.asarray(sample, dtype=float).reshape(self.dim)
        for s in range(self.order):
            y = self.a * self._y[s] + self.b * (x + self._x[s])
            self._x[s] = x
            self._y[s] = y
            x = y
        return x.copy()


def _apply_clamped(op: LagOp, hist: dict, index: int) -> np.ndarray:
    """``op`` at ``index`` with samples before the first record held at the first value."""
    out = np.zeros(op.batch + (op.d_out,))
    nb = len(op.batch)
    for name, (k0, W) in op.terms.items():
        L = W.shape[nb]
        idx = np.clip(index - k0 - np.arange(L), 0, None)
        seg = hist[name][idx]
        out += np.einsum("...loi,li->...o", W, seg)
    return out


def lookahead_steps(spec: ChainSpec, ops: list[SubsystemOperators]) -> list[int]:
    """Future samples of ``a1_j`` read when reconstructing ``a0_j``."""
    return [int(-o.AopR.take(0).span("a1")[0]) for o in ops]


def default_tau(spec: ChainSpec, dt: float, factor: float = 1.05) -> float:
    """``factor * sum 1/lambda_j^1`` snapped up to the time grid."""
    tau = factor * float(np.sum(spec.inv_lam1))
    return float(np.ceil(tau / dt - 1e-9) * dt)


class ChainObserver:
    """Exact delayed estimator of the transformed boundary signals.

    Estimates are stored by the index of the time they refer to. After
    :meth:`update` at step ``k`` every signal is known up to ``k - tau/dt``.
    """

    def __init__(self, spec: ChainSpec, ops: list[SubsystemOperators], dt: float, tau: float | None = None):
        self.spec = spec
        self.ops = ops
        self.dt = float(dt)
        if tau is None:
            tau = default_tau(spec, dt)
        self.tau_steps = int(round(tau / dt))
        if abs(self.tau_steps * dt - tau) > 1e-9 * max(1.0, tau):
            raise ConfigurationError(f"observer delay {tau} is not a multiple of the time step {dt}")
        self.tau = self.tau_steps * dt
        if self.tau <= float(np.sum(spec.inv_lam1)):
            raise ConfigurationError(f"observer delay {self.tau:.4g} must exceed sum 1/lambda^1 = "
                                     f"{float(np.sum(spec.inv_lam1)):.4g}")
        self.lay = SignalLayout.for_chain(spec)
        self.N = spec.N
        self.ahead = lookahead_steps(spec, ops)
        if sum(self.ahead) > self.tau_steps:
            raise ConfigurationError(f"observer delay of {self.tau_steps} steps is shorter than the "
                                     f"{sum(self.ahead)} steps of look-ahead on this grid")
        # shift[j]: a1_j is known up to k - shift[j]; a0_j, v0_j up to k - shift[j] - ahead[j]
        shift = [0] * self.N
        for j in range(self.N - 2, -1, -1):
            shift[j] = shift[j + 1] + self.ahead[j + 1]
        self.shift = shift
        self.linv = [left_inverse(spec.couplings[j].Q_prev) if j > 0 else None for j in range(self.N)]
        self._AR0 = [o.AopR.take(0) for o in ops]
        self.est = SignalRecord(self.lay.width)
        self.k = -1

    def _hist(self, j: int) -> dict:
        Z = self.est.Z
        lay = self.lay
        h = {"a0": Z[:, lay.a0(j)], "a1": Z[:, lay.a1(j)], "v0": Z[:, lay.v0(j)]}
        if j + 1 < self.N:
            h["vn"] = Z[:, lay.v0(j + 1)]
        return h

    def update(self, k: int, y) -> None:
        """Record ``y(t_k)`` and extend every estimate as far as it is determined."""
        if k != self.k + 1:
            raise ValueError(f"observer expects consecutive steps, got {k} after {self.k}")
        self.k = k
        lay = self.lay
        self.est.row(k)
        self.est.Z[k, lay.a1(self.N - 1)] = np.asarray(y, dtype=float)
        for j in range(self.N - 1, -1, -1):
            s = k - self.shift[j] - self.ahead[j]
            if s < 0:
                continue
            h = self._hist(j)
            # a0_j(s) from a1_j on [s, s + ahead]
            self.est.Z[s, lay.a0(j)] = _apply_clamped(self._AR0[j], h, s)
            self.est.Z[s, lay.v0(j)] = _apply_clamped(self.ops[j].V0op, h, s)
            if j > 0:
                phi = _apply_clamped(self.ops[j].Phi, h, s)
                self.est.Z[s, lay.a1(j - 1)] = self.linv[j] @ (self.est.Z[s, lay.a0(j)] - phi)

    def delayed_signals(self, k: int) -> np.ndarray:
        """Estimated signal row at ``t_k - tau``."""
        s = k - self.tau_steps
        if s < 0 or s > self.est.count - 1:
            raise IndexError(f"no estimate at step {s}")
        return self.est.Z[s]

    def estimate_profiles(self, k: int) -> ChainState:
        """``(u, v)(t_k - tau, x)`` reconstructed on the kernel mesh."""
        s = k - self.tau_steps
        us, vs = [], []
        for j, o in enumerate(self.ops):
            uv = _apply_clamped(o.UVop, self._hist(j), s)
            us.append(uv[:, :o.n].T.copy())
            vs.append(uv[:, o.n:].T.copy())
        return ChainState(us, vs, s * self.dt)

    def startup_time(self) -> float:
        """Delay after which the delayed estimates no longer depend on held initial samples."""
        lb = 0
        for j, o in enumerate(self.ops):
            for op in (o.V0op, o.Phi, o.UVop):
                lb = max(lb, op.span()[1])
        depth = sum(self.ahead) + self.N * lb
        return self.tau + depth * self.dt


class OutputFeedback:
    """Observer plus predictor controller, usable as a ``simulate`` controller.

    Parameters
    ----------
    spec : ChainSpec
        Nominal chain used by the observer and the controller.
    ops : list of SubsystemOperators
        Operators on the simulation step.
    dt : float
        Simulation step.
    tau : float, optional
        Observer delay; defaults to :func:`default_tau`.
    input_delay : float
        Actuation delay of the plant.
    t_act : float, optional
        Activation time; defaults to the observer and controller validity.
    output_filter : callable, optional
        Applied to each emitted sample.
    ramp : float
        Length of the raised-cosine activation ramp in seconds.
    """

    def __init__(self, spec: ChainSpec, ops: list[SubsystemOperators], dt: float, tau: float | None = None,
                 input_delay: float = 0.0, t_act: float | None = None, output_filter=None, ramp: float = 1.0):
        self.spec = spec
        self.dt = float(dt)
        self.observer = ChainObserver(spec, ops, dt, tau)
        self.input_delay = float(input_delay)
        D = self.observer.tau + self.input_delay
        if t_act is None:
            t_act = default_output_activation(self.observer, ops, spec, dt, input_delay)
        self.core = ChainController(spec, ops, dt, D, t_act, ramp)
        self.filter = output_filter
        self.U = SignalRecord(spec.subsystems[0].n)

    @property
    def t_act(self) -> float:
        return self.core.t_act

    @property
    def tau(self) -> float:
        return self.observer.tau

    def __call__(self, t: float, state: ChainState):
        k = int(round(t / self.dt))
        y = state.u[-1][:, -1]
        self.observer.update(k, y)
        row = self.core.rec.row(k)
        s = k - self.observer.tau_steps
        if s >= 0:
            row[:] = self.observer.est.Z[s]
        else:
            row[:] = 0.0
        self.core.plan(k)
        U = self.core.Uhat[0].Z[k].copy()
        if self.filter is not None:
            U = self.filter(U)
            self.core.Uhat[0].Z[k] = U
        self.U.row(k)[:] = U
        return U


def default_output_activation(observer: ChainObserver, ops, spec: ChainSpec, dt: float, input_delay: float = 0.0,
                              margin: float = 0.5) -> float:
    """First delayed record plus the controller lookback and ``margin``, on the time grid.

    Estimates are not yet exact at this time (see :meth:`ChainObserver.startup_time`);
    the activation ramp absorbs the residual startup error.
    """
    t = observer.tau + record_lookback(ops, spec, dt, observer.tau + input_delay) + margin
    return float(np.ceil(t / dt - 1e-9) * dt)
