"""Chain of boundary-interconnected hyperbolic subsystems.

Subsystem ``i`` carries ``n_i`` rightward states ``u_i`` (speeds ``lam``) and
``m_i`` leftward states ``v_i`` (speeds ``mu``) on ``[0, 1]``::

    u_t + diag(lam) u_x = S_pp(x) u + S_pm(x) v
    v_t - diag(mu)  v_x = S_mp(x) u + S_mm(x) v
    u_i(t, 0) = Q_ii v_i(t, 0) + Q_prev u_{i-1}(t, 1)      (u_0(t, 1) = U(t))
    v_i(t, 1) = R_ii u_i(t, 1) + R_next v_{i+1}(t, 0)      (v_{N+1} = 0)

The measurement is ``y(t) = u_N(t, 1)``.
"""
from __future__ import annotations

import ast
import hashlib
import json
import math
import operator
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

RANK_RTOL = 1e-8


class ChainSpecError(ValueError):
    """Structurally inconsistent chain description."""


class AssumptionError(ValueError):
    """A structural assumption (rank condition, open-loop stability) fails."""


class ConfigurationError(ValueError):
    """Invalid run configuration (horizon too short, bad grid, ...)."""


# --------------------------------------------------------------------------
# expressions

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}
_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "sqrt": np.sqrt,
          "tanh": np.tanh, "cosh": np.cosh, "sinh": np.sinh}
_CONSTS = {"pi": math.pi, "e": math.e}


def compile_expr(text: str) -> Callable[[np.ndarray], np.ndarray]:
    """Compile an arithmetic expression in ``x`` into a vectorized callable.

    Only numbers, ``x``, ``pi``, ``e``, ``+ - * / **``, unary minus and the
    functions sin, cos, exp, sqrt, tanh, sinh, cosh are accepted.
    """
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise ChainSpecError(f"cannot parse expression {text!r}: {exc.msg}") from None

    def check(node):
        if isinstance(node, ast.Expression):
            check(node.body)
        elif isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            check(node.left)
            check(node.right)
        elif isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            check(node.operand)
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS:
                raise ChainSpecError(f"unknown function in {text!r}")
            if len(node.args) != 1 or node.keywords:
                raise ChainSpecError(f"functions take one argument: {text!r}")
            check(node.args[0])
        elif isinstance(node, ast.Name):
            if node.id != "x" and node.id not in _CONSTS:
                raise ChainSpecError(f"unknown name {node.id!r} in {text!r}")
        elif isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            pass
        else:
            raise ChainSpecError(f"unsupported syntax in {text!r}")

    check(tree)

    def ev(node, x):
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](ev(node.left, x), ev(node.right, x))
        if isinstance(node, ast.UnaryOp):
            val = ev(node.operand, x)
            return -val if isinstance(node.op, ast.USub) else val
        if isinstance(node, ast.Call):
            return _FUNCS[node.func.id](ev(node.args[0], x))
        if isinstance(node, ast.Name):
            return x if node.id == "x" else _CONSTS[node.id]
        return float(node.value)

    body = tree.body

    def fn(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(ev(body, x), dtype=float), x.shape).copy()

    return fn


# --------------------------------------------------------------------------
# spatially varying matrices

@dataclass(frozen=True)
class FieldEntry:
    """One scalar coupling coefficient: a constant, an expression or samples."""

    const: float = 0.0
    expr: str | None = None
    samples: tuple[float, ...] | None = None

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.expr is not None:
            return compile_expr(self.expr)(x)
        if self.samples is not None:
            grid = np.linspace(0.0, 1.0, len(self.samples))
            return np.interp(x, grid, np.asarray(self.samples))
        return np.full(x.shape, self.const)

    @property
    def is_zero(self) -> bool:
        if self.expr is not None:
            return False
        if self.samples is not None:
            return not np.any(self.samples)
        return self.const == 0.0

    def scaled(self, factor: float) -> "FieldEntry":
        if factor == 1.0:
            return self
        if self.expr is not None:
            return FieldEntry(expr=f"({factor!r})*({self.expr})")
        if self.samples is not None:
            return FieldEntry(samples=tuple(factor * s for s in self.samples))
        return FieldEntry(const=factor * self.const)

    def to_json(self):
        if self.expr is not None:
            return {"expr": self.expr}
        if self.samples is not None:
            return {"samples": list(self.samples)}
        return self.const

    @classmethod
    def from_json(cls, obj) -> "FieldEntry":
        if isinstance(obj, (int, float)):
            return cls(const=float(obj))
        if isinstance(obj, dict) and "expr" in obj:
            compile_expr(obj["expr"])
            return cls(expr=str(obj["expr"]))
        if isinstance(obj, dict) and "samples" in obj:
            samples = tuple(float(s) for s in obj["samples"])
            if len(samples) < 2:
                raise ChainSpecError("sampled field needs at least two samples")
            return cls(samples=samples)
        raise ChainSpecError(f"bad field entry {obj!r}")


class MatrixField:
    """Matrix-valued function of ``x`` on [0, 1]; evaluation returns ``x.shape + (r, c)``."""

    def __init__(self, entries: Sequence[Sequence[FieldEntry]], shape: tuple[int, int] | None = None):
        rows = [tuple(row) for row in entries]
        if shape is None:
            shape = (len(rows), len(rows[0]) if rows else 0)
        if len(rows) != shape[0] or any(len(r) != shape[1] for r in rows):
            raise ChainSpecError(f"ragged matrix field, expected shape {shape}")
        self.entries = tuple(rows)
        self.shape = shape

    @classmethod
    def constant(cls, mat) -> "MatrixField":
        mat = np.atleast_2d(np.asarray(mat, dtype=float))
        return cls([[FieldEntry(const=float(v)) for v in row] for row in mat], mat.shape)

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "MatrixField":
        return cls([[FieldEntry() for _ in range(cols)] for _ in range(rows)], (rows, cols))

    @classmethod
    def from_json(cls, obj, shape: tuple[int, int]) -> "MatrixField":
        if obj is None or obj == 0:
            return cls.zeros(*shape)
        if not isinstance(obj, list):
            obj = [[obj]]
        elif obj and not isinstance(obj[0], list):
            # a flat list is a column when cols == 1, a row otherwise
            obj = [[e] for e in obj] if shape[1] == 1 and shape[0] > 1 else [obj]
        entries = [[FieldEntry.from_json(e) for e in row] for row in obj]
        return cls(entries, shape)

    def to_json(self):
        return [[e.to_json() for e in row] for row in self.entries]

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape + self.shape)
        for a, row in enumerate(self.entries):
            for b, e in enumerate(row):
                if not e.is_zero:
                    out[..., a, b] = e(x)
        return out

    @property
    def is_zero(self) -> bool:
        return all(e.is_zero for row in self.entries for e in row)

    def scaled(self, factors) -> "MatrixField":
        factors = np.broadcast_to(np.asarray(factors, dtype=float), self.shape)
        return MatrixField([[e.scaled(float(factors[a, b])) for b, e in enumerate(row)]
                            for a, row in enumerate(self.entries)], self.shape)


# --------------------------------------------------------------------------
# chain description

@dataclass(frozen=True)
class SubsystemSpec:
    lam: tuple[float, ...]
    mu: tuple[float, ...]
    sigma_pp: MatrixField
    sigma_pm: MatrixField
    sigma_mp: MatrixField
    sigma_mm: MatrixField

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        mu = np.asarray(self.mu, dtype=float)
        if lam.size == 0 or mu.size == 0:
            raise ChainSpecError("each subsystem needs n >= 1 and m >= 1 states")
        if np.any(lam <= 0) or np.any(mu <= 0):
            raise ChainSpecError("transport speeds must be positive")
        if np.any(np.diff(lam) <= 0) or np.any(np.diff(mu) <= 0):
            raise ChainSpecError("transport speeds must be strictly increasing")
        n, m = lam.size, mu.size
        for name, fld, shp in (("sigma_pp", self.sigma_pp, (n, n)), ("sigma_pm", self.sigma_pm, (n, m)),
                               ("sigma_mp", self.sigma_mp, (m, n)), ("sigma_mm", self.sigma_mm, (m, m))):
            if fld.shape != shp:
                raise ChainSpecError(f"{name} has shape {fld.shape}, expected {shp}")
        for name, fld in (("sigma_pp", self.sigma_pp), ("sigma_mm", self.sigma_mm)):
            for k in range(fld.shape[0]):
                if not fld.entries[k][k].is_zero:
                    raise ChainSpecError(f"diagonal of {name} must vanish (entry {k},{k})")

    @property
    def n(self) -> int:
        return len(self.lam)

    @property
    def m(self) -> int:
        return len(self.mu)

    @property
    def tau(self) -> float:
        return 1.0 / self.lam[0] + 1.0 / self.mu[0]

    def sigma(self, x) -> np.ndarray:
        """Full ``(n+m) x (n+m)`` coupling matrix at ``x``."""
        top = np.concatenate([self.sigma_pp(x), self.sigma_pm(x)], axis=-1)
        bot = np.concatenate([self.sigma_mp(x), self.sigma_mm(x)], axis=-1)
        return np.concatenate([top, bot], axis=-2)

    @property
    def uncoupled(self) -> bool:
        return all(f.is_zero for f in (self.sigma_pp, self.sigma_pm, self.sigma_mp, self.sigma_mm))

    def without_coupling(self) -> "SubsystemSpec":
        n, m = self.n, self.m
        return SubsystemSpec(self.lam, self.mu, MatrixField.zeros(n, n), MatrixField.zeros(n, m),
                             MatrixField.zeros(m, n), MatrixField.zeros(m, m))


@dataclass(frozen=True)
class BoundaryCoupling:
    Q_ii: np.ndarray
    Q_prev: np.ndarray
    R_ii: np.ndarray
    R_next: np.ndarray

    def __post_init__(self):
        for name in ("Q_ii", "Q_prev", "R_ii", "R_next"):
            arr = np.array(getattr(self, name), dtype=float, ndmin=2)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


def _as_matrix(obj, shape) -> np.ndarray:
    if obj is None:
        return np.zeros(shape)
    arr = np.asarray(obj, dtype=float)
    if arr.ndim == 0:
        arr = np.full(shape, float(arr)) if shape == (1, 1) or arr == 0 else arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(shape) if arr.size == shape[0] * shape[1] else arr.reshape(1, -1)
    return arr


@dataclass(frozen=True)
class ChainSpec:
    subsystems: tuple[SubsystemSpec, ...]
    couplings: tuple[BoundaryCoupling, ...]
    name: str = "chain"
    description: str = ""

    def __post_init__(self):
        object.__setattr__(self, "subsystems", tuple(self.subsystems))
        object.__setattr__(self, "couplings", tuple(self.couplings))
        _check_dimensions(self)

    @property
    def N(self) -> int:
        return len(self.subsystems)

    @property
    def taus(self) -> np.ndarray:
        return np.array([s.tau for s in self.subsystems])

    @property
    def inv_lam1(self) -> np.ndarray:
        """``1/lambda_i^1`` per subsystem (slowest rightward transport time)."""
        return np.array([1.0 / s.lam[0] for s in self.subsystems])

    def to_dict(self) -> dict:
        subs = []
        for s, c in zip(self.subsystems, self.couplings):
            subs.append({
                "lambda": list(s.lam), "mu": list(s.mu),
                "sigma_pp": s.sigma_pp.to_json(), "sigma_pm": s.sigma_pm.to_json(),
                "sigma_mp": s.sigma_mp.to_json(), "sigma_mm": s.sigma_mm.to_json(),
                "Q_ii": c.Q_ii.tolist(), "Q_prev": c.Q_prev.tolist(),
                "R_ii": c.R_ii.tolist(), "R_next": c.R_next.tolist(),
            })
        return {"name": self.name, "description": self.description, "subsystems": subs}

    @classmethod
    def from_dict(cls, obj: dict) -> "ChainSpec":
        try:
            raw = obj["subsystems"]
        except (KeyError, TypeError):
            raise ChainSpecError("chain description needs a 'subsystems' list") from None
        if not raw:
            raise ChainSpecError("chain needs at least one subsystem")
        subs, cpls = [], []
        for i, d in enumerate(raw):
            try:
                lam = tuple(float(v) for v in np.atleast_1d(d["lambda"]))
                mu = tuple(float(v) for v in np.atleast_1d(d["mu"]))
            except KeyError as exc:
                raise ChainSpecError(f"subsystem {i + 1}: missing {exc.args[0]!r}") from None
            n, m = len(lam), len(mu)
            subs.append(SubsystemSpec(
                lam, mu,
                MatrixField.from_json(d.get("sigma_pp"), (n, n)),
                MatrixField.from_json(d.get("sigma_pm"), (n, m)),
                MatrixField.from_json(d.get("sigma_mp"), (m, n)),
                MatrixField.from_json(d.get("sigma_mm"), (m, m)),
            ))
        for i, d in enumerate(raw):
            n, m = subs[i].n, subs[i].m
            n_prev = subs[i - 1].n if i > 0 else n
            m_next = subs[i + 1].m if i + 1 < len(subs) else 0
            q_prev = d.get("Q_prev", np.eye(n) if i == 0 else None)
            if q_prev is None:
                raise ChainSpecError(f"subsystem {i + 1}: missing 'Q_prev'")
            cpls.append(BoundaryCoupling(
                Q_ii=_as_matrix(d.get("Q_ii"), (n, m)),
                Q_prev=_as_matrix(q_prev, (n, n_prev)),
                R_ii=_as_matrix(d.get("R_ii"), (m, n)),
                R_next=_as_matrix(d.get("R_next"), (m, m_next)) if m_next else np.zeros((m, 0)),
            ))
        return cls(tuple(subs), tuple(cpls), obj.get("name", "chain"), obj.get("description", ""))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def without_coupling(self) -> "ChainSpec":
        return ChainSpec(tuple(s.without_coupling() for s in self.subsystems), self.couplings,
                         self.name + "-uncoupled", self.description)

    def perturbed(self, rng: np.random.Generator, pct: float) -> "ChainSpec":
        """Copy with every coupling coefficient scaled by an independent factor in [1-pct, 1+pct].

        ``Q_prev`` of the first subsystem stays the identity (it is the actuator convention).
        """
        subs, cpls = [], []
        draw = lambda shape: 1.0 + pct * rng.uniform(-1.0, 1.0, size=shape)  # noqa: E731
        for i, (s, c) in enumerate(zip(self.subsystems, self.couplings)):
            subs.append(SubsystemSpec(s.lam, s.mu,
                                      s.sigma_pp.scaled(draw(s.sigma_pp.shape)),
                                      s.sigma_pm.scaled(draw(s.sigma_pm.shape)),
                                      s.sigma_mp.scaled(draw(s.sigma_mp.shape)),
                                      s.sigma_mm.scaled(draw(s.sigma_mm.shape))))
            q_prev = c.Q_prev * draw(c.Q_prev.shape) if i > 0 else c.Q_prev
            cpls.append(BoundaryCoupling(c.Q_ii * draw(c.Q_ii.shape), q_prev,
                                         c.R_ii * draw(c.R_ii.shape), c.R_next * draw(c.R_next.shape)))
        return ChainSpec(tuple(subs), tuple(cpls), self.name + "-perturbed", self.description)


def _check_dimensions(spec: ChainSpec) -> None:
    if len(spec.subsystems) != len(spec.couplings):
        raise ChainSpecError("need exactly one boundary coupling per subsystem")
    N = len(spec.subsystems)
    for i, (s, c) in enumerate(zip(spec.subsystems, spec.couplings)):
        tag = f"junction {i + 1}"
        n_prev = spec.subsystems[i - 1].n if i > 0 else s.n
        m_next = spec.subsystems[i + 1].m if i + 1 < N else 0
        expect = {"Q_ii": (s.n, s.m), "Q_prev": (s.n, n_prev), "R_ii": (s.m, s.n), "R_next": (s.m, m_next)}
        for name, shape in expect.items():
            got = getattr(c, name).shape
            if name == "R_next" and i + 1 == N:
                if getattr(c, name).size and np.any(getattr(c, name)):
                    raise ChainSpecError(f"{tag}: last subsystem must have an empty R_next")
                continue
            if got != shape:
                raise ChainSpecError(f"{tag}: {name} has shape {got}, expected {shape}")
    if not np.allclose(spec.couplings[0].Q_prev, np.eye(spec.subsystems[0].n)):
        raise ChainSpecError("junction 1: Q_prev must be the identity (input enters directly)")


# --------------------------------------------------------------------------
# linear algebra helpers

def _full_rank(M: np.ndarray, rank: int) -> bool:
    if M.size == 0:
        return rank == 0
    sv = np.linalg.svd(M, compute_uv=False)
    if sv[0] == 0.0:
        return rank == 0
    return int(np.sum(sv > RANK_RTOL * sv[0])) >= rank


def right_inverse(M) -> np.ndarray:
    """Moore-Penrose right inverse ``M^T (M M^T)^-1`` of a full-row-rank matrix."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not _full_rank(M, M.shape[0]):
        raise np.linalg.LinAlgError(f"matrix of shape {M.shape} is not full row rank")
    return M.T @ np.linalg.inv(M @ M.T)


def left_inverse(M) -> np.ndarray:
    """Moore-Penrose left inverse ``(M^T M)^-1 M^T`` of a full-column-rank matrix."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not _full_rank(M, M.shape[1]):
        raise np.linalg.LinAlgError(f"matrix of shape {M.shape} is not full column rank")
    return np.linalg.inv(M.T @ M) @ M.T


# --------------------------------------------------------------------------
# validation

@dataclass
class ValidationReport:
    assumption1_ok: bool | None
    assumption1_info: str
    assumption2_ok: list[bool]
    assumption3_ok: list[bool]
    tau: list[float]
    cumulative_lambda_delays: list[float]
    startup_time: float
    messages: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(self.assumption2_ok) and all(self.assumption3_ok) and self.assumption1_ok is not False

    def to_dict(self) -> dict:
        return {
            "assumption1_ok": self.assumption1_ok, "assumption1_info": self.assumption1_info,
            "assumption2_ok": self.assumption2_ok, "assumption3_ok": self.assumption3_ok,
            "tau": self.tau, "cumulative_lambda_delays": self.cumulative_lambda_delays,
            "startup_time": self.startup_time, "messages": self.messages,
        }


def validate_chain(spec: ChainSpec, strict: bool = True, open_loop_check: bool = False,
                   nx: int = 41) -> ValidationReport:
    """Check the rank conditions at every junction and compute the delay budget.

    The matrix under both rank conditions is ``Q_prev`` of subsystem ``i >= 2``
    (the gain applied to ``u_{i-1}(t, 1)``): it must have rank ``n_i`` (right
    inverse, controllability) and rank ``n_{i-1}`` (left inverse, observability).
    With ``strict`` a failing rank test raises :class:`AssumptionError`.
    """
    _check_dimensions(spec)
    a2, a3, msgs = [], [], []
    for i in range(1, spec.N):
        Q = spec.couplings[i].Q_prev
        ok2 = _full_rank(Q, spec.subsystems[i].n)
        ok3 = _full_rank(Q, spec.subsystems[i - 1].n)
        a2.append(ok2)
        a3.append(ok3)
        if not ok2:
            msgs.append(f"junction {i + 1}: Q_prev (shape {Q.shape}) has rank < n_{i + 1}={spec.subsystems[i].n}")
        if not ok3:
            msgs.append(f"junction {i + 1}: Q_prev (shape {Q.shape}) has rank < n_{i}={spec.subsystems[i - 1].n}")
    taus = [float(t) for t in spec.taus]
    cum = [float(c) for c in np.cumsum(spec.inv_lam1)]
    startup = float(max(spec.inv_lam1) + max(taus) + (cum[-2] if spec.N > 1 else 0.0))
    a1, a1_info = None, "not checked"
    if open_loop_check:
        a1, rate = check_assumption1(spec, nx=nx)
        a1_info = f"fitted decay rate {rate:.4g} 1/s over horizon {4 * sum(taus):.4g} s (sufficient-only diagnostic)"
        if not a1:
            msgs.append("open loop without in-domain coupling does not decay")
    report = ValidationReport(a1, a1_info, a2, a3, taus, cum, startup, msgs)
    if strict and not (all(a2) and all(a3)):
        raise AssumptionError("; ".join(msgs))
    return report


def check_assumption1(spec: ChainSpec, horizon: float | None = None, nx: int = 41,
                      seed: int = 0, factor: float = 0.9) -> tuple[bool, float]:
    """Empirical test that the chain with every coupling field zeroed is stable.

    Simulates from random bounded data with zero input and reports whether the
    total L2 norm shrank by ``factor`` over the horizon, plus the decay rate
    fitted to ``log ||state||`` (negative means decay).
    """
    from .simulator import Grid, init_state, simulate

    total_tau = float(np.sum(spec.taus))
    if horizon is None:
        horizon = 4.0 * total_tau
    if horizon < 2.0 * total_tau:
        raise ConfigurationError(f"horizon {horizon} shorter than 2*sum(tau)={2 * total_tau:.4g}")
    bare = spec.without_coupling()
    grid = Grid.for_chain(bare, nx)
    state = init_state(bare, grid, {"kind": "random", "seed": seed})
    traj = simulate(bare, None, horizon, grid, state=state)
    norms = traj.norm_total
    n0 = norms[0]
    if n0 == 0:
        return True, -np.inf
    final = norms[-1]
    mask = (traj.t > horizon / 2) & (norms > 1e-14 * n0)
    if mask.sum() > 2:
        rate = float(np.polyfit(traj.t[mask], np.log(norms[mask]), 1)[0])
    else:
        rate = -np.inf
    return bool(final <= factor * n0), rate
