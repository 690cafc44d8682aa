"""Shared fixtures: preset chain, cached kernels and operators per mesh, acceptance report."""
from __future__ import annotations

import functools

import numpy as np
import pytest

from hypchain import ChainSpec, Grid
from hypchain.config import load_preset
from hypchain.kernels import compute_chain_kernels
from hypchain.transforms import build_chain_operators

_ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@functools.lru_cache(maxsize=None)
def preset_spec(name: str = "paper-sec6") -> ChainSpec:
    return ChainSpec.from_dict(load_preset(name))


@functools.lru_cache(maxsize=None)
def preset_setup(nx: int, name: str = "paper-sec6"):
    """``(spec, grid, kernels, ops)`` for a preset on an ``nx``-point mesh."""
    spec = preset_spec(name)
    grid = Grid.for_chain(spec, nx)
    kernels = compute_chain_kernels(spec, nx)
    ops = build_chain_operators(kernels, grid.dt, nx)
    return spec, grid, kernels, ops


def scalar_sub(q=0.5, r=0.5, r_next=None, sigma=0.0, lam=1.0, mu=1.0, q_prev=1.0):
    """Description of a 1+1 subsystem with constant coefficients."""
    d = {"lambda": [lam], "mu": [mu], "sigma_pp": [[0.0]], "sigma_pm": [[sigma]], "sigma_mp": [[sigma]],
         "sigma_mm": [[0.0]], "Q_ii": [[q]], "Q_prev": [[q_prev]], "R_ii": [[r]]}
    if r_next is not None:
        d["R_next"] = [[r_next]]
    return d


def ls_order(hs, errs) -> float:
    """Least-squares slope of ``log err`` against ``log h``."""
    return float(np.polyfit(np.log(hs), np.log(errs), 1)[0])


@pytest.fixture(scope="session")
def setup_for():
    return preset_setup


@pytest.fixture
def acceptance():
    """Record ``(criterion, ok, detail)``; every recorded line is printed in the terminal summary."""
    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        print(line)
        _ACCEPTANCE[name] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[0][1:])):
        ok, detail = _ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
