import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypchain import BoundaryTrace, WindowError


def _filled(dt=0.1, n=50, retention=1.0, fn=lambda t: [np.sin(t), t]):
    tr = BoundaryTrace("y", 2, retention, dt)
    for k in range(n):
        tr.record(k * dt, fn(k * dt))
    return tr


def test_exact_at_stamps_linear_between():
    tr = _filled(fn=lambda t: [2 * t + 1, -t])
    np.testing.assert_allclose(tr.sample(4.5), [10.0, -4.5])
    np.testing.assert_allclose(tr.sample(4.55), [10.1, -4.55])
    np.testing.assert_allclose(tr.sample(np.array([4.0, 4.9])), [[9.0, -4.0], [10.8, -4.9]])


def test_retention_drops_old_samples():
    tr = _filled(n=100, retention=1.0)
    t0, t1 = tr.span
    assert t1 == pytest.approx(9.9)
    assert t0 <= t1 - 1.0 < t0 + 0.1 + 1e-12
    with pytest.raises(WindowError, match="outside stored range"):
        tr.sample(t1 - 1.5)
    with pytest.raises(WindowError):
        tr.sample(t1 + 0.05)


def test_stamps_must_increase():
    tr = _filled(n=3)
    with pytest.raises(ValueError, match="non-increasing"):
        tr.record(0.2, [0, 0])


def test_constant_window_norm():
    tr = _filled(fn=lambda t: [3.0, 4.0], n=40)
    assert tr.window_norm(3.85, 0.75) == pytest.approx(25.0 * 0.75)
    assert tr.window_norm(3.2, -0.5) == pytest.approx(25.0 * 0.5)
    assert tr.window_norm(3.5, 0.0) == 0.0


def test_growing_buffer_without_dt():
    tr = BoundaryTrace("z", 1, 1000.0)
    for k in range(500):
        tr.record(float(k), [k])
    assert len(tr) == 500
    np.testing.assert_allclose(tr.sample(123.5), [123.5])


def test_csv(tmp_path):
    tr = _filled(n=5)
    tr.to_csv(tmp_path / "y.csv")
    rows = list(csv.reader(open(tmp_path / "y.csv")))
    assert rows[0] == ["t", "y[0]", "y[1]"]
    assert len(rows) == 6
    assert float(rows[3][2]) == pytest.approx(0.2)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 0.2), st.integers(20, 80), st.floats(0.0, 1.0))
def test_linear_signals_are_reproduced(dt, n, frac):
    tr = BoundaryTrace("lin", 1, dt * n, dt)
    for k in range(n):
        tr.record(k * dt, [1.5 * k * dt - 2.0])
    t0, t1 = tr.span
    t = t0 + frac * (t1 - t0)
    np.testing.assert_allclose(tr.sample(t), [1.5 * t - 2.0], atol=1e-10)
