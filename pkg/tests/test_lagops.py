import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypchain.lagops import LagOp, lag_quadrature, split_lag


def _hist(rng, T=60, d=2):
    return {"a": rng.normal(size=(T, d)), "b": rng.normal(size=(T, 1))}


def test_point_reads_lagged_sample():
    rng = np.random.default_rng(0)
    h = _hist(rng)
    M = np.array([[1.0, 2.0], [0.0, -1.0]])
    op = LagOp.point("a", M, 3)
    np.testing.assert_allclose(op.apply(h, 20), M @ h["a"][17])


def test_fractional_lag_interpolates():
    h = {"a": np.arange(30.0)[:, None]}
    op = LagOp.point("a", [[1.0]], 2.25)
    np.testing.assert_allclose(op.apply(h, 10), [7.75])


def test_apply_outside_history_raises():
    op = LagOp.point("a", np.eye(2), 5)
    with pytest.raises(IndexError, match="outside history"):
        op.apply({"a": np.zeros((10, 2))}, 3)


def test_lag_quadrature_exact_for_linear_data():
    dt = 0.05
    for sigma in (0.5, 0.53):
        lags, w, s = lag_quadrature(sigma, dt)
        assert np.sum(w) == pytest.approx(sigma)
        # linear data is read at the sample grid: exact for phi(t - s) = t - s at t = 0
        approx = np.sum(w * (-(lags * dt)))
        assert approx == pytest.approx(-sigma**2 / 2, rel=1e-12, abs=1e-12)
    assert lag_quadrature(0.0, dt)[0].size == 0


def test_split_lag_tolerates_roundoff():
    assert split_lag(3.0 - 1e-12) == (3, 0.0)
    lo, frac = split_lag(2.5)
    assert lo == 2 and frac == pytest.approx(0.5)


def test_substitute_composes():
    rng = np.random.default_rng(1)
    h = _hist(rng)
    inner = LagOp.point("b", [[2.0], [1.0]], 1)
    outer = LagOp.point("a", np.eye(2), 2) + LagOp.point("b", [[1.0], [0.0]], 0)
    comp = outer.substitute("a", inner)
    assert "a" not in comp.terms
    k = 30
    expected = np.array([2.0, 1.0]) * h["b"][k - 3, 0] + np.array([h["b"][k, 0], 0.0])
    np.testing.assert_allclose(comp.apply(h, k), expected)


def test_batched_mix_and_contract():
    rng = np.random.default_rng(2)
    h = _hist(rng)
    W = rng.normal(size=(3, 4, 2, 2))
    op = LagOp(2, (3,)).add_weights("a", 1, W)
    M = rng.normal(size=(5, 1, 3, 2))
    direct = np.einsum("pnbo,bo->pn", M, op.apply(h, 25))
    np.testing.assert_allclose(op.mix(M).apply(h, 25), direct)
    C = rng.normal(size=(3, 1, 2))
    np.testing.assert_allclose(op.contract(C).apply(h, 25), np.einsum("bno,bo->n", C, op.apply(h, 25)))


def test_rows_stack_and_trim():
    op = LagOp.point("a", np.array([[1.0, 0.0], [0.0, 2.0]]), 1)
    both = op.rows(slice(0, 1)).stack_out(op.rows(slice(1, 2)))
    h = {"a": np.arange(20.0).reshape(10, 2)}
    np.testing.assert_allclose(both.apply(h, 5), op.apply(h, 5))
    padded = LagOp(1).add_weights("a", 0, np.zeros((5, 1, 2)))
    padded.terms["a"][1][2, 0, 0] = 1.0
    assert padded.trimmed().span("a") == (2, 2)
    assert op.lag0("a").shape == (2, 2) and np.all(op.lag0("a") == 0)
    np.testing.assert_array_equal(LagOp.point("a", np.eye(2)).without_lag0("a").apply(h, 5), [0.0, 0.0])


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 8.0), st.floats(0.0, 8.0), st.integers(0, 1000))
def test_shift_is_a_delay(lag, shift, seed):
    rng = np.random.default_rng(seed)
    h = _hist(rng)
    base = LagOp.point("a", rng.normal(size=(2, 2)), lag)
    k = 30
    moved = base.shift(shift).apply(h, k)
    # reading the signal interpolated at t - shift through the base operator
    lo, frac = split_lag(shift)
    ref = (1 - frac) * base.apply(h, k - lo) + frac * base.apply(h, k - lo - 1)
    if frac == 0.0 or split_lag(lag)[1] == 0.0:
        np.testing.assert_allclose(moved, ref, atol=1e-12)
    # combined linear interpolation weights always sum to one
    total = sum(W.sum(axis=0) for _, W in base.shift(shift).terms.values())
    np.testing.assert_allclose(total, sum(W.sum(axis=0) for _, W in base.terms.values()), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1000), st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(seed, c1, c2):
    rng = np.random.default_rng(seed)
    h = _hist(rng)
    A = LagOp(2).add_weights("a", 0, rng.normal(size=(4, 2, 2)))
    B = LagOp(2).add_weights("a", 2, rng.normal(size=(3, 2, 2))).add_weights("b", 1, rng.normal(size=(2, 2, 1)))
    combo = A.scaled(c1) + B.scaled(c2)
    np.testing.assert_allclose(combo.apply(h, 40), c1 * A.apply(h, 40) + c2 * B.apply(h, 40), atol=1e-10)
    np.testing.assert_allclose((A - A).apply(h, 40), 0.0, atol=1e-12)
