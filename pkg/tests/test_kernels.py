import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypchain import ChainSpec
from hypchain.kernels import (KernelDivergenceError, F_interior_residual, boundary_residuals, compute_chain_kernels,
                              compute_kernels, interior_residual, load_kernels, save_kernels)

from conftest import preset_setup, preset_spec, scalar_sub


@pytest.fixture(scope="module")
def kernels51():
    return preset_setup(51)[2]


def test_G_strictly_upper_and_node_relations(kernels51):
    for ks in kernels51:
        assert ks.G.shape == (51, 2, 2)
        assert np.all(np.tril(ks.G) == 0.0)
        res = boundary_residuals(ks)
        assert max(res.values()) <= 1e-8, res


def test_iteration_converged(kernels51):
    for ks in kernels51:
        assert ks.last_update < 1e-10
        assert 1 < ks.iterations < 200


def test_interior_residual_shrinks_with_mesh():
    spec = preset_spec()
    coarse = compute_kernels(spec.subsystems[1], spec.couplings[1], 41)
    fine = compute_kernels(spec.subsystems[1], spec.couplings[1], 81)
    rc, rf = interior_residual(coarse)["max"], interior_residual(fine)["max"]
    assert rf < 0.7 * rc
    assert rf < 0.5 / 80


def test_F_data_and_support(kernels51):
    ks = kernels51[0]
    x = np.linspace(0, 1, 51)
    want = -np.einsum("ikm,m,ml->ikl", ks.K[:, -1, :2, 2:], np.asarray(ks.sub.mu), ks.coupling.R_next)
    np.testing.assert_allclose(ks.F(x, np.zeros_like(x)), want, atol=1e-14)
    assert np.all(ks.F(np.array([0.2]), np.array([0.5])) == 0.0)
    assert kernels51[-1].F is None
    assert F_interior_residual(ks) < 1e-2


def test_scalar_diagonal_oracle():
    sub = scalar_sub(q=0.3, r=0.6, sigma=0.7, lam=1.5, mu=0.5)
    sub["sigma_mp"] = [[-0.4]]
    spec = ChainSpec.from_dict({"subsystems": [sub]})
    ks = compute_kernels(spec.subsystems[0], spec.couplings[0], 41)
    d = np.einsum("iiab->iab", ks.K)
    np.testing.assert_allclose(d[:, 0, 1], 0.7 / 2.0, atol=1e-12)
    np.testing.assert_allclose(d[:, 1, 0], 0.4 / 2.0, atol=1e-12)
    assert ks.G.shape == (41, 1, 1) and np.all(ks.G == 0)


def test_uncoupled_subsystem_has_zero_kernels():
    spec = ChainSpec.from_dict({"subsystems": [scalar_sub(0.5, 0.8, 0.4), scalar_sub(0.2, 0.3)]})
    for ks in compute_chain_kernels(spec, 31):
        assert np.all(ks.K == 0) and np.all(ks.G == 0)
        assert ks.F is None or np.all(ks.F(ks.x, 0.5 * ks.x) == 0)


def test_divergence_is_reported():
    spec = preset_spec()
    with pytest.raises(KernelDivergenceError, match="stalled after 2"):
        compute_kernels(spec.subsystems[0], spec.couplings[0], 21, max_iter=2)


@settings(max_examples=15, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5), st.floats(-0.9, 0.9), st.floats(0.5, 2.0))
def test_scalar_node_relations_hold(spm, smp, r, mu):
    sub = scalar_sub(q=0.2, r=r, mu=mu)
    sub["sigma_pm"], sub["sigma_mp"] = [[spm]], [[smp]]
    spec = ChainSpec.from_dict({"subsystems": [sub]})
    ks = compute_kernels(spec.subsystems[0], spec.couplings[0], 21)
    assert max(boundary_residuals(ks).values()) <= 1e-10
    assert np.all(np.isfinite(ks.K))


def test_cache_round_trip(tmp_path, kernels51):
    spec = preset_spec()
    path = tmp_path / "k.npz"
    save_kernels(path, spec, kernels51)
    back = load_kernels(path, spec, 51)
    assert back is not None
    for a, b in zip(kernels51, back):
        np.testing.assert_array_equal(a.K, b.K)
        np.testing.assert_array_equal(a.G, b.G)
        if a.F is not None:
            x = np.linspace(0, 1, 9)
            np.testing.assert_array_equal(a.F(x, 0.3 * x), b.F(x, 0.3 * x))
    assert load_kernels(path, spec, 101) is None
    other = spec.perturbed(np.random.default_rng(0), 0.01)
    assert load_kernels(path, other, 51) is None
    assert load_kernels(tmp_path / "missing.npz", spec, 51) is None
