import numpy as np
import pytest

from hypchain import BoundaryTrace, ChainSpec, ConfigurationError, Grid, simulate
from hypchain.controller import (ChainController, SignalLayout, SignalRecord, StateFeedback, cumulative_delays,
                                 default_activation_time, record_lookback, conservative_activation_time)
from hypchain.kernels import compute_chain_kernels
from hypchain.observer import LowPassFilter
from hypchain.transforms import build_chain_operators

from conftest import preset_setup, preset_spec, scalar_sub


@pytest.fixture(scope="module")
def setup51():
    return preset_setup(51)


def test_layout_of_preset():
    lay = SignalLayout.for_chain(preset_spec())
    assert lay.width == 15
    assert lay.a0(1) == slice(5, 7) and lay.a1(1) == slice(7, 9) and lay.v0(1) == slice(9, 10)


def test_delay_budget():
    spec = preset_spec()
    np.testing.assert_allclose(cumulative_delays(spec), [0.0, 1.0, 2.0])
    assert conservative_activation_time(spec) == pytest.approx(2 * spec.taus.sum() + 2.0)


def test_default_activation_time_on_grid():
    spec, grid, _, ops = preset_setup(101)
    t = default_activation_time(spec, ops, grid.dt)
    assert t == pytest.approx(3.1625)
    assert t >= record_lookback(ops, spec, grid.dt)
    assert abs(t / grid.dt - round(t / grid.dt)) < 1e-9


def test_signal_record_grows():
    rec = SignalRecord(3, capacity=4)
    for k in range(10):
        rec.row(k)[:] = k
    assert rec.count == 10
    np.testing.assert_array_equal(rec.Z[7], [7, 7, 7])


def test_activation_before_validity_is_rejected(setup51):
    spec, grid, _, ops = setup51
    with pytest.raises(ConfigurationError, match="precedes"):
        StateFeedback(spec, ops, grid.dt, t_act=0.5)


def test_blend_is_a_raised_cosine(setup51):
    spec, grid, _, ops = setup51
    core = ChainController(spec, ops, grid.dt, 0.0, 4.0, ramp=1.0)
    k0 = core.k_act
    assert core.blend(k0 - 1) == 0.0
    assert core.blend(k0) == 0.0
    half = k0 + int(round(0.5 / grid.dt))
    assert core.blend(half) == pytest.approx(0.5)
    assert core.blend(k0 + int(round(1.0 / grid.dt)) + 3) == 1.0
    assert ChainController(spec, ops, grid.dt, 0.0, 4.0).blend(k0) == 1.0


def test_zero_state_gives_zero_input(setup51):
    spec, grid, _, ops = setup51
    sf = StateFeedback(spec, ops, grid.dt)
    tr = simulate(spec, sf, sf.t_act + 1.0, grid)
    assert np.all(tr.U == 0.0)


def test_input_is_zero_before_activation_and_linear(setup51):
    spec, grid, _, ops = setup51
    runs = []
    for amp in (1.0, -2.5):
        sf = StateFeedback(spec, ops, grid.dt)
        runs.append(simulate(spec, sf, sf.t_act + 1.0, grid, ic={"kind": "sine", "amplitude": amp}))
    k_act = int(round(sf.t_act / grid.dt))
    assert np.all(runs[0].U[:k_act] == 0.0)
    assert np.abs(runs[0].U[k_act + 20:]).max() > 0
    np.testing.assert_allclose(runs[1].U, -2.5 * runs[0].U, atol=1e-10)


def test_control_is_causal(setup51):
    """Perturbing the plant at step ``k0`` leaves every earlier input unchanged."""
    spec, grid, _, ops = setup51
    k0 = int(round(4.0 / grid.dt))

    def kick(k, st):
        if k == k0:
            st.v[2][:, 10] += 1.0

    outs = []
    for hook in (None, kick):
        sf = StateFeedback(spec, ops, grid.dt)
        outs.append(simulate(spec, sf, 5.0, grid, ic={"kind": "sine"}, on_step=hook).U)
    np.testing.assert_array_equal(outs[0][:k0 + 1], outs[1][:k0 + 1])
    assert np.abs(outs[0][k0 + 1:] - outs[1][k0 + 1:]).max() > 0


def test_single_uncoupled_subsystem_cancels_reflection():
    spec = ChainSpec.from_dict({"subsystems": [scalar_sub(q=0.7, r=0.9)]})
    grid = Grid.for_chain(spec, 21)
    ops = build_chain_operators(compute_chain_kernels(spec, 21), grid.dt, 21)
    sf = StateFeedback(spec, ops, grid.dt, ramp=0.0)
    T = sf.t_act + spec.taus.sum()
    tr = simulate(spec, sf, T, grid, ic={"kind": "sine"})
    k = int(round(sf.t_act / grid.dt))
    np.testing.assert_allclose(tr.U[k:, 0], -0.7 * tr.boundary[0]["v0"][k:, 0], atol=1e-14)
    assert tr.norm_total[-1] <= 1e-13 * tr.norm_total[0]


def test_filtered_output_is_recorded(setup51):
    spec, _, kernels, _ = setup51
    grid = Grid.for_chain(spec, 51, dt=0.004)
    ops = build_chain_operators(kernels, grid.dt, 51)
    filt = LowPassFilter(2, grid.dt, 125.0, 4)
    sf = StateFeedback(spec, ops, grid.dt, output_filter=filt)
    tr = simulate(spec, sf, sf.t_act + 0.5, grid, ic={"kind": "sine"})
    np.testing.assert_array_equal(sf.core.Uhat[0].Z[:len(tr.t)], tr.U)
    traces = sf.core.traces()
    assert isinstance(traces["Uhat_1"], BoundaryTrace)
    np.testing.assert_allclose(traces["Uhat_1"].sample(tr.t[-1]), tr.U[-1])


def test_delayed_actuation_is_compensated(setup51):
    spec, grid, _, ops = setup51
    delay = 0.1
    sf = StateFeedback(spec, ops, grid.dt, input_delay=delay)
    settle = sf.t_act + 2 * spec.taus.sum() + spec.taus.max()
    tr = simulate(spec, sf, settle, grid, ic={"kind": "sine"}, input_delay=delay)
    assert tr.norm_at(settle) <= 0.05 * tr.norm_at(sf.t_act)
