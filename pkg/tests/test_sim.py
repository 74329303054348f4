"""Integrators, pacing, and dataset generation."""

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gatenet import sim
from gatenet.models import get_model
from gatenet.models.core import (
    CLASSIC_GATE, VOLTAGE, GateSpec, IonicModel, StateLayout, StatePartition,
)


def _toy_model(steady=1.0, tau=1.0, rhs=None):
    """One voltage plus one gate with constant relaxation law."""
    layout = StateLayout(names=("V", "m"), kinds=(VOLTAGE, CLASSIC_GATE))
    partition = StatePartition(observables=(0,), gnn_gates=(1,), lstm_vars=(0,))
    if rhs is None:
        def rhs(u, t, i_stim, scales):
            return np.zeros_like(np.asarray(u, dtype=float))
    return IonicModel(
        key="toy",
        layout=layout,
        partition=partition,
        gates={1: GateSpec(steady_state=lambda v: steady + 0 * v,
                           tau=lambda v: tau + 0 * v)},
        currents=(),
        rhs=rhs,
        c_m=1.0,
        initial_state=np.array([-65.0, 0.0]),
    )


def _quiet(cl=100.0):
    return sim.PacingProtocol(cycle_length=cl, stimulus_amplitude=0.0,
                              total_duration=1000.0)


# ------------------------------------------------------------------ protocol

def test_protocol_validation():
    with pytest.raises(ValueError):
        sim.PacingProtocol(cycle_length=1.0, stimulus_duration=2.0)
    with pytest.raises(ValueError):
        sim.PacingProtocol(cycle_length=500.0, total_duration=100.0)


def test_stimulus_timing():
    p = sim.PacingProtocol(cycle_length=300.0, stimulus_amplitude=-52.0,
                           stimulus_duration=1.0, total_duration=600.0)
    assert p.stimulus(0.0) == -52.0
    assert p.stimulus(0.5) == -52.0
    assert p.stimulus(1.0) == 0.0
    assert p.stimulus(300.2) == -52.0
    np.testing.assert_array_equal(p.stimulus(np.array([0.0, 2.0])), [-52.0, 0.0])


# ------------------------------------------------------------ one-step update

def test_rush_larsen_gate_fixed_point():
    model = _toy_model(steady=0.7, tau=3.0)
    u = np.array([-65.0, 0.7])
    out = sim.rush_larsen_step(u, 0.0, 1.0, model, _quiet())
    assert out[1] == pytest.approx(0.7, abs=1e-15)


def test_rush_larsen_exact_exponential():
    model = _toy_model(steady=1.0, tau=1.0)
    out = sim.rush_larsen_step(np.array([-65.0, 0.0]), 0.0, 1.0, model, _quiet())
    assert out[1] == pytest.approx(1.0 - np.exp(-1.0), rel=1e-12)
    assert out[1] == pytest.approx(0.632121, abs=1e-6)


def test_rush_larsen_first_order_consistency(hh_model):
    u = np.array(hh_model.initial_state, dtype=float)
    u[0] = -50.0  # off equilibrium so derivatives are nonzero
    dt = 1e-6
    out = sim.rush_larsen_step(u, 10.0, dt, hh_model, _quiet())
    np.testing.assert_allclose((out - u) / dt, hh_model.derivative(u),
                               rtol=1e-4, atol=1e-8)


def test_rush_larsen_rejects_bad_dt(hh_model):
    with pytest.raises(ValueError):
        sim.rush_larsen_step(hh_model.initial_state, 0.0, 0.0, hh_model, _quiet())


def test_rush_larsen_diverged_error_names_variable():
    def bad_rhs(u, t, i_stim, scales):
        du = np.zeros_like(np.asarray(u, dtype=float))
        du[0] = np.inf
        return du
    model = _toy_model(rhs=bad_rhs)
    with pytest.raises(sim.IntegrationDivergedError, match="'V'"):
        sim.rush_larsen_step(model.initial_state, 0.0, 1.0, model, _quiet())


@settings(max_examples=200, deadline=None)
@given(
    v=st.floats(min_value=-100.0, max_value=60.0),
    gates=st.tuples(*[st.floats(min_value=0.0, max_value=1.0)] * 3),
    dt=st.floats(min_value=1e-4, max_value=1.0),
)
def test_gate_range_preserved(v, gates, dt):
    model = get_model("hh1952")
    u = np.array([v, *gates])
    out = sim.rush_larsen_step(u, 0.0, dt, model, _quiet())
    assert np.all(out[1:] >= 0.0) and np.all(out[1:] <= 1.0)


# ------------------------------------------------------------------- oracles

def test_reference_solve_produces_action_potential(hh_model):
    p = sim.PacingProtocol(cycle_length=100.0, total_duration=100.0)
    traj = sim.reference_solve(hh_model, p, dt_out=0.5)
    assert traj.row("V").max() > 0.0  # upstroke overshoot


def test_reference_solve_quiescent_without_stimulus(hh_model):
    traj = sim.reference_solve(hh_model, _quiet(cl=1000.0), dt_out=1.0)
    v = traj.row("V")
    assert np.all(np.abs(v - v[0]) < 1.0)


def test_reference_solve_deterministic(hh_model):
    p = sim.PacingProtocol(cycle_length=50.0, total_duration=50.0)
    a = sim.reference_solve(hh_model, p, dt_out=0.5)
    b = sim.reference_solve(hh_model, p, dt_out=0.5)
    np.testing.assert_array_equal(a.values, b.values)


def rush_larsen_vs_rk4_max_error(model, dt=0.01, span=50.0):
    p = sim.PacingProtocol(cycle_length=span, total_duration=span)
    oracle = sim.reference_solve(model, p, dt_out=0.5)
    mine = sim.solve_rush_larsen(model, p, dt_out=0.5, inner_dt=dt)
    return float(np.abs(mine.row("V") - oracle.row("V")).max()), mine


def test_rush_larsen_matches_rk4_on_action_potential(hh_model):
    err, mine = rush_larsen_vs_rk4_max_error(hh_model)
    assert err < 1.0
    gates = mine.values[1:]
    assert np.all(gates >= 0.0) and np.all(gates <= 1.0)


# ------------------------------------------------------------------ datasets

def test_dataset_shape_and_split(hh_dataset):
    assert hh_dataset.l == 3
    assert [s.cycle_length for s in hh_dataset.segments] == [300.0, 400.0, 500.0]
    for seg in hh_dataset.segments:
        assert seg.n_samples == 1000
        assert seg.dt == 1.0
        assert seg.t0 == 500.0
    assert len(hh_dataset.train_indices) == 2
    assert len(hh_dataset.validation_indices) == 1
    assert set(hh_dataset.train_indices) | set(hh_dataset.validation_indices) == {0, 1, 2}


def test_dataset_deterministic(hh_model, hh_dataset):
    again = sim.generate_dataset(hh_model, [300.0, 400.0, 500.0], seed=7,
                                 total_ms=1500.0, discard_ms=500.0)
    assert again.train_indices == hh_dataset.train_indices
    for a, b in zip(again.segments, hh_dataset.segments):
        np.testing.assert_array_equal(a.values, b.values)


def test_resampling_keeps_exact_integrator_states(hh_model, hh_dataset):
    p = sim.PacingProtocol(cycle_length=300.0, total_duration=300.0)
    fine = sim.solve_rush_larsen(hh_model, p, dt_out=0.02)
    coarse = sim.solve_rush_larsen(hh_model, p, dt_out=1.0)
    # every 50th fine sample is the same state, bit for bit (no interpolation)
    np.testing.assert_array_equal(coarse.values, fine.values[:, ::50])
    # batched dataset generation agrees with the single-trajectory path
    # (different array shapes may round differently in the last ulp)
    p2 = sim.PacingProtocol(cycle_length=400.0, total_duration=1500.0)
    direct = sim.solve_rush_larsen(hh_model, p2, dt_out=1.0, discard=500.0)
    np.testing.assert_allclose(hh_dataset.segments[1].values, direct.values,
                               rtol=0, atol=1e-12)


def test_split_overlap_rejected(hh_dataset):
    with pytest.raises(ValueError):
        dataclasses.replace(hh_dataset, train_indices=(0, 1), validation_indices=(1, 2))


def test_empty_cycle_lengths_rejected(hh_model):
    with pytest.raises(ValueError):
        sim.generate_dataset(hh_model, [], seed=0)


def test_compiled_and_generic_paths_agree(tnnp_model):
    generic = dataclasses.replace(tnnp_model, fast_stepper=None)
    kw = dict(seed=0, total_ms=700.0, discard_ms=0.0)
    fast_ds = sim.generate_dataset(tnnp_model, [500.0, 650.0], **kw)
    slow_ds = sim.generate_dataset(generic, [500.0, 650.0], **kw)
    for a, b in zip(fast_ds.segments, slow_ds.segments):
        assert np.abs(a.values - b.values).max() < 1e-9


def test_dataset_round_trip(tmp_path, hh_dataset):
    sim.save_dataset(hh_dataset, tmp_path / "ds")
    loaded = sim.load_dataset(tmp_path / "ds")
    assert loaded.train_indices == hh_dataset.train_indices
    assert loaded.seed == hh_dataset.seed
    assert loaded.scenario == hh_dataset.scenario
    for a, b in zip(loaded.segments, hh_dataset.segments):
        assert a.cycle_length == b.cycle_length
        assert a.t0 == b.t0
        np.testing.assert_array_equal(a.values, b.values)  # repr round trip


def test_observables_only(hh_model, hh_dataset):
    obs = sim.observables_only(hh_dataset, hh_model)
    assert obs.segments[0].names == ("V",)
    np.testing.assert_array_equal(obs.segments[0].values[0],
                                  hh_dataset.segments[0].row("V"))


def test_perturbed_model_builder():
    model = sim.perturbed_model("tnnp2004", "long_qt")
    assert model.current("I_Kr").conductance_scale == 0.5
    base = sim.perturbed_model("tnnp2004", "base")
    assert base.current("I_Kr").conductance_scale == 1.0
