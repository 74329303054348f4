"""End-to-end acceptance gate; one PASS/FAIL line per criterion.

The expensive artifacts (desk-scale dataset, first-pass training,
scenario retrains) are built once per session and shared. Desk scale:
21 cycle lengths 300:25:800 and 30 first-pass epochs; scenario retrains
use 6 cycle lengths 300:100:800.
"""

import sys
import time

import numpy as np
import pytest

from gatenet import cli, export, nn, sim, train
from gatenet.models import get_model, with_perturbation

DESK_CYCLE_LENGTHS = [300.0 + 25.0 * i for i in range(21)]
SCENARIO_CYCLE_LENGTHS = DESK_CYCLE_LENGTHS
EVAL_CL = 600.0
RETRAIN_EPOCHS = 10
RETRAIN_ETA = 2e-3


def _report(name, ok, detail):
    import conftest

    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    print(line, file=sys.stderr, flush=True)
    conftest.CRITERION_LINES.append(line)
    assert ok, line


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Desk-scale dataset plus a 30-epoch first-pass network."""
    model = get_model("tnnp2004")
    dataset = sim.generate_dataset(model, DESK_CYCLE_LENGTHS, seed=0)
    # 3e-4 instead of the 1e-3 default: at 1e-3 the gradient noise injected
    # by the aliased stimulus-onset samples (see criterion 5) traps the
    # L-type activation gate in a poor local fit (~0.024 one-step RMSE)
    cfg = train.TrainConfig(epochs=30, learning_rate=3e-4, seed=0)
    init = nn.init_params(
        model, dt=dataset.segments[0].dt, seed=cfg.seed,
        norm=nn.fit_normalization(model, dataset.train_segments))
    init_loss = train.validation_loss_first_pass(
        init, model, dataset.train_segments, cfg)
    t0 = time.time()
    params, report = train.train_first_pass(dataset, model, cfg)
    elapsed = time.time() - t0
    # same forward-only measurement as init_loss, so the ratio is like-for-like
    final_loss = train.validation_loss_first_pass(
        params, model, dataset.train_segments, cfg)
    return dict(model=model, dataset=dataset, params=params, report=report,
                elapsed=elapsed, init_loss=init_loss, final_loss=final_loss)


@pytest.fixture(scope="session")
def retrained(desk):
    """Gating-cell retrains on observable data per scenario, plus the
    long-qt run at the weak drift penalty."""
    model = desk["model"]
    params1 = desk["params"]
    out = {}
    for scenario in ("base", "long_qt", "short_qt", "ito"):
        sim_model = model if scenario == "base" else with_perturbation(model, scenario)
        ds = sim.generate_dataset(sim_model, SCENARIO_CYCLE_LENGTHS, seed=1,
                                  scenario=scenario)
        obs = sim.observables_only(ds, model)
        cfg = train.TrainConfig(epochs=RETRAIN_EPOCHS, learning_rate=1e-4,
                                eta=RETRAIN_ETA, seed=0,
                                freeze=train.FREEZE_SECOND_PASS)
        p, _ = train.train_second_pass(params1, obs, model, cfg)
        out[scenario] = {"params": p, "obs": obs}
        if scenario == "long_qt":
            weak = train.TrainConfig(epochs=RETRAIN_EPOCHS, learning_rate=1e-4,
                                     eta=1e-4, seed=0,
                                     freeze=train.FREEZE_SECOND_PASS)
            p_weak, _ = train.train_second_pass(params1, obs, model, weak)
            out["long_qt_weak_eta"] = {"params": p_weak, "obs": obs}
    return out


def _gate_clamped_currents(params, ref_params, model, ref_traj):
    """Currents from a network's gate dynamics under an action-potential clamp.

    Both networks are driven by the same reference paced waveform and their
    gate outputs replace the model gates in the reference state, so a paired
    comparison isolates what retraining did to the gate laws from the chaos
    a free-running trajectory adds on top.
    """
    from gatenet.models.core import eval_currents
    obs_names = tuple(model.layout.names[i] for i in params.observables)
    gnn_idx = list(params.gnn_gates)
    vn = params.norm.norm_obs(ref_traj.rows(obs_names).T)
    h0 = train._initial_gate_state(ref_params, vn[0])
    state = nn.fresh_state(params, gnn_h=h0)
    gates = np.empty((len(vn), len(gnn_idx)))
    for i in range(len(vn)):
        gates[i], _, _ = nn.forward_step(params.tensors, vn[i], state)
    u_seq = ref_traj.values.T.copy()
    u_seq[:, gnn_idx] = gates
    names = ("I_Kr", "I_Ks", "I_to")
    out = {n: np.empty(len(u_seq)) for n in names}
    for i, u in enumerate(u_seq):
        cur = eval_currents(model, u)
        for n in names:
            out[n][i] = cur[n]
    return out


@pytest.fixture(scope="session")
def evaluations(desk, retrained):
    """Closed-loop neural-ODE runs (for AP metrics) plus gate-clamped
    current reconstructions at CL 600."""
    model = desk["model"]
    protocol = sim.PacingProtocol(cycle_length=EVAL_CL,
                                  total_duration=4 * EVAL_CL)
    u0 = export.paced_steady_state(model, protocol, warmup_ms=10000.0)
    ref_traj = sim.solve_rush_larsen(model, protocol, dt_out=1.0,
                                     inner_dt=0.02, u0=u0)
    out = {"ref_traj": ref_traj}
    for label in ("base", "long_qt", "short_qt", "ito"):
        params = retrained[label]["params"]
        node = export.from_params(params, model)
        traj = export.integrate_neural_ode(node, protocol,
                                           duration=4 * EVAL_CL, u0=u0)
        metrics = export.ap_metrics(traj)
        currents = _gate_clamped_currents(params, desk["params"], model,
                                          ref_traj)
        out[label] = {"traj": traj, "currents": currents, "metrics": metrics}
    return out


def _last_beat_integral(traj, series):
    per_beat = int(round(traj.cycle_length / traj.dt))
    seg = series[-per_beat:]
    return float(np.trapezoid(seg, dx=traj.dt))


def test_criterion_1_dataset_protocol():
    model = get_model("tnnp2004")
    cls = [300.0 + 5.0 * i for i in range(101)]
    t0 = time.time()
    ds = sim.generate_dataset(model, cls, seed=0)
    elapsed = time.time() - t0
    ok = (
        ds.l == 101
        and all(seg.n_samples == 10000 and seg.dt == 1.0 for seg in ds.segments)
        and len(ds.train_indices) == 76
        and len(ds.validation_indices) == 25
        and elapsed < 300.0
    )
    _report("criterion 1 dataset protocol", ok,
            f"{ds.l} segments, {ds.segments[0].n_samples} samples at 1 ms, "
            f"split {len(ds.train_indices)}/{len(ds.validation_indices)}, "
            f"{elapsed:.1f} s")


def test_criterion_2_integrator_oracle(hh_model):
    t0 = time.time()
    p = sim.PacingProtocol(cycle_length=50.0, total_duration=50.0)
    oracle = sim.reference_solve(hh_model, p, dt_out=0.5)
    mine = sim.solve_rush_larsen(hh_model, p, dt_out=0.5, inner_dt=0.01)
    elapsed = time.time() - t0
    err = float(np.abs(mine.row("V") - oracle.row("V")).max())
    gates = mine.values[1:]
    in_range = bool(np.all(gates >= 0.0) and np.all(gates <= 1.0))
    ok = err < 1.0 and in_range and elapsed < 5.0
    _report("criterion 2 integrator oracle", ok,
            f"max |V| error {err:.4f} mV, gates in [0,1]: {in_range}, "
            f"{elapsed:.1f} s")


def test_criterion_3_gradient_suite():
    import test_train
    t0 = time.time()
    for seed in (0, 1, 2):
        test_train._check_gradients(
            seed, "first_pass", train.TrainConfig(lambda_=1e-3))
        test_train._check_gradients(
            seed, "second_pass",
            train.TrainConfig(lambda_=1e-3, eta=2e-3,
                              freeze=train.FREEZE_SECOND_PASS))
    elapsed = time.time() - t0
    ok = elapsed < 30.0
    _report("criterion 3 gradient suite", ok,
            f"3 seeds x both passes x all layers through 10 carried steps, "
            f"{elapsed:.1f} s")


def test_criterion_4_cell_equivalences(tnnp_model):
    rng = np.random.default_rng(0)
    # discrete cell update vs the exact exponential gate formula
    worst_cell = 0.0
    for _ in range(1000):
        h, h_inf = rng.uniform(0.0, 1.0, size=2)
        tau = rng.uniform(0.05, 500.0)
        rho = np.exp(-1.0 / tau)
        cell = rho * h + (1.0 - rho) * h_inf
        exact = h_inf + (h - h_inf) * np.exp(-1.0 / tau)
        worst_cell = max(worst_cell, abs(cell - exact))
    # one exported-ODE hybrid step vs the recurrent cell, full-size network
    params = nn.init_params(tnnp_model, dt=1.0, seed=0)
    node = export.from_params(params, tnnp_model)
    worst_ode = 0.0
    for _ in range(20):
        u = np.array(tnnp_model.initial_state, dtype=float)
        u[0] = rng.uniform(-90.0, 40.0)
        u[1] = rng.uniform(0.0002, 0.005)  # spread the calcium input too
        h = rng.uniform(0.0, 1.0, size=len(node.gnn_gates))
        u[list(node.gnn_gates)] = h
        stepped = export.hybrid_step(node, u, 0.0, params.dt, 0.0)
        state = nn.fresh_state(params, gnn_h=h)
        vn = params.norm.norm_obs(u[list(node.observables)])
        cell, _, _ = nn.forward_step(params.tensors, vn, state)
        worst_ode = max(worst_ode,
                        float(np.abs(stepped[list(node.gnn_gates)] - cell).max()))
    ok = worst_cell < 1e-12 and worst_ode < 1e-10
    _report("criterion 4 cell/ODE equivalence", ok,
            f"cell vs exponential update {worst_cell:.2e} (< 1e-12), "
            f"hybrid step vs cell {worst_ode:.2e} (< 1e-10)")


def _exact_law_one_step_rmse(model, params, segments):
    """Per-gate one-step RMSE of the model's own relaxation laws with the
    membrane potential held at its value at the start of each sample step.

    This is the error floor for any predictor fed only the sampled
    observables: sub-sample voltage excursions (the stimulus and upstroke
    fit inside one 1 ms step) are invisible to it by construction.
    """
    gnn_idx = list(params.gnn_gates)
    names = [model.layout.names[i] for i in gnn_idx]
    sq = np.zeros(len(gnn_idx))
    n = 0
    for seg in segments:
        v = seg.rows(("V",))[0]
        gates = seg.rows(tuple(names)).T
        pred = np.empty_like(gates[:-1])
        for j, idx in enumerate(gnn_idx):
            spec = model.gates[idx]
            h_inf, tau = spec.steady_state(v[:-1]), spec.tau(v[:-1])
            rho = np.exp(-seg.dt / tau)
            pred[:, j] = rho * gates[:-1, j] + (1.0 - rho) * h_inf
        sq += ((pred - gates[1:]) ** 2).sum(axis=0)
        n += len(pred)
    return np.sqrt(sq / n)


def test_criterion_5_first_pass_learning(desk):
    drop = desk["init_loss"] / desk["final_loss"]
    model, params = desk["model"], desk["params"]
    val = desk["dataset"].validation_segments
    rmse = train.one_step_gate_rmse(params, model, val)
    floor = _exact_law_one_step_rmse(model, params, val)
    names = [model.layout.names[i] for i in params.gnn_gates]
    worst = int(np.argmax(rmse))
    ok = drop >= 10.0 and float(rmse.max()) < 0.02 and desk["elapsed"] < 1800.0
    _report("criterion 5 first-pass learning", ok,
            f"loss {desk['init_loss']:.4g} -> {desk['final_loss']:.4g} "
            f"({drop:.1f}x, >= 10x), max per-gate one-step RMSE "
            f"{float(rmse.max()):.4f} on '{names[worst]}' (bound 0.02; "
            f"exact-law floor at this sampling {float(floor[worst]):.4f}), "
            f"{desk['elapsed']:.0f} s")


def test_criterion_6_scenario_directionality(evaluations):
    base = evaluations["base"]
    lqt = evaluations["long_qt"]
    sqt = evaluations["short_qt"]
    ito = evaluations["ito"]
    ref = evaluations["ref_traj"]

    d_apd_lqt = lqt["metrics"].apd90 - base["metrics"].apd90
    ikr_ratio = (_last_beat_integral(ref, lqt["currents"]["I_Kr"])
                 / _last_beat_integral(ref, base["currents"]["I_Kr"]))
    d_apd_sqt = sqt["metrics"].apd90 - base["metrics"].apd90
    k_sum_sqt = sum(_last_beat_integral(ref, sqt["currents"][n])
                    for n in ("I_Kr", "I_Ks"))
    k_sum_base = sum(_last_beat_integral(ref, base["currents"][n])
                     for n in ("I_Kr", "I_Ks"))
    ito_peak_ratio = (float(np.max(ito["currents"]["I_to"]))
                      / float(np.max(base["currents"]["I_to"])))

    ok = (d_apd_lqt > 0.0 and ikr_ratio < 1.0
          and d_apd_sqt < 0.0 and k_sum_sqt > k_sum_base
          and ito_peak_ratio > 1.0)
    _report("criterion 6 scenario directionality", ok,
            f"long-qt dAPD90 {d_apd_lqt:+.1f} ms (>0), I_Kr integral ratio "
            f"{ikr_ratio:.3f} (<1); short-qt dAPD90 {d_apd_sqt:+.1f} ms (<0), "
            f"K-current integrals {k_sum_base:.1f} -> {k_sum_sqt:.1f} (up); "
            f"ito peak ratio {ito_peak_ratio:.2f} (>1)")


def test_criterion_7_drift_penalty(desk, retrained):
    model = desk["model"]
    params1 = desk["params"]
    obs = retrained["long_qt"]["obs"]
    strong = train.mean_gate_drift(retrained["long_qt"]["params"], params1,
                                   model, obs.train_segments)
    weak = train.mean_gate_drift(retrained["long_qt_weak_eta"]["params"],
                                 params1, model, obs.train_segments)
    ok = strong < weak
    _report("criterion 7 drift penalty", ok,
            f"mean gate drift {strong:.5f} at eta=2e-3 < {weak:.5f} at eta=1e-4")


def test_criterion_8_reproducibility(tmp_path):
    flags = ["--model", "hh1952", "--cl-min", "300", "--cl-max", "500",
             "--cl-step", "100", "--total-ms", "1500", "--discard-ms", "500"]
    assert cli.main(["simulate", *flags, "--out", str(tmp_path / "a")]) == 0
    assert cli.main([
        "train", *flags, "--dataset", str(tmp_path / "a" / "dataset"),
        "--epochs", "2", "--out", str(tmp_path / "a"),
    ]) == 0
    # re-run both commands from the emitted config into a fresh directory
    cfg = str(tmp_path / "a" / "run_config.json")
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    assert cli.main([
        "train", "--config", cfg, "--dataset", str(tmp_path / "b" / "dataset"),
        "--out", str(tmp_path / "b"),
    ]) == 0
    same = []
    for name in [*sorted(p.name for p in (tmp_path / "a" / "dataset").iterdir())]:
        same.append((tmp_path / "a" / "dataset" / name).read_bytes()
                    == (tmp_path / "b" / "dataset" / name).read_bytes())
    for name in ("pass1.json", "pass1_loss.csv"):
        same.append((tmp_path / "a" / name).read_bytes()
                    == (tmp_path / "b" / name).read_bytes())
    ok = all(same)
    _report("criterion 8 reproducibility", ok,
            f"{len(same)} artifacts byte-identical on re-run from emitted config")
