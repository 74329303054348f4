"""Losses, hand-rolled backpropagation, and the two training passes."""

import numpy as np
import pytest

from gatenet import nn, train
from gatenet.models import get_model
from gatenet.train import FREEZE_SECOND_PASS, TrainConfig


# -------------------------------------------------------------------- losses

def test_first_pass_loss_hand_example():
    loss = train.first_pass_loss([0.5], [0.3], [1.0], [0.0], [], lam=0.0)
    assert loss == pytest.approx(0.04 + 1.0)


def test_first_pass_loss_perfect_predictions():
    w = np.array([[2.0, 0.0], [0.0, 2.0]])
    assert train.first_pass_loss([0.5], [0.5], [1.0], [1.0], [w], lam=0.0) == 0.0
    assert train.first_pass_loss([0.5], [0.5], [1.0], [1.0], [w], lam=0.5) \
        == pytest.approx(0.5 * 2.0)  # mean of squared entries is 2


def test_second_pass_loss_hand_example():
    loss = train.second_pass_loss([1.0], [1.0], [0.2], [0.5], [], lam=0.0, eta=2e-3)
    assert loss == pytest.approx(2e-3 * 0.3)


def test_second_pass_loss_zero_drift_and_eta():
    assert train.second_pass_loss([0.5], [0.0], [0.4], [0.4], [], 0.0, 1.0) \
        == pytest.approx(0.25)
    # eta = 0 reduces to the plain observable loss
    assert train.second_pass_loss([0.5], [0.0], [0.1], [0.9], [], 0.0, 0.0) \
        == pytest.approx(0.25)


def test_loss_monotone_in_eta():
    etas = [0.0, 1e-4, 1e-3, 2e-3, 1.0]
    vals = [train.second_pass_loss([0.7], [0.5], [0.2], [0.6], [], 0.0, e)
            for e in etas]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_weight_penalty_is_mean_of_squares():
    a = np.array([[1.0, 2.0]])
    b = np.array([[3.0]])
    assert train.weight_penalty([a, b]) == pytest.approx((1 + 4 + 9) / 3)
    assert train.weight_penalty([]) == 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lambda_=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(bptt_window=0)
    with pytest.raises(ValueError):
        train.trainable_keys({"phi9"})


# ----------------------------------------------------------------- gradients

def _fd_setup(seed, window=10):
    model = get_model("hh1952")
    rng = np.random.default_rng(seed)
    params = nn.init_params(model, dt=1.0, seed=seed)
    vn = rng.normal(size=(window, params.n_obs)) * 0.4
    gates_t = rng.uniform(0.0, 1.0, size=(window, params.n_gates))
    others_t = rng.normal(size=(window, params.n_targets)) * 0.4
    h0 = rng.uniform(0.0, 1.0, size=params.n_gates)
    ref = params.copy()
    for k in ref.tensors:
        ref.tensors[k] = ref.tensors[k] + 0.05 * rng.normal(size=ref.tensors[k].shape)
    return params, vn, gates_t, others_t, h0, ref


def _loss_at(params, tensors, vn, cfg, kind, gates_t, others_t, h0, ref):
    p = params.copy()
    p.tensors.update({k: v.copy() for k, v in tensors.items()})
    state = nn.fresh_state(p, gnn_h=h0)
    kw = {}
    if kind == "first_pass":
        kw = dict(gates_target=gates_t, others_target_n=others_t)
    else:
        kw = dict(obs_target_n=others_t[:, :p.n_obs], ref_params=ref,
                  ref_state=nn.fresh_state(ref, gnn_h=h0))
    parts, _, _ = train.bptt_gradient(p, state, vn, cfg, kind,
                                      compute_grads=False, **kw)
    return parts["total"]


def _check_gradients(seed, kind, cfg, n_per_tensor=4, eps=1e-6):
    params, vn, gates_t, others_t, h0, ref = _fd_setup(seed)
    state = nn.fresh_state(params, gnn_h=h0)
    kw = {}
    if kind == "first_pass":
        kw = dict(gates_target=gates_t, others_target_n=others_t)
    else:
        kw = dict(obs_target_n=others_t[:, :params.n_obs], ref_params=ref,
                  ref_state=nn.fresh_state(ref, gnn_h=h0))
    _, grads, _ = train.bptt_gradient(params, state, vn, cfg, kind, **kw)
    pick = np.random.default_rng(seed + 1)
    for key in train.trainable_keys(cfg.freeze):
        flat = list(np.ndindex(*grads[key].shape))
        chosen = pick.choice(len(flat), size=min(n_per_tensor, len(flat)),
                             replace=False)
        for idx in (flat[i] for i in chosen):
            t = {k: v.copy() for k, v in params.tensors.items()}
            t[key][idx] += eps
            up = _loss_at(params, t, vn, cfg, kind, gates_t, others_t, h0, ref)
            t[key][idx] -= 2 * eps
            dn = _loss_at(params, t, vn, cfg, kind, gates_t, others_t, h0, ref)
            fd = (up - dn) / (2 * eps)
            an = grads[key][idx]
            if abs(fd) < 1e-8:
                assert abs(an - fd) < 1e-8, f"{key}{idx}"
            else:
                assert abs(an - fd) / abs(fd) < 1e-4, f"{key}{idx}: {an} vs {fd}"


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_first_pass_gradients_match_finite_differences(seed):
    """All layer types, through 10 carried recurrent steps."""
    _check_gradients(seed, "first_pass", TrainConfig(lambda_=1e-3))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_second_pass_gradients_match_finite_differences(seed):
    cfg = TrainConfig(lambda_=1e-3, eta=2e-3, freeze=FREEZE_SECOND_PASS)
    _check_gradients(seed, "second_pass", cfg)


def test_gradients_zero_at_perfect_fit():
    params, vn, gates_t, others_t, h0, _ = _fd_setup(3)
    cfg = TrainConfig(lambda_=0.0)
    state = nn.fresh_state(params, gnn_h=h0)
    # run forward once to capture the network's own outputs as targets
    gates_seq = np.empty_like(gates_t)
    out_seq = np.empty_like(others_t)
    for i in range(len(vn)):
        gates_seq[i], out_seq[i], _ = nn.forward_step(params.tensors, vn[i], state)
    state = nn.fresh_state(params, gnn_h=h0)
    _, grads, _ = train.bptt_gradient(
        params, state, vn, cfg, "first_pass",
        gates_target=gates_seq, others_target_n=out_seq)
    for k, g in grads.items():
        np.testing.assert_allclose(g, 0.0, atol=1e-14)


def test_single_dense_layer_gradient_scalar_case():
    """d/dW of (Wx + b - y)^2 = 2(Wx + b - y)x, the textbook check."""
    W, b, x, y = 1.5, 0.2, 0.7, 2.0
    eps = 1e-7
    fd = (((W + eps) * x + b - y) ** 2 - ((W - eps) * x + b - y) ** 2) / (2 * eps)
    assert fd == pytest.approx(2 * (W * x + b - y) * x, rel=1e-6)


def test_nonfinite_gradient_names_tensor():
    params, vn, gates_t, others_t, h0, _ = _fd_setup(4)
    vn = vn.copy()
    params.tensors["phi3.b"][:] = np.nan
    with pytest.raises(train.TrainingDivergedError, match="non-finite gradient in tensor"):
        train.bptt_gradient(params, nn.fresh_state(params, gnn_h=h0), vn,
                            TrainConfig(), "first_pass",
                            gates_target=gates_t, others_target_n=others_t)


# ------------------------------------------------------------ training loops

@pytest.fixture(scope="module")
def tiny_training(hh_model, hh_dataset):
    cfg = TrainConfig(epochs=2, learning_rate=1e-3, seed=5, bptt_window=50)
    params, report = train.train_first_pass(hh_dataset, hh_model, cfg)
    return params, report, cfg


def test_first_pass_runs_and_logs(tiny_training):
    params, report, cfg = tiny_training
    assert len(report.history) == 2
    assert not report.aborted
    row = report.final
    assert row["total"] == pytest.approx(
        row["n1_or_data"] + row["n2_or_drift"], rel=0.5)  # reg folded per window
    assert np.isfinite(row["val_total"])


def test_first_pass_deterministic(hh_model, hh_dataset, tiny_training):
    params, report, cfg = tiny_training
    params2, report2 = train.train_first_pass(hh_dataset, hh_model, cfg)
    for k in params.tensors:
        np.testing.assert_array_equal(params.tensors[k], params2.tensors[k])
    assert report.history == report2.history


def test_frozen_everything_leaves_params_unchanged(hh_model, hh_dataset):
    cfg = TrainConfig(epochs=1, freeze=frozenset(nn.TENSOR_GROUPS), seed=0)
    params, _ = train.train_first_pass(hh_dataset, hh_model, cfg)
    fresh = nn.init_params(hh_model, dt=1.0, seed=0,
                           norm=nn.fit_normalization(hh_model, hh_dataset.train_segments))
    for k in params.tensors:
        np.testing.assert_array_equal(params.tensors[k], fresh.tensors[k])


def test_second_pass_freezes_everything_but_the_cell(tiny_training, hh_model, hh_dataset):
    params1, _, _ = tiny_training
    cfg = TrainConfig(epochs=1, learning_rate=1e-3, eta=1e-3,
                      freeze=FREEZE_SECOND_PASS, seed=5)
    params2, report = train.train_second_pass(params1, hh_dataset, hh_model, cfg)
    for group in FREEZE_SECOND_PASS:
        for key in nn.TENSOR_GROUPS[group]:
            np.testing.assert_array_equal(params2.tensors[key], params1.tensors[key])
    changed = any(
        not np.array_equal(params2.tensors[k], params1.tensors[k])
        for k in nn.TENSOR_GROUPS["gnn"])
    assert changed
    assert len(report.history) == 1


def test_second_pass_zero_epochs_identity(tiny_training, hh_model, hh_dataset):
    params1, _, _ = tiny_training
    cfg = TrainConfig(epochs=0, freeze=FREEZE_SECOND_PASS)
    params2, report = train.train_second_pass(params1, hh_dataset, hh_model, cfg)
    for k in params1.tensors:
        np.testing.assert_array_equal(params2.tensors[k], params1.tensors[k])
    assert report.history == []


def test_second_pass_rejects_frozen_cell(tiny_training, hh_model, hh_dataset):
    params1, _, _ = tiny_training
    with pytest.raises(ValueError):
        train.train_second_pass(
            params1, hh_dataset, hh_model,
            TrainConfig(freeze=frozenset({"gnn"})))


def test_drift_penalty_shrinks_drift(tiny_training, hh_model, hh_dataset):
    """Stronger eta keeps the retrained gates closer to the reference."""
    params1, _, _ = tiny_training
    drifts = {}
    for eta in (1e-4, 2e-3):
        cfg = TrainConfig(epochs=2, learning_rate=1e-3, eta=eta,
                          freeze=FREEZE_SECOND_PASS, seed=5)
        p, _ = train.train_second_pass(params1, hh_dataset, hh_model, cfg)
        drifts[eta] = train.mean_gate_drift(p, params1, hh_model,
                                            hh_dataset.train_segments)
    assert drifts[2e-3] < drifts[1e-4]


def test_loss_report_csv(tmp_path, tiny_training):
    _, report, _ = tiny_training
    path = tmp_path / "log.csv"
    report.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,n1_or_data,n2_or_drift,reg,total,val_total"
    assert len(lines) == 3
