"""Losses, reverse-mode gradients through the unrolled network, training.

Backpropagation is truncated to windows of ``bptt_window`` steps: the
recurrent state is carried across windows within a segment but gradients
are detached at window boundaries. Within a window the gradient flows
through both branches of the gating-cell update (rho*h and (1-rho)*h_inf),
including the carried gate state.

Pass 1 supervises both sub-networks on full-state data (teacher-forced
observable inputs). Pass 2 sees observables only: every component except
the gating cell is frozen, and an L1 penalty ties the retrained gate
outputs to those of the frozen pass-1 network.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import nn
from .models import IonicModel
from .nn import HIDDEN, NetworkParams, NetworkState, TENSOR_GROUPS, WEIGHT_MATRICES, sigmoid

FREEZE_SECOND_PASS = frozenset({"phi1", "phi2", "lstm", "phi3"})


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lambda_: float = 1e-4
    eta: float = 1e-3
    learning_rate: float = 1e-3
    epochs: int = 100
    bptt_window: int = 50
    seed: int = 0
    freeze: frozenset = frozenset()

    def __post_init__(self):
        if self.lambda_ < 0 or self.eta < 0:
            raise ValueError("lambda and eta must be nonnegative")
        if self.bptt_window < 1:
            raise ValueError("bptt_window must be >= 1")


@dataclass
class LossReport:
    kind: str  # "first_pass" | "second_pass"
    history: list = dc_field(default_factory=list)  # one dict per epoch
    aborted: bool = False

    def append(self, epoch, term_a, term_b, reg, total, val_total):
        self.history.append(
            {
                "epoch": epoch,
                "n1_or_data": term_a,
                "n2_or_drift": term_b,
                "reg": reg,
                "total": total,
                "val_total": val_total,
            }
        )

    @property
    def final(self):
        return self.history[-1] if self.history else None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "n1_or_data", "n2_or_drift", "reg", "total", "val_total"])
            for row in self.history:
                writer.writerow(
                    [row["epoch"]] + [repr(float(row[k])) for k in
                                      ("n1_or_data", "n2_or_drift", "reg", "total", "val_total")]
                )


# ------------------------------------------------------------------- losses

def _mse(a, b):
    return float(np.mean((np.asarray(a, dtype=float) - np.asarray(b, dtype=float)) ** 2))


def _mae(a, b):
    return float(np.mean(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))))


def weight_penalty(weights) -> float:
    """Mean of squared entries over the given weight matrices."""
    weights = list(weights)
    total = sum(float(np.sum(w ** 2)) for w in weights)
    count = sum(w.size for w in weights)
    return total / count if count else 0.0


def first_pass_loss(pred_gates, true_gates, pred_others, true_others, weights, lam) -> float:
    """Gate MSE + remaining-variable MSE + lam * mean squared weights."""
    return (
        _mse(pred_gates, true_gates)
        + _mse(pred_others, true_others)
        + lam * weight_penalty(weights)
    )


def second_pass_loss(pred_obs, true_obs, retrained_gates, frozen_reference_gates,
                     weights, lam, eta) -> float:
    """Observable MSE + eta * gate-drift L1 + lam * mean squared weights."""
    return (
        _mse(pred_obs, true_obs)
        + eta * _mae(retrained_gates, frozen_reference_gates)
        + lam * weight_penalty(weights)
    )


# ----------------------------------------------------------------- gradients

def trainable_keys(freeze) -> tuple:
    frozen_groups = set(freeze)
    unknown = frozen_groups - set(TENSOR_GROUPS)
    if unknown:
        raise ValueError(f"unknown freeze groups {sorted(unknown)}")
    return tuple(
        key for group, keys in TENSOR_GROUPS.items() if group not in frozen_groups
        for key in keys
    )


def _reg_weight_keys(freeze) -> tuple:
    keys = trainable_keys(freeze)
    return tuple(k for k in keys if k in WEIGHT_MATRICES)


def _backward_window(tensors, caches, d_gates_seq, d_out_seq, grads):
    """Accumulate parameter gradients over one window, newest step first."""
    n_g = d_gates_seq[0].shape[0]
    dh_carry = np.zeros(n_g)
    dlh_carry = np.zeros(HIDDEN)
    dlc_carry = np.zeros(HIDDEN)
    n_obs = caches[0][0].shape[0]

    for step in range(len(caches) - 1, -1, -1):
        (vn, z1, x, hinf, rho, h_prev, q, z2, zin, ig, fg, gg, og,
         lc_prev, c_new, hc, hl) = caches[step]
        dout = d_out_seq[step]

        grads["phi3.W"] += np.outer(dout, hl)
        grads["phi3.b"] += dout
        dhl = tensors["phi3.W"].T @ dout + dlh_carry

        dog = dhl * hc
        dc = dhl * og * (1.0 - hc ** 2) + dlc_carry
        dfg = dc * lc_prev
        dlc_carry = dc * fg
        dig = dc * gg
        dgg = dc * ig
        dzl = np.concatenate([
            dig * ig * (1.0 - ig),
            dfg * fg * (1.0 - fg),
            dgg * (1.0 - gg ** 2),
            dog * og * (1.0 - og),
        ])
        grads["lstm.W"] += np.outer(dzl, zin)
        grads["lstm.b"] += dzl
        dzin = tensors["lstm.W"].T @ dzl
        dz2 = dzin[:HIDDEN]
        dlh_carry = dzin[HIDDEN:]

        da3 = dz2 * (1.0 - z2 ** 2)
        grads["phi2.W"] += np.outer(da3, q)
        grads["phi2.b"] += da3
        dq = tensors["phi2.W"].T @ da3

        dh_new = dq[n_obs:] + d_gates_seq[step] + dh_carry
        drho = dh_new * (h_prev - hinf)
        dh_carry = dh_new * rho
        dhinf = dh_new * (1.0 - rho)

        dzinf = dhinf * hinf * (1.0 - hinf)
        grads["gnn.W_inf"] += np.outer(dzinf, x)
        grads["gnn.b_inf"] += dzinf
        dztau = drho * rho * (1.0 - rho)
        grads["gnn.W_tau"] += np.outer(dztau, x)
        grads["gnn.b_tau"] += dztau
        dx = tensors["gnn.W_inf"].T @ dzinf + tensors["gnn.W_tau"].T @ dztau

        da2 = dx * (1.0 - x ** 2)
        grads["phi1.1.W"] += np.outer(da2, z1)
        grads["phi1.1.b"] += da2
        dz1 = tensors["phi1.1.W"].T @ da2
        da1 = dz1 * (1.0 - z1 ** 2)
        grads["phi1.0.W"] += np.outer(da1, vn)
        grads["phi1.0.b"] += da1


def bptt_gradient(params: NetworkParams, state: NetworkState, inputs_n,
                  config: TrainConfig, kind: str,
                  gates_target=None, others_target_n=None, obs_target_n=None,
                  ref_params: NetworkParams = None, ref_state: NetworkState = None,
                  compute_grads: bool = True):
    """Loss terms and exact gradients over one window.

    inputs_n: (W, n_obs) normalized observables; targets aligned per step.
    Mutates ``state`` (and ``ref_state`` for second-pass) to the end of
    the window. Returns (parts, grads, scale-free drift reference gates).
    """
    if kind not in ("first_pass", "second_pass"):
        raise ValueError(f"unknown loss kind {kind!r}")
    tensors = params.tensors
    window = len(inputs_n)
    caches = []
    gates_seq = np.empty((window, params.n_gates))
    out_seq = np.empty((window, params.n_targets))
    for step in range(window):
        gates, out, cache = nn.forward_step(tensors, inputs_n[step], state)
        caches.append(cache)
        gates_seq[step] = gates
        out_seq[step] = out

    d_gates = np.zeros_like(gates_seq)
    d_out = np.zeros_like(out_seq)
    reg_keys = _reg_weight_keys(config.freeze)
    reg = weight_penalty(tensors[k] for k in reg_keys)

    if kind == "first_pass":
        term_a = _mse(gates_seq, gates_target)
        term_b = _mse(out_seq, others_target_n)
        total = term_a + term_b + config.lambda_ * reg
        d_gates = 2.0 * (gates_seq - gates_target) / gates_seq.size
        d_out = 2.0 * (out_seq - others_target_n) / out_seq.size
        ref_gates_seq = None
    else:
        ref_gates_seq = np.empty_like(gates_seq)
        rstate = ref_state
        for step in range(window):
            g, _, _ = nn.forward_step(ref_params.tensors, inputs_n[step], rstate)
            ref_gates_seq[step] = g
        obs_pos = list(params.obs_positions_in_targets)
        pred_obs = out_seq[:, obs_pos]
        term_a = _mse(pred_obs, obs_target_n)
        term_b = _mae(gates_seq, ref_gates_seq)
        total = term_a + config.eta * term_b + config.lambda_ * reg
        d_out[:, obs_pos] = 2.0 * (pred_obs - obs_target_n) / pred_obs.size
        d_gates = config.eta * np.sign(gates_seq - ref_gates_seq) / gates_seq.size

    grads = None
    if compute_grads:
        grads = {k: np.zeros_like(v) for k, v in tensors.items()}
        _backward_window(tensors, caches, d_gates, d_out, grads)
        for k in reg_keys:
            grads[k] += config.lambda_ * 2.0 * tensors[k] / sum(tensors[r].size for r in reg_keys)
        allowed = set(trainable_keys(config.freeze))
        for k in grads:
            if k not in allowed:
                grads[k][:] = 0.0
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingDivergedError(f"non-finite gradient in tensor {k!r}")

    parts = {"term_a": term_a, "term_b": term_b, "reg": reg, "total": total}
    return parts, grads, ref_gates_seq


class Adam:
    """Adaptive-moment optimizer over the flat tensor dict."""

    def __init__(self, keys, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.keys = tuple(keys)
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, tensors, grads):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k in self.keys:
            g = grads[k]
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            tensors[k] -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


# ------------------------------------------------------------ data plumbing

def _segment_arrays_full(params: NetworkParams, model: IonicModel, segment):
    """Teacher-forced (input, target) arrays from a full-state segment."""
    obs_names = tuple(model.layout.names[i] for i in params.observables)
    gate_names = tuple(model.layout.names[i] for i in params.gnn_gates)
    tgt_names = tuple(model.layout.names[i] for i in params.lstm_vars)
    vn = params.norm.norm_obs(segment.rows(obs_names).T)
    gates = segment.rows(gate_names).T
    others_n = params.norm.norm_tgt(segment.rows(tgt_names).T)
    return vn[:-1], gates[1:], others_n[1:], gates[0]


def _segment_arrays_obs(params: NetworkParams, model: IonicModel, segment):
    obs_names = tuple(model.layout.names[i] for i in params.observables)
    vn = params.norm.norm_obs(segment.rows(obs_names).T)
    return vn[:-1], vn[1:]


def _windows(n, size):
    for lo in range(0, n, size):
        yield lo, min(lo + size, n)


# ------------------------------------------------------------ training loops

def train_first_pass(dataset, model: IonicModel, config: TrainConfig,
                     out_dir=None):
    """Learn the reference model from full-state trajectories."""
    seg0 = dataset.segments[0]
    norm = nn.fit_normalization(model, dataset.train_segments)
    params = nn.init_params(model, dt=seg0.dt, seed=config.seed, norm=norm)
    params.provenance.update({"pass": 1, "lambda": config.lambda_, "eta": None})
    opt = Adam(trainable_keys(config.freeze), config.learning_rate)
    report = LossReport(kind="first_pass")

    prepared = [
        _segment_arrays_full(params, model, seg) for seg in dataset.train_segments
    ]
    for epoch in range(config.epochs):
        snapshot = params.copy()
        sums = np.zeros(3)
        count = 0
        try:
            for vn, gates_t, others_t, gates0 in prepared:
                state = nn.fresh_state(params, gnn_h=gates0)
                for lo, hi in _windows(len(vn), config.bptt_window):
                    parts, grads, _ = bptt_gradient(
                        params, state, vn[lo:hi], config, "first_pass",
                        gates_target=gates_t[lo:hi], others_target_n=others_t[lo:hi],
                    )
                    opt.step(params.tensors, grads)
                    sums += (parts["term_a"], parts["term_b"], parts["total"])
                    count += 1
            if not np.isfinite(sums[2]):
                raise TrainingDivergedError("non-finite training loss")
        except TrainingDivergedError:
            params = snapshot
            report.aborted = True
            break
        reg = weight_penalty(params.tensors[k] for k in _reg_weight_keys(config.freeze))
        val = validation_loss_first_pass(params, model, dataset.validation_segments, config)
        report.append(epoch, sums[0] / count, sums[1] / count, reg, sums[2] / count, val)
        if out_dir is not None:
            nn.save_checkpoint(params, Path(out_dir) / f"checkpoint_epoch{epoch:03d}.json")
    return params, report


def validation_loss_first_pass(params, model, segments, config) -> float:
    """Forward-only first-pass loss over held-out segments."""
    if not segments:
        return float("nan")
    totals, count = 0.0, 0
    for seg in segments:
        vn, gates_t, others_t, gates0 = _segment_arrays_full(params, model, seg)
        state = nn.fresh_state(params, gnn_h=gates0)
        for lo, hi in _windows(len(vn), config.bptt_window):
            parts, _, _ = bptt_gradient(
                params, state, vn[lo:hi], config, "first_pass",
                gates_target=gates_t[lo:hi], others_target_n=others_t[lo:hi],
                compute_grads=False,
            )
            totals += parts["total"]
            count += 1
    return totals / count


def one_step_gate_rmse(params, model, segments) -> np.ndarray:
    """Per-gate RMSE of single-step predictions with teacher-forced state."""
    gate_names = tuple(model.layout.names[i] for i in params.gnn_gates)
    obs_names = tuple(model.layout.names[i] for i in params.observables)
    sq = np.zeros(params.n_gates)
    n = 0
    for seg in segments:
        vn = params.norm.norm_obs(seg.rows(obs_names).T)
        gates = seg.rows(gate_names).T
        state = nn.fresh_state(params)
        for i in range(len(vn) - 1):
            state.gnn_h = gates[i].copy()  # teacher-forced gate state
            pred, _, _ = nn.forward_step(params.tensors, vn[i], state)
            sq += (pred - gates[i + 1]) ** 2
            n += 1
    return np.sqrt(sq / n)


def _initial_gate_state(ref_params: NetworkParams, vn0):
    """Steady-state gates of the frozen network at the first input."""
    t = ref_params.tensors
    z1 = np.tanh(t["phi1.0.W"] @ vn0 + t["phi1.0.b"])
    x = np.tanh(t["phi1.1.W"] @ z1 + t["phi1.1.b"])
    return sigmoid(t["gnn.W_inf"] @ x + t["gnn.b_inf"])


def train_second_pass(params_pass1: NetworkParams, dataset, model: IonicModel,
                      config: TrainConfig = None, out_dir=None):
    """Retrain the gating cell only, on observable sequences.

    The pass-1 network is kept frozen as the drift reference; both
    networks start each segment from the reference's steady-state gates
    at the first sample.
    """
    if config is None:
        config = TrainConfig(epochs=200, learning_rate=1e-4, freeze=FREEZE_SECOND_PASS)
    if not config.freeze:
        config = TrainConfig(**{**config.__dict__, "freeze": FREEZE_SECOND_PASS})
    if "gnn" in config.freeze:
        raise ValueError("second pass must leave the gating cell trainable")

    ref = params_pass1.copy()
    params = params_pass1.copy()
    params.provenance.update({"pass": 2, "lambda": config.lambda_, "eta": config.eta})
    opt = Adam(trainable_keys(config.freeze), config.learning_rate)
    report = LossReport(kind="second_pass")

    prepared = [
        _segment_arrays_obs(params, model, seg) for seg in dataset.train_segments
    ]
    for epoch in range(config.epochs):
        snapshot = params.copy()
        sums = np.zeros(3)
        drift_sum = 0.0
        count = 0
        try:
            for vn, obs_t in prepared:
                h0 = _initial_gate_state(ref, vn[0])
                state = nn.fresh_state(params, gnn_h=h0)
                rstate = nn.fresh_state(ref, gnn_h=h0)
                for lo, hi in _windows(len(vn), config.bptt_window):
                    parts, grads, _ = bptt_gradient(
                        params, state, vn[lo:hi], config, "second_pass",
                        obs_target_n=obs_t[lo:hi],
                        ref_params=ref, ref_state=rstate,
                    )
                    opt.step(params.tensors, grads)
                    sums += (parts["term_a"], parts["term_b"], parts["total"])
                    drift_sum += parts["term_b"]
                    count += 1
            if not np.isfinite(sums[2]):
                raise TrainingDivergedError("non-finite training loss")
        except TrainingDivergedError:
            params = snapshot
            report.aborted = True
            break
        reg = weight_penalty(params.tensors[k] for k in _reg_weight_keys(config.freeze))
        val = validation_loss_second_pass(params, ref, model, dataset.validation_segments, config)
        report.append(epoch, sums[0] / count, sums[1] / count, reg, sums[2] / count, val)
        if out_dir is not None:
            nn.save_checkpoint(params, Path(out_dir) / f"checkpoint_epoch{epoch:03d}.json")
    return params, report


def validation_loss_second_pass(params, ref, model, segments, config) -> float:
    if not segments:
        return float("nan")
    totals, count = 0.0, 0
    for seg in segments:
        vn, obs_t = _segment_arrays_obs(params, model, seg)
        h0 = _initial_gate_state(ref, vn[0])
        state = nn.fresh_state(params, gnn_h=h0)
        rstate = nn.fresh_state(ref, gnn_h=h0)
        for lo, hi in _windows(len(vn), config.bptt_window):
            parts, _, _ = bptt_gradient(
                params, state, vn[lo:hi], config, "second_pass",
                obs_target_n=obs_t[lo:hi], ref_params=ref, ref_state=rstate,
                compute_grads=False,
            )
            totals += parts["total"]
            count += 1
    return totals / count


def mean_gate_drift(params, ref, model, segments, window=50) -> float:
    """Mean |retrained - reference| gate output over the given segments."""
    cfg = TrainConfig(freeze=FREEZE_SECOND_PASS)
    drift, count = 0.0, 0
    for seg in segments:
        vn, obs_t = _segment_arrays_obs(params, model, seg)
        h0 = _initial_gate_state(ref, vn[0])
        state = nn.fresh_state(params, gnn_h=h0)
        rstate = nn.fresh_state(ref, gnn_h=h0)
        for lo, hi in _windows(len(vn), window):
            parts, _, _ = bptt_gradient(
                params, state, vn[lo:hi], cfg, "second_pass",
                obs_target_n=obs_t[lo:hi], ref_params=ref, ref_state=rstate,
                compute_grads=False,
            )
            drift += parts["term_b"] * (hi - lo)
            count += hi - lo
    return drift / count
