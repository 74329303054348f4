"""The recurrent architecture: dense stages, the gating cell, and an LSTM.

Two sub-networks share the observable input. The first maps it through a
two-layer dense stage into a gating cell whose state update is the exact
exponential-integrator formula, h <- rho*h + (1-rho)*h_inf, with rho and
h_inf computed from the input only (no self-loop). The second takes the
input plus the predicted gates through a dense layer, an LSTM, and a
linear readout to predict the remaining state variables.

All tensors live in a flat {name: ndarray} dict so the trainer and the
optimizer can treat them uniformly; the forward pass here is the single
source of truth for the architecture.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .models import IonicModel
from .models.core import CLASSIC_GATE, ATYPICAL_GATE

HIDDEN = 30  # width of every dense stage and of the LSTM

CHECKPOINT_VERSION = 1

# tensor names, grouped by freezable component
TENSOR_GROUPS = {
    "phi1": ("phi1.0.W", "phi1.0.b", "phi1.1.W", "phi1.1.b"),
    "gnn": ("gnn.W_inf", "gnn.b_inf", "gnn.W_tau", "gnn.b_tau"),
    "phi2": ("phi2.W", "phi2.b"),
    "lstm": ("lstm.W", "lstm.b"),
    "phi3": ("phi3.W", "phi3.b"),
}
WEIGHT_MATRICES = (
    "phi1.0.W", "phi1.1.W", "gnn.W_inf", "gnn.W_tau", "phi2.W", "lstm.W", "phi3.W",
)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass(frozen=True)
class Normalization:
    """Per-variable affine scaling: normalized = (raw - shift) / scale."""

    obs_shift: np.ndarray
    obs_scale: np.ndarray
    tgt_shift: np.ndarray
    tgt_scale: np.ndarray

    def norm_obs(self, v):
        return (v - self.obs_shift) / self.obs_scale

    def denorm_obs(self, vn):
        return vn * self.obs_scale + self.obs_shift

    def norm_tgt(self, y):
        return (y - self.tgt_shift) / self.tgt_scale

    def denorm_tgt(self, yn):
        return yn * self.tgt_scale + self.tgt_shift


def identity_normalization(n_obs: int, n_tgt: int) -> Normalization:
    return Normalization(
        obs_shift=np.zeros(n_obs), obs_scale=np.ones(n_obs),
        tgt_shift=np.zeros(n_tgt), tgt_scale=np.ones(n_tgt),
    )


def fit_normalization(model: IonicModel, segments) -> Normalization:
    """Min/max scaling from training data; gate-kind variables untouched."""
    layout, part = model.layout, model.partition
    stacked = np.concatenate([seg.values for seg in segments], axis=1)

    def scaling(idx):
        shift = np.zeros(len(idx))
        scale = np.ones(len(idx))
        for pos, i in enumerate(idx):
            if layout.kinds[i] in (CLASSIC_GATE, ATYPICAL_GATE):
                continue
            row = stacked[i]
            lo, hi = float(row.min()), float(row.max())
            if hi - lo < 1e-12:
                hi = lo + 1.0
            shift[pos], scale[pos] = lo, hi - lo
        return shift, scale

    os_, osc = scaling(part.observables)
    ts_, tsc = scaling(part.lstm_vars)
    return Normalization(os_, osc, ts_, tsc)


@dataclass
class NetworkParams:
    tensors: dict
    norm: Normalization
    dt: float
    model_key: str
    variant: str
    observables: tuple
    gnn_gates: tuple
    lstm_vars: tuple
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n_obs, n_g, n_tgt = len(self.observables), len(self.gnn_gates), len(self.lstm_vars)
        shapes = {
            "phi1.0.W": (HIDDEN, n_obs), "phi1.0.b": (HIDDEN,),
            "phi1.1.W": (HIDDEN, HIDDEN), "phi1.1.b": (HIDDEN,),
            "gnn.W_inf": (n_g, HIDDEN), "gnn.b_inf": (n_g,),
            "gnn.W_tau": (n_g, HIDDEN), "gnn.b_tau": (n_g,),
            "phi2.W": (HIDDEN, n_obs + n_g), "phi2.b": (HIDDEN,),
            "lstm.W": (4 * HIDDEN, 2 * HIDDEN), "lstm.b": (4 * HIDDEN,),
            "phi3.W": (n_tgt, HIDDEN), "phi3.b": (n_tgt,),
        }
        if set(self.tensors) != set(shapes):
            raise ValueError("unexpected tensor set")
        for name, shape in shapes.items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {self.tensors[name].shape}")

    @property
    def n_obs(self):
        return len(self.observables)

    @property
    def n_gates(self):
        return len(self.gnn_gates)

    @property
    def n_targets(self):
        return len(self.lstm_vars)

    @property
    def obs_positions_in_targets(self):
        """Where each observable sits inside the second network's output."""
        return tuple(self.lstm_vars.index(i) for i in self.observables)

    def copy(self) -> "NetworkParams":
        return replace(
            self,
            tensors={k: v.copy() for k, v in self.tensors.items()},
            provenance=dict(self.provenance),
        )


@dataclass
class NetworkState:
    gnn_h: np.ndarray
    lstm_h: np.ndarray
    lstm_c: np.ndarray

    def copy(self):
        return NetworkState(self.gnn_h.copy(), self.lstm_h.copy(), self.lstm_c.copy())


def fresh_state(params: NetworkParams, gnn_h=None) -> NetworkState:
    h = np.zeros(params.n_gates) if gnn_h is None else np.asarray(gnn_h, dtype=float).copy()
    return NetworkState(gnn_h=h, lstm_h=np.zeros(HIDDEN), lstm_c=np.zeros(HIDDEN))


def reset(state: NetworkState, gnn_h=None) -> None:
    state.gnn_h = np.zeros_like(state.gnn_h) if gnn_h is None else np.asarray(gnn_h, dtype=float).copy()
    state.lstm_h[:] = 0.0
    state.lstm_c[:] = 0.0


def init_params(model: IonicModel, dt: float, seed: int,
                norm: Normalization | None = None) -> NetworkParams:
    """Glorot-uniform weights; gnn.b_tau starts at +2 so gates begin slow."""
    part = model.partition
    n_obs, n_g, n_tgt = len(part.observables), len(part.gnn_gates), len(part.lstm_vars)
    rng = np.random.default_rng(seed)

    def glorot(out_dim, in_dim):
        lim = np.sqrt(6.0 / (in_dim + out_dim))
        return rng.uniform(-lim, lim, size=(out_dim, in_dim))

    tensors = {
        "phi1.0.W": glorot(HIDDEN, n_obs), "phi1.0.b": np.zeros(HIDDEN),
        "phi1.1.W": glorot(HIDDEN, HIDDEN), "phi1.1.b": np.zeros(HIDDEN),
        "gnn.W_inf": glorot(n_g, HIDDEN), "gnn.b_inf": np.zeros(n_g),
        "gnn.W_tau": glorot(n_g, HIDDEN), "gnn.b_tau": np.full(n_g, 2.0),
        "phi2.W": glorot(HIDDEN, n_obs + n_g), "phi2.b": np.zeros(HIDDEN),
        "lstm.W": glorot(4 * HIDDEN, 2 * HIDDEN), "lstm.b": np.zeros(4 * HIDDEN),
        "phi3.W": glorot(n_tgt, HIDDEN), "phi3.b": np.zeros(n_tgt),
    }
    # forget-gate bias at +1: standard stabilizer for early training
    tensors["lstm.b"][HIDDEN:2 * HIDDEN] = 1.0
    if norm is None:
        norm = identity_normalization(n_obs, n_tgt)
    return NetworkParams(
        tensors=tensors,
        norm=norm,
        dt=dt,
        model_key=model.key,
        variant=model.variant,
        observables=tuple(part.observables),
        gnn_gates=tuple(part.gnn_gates),
        lstm_vars=tuple(part.lstm_vars),
        provenance={"seed": seed},
    )


# ------------------------------------------------------------- gating cell

def gnn_h_inf(x, tensors):
    """Steady-state head: sigmoid of an affine map of the cell input."""
    return sigmoid(tensors["gnn.W_inf"] @ x + tensors["gnn.b_inf"])


def gnn_rho(x, tensors):
    """Update-rate head; rho plays the role of exp(-dt/tau)."""
    return sigmoid(tensors["gnn.W_tau"] @ x + tensors["gnn.b_tau"])


def gnn_step(x, tensors, state: NetworkState):
    """Convex-combination state update; also writes the new gate vector."""
    hinf = gnn_h_inf(x, tensors)
    rho = gnn_rho(x, tensors)
    state.gnn_h = rho * state.gnn_h + (1.0 - rho) * hinf
    return state.gnn_h


# ------------------------------------------------------------ full network

def forward_step(tensors, vn, state: NetworkState):
    """One recurrent step on a normalized input; mutates state.

    Returns (gates, out_normalized, cache); cache feeds backprop.
    """
    h_prev = state.gnn_h
    lh_prev, lc_prev = state.lstm_h, state.lstm_c

    a1 = tensors["phi1.0.W"] @ vn + tensors["phi1.0.b"]
    z1 = np.tanh(a1)
    a2 = tensors["phi1.1.W"] @ z1 + tensors["phi1.1.b"]
    x = np.tanh(a2)

    hinf = sigmoid(tensors["gnn.W_inf"] @ x + tensors["gnn.b_inf"])
    rho = sigmoid(tensors["gnn.W_tau"] @ x + tensors["gnn.b_tau"])
    h_new = rho * h_prev + (1.0 - rho) * hinf

    q = np.concatenate([vn, h_new])
    z2 = np.tanh(tensors["phi2.W"] @ q + tensors["phi2.b"])

    zin = np.concatenate([z2, lh_prev])
    zl = tensors["lstm.W"] @ zin + tensors["lstm.b"]
    ig = sigmoid(zl[:HIDDEN])
    fg = sigmoid(zl[HIDDEN:2 * HIDDEN])
    gg = np.tanh(zl[2 * HIDDEN:3 * HIDDEN])
    og = sigmoid(zl[3 * HIDDEN:])
    c_new = fg * lc_prev + ig * gg
    hc = np.tanh(c_new)
    hl = og * hc

    out = tensors["phi3.W"] @ hl + tensors["phi3.b"]

    state.gnn_h = h_new
    state.lstm_h = hl
    state.lstm_c = c_new
    cache = (vn, z1, x, hinf, rho, h_prev, q, z2, zin, ig, fg, gg, og,
             lc_prev, c_new, hc, hl)
    return h_new, out, cache


def network_step(v, params: NetworkParams, state: NetworkState):
    """Map raw observables at t to (gates, remaining-variable prediction).

    Gates come back in natural [0,1] units; the second output is
    denormalized into raw model units.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (params.n_obs,):
        raise ValueError(f"expected {params.n_obs} observables, got shape {v.shape}")
    vn = params.norm.norm_obs(v)
    gates, out, _ = forward_step(params.tensors, vn, state)
    return gates, params.norm.denorm_tgt(out)


def rollout(v0, n_steps: int, params: NetworkParams, state: NetworkState):
    """Closed loop: each step's predicted observables feed the next step."""
    obs_pos = list(params.obs_positions_in_targets)
    v = np.asarray(v0, dtype=float)
    out = np.empty((n_steps, params.n_obs))
    for step in range(n_steps):
        _, others = network_step(v, params, state)
        v = others[obs_pos]
        if not np.all(np.isfinite(v)):
            raise RuntimeError(f"rollout diverged at step {step}")
        out[step] = v
    return out


# -------------------------------------------------------------- checkpoints

def save_checkpoint(params: NetworkParams, path) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "model_key": params.model_key,
        "variant": params.variant,
        "dt": params.dt,
        "partition": {
            "observables": list(params.observables),
            "gnn_gates": list(params.gnn_gates),
            "lstm_vars": list(params.lstm_vars),
        },
        "norm": {
            "obs_shift": params.norm.obs_shift.tolist(),
            "obs_scale": params.norm.obs_scale.tolist(),
            "tgt_shift": params.norm.tgt_shift.tolist(),
            "tgt_scale": params.norm.tgt_scale.tolist(),
        },
        "tensors": {
            name: {"shape": list(t.shape), "data": t.ravel().tolist()}
            for name, t in params.tensors.items()
        },
        "provenance": params.provenance,
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_checkpoint(path) -> NetworkParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    tensors = {
        name: np.array(entry["data"], dtype=float).reshape(entry["shape"])
        for name, entry in doc["tensors"].items()
    }
    norm = Normalization(
        obs_shift=np.array(doc["norm"]["obs_shift"], dtype=float),
        obs_scale=np.array(doc["norm"]["obs_scale"], dtype=float),
        tgt_shift=np.array(doc["norm"]["tgt_shift"], dtype=float),
        tgt_scale=np.array(doc["norm"]["tgt_scale"], dtype=float),
    )
    return NetworkParams(
        tensors=tensors,
        norm=norm,
        dt=doc["dt"],
        model_key=doc["model_key"],
        variant=doc.get("variant", ""),
        observables=tuple(doc["partition"]["observables"]),
        gnn_gates=tuple(doc["partition"]["gnn_gates"]),
        lstm_vars=tuple(doc["partition"]["lstm_vars"]),
        provenance=doc.get("provenance", {}),
    )
