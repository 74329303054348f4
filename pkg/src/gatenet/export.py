"""Turn a trained network into an interpretable neural ODE.

The recurrent parts of the network are discarded; what remains is the
dense input stage plus the gating-cell heads, which together define a
continuous relaxation law h' = (h_inf - h)/tau per gate. Coupled to the
host model's own equations for potential and concentrations, this gives
an ODE system whose currents can be reconstructed term by term.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import IonicModel, eval_currents
from .models.core import (
    CLASSIC_GATE, ATYPICAL_GATE, CONCENTRATION, GATE_MIN, GATE_MAX, CONC_FLOOR,
)
from .nn import NetworkParams, Normalization, sigmoid
from .sim import (
    DEFAULT_INNER_DT, DEFAULT_DT_OUT, IntegrationDivergedError, PacingProtocol,
    Trajectory, _step,
)

RHO_CLAMP = 1e-6  # keeps tau finite and positive on both ends

_ODE_TENSORS = ("phi1.0.W", "phi1.0.b", "phi1.1.W", "phi1.1.b",
                "gnn.W_inf", "gnn.b_inf", "gnn.W_tau", "gnn.b_tau")


class NoBeatError(RuntimeError):
    pass


@dataclass(frozen=True)
class NeuralOde:
    """Stateless gate-dynamics law extracted from a trained network.

    Holds only the dense input stage and the gating-cell heads; nothing
    here depends on recurrent state, so instances may be integrated
    concurrently.
    """

    tensors: dict  # the dense-stage and gating-head weights only
    norm: Normalization  # observable scaling from training
    host: IonicModel
    observables: tuple
    gnn_gates: tuple
    dt: float  # sampling step the update rate rho was trained at, ms
    rho_clamp: float = RHO_CLAMP

    def __post_init__(self):
        if set(self.tensors) != set(_ODE_TENSORS):
            raise ValueError("neural ODE needs exactly the input-stage and gate-head tensors")
        if self.host.key is None:
            raise ValueError("host model required")


def from_params(params: NetworkParams, host: IonicModel) -> NeuralOde:
    """Strip the recurrent half of a trained network, keeping gate dynamics."""
    if params.model_key != host.key:
        raise ValueError(
            f"checkpoint was trained on {params.model_key!r}, host is {host.key!r}")
    if tuple(params.gnn_gates) != tuple(host.partition.gnn_gates):
        raise ValueError("gate partition mismatch between checkpoint and host model")
    return NeuralOde(
        tensors={k: params.tensors[k].copy() for k in _ODE_TENSORS},
        norm=params.norm,
        host=host,
        observables=tuple(params.observables),
        gnn_gates=tuple(params.gnn_gates),
        dt=params.dt,
    )


def rho_to_tau(rho, dt: float, eps: float = RHO_CLAMP):
    """Invert the discrete update rate into a time constant, tau = -dt/ln(rho).

    rho is clamped to [eps, 1-eps] first: rho near 1 would send tau to
    infinity (harmless limit, zero drift) and rho near 0 to zero (stiff),
    so both ends are bounded.
    """
    rho = np.clip(np.asarray(rho, dtype=float), eps, 1.0 - eps)
    return -dt / np.log(rho)


def gate_law(node: NeuralOde, v_obs):
    """Steady states and time constants of all gates at raw observables v_obs."""
    t = node.tensors
    vn = node.norm.norm_obs(np.asarray(v_obs, dtype=float))
    z1 = np.tanh(t["phi1.0.W"] @ vn + t["phi1.0.b"])
    x = np.tanh(t["phi1.1.W"] @ z1 + t["phi1.1.b"])
    h_inf = sigmoid(t["gnn.W_inf"] @ x + t["gnn.b_inf"])
    rho = sigmoid(t["gnn.W_tau"] @ x + t["gnn.b_tau"])
    return h_inf, rho_to_tau(rho, node.dt, node.rho_clamp)


def neural_gate_derivative(u, node: NeuralOde):
    """Relaxation rate (h_inf - h)/tau of the network gates at full state u."""
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise ValueError("non-finite state")
    h_inf, tau = gate_law(node, u[list(node.observables)])
    return (h_inf - u[list(node.gnn_gates)]) / tau


def _clamp(node: NeuralOde, u):
    u = np.array(u, dtype=float, copy=True)
    for i, kind in enumerate(node.host.layout.kinds):
        if kind in (CLASSIC_GATE, ATYPICAL_GATE):
            u[i] = min(max(u[i], GATE_MIN), GATE_MAX)
        elif kind == CONCENTRATION:
            u[i] = max(u[i], CONC_FLOOR)
    return u


def hybrid_step(node: NeuralOde, u, t: float, dt: float, i_stim: float):
    """One integrator step: exponential network gates, Euler for the rest.

    Classic gates outside the network partition (none in the bundled
    models) would fall back to the host model's own relaxation law.
    """
    host = node.host
    u = _clamp(node, np.asarray(u, dtype=float))
    rhs = host.rhs_nongate if host.rhs_nongate is not None else host.rhs
    out = u + dt * rhs(u, t, i_stim, host.scales)
    h_inf, tau = gate_law(node, u[list(node.observables)])
    for pos, i in enumerate(node.gnn_gates):
        out[i] = h_inf[pos] + (u[i] - h_inf[pos]) * np.exp(-dt / tau[pos])
    v = u[host.layout.voltage_index]
    for i, spec in host.gates.items():
        if i in node.gnn_gates:
            continue
        minf = spec.steady_state(v)
        out[i] = minf + (u[i] - minf) * np.exp(-dt / spec.tau(v))
    return out


def paced_steady_state(model: IonicModel, protocol: PacingProtocol,
                       warmup_ms: float, inner_dt: float = DEFAULT_INNER_DT):
    """State of the host model after warmup_ms of pacing at the protocol."""
    n_steps = int(round(warmup_ms / inner_dt))
    if n_steps == 0:
        return np.array(model.initial_state, dtype=float)
    if model.fast_stepper is not None:
        u0 = np.asarray(model.initial_state, dtype=float)[:, None]
        cl = np.array([protocol.cycle_length])
        # sample the single state reached after n_steps updates
        out = model.fast_stepper(
            u0, n_steps + 1, inner_dt, cl,
            protocol.stimulus_amplitude, protocol.stimulus_duration,
            model.scales, n_steps, 1, 1,
        )
        return out[:, 0, 0].copy()
    u = np.array(model.initial_state, dtype=float)
    for step in range(n_steps):
        t = step * inner_dt
        u = _step(model, u, t, inner_dt, protocol.stimulus(t))
    return u


def integrate_neural_ode(node: NeuralOde, protocol: PacingProtocol,
                         duration: float | None = None,
                         inner_dt: float = DEFAULT_INNER_DT,
                         dt_out: float = DEFAULT_DT_OUT,
                         u0=None, warmup_ms: float = 0.0) -> Trajectory:
    """Integrate the coupled system under pacing; samples are exact states.

    Non-gate variables start from the host model's paced state after
    warmup_ms (its resting initial state when warmup_ms is 0), or from an
    explicit u0.
    """
    if duration is None:
        duration = protocol.total_duration
    every = int(round(dt_out / inner_dt))
    if abs(every * inner_dt - dt_out) > 1e-9:
        raise ValueError("dt_out must be an integer multiple of inner_dt")
    n_steps = int(round(duration / inner_dt))
    n_keep = (n_steps + every - 1) // every if n_steps > 0 else 0
    if u0 is None:
        u = paced_steady_state(node.host, protocol, warmup_ms, inner_dt)
    else:
        u = np.array(u0, dtype=float)
    out = np.empty((node.host.layout.k, n_keep))
    kept = 0
    for step in range(n_steps):
        if step % every == 0 and kept < n_keep:
            out[:, kept] = u
            kept += 1
        t = step * inner_dt
        u = hybrid_step(node, u, t, inner_dt, float(protocol.stimulus(t)))
        if not np.all(np.isfinite(u)):
            bad = int(np.nonzero(~np.isfinite(u))[0][0])
            raise IntegrationDivergedError(t + inner_dt, node.host.layout.names[bad])
    return Trajectory(
        dt=dt_out,
        values=out,
        cycle_length=protocol.cycle_length,
        model_key=node.host.key,
        names=node.host.layout.names,
    )


def reconstruct_currents(node: NeuralOde, trajectory: Trajectory) -> dict:
    """Per-current time series along a trajectory carrying network gates.

    The gate rows of a neural-ODE trajectory already hold the network's
    gate values, so plugging whole states into the host current formulas
    substitutes them for the model's own gating variables.
    """
    order = [trajectory.names.index(n) for n in node.host.layout.names]
    return eval_currents(node.host, trajectory.values[order])


def currents_to_csv(currents: dict, times, path) -> None:
    names = list(currents)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", *names])
        for j, t in enumerate(np.asarray(times, dtype=float)):
            writer.writerow([repr(float(t))] + [repr(float(currents[n][j])) for n in names])


# ------------------------------------------------------- beat-level metrics

@dataclass(frozen=True)
class ApMetrics:
    apd90: float  # ms
    peak_vm: float  # mV
    resting_vm: float  # mV
    ca_amplitude: float  # mM; nan when no calcium variable exists

    def to_json(self, path=None) -> str:
        doc = json.dumps({
            "apd90": self.apd90,
            "peak_vm": self.peak_vm,
            "resting_vm": self.resting_vm,
            "ca_amplitude": self.ca_amplitude,
        }, indent=2) + "\n"
        if path is not None:
            Path(path).write_text(doc)
        return doc


MIN_UPSTROKE = 5.0  # mV/ms; slower rises do not count as a paced beat
MIN_AMPLITUDE = 10.0  # mV


def _beat_windows(traj: Trajectory, n_beats: int):
    """Index ranges of the last n_beats complete pacing cycles."""
    cl = traj.cycle_length
    per_beat = int(round(cl / traj.dt))
    if per_beat < 4:
        raise NoBeatError("sampling too coarse to resolve a beat")
    t_start, t_end = traj.t0, traj.t0 + traj.dt * (traj.n_samples - 1)
    first_cycle = int(np.ceil(t_start / cl - 1e-9))
    last_cycle = int(np.floor(t_end / cl + 1e-9)) - 1
    cycles = range(max(first_cycle, last_cycle - n_beats + 1), last_cycle + 1)
    windows = []
    for m in cycles:
        a = int(round((m * cl - traj.t0) / traj.dt))
        windows.append((a, a + per_beat))
    if not windows:
        raise NoBeatError("trajectory shorter than one pacing cycle")
    return windows


def ap_metrics(trajectory: Trajectory, voltage_name: str = "V",
               calcium_name: str = "Ca_i", n_beats: int = 3) -> ApMetrics:
    """Beat-averaged action-potential metrics over the last n_beats cycles.

    APD90 runs from the maximum-upstroke sample to the first sample at or
    below 90% repolarization toward that beat's own resting level.
    """
    v = trajectory.row(voltage_name)
    ca = trajectory.row(calcium_name) if calcium_name in trajectory.names else None
    dt = trajectory.dt
    apds, peaks, rests, camps = [], [], [], []
    for a, b in _beat_windows(trajectory, n_beats):
        seg = v[a:b]
        dv = np.diff(seg) / dt
        rise = int(np.argmax(dv))
        up = rise + 1  # first sample at or past the steepest rise
        peak = float(seg.max())
        rest = float(seg.min())
        if dv[rise] < MIN_UPSTROKE or peak - rest < MIN_AMPLITUDE:
            continue
        level = peak - 0.9 * (peak - rest)
        below = np.nonzero(seg[up:] <= level)[0]
        if len(below) == 0 or below[0] == 0:
            continue
        apds.append(below[0] * dt)
        peaks.append(peak)
        rests.append(rest)
        if ca is not None:
            cseg = ca[a:b]
            camps.append(float(cseg.max() - cseg.min()))
    if not apds:
        raise NoBeatError("no beat detected")
    return ApMetrics(
        apd90=float(np.mean(apds)),
        peak_vm=float(np.mean(peaks)),
        resting_vm=float(np.mean(rests)),
        ca_amplitude=float(np.mean(camps)) if camps else float("nan"),
    )
