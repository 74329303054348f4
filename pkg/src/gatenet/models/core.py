"""Declarative description of ionic cell models.

A model is a state vector layout, a set of voltage-gated channel gates,
a list of membrane currents, and a derivative function. Gates of the
classic Hodgkin-Huxley form relax toward a voltage-dependent steady
state; everything else (potential, concentrations, atypical gates) is
owned by the model's derivative function.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

VOLTAGE = "voltage"
CONCENTRATION = "concentration"
CLASSIC_GATE = "classic_gate"
ATYPICAL_GATE = "atypical_gate"

_KINDS = (VOLTAGE, CONCENTRATION, CLASSIC_GATE, ATYPICAL_GATE)

GATE_MIN, GATE_MAX = 0.0, 1.0
CONC_FLOOR = 1e-12  # clamp before logs/powers so numerical noise cannot NaN


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class StateLayout:
    """Names and kinds of the state variables; index 0..k-1 order is fixed."""

    names: tuple[str, ...]
    kinds: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) != len(self.kinds):
            raise ModelError("names and kinds must have equal length")
        if len(set(self.names)) != len(self.names):
            raise ModelError("state names must be unique")
        for kind in self.kinds:
            if kind not in _KINDS:
                raise ModelError(f"unknown state kind {kind!r}")
        if self.kinds.count(VOLTAGE) != 1:
            raise ModelError("exactly one voltage variable is required")

    @property
    def k(self) -> int:
        return len(self.names)

    @property
    def voltage_index(self) -> int:
        return self.kinds.index(VOLTAGE)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def indices_of_kind(self, kind: str) -> tuple[int, ...]:
        return tuple(i for i, k in enumerate(self.kinds) if k == kind)


@dataclass(frozen=True)
class StatePartition:
    """Observable / recurrent-cell split of the state indices.

    ``gnn_gates`` are the classic gates handled by the gating cell;
    ``lstm_vars`` are all remaining variables; the two sets are disjoint
    and together cover the whole state.
    """

    observables: tuple[int, ...]
    gnn_gates: tuple[int, ...]
    lstm_vars: tuple[int, ...]

    def validate(self, layout: StateLayout) -> None:
        all_idx = set(range(layout.k))
        if set(self.gnn_gates) & set(self.lstm_vars):
            raise ModelError("gnn_gates and lstm_vars overlap")
        if set(self.gnn_gates) | set(self.lstm_vars) != all_idx:
            raise ModelError("gnn_gates and lstm_vars must cover the state")
        if not set(self.observables) <= all_idx:
            raise ModelError("observable index out of range")
        for i in self.gnn_gates:
            if layout.kinds[i] != CLASSIC_GATE:
                raise ModelError(f"gnn gate {layout.names[i]!r} is not a classic gate")


@dataclass(frozen=True)
class GateSpec:
    """Voltage-dependent relaxation law of one classic gate.

    Primary form is (steady_state, tau); the equivalent rate form
    (alpha, beta) is derived unless supplied, with
    steady_state = alpha/(alpha+beta) and tau = 1/(alpha+beta).
    All callables must accept scalars or ndarrays of membrane potential.
    """

    steady_state: Callable
    tau: Callable
    alpha: Callable = None
    beta: Callable = None

    def __post_init__(self):
        if self.alpha is None:
            object.__setattr__(self, "alpha", lambda v: self.steady_state(v) / self.tau(v))
        if self.beta is None:
            object.__setattr__(self, "beta", lambda v: (1.0 - self.steady_state(v)) / self.tau(v))

    @classmethod
    def from_rates(cls, alpha: Callable, beta: Callable) -> "GateSpec":
        return cls(
            steady_state=lambda v: alpha(v) / (alpha(v) + beta(v)),
            tau=lambda v: 1.0 / (alpha(v) + beta(v)),
            alpha=alpha,
            beta=beta,
        )


@dataclass(frozen=True)
class CurrentSpec:
    """One named current: formula over the full state, times a scale knob.

    ``conductance_scale`` multiplies the peak-conductance factor and is
    the hook used by channelopathy scenarios. ``membrane`` marks currents
    that enter the potential equation (fluxes like the SR release current
    do not).
    """

    name: str
    formula: Callable  # formula(u) -> unscaled current density, pA/pF
    conductance_scale: float = 1.0
    membrane: bool = True


@dataclass(frozen=True)
class IonicModel:
    """Immutable bundle of everything needed to simulate one cell model.

    ``derivative(u, t, i_stim)`` must honor the conductance scales of
    ``currents``; builders achieve this by closing over a shared rhs that
    reads the scales passed in at call time.
    """

    key: str
    layout: StateLayout
    partition: StatePartition
    gates: Mapping[int, GateSpec]
    currents: tuple[CurrentSpec, ...]
    rhs: Callable  # rhs(u, t, i_stim, scales: dict name->float) -> du/dt
    c_m: float
    initial_state: np.ndarray
    variant: str = ""
    # optional compiled integrator hook: (u0, n_steps, dt, cycle_lengths,
    # amp, dur, scales, sample_every, n_keep) -> sampled states
    fast_stepper: Callable = field(default=None, compare=False)
    # rhs restricted to the non-classic-gate rows (integrator fast path)
    rhs_nongate: Callable = field(default=None, compare=False)

    def __post_init__(self):
        self.partition.validate(self.layout)
        for i in self.gates:
            if self.layout.kinds[i] != CLASSIC_GATE:
                raise ModelError(f"gate spec on non-gate variable {self.layout.names[i]!r}")
        if set(self.gates) != set(self.layout.indices_of_kind(CLASSIC_GATE)):
            raise ModelError("every classic gate needs a GateSpec")
        if len(self.initial_state) != self.layout.k:
            raise ModelError("initial state dimension mismatch")

    @property
    def scales(self) -> dict:
        return {c.name: c.conductance_scale for c in self.currents}

    def derivative(self, u, t=0.0, i_stim=0.0):
        return self.rhs(u, t, i_stim, self.scales)

    def current(self, name: str) -> CurrentSpec:
        for c in self.currents:
            if c.name == name:
                return c
        raise ModelError(f"unknown current {name!r}")


def gate_derivative(m, v, spec: GateSpec):
    """Relaxation rate (m_inf - m)/tau of a classic gate."""
    if not np.all(np.isfinite(v)):
        raise ModelError("invalid membrane potential")
    return (spec.steady_state(v) - m) / spec.tau(v)


def clamp_state(model: IonicModel, u: np.ndarray) -> np.ndarray:
    """Clamp gates into [0,1] and concentrations away from zero."""
    u = np.array(u, dtype=float, copy=True)
    for i, kind in enumerate(model.layout.kinds):
        if kind in (CLASSIC_GATE, ATYPICAL_GATE):
            u[i] = np.clip(u[i], GATE_MIN, GATE_MAX)
        elif kind == CONCENTRATION:
            u[i] = np.maximum(u[i], CONC_FLOOR)
    return u


def eval_currents(model: IonicModel, u: np.ndarray) -> dict:
    """Evaluate all currents at state u, with conductance scales applied."""
    u = np.asarray(u, dtype=float)
    if u.shape[0] != model.layout.k:
        raise ModelError("state dimension mismatch")
    for i in model.layout.indices_of_kind(CONCENTRATION):
        if np.any(u[i] <= 0.0):
            raise ModelError(f"nonpositive concentration {model.layout.names[i]!r}")
    uc = np.array(u, dtype=float, copy=True)
    for i, kind in enumerate(model.layout.kinds):
        if kind in (CLASSIC_GATE, ATYPICAL_GATE):
            uc[i] = np.clip(uc[i], GATE_MIN, GATE_MAX)
    return {c.name: c.conductance_scale * c.formula(uc) for c in model.currents}


SCENARIO_SCALES = {
    "long_qt": ("I_Kr", 0.5),
    "short_qt": ("I_CaL", 0.5),
    "ito": ("I_to", 3.0),
}


def with_perturbation(model: IonicModel, scenario: str) -> IonicModel:
    """Return a copy with one channel conductance rescaled; gating unchanged."""
    if scenario not in SCENARIO_SCALES:
        raise ModelError(f"unknown scenario {scenario!r}")
    name, scale = SCENARIO_SCALES[scenario]
    model.current(name)  # raises if the model lacks the target current
    currents = tuple(
        dataclasses.replace(c, conductance_scale=scale) if c.name == name else c
        for c in model.currents
    )
    return dataclasses.replace(model, currents=currents)
