"""Hodgkin-Huxley 1952 squid-axon model (4 states).

Included as a fast fixture for integrator and training plumbing; the
production model is tnnp2004. Rate constants are the standard modern
(-65 mV resting) parameterization.
"""

from __future__ import annotations

import numpy as np

from .core import (
    CLASSIC_GATE,
    VOLTAGE,
    CurrentSpec,
    GateSpec,
    IonicModel,
    StateLayout,
    StatePartition,
)

G_NA, E_NA = 120.0, 50.0
G_K, E_K = 36.0, -77.0
G_L, E_L = 0.3, -54.387
C_M = 1.0

V, M, H, N = 0, 1, 2, 3


def _vtrap(x, y):
    # x/(1 - exp(-x/y)) with the removable singularity at x = 0 filled in
    x = np.asarray(x, dtype=float)
    small = np.abs(x / y) < 1e-6
    safe = np.where(small, 1.0, x)
    return np.where(small, y * (1.0 + x / (2.0 * y)), safe / (1.0 - np.exp(-safe / y)))


def alpha_m(v):
    return 0.1 * _vtrap(v + 40.0, 10.0)


def beta_m(v):
    return 4.0 * np.exp(-(v + 65.0) / 18.0)


def alpha_h(v):
    return 0.07 * np.exp(-(v + 65.0) / 20.0)


def beta_h(v):
    return 1.0 / (1.0 + np.exp(-(v + 35.0) / 10.0))


def alpha_n(v):
    return 0.01 * _vtrap(v + 55.0, 10.0)


def beta_n(v):
    return 0.125 * np.exp(-(v + 65.0) / 80.0)


def _i_na(u):
    return G_NA * u[M] ** 3 * u[H] * (u[V] - E_NA)


def _i_k(u):
    return G_K * u[N] ** 4 * (u[V] - E_K)


def _i_leak(u):
    return G_L * (u[V] - E_L)


def _rhs(u, t, i_stim, scales):
    v = u[V]
    du = np.empty_like(np.asarray(u, dtype=float))
    total = scales["I_Na"] * _i_na(u) + scales["I_K"] * _i_k(u) + scales["I_L"] * _i_leak(u)
    du[V] = -(total + i_stim) / C_M
    du[M] = alpha_m(v) * (1.0 - u[M]) - beta_m(v) * u[M]
    du[H] = alpha_h(v) * (1.0 - u[H]) - beta_h(v) * u[H]
    du[N] = alpha_n(v) * (1.0 - u[N]) - beta_n(v) * u[N]
    return du


def _rhs_nongate(u, t, i_stim, scales):
    du = np.zeros_like(np.asarray(u, dtype=float))
    total = scales["I_Na"] * _i_na(u) + scales["I_K"] * _i_k(u) + scales["I_L"] * _i_leak(u)
    du[V] = -(total + i_stim) / C_M
    return du


def build() -> IonicModel:
    layout = StateLayout(
        names=("V", "m", "h", "n"),
        kinds=(VOLTAGE, CLASSIC_GATE, CLASSIC_GATE, CLASSIC_GATE),
    )
    partition = StatePartition(observables=(V,), gnn_gates=(M, H, N), lstm_vars=(V,))
    gates = {
        M: GateSpec.from_rates(alpha_m, beta_m),
        H: GateSpec.from_rates(alpha_h, beta_h),
        N: GateSpec.from_rates(alpha_n, beta_n),
    }
    currents = (
        CurrentSpec("I_Na", _i_na),
        CurrentSpec("I_K", _i_k),
        CurrentSpec("I_L", _i_leak),
    )
    # resting state at v0; gates at their steady state
    v0 = -65.0
    u0 = np.array(
        [
            v0,
            alpha_m(v0) / (alpha_m(v0) + beta_m(v0)),
            alpha_h(v0) / (alpha_h(v0) + beta_h(v0)),
            alpha_n(v0) / (alpha_n(v0) + beta_n(v0)),
        ]
    )
    return IonicModel(
        key="hh1952",
        layout=layout,
        partition=partition,
        gates=gates,
        currents=currents,
        rhs=_rhs,
        c_m=C_M,
        initial_state=u0,
        rhs_nongate=_rhs_nongate,
    )
