"""Compiled Rush-Larsen inner loop for the tnnp2004 model.

Mirrors the numpy formulation in tnnp2004.py operation for operation; a
regression test pins the two paths against each other. Used only by the
dataset generator, where the 0.02 ms inner step over 20 s segments makes
the pure-numpy loop too slow. Falls back to None when numba is missing.
"""

from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit, prange
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None

# scale vector order shared with sim.generate_dataset
SCALE_NAMES = (
    "I_Na", "I_CaL", "I_Kr", "I_Ks", "I_K1", "I_to", "I_NaCa", "I_NaK",
    "I_pCa", "I_pK", "I_bNa", "I_bCa", "I_rel",
)

_R = 8314.472
_T = 310.0
_F = 96485.3415
_RTONF = _R * _T / _F
_CM = 0.185
_V_C = 0.016404
_V_SR = 0.001094
_K_O = 5.4
_NA_O = 140.0
_CA_O = 2.0


def _core(u, dt, i_stim, g_ks, g_to, s_variant, sc):
    """Scalar one-step update, written for numba; u is a (17,) view."""
    (v, m, h, j, d, f, fca, r, s, xs, xr1, xr2, g, cai, casr, nai, ki) = (
        u[0], u[1], u[2], u[3], u[4], u[5], u[6], u[7], u[8], u[9], u[10],
        u[11], u[12], u[13], u[14], u[15], u[16],
    )
    # clamping mirrors models.core.clamp_state
    if cai < 1e-12:
        cai = 1e-12
    if casr < 1e-12:
        casr = 1e-12
    if fca < 0.0:
        fca = 0.0
    elif fca > 1.0:
        fca = 1.0
    if g < 0.0:
        g = 0.0
    elif g > 1.0:
        g = 1.0

    ena = _RTONF * math.log(_NA_O / nai)
    ek = _RTONF * math.log(_K_O / ki)
    eks = _RTONF * math.log((_K_O + 0.03 * _NA_O) / (ki + 0.03 * nai))
    eca = 0.5 * _RTONF * math.log(_CA_O / cai)

    ina = sc[0] * 14.838 * m ** 3 * h * j * (v - ena)

    a = 2.0 * _F / (_R * _T)
    w = a * v
    if abs(w) < 1e-7:
        vf = 1.0 / a - v / 2.0
    else:
        vf = v / (math.exp(w) - 1.0)
    ical = sc[1] * (
        0.000175 * d * f * fca * 2.0 * _F * a * vf
        * (cai * math.exp(w) - 0.341 * _CA_O)
    )

    ikr = sc[2] * 0.096 * math.sqrt(_K_O / 5.4) * xr1 * xr2 * (v - ek)
    iks = sc[3] * g_ks * xs ** 2 * (v - eks)

    ak1 = 0.1 / (1.0 + math.exp(0.06 * (v - ek - 200.0)))
    bk1 = (
        3.0 * math.exp(0.0002 * (v - ek + 100.0)) + math.exp(0.1 * (v - ek - 10.0))
    ) / (1.0 + math.exp(-0.5 * (v - ek)))
    ik1 = sc[4] * 5.405 * math.sqrt(_K_O / 5.4) * (ak1 / (ak1 + bk1)) * (v - ek)

    ito = sc[5] * g_to * r * s * (v - ek)

    ex1 = math.exp(0.35 * v * _F / (_R * _T))
    ex2 = math.exp((0.35 - 1.0) * v * _F / (_R * _T))
    inaca = sc[6] * (
        1000.0
        * (ex1 * nai ** 3 * _CA_O - ex2 * _NA_O ** 3 * cai * 2.5)
        / ((87.5 ** 3 + _NA_O ** 3) * (1.38 + _CA_O) * (1.0 + 0.1 * ex2))
    )

    inak = sc[7] * (
        1.362 * _K_O * nai
        / (
            (_K_O + 1.0)
            * (nai + 40.0)
            * (1.0 + 0.1245 * math.exp(-0.1 * v * _F / (_R * _T)) + 0.0353 * math.exp(-v * _F / (_R * _T)))
        )
    )

    ipca = sc[8] * 0.825 * cai / (cai + 0.0005)
    ipk = sc[9] * 0.0146 * (v - ek) / (1.0 + math.exp((25.0 - v) / 5.98))
    ibna = sc[10] * 0.00029 * (v - ena)
    ibca = sc[11] * 0.000592 * (v - eca)

    irel = sc[12] * (0.016464 * casr ** 2 / (0.25 ** 2 + casr ** 2) + 0.008232) * d * g
    iup = 0.000425 / (1.0 + (0.00025 / cai) ** 2)
    ileak = 8e-5 * (casr - cai)

    dv = -(
        ina + ical + ikr + iks + ik1 + ito + inaca + inak + ipca + ipk
        + ibna + ibca + i_stim
    )

    # classic gates: exact exponential update at frozen v
    minf = 1.0 / (1.0 + math.exp((-56.86 - v) / 9.03)) ** 2
    am = 1.0 / (1.0 + math.exp((-60.0 - v) / 5.0))
    bm = 0.1 / (1.0 + math.exp((v + 35.0) / 5.0)) + 0.1 / (1.0 + math.exp((v - 50.0) / 200.0))
    taum = am * bm

    hinf = 1.0 / (1.0 + math.exp((v + 71.55) / 7.43)) ** 2
    if v < -40.0:
        ah = 0.057 * math.exp(-(v + 80.0) / 6.8)
        bh = 2.7 * math.exp(0.079 * v) + 3.1e5 * math.exp(0.3485 * v)
    else:
        ah = 0.0
        bh = 0.77 / (0.13 * (1.0 + math.exp(-(v + 10.66) / 11.1)))
    tauh = 1.0 / (ah + bh)

    jinf = hinf
    if v < -40.0:
        aj = (
            (-2.5428e4 * math.exp(0.2444 * v) - 6.948e-6 * math.exp(-0.04391 * v))
            * (v + 37.78)
            / (1.0 + math.exp(0.311 * (v + 79.23)))
        )
        bj = 0.02424 * math.exp(-0.01052 * v) / (1.0 + math.exp(-0.1378 * (v + 40.14)))
    else:
        aj = 0.0
        bj = 0.6 * math.exp(0.057 * v) / (1.0 + math.exp(-0.1 * (v + 32.0)))
    tauj = 1.0 / (aj + bj)

    dinf = 1.0 / (1.0 + math.exp((-5.0 - v) / 7.5))
    ad = 1.4 / (1.0 + math.exp((-35.0 - v) / 13.0)) + 0.25
    bd = 1.4 / (1.0 + math.exp((v + 5.0) / 5.0))
    cd = 1.0 / (1.0 + math.exp((50.0 - v) / 20.0))
    taud = ad * bd + cd

    finf = 1.0 / (1.0 + math.exp((v + 20.0) / 7.0))
    tauf = (
        1125.0 * math.exp(-((v + 27.0) ** 2) / 240.0)
        + 80.0
        + 165.0 / (1.0 + math.exp((25.0 - v) / 10.0))
    )

    rinf = 1.0 / (1.0 + math.exp((20.0 - v) / 6.0))
    taur = 9.5 * math.exp(-((v + 40.0) ** 2) / 1800.0) + 0.8

    if s_variant == 0:  # epi / mcell
        sinf = 1.0 / (1.0 + math.exp((v + 20.0) / 5.0))
        taus = (
            85.0 * math.exp(-((v + 45.0) ** 2) / 320.0)
            + 5.0 / (1.0 + math.exp((v - 20.0) / 5.0))
            + 3.0
        )
    else:  # endo
        sinf = 1.0 / (1.0 + math.exp((v + 28.0) / 5.0))
        taus = 1000.0 * math.exp(-((v + 67.0) ** 2) / 1000.0) + 8.0

    xsinf = 1.0 / (1.0 + math.exp((-5.0 - v) / 14.0))
    axs = 1100.0 / math.sqrt(1.0 + math.exp((-10.0 - v) / 6.0))
    bxs = 1.0 / (1.0 + math.exp((v - 60.0) / 20.0))
    tauxs = axs * bxs

    xr1inf = 1.0 / (1.0 + math.exp((-26.0 - v) / 7.0))
    axr1 = 450.0 / (1.0 + math.exp((-45.0 - v) / 10.0))
    bxr1 = 6.0 / (1.0 + math.exp((v + 30.0) / 11.5))
    tauxr1 = axr1 * bxr1

    xr2inf = 1.0 / (1.0 + math.exp((v + 88.0) / 24.0))
    axr2 = 3.0 / (1.0 + math.exp((-60.0 - v) / 20.0))
    bxr2 = 1.12 / (1.0 + math.exp((v - 60.0) / 20.0))
    tauxr2 = axr2 * bxr2

    u[1] = minf + (m - minf) * math.exp(-dt / taum)
    u[2] = hinf + (h - hinf) * math.exp(-dt / tauh)
    u[3] = jinf + (j - jinf) * math.exp(-dt / tauj)
    u[4] = dinf + (d - dinf) * math.exp(-dt / taud)
    u[5] = finf + (f - finf) * math.exp(-dt / tauf)
    u[7] = rinf + (r - rinf) * math.exp(-dt / taur)
    u[8] = sinf + (s - sinf) * math.exp(-dt / taus)
    u[9] = xsinf + (xs - xsinf) * math.exp(-dt / tauxs)
    u[10] = xr1inf + (xr1 - xr1inf) * math.exp(-dt / tauxr1)
    u[11] = xr2inf + (xr2 - xr2inf) * math.exp(-dt / tauxr2)

    # atypical gates and concentrations: forward Euler
    a8 = 1.0 / (1.0 + (cai / 0.000325) ** 8)
    b8 = 0.1 / (1.0 + math.exp((cai - 0.0005) / 0.0001))
    c8 = 0.2 / (1.0 + math.exp((cai - 0.00075) / 0.0008))
    fcainf = (a8 + b8 + c8 + 0.23) / 1.46
    dfca = (fcainf - fca) / 2.0
    if fcainf > fca and v > -60.0:
        dfca = 0.0

    if cai < 0.00035:
        ginf = 1.0 / (1.0 + (cai / 0.00035) ** 6)
    else:
        ginf = 1.0 / (1.0 + (cai / 0.00035) ** 16)
    dg = (ginf - g) / 2.0
    if ginf > g and v > -60.0:
        dg = 0.0

    caibuf = 1.0 / (1.0 + 0.15 * 0.001 / (cai + 0.001) ** 2)
    dcai = caibuf * (
        ileak - iup + irel - (ical + ibca + ipca - 2.0 * inaca) * _CM / (2.0 * _V_C * _F)
    )
    casrbuf = 1.0 / (1.0 + 10.0 * 0.3 / (casr + 0.3) ** 2)
    dcasr = casrbuf * (_V_C / _V_SR) * (iup - irel - ileak)
    dnai = -(ina + ibna + 3.0 * inak + 3.0 * inaca) * _CM / (_V_C * _F)
    dki = -(ik1 + ito + ikr + iks - 2.0 * inak + ipk + i_stim) * _CM / (_V_C * _F)

    u[0] = v + dt * dv
    u[6] = fca + dt * dfca
    u[12] = g + dt * dg
    u[13] = cai + dt * dcai
    u[14] = casr + dt * dcasr
    u[15] = nai + dt * dnai
    u[16] = ki + dt * dki


def _segment_loop(u0, n_steps, dt, cycle_lengths, amp, dur, sc, g_ks, g_to,
                  s_variant, start_step, sample_every, n_keep):
    n = u0.shape[1]
    out = np.empty((17, n, n_keep))
    for cell in prange(n):
        u = u0[:, cell].copy()
        cl = cycle_lengths[cell]
        kept = 0
        for step in range(n_steps):
            if step >= start_step and (step - start_step) % sample_every == 0 and kept < n_keep:
                for row in range(17):
                    out[row, cell, kept] = u[row]
                kept += 1
            t = step * dt
            i_stim = amp if (t % cl) < dur else 0.0
            _core(u, dt, i_stim, g_ks, g_to, s_variant, sc)
    return out


if njit is not None:
    _core = njit(cache=True)(_core)
    _segment_loop = njit(cache=True, parallel=True)(_segment_loop)


def make_stepper(variant: str):
    if njit is None:
        return None
    from .tnnp2004 import VARIANTS

    g_ks, g_to = VARIANTS[variant]
    s_variant = 1 if variant == "endo" else 0

    def stepper(u0, n_steps, dt, cycle_lengths, amp, dur, scales: dict,
                start_step, sample_every, n_keep):
        sc = np.array([scales[name] for name in SCALE_NAMES])
        return _segment_loop(
            np.ascontiguousarray(u0, dtype=np.float64),
            int(n_steps), float(dt),
            np.asarray(cycle_lengths, dtype=np.float64),
            float(amp), float(dur), sc, g_ks, g_to, s_variant,
            int(start_step), int(sample_every), int(n_keep),
        )

    return stepper
