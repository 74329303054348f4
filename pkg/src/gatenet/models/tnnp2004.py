"""ten Tusscher-Noble-Noble-Panfilov 2004 human ventricular model.

Transcribed from the published model equations (epicardial variant by
default; endocardial and M-cell parameter sets are selectable). 17 state
variables: potential, four concentrations, ten classic gates and the two
atypical gates f_Ca and g. The inward-rectifier gate K1 is algebraic and
lives inside the I_K1 formula.

All rate/current functions are vectorized: the state may be a (17,) vector
or a (17, n) matrix of n cells integrated side by side.
"""

from __future__ import annotations

import numpy as np

from .core import (
    ATYPICAL_GATE,
    CLASSIC_GATE,
    CONCENTRATION,
    VOLTAGE,
    CurrentSpec,
    GateSpec,
    IonicModel,
    ModelError,
    StateLayout,
    StatePartition,
)

# physical constants
R = 8314.472  # J/(kmol K)
T = 310.0  # K
F = 96485.3415  # C/mmol
RTONF = R * T / F

# cell geometry / capacitance
CM = 0.185  # uF
V_C = 0.016404  # uL
V_SR = 0.001094

# external concentrations (mM)
K_O = 5.4
NA_O = 140.0
CA_O = 2.0

# channel conductances / permeabilities (shared across variants)
G_NA = 14.838
G_K1 = 5.405
G_KR = 0.096
G_CAL = 0.000175
G_BNA = 0.00029
G_BCA = 0.000592
G_PK = 0.0146
G_PCA = 0.825
K_PCA = 0.0005
P_NAK = 1.362
K_MK = 1.0
K_MNA = 40.0
K_NACA = 1000.0
KM_NAI = 87.5
KM_CA = 1.38
K_SAT = 0.1
NACA_ALPHA = 2.5
GAMMA = 0.35
P_KNA = 0.03

# calcium handling
BUF_C, K_BUF_C = 0.15, 0.001
BUF_SR, K_BUF_SR = 10.0, 0.3
V_LEAK = 8e-5
VMAX_UP, K_UP = 0.000425, 0.00025
A_REL, B_REL, C_REL = 0.016464, 0.25, 0.008232
TAU_G = 2.0
TAU_FCA = 2.0

VARIANTS = {
    # g_Ks, g_to
    "epi": (0.245, 0.294),
    "endo": (0.245, 0.073),
    "mcell": (0.062, 0.294),
}

# state indices
iV, iM, iH, iJ, iD, iF, iFCA, iR, iS, iXS, iXR1, iXR2, iG, iCAI, iCASR, iNAI, iKI = range(17)

NAMES = (
    "V", "m", "h", "j", "d", "f", "f_ca", "r", "s", "xs", "xr1", "xr2",
    "g", "Ca_i", "Ca_sr", "Na_i", "K_i",
)
KINDS = (
    VOLTAGE,
    CLASSIC_GATE, CLASSIC_GATE, CLASSIC_GATE, CLASSIC_GATE, CLASSIC_GATE,
    ATYPICAL_GATE,
    CLASSIC_GATE, CLASSIC_GATE, CLASSIC_GATE, CLASSIC_GATE, CLASSIC_GATE,
    ATYPICAL_GATE,
    CONCENTRATION, CONCENTRATION, CONCENTRATION, CONCENTRATION,
)

# published initial conditions (paced-naive resting cell)
INITIAL_STATE = np.array(
    [
        -86.2,  # V
        0.0, 0.75, 0.75,  # m h j
        0.0, 1.0, 1.0,  # d f f_ca
        0.0, 1.0,  # r s
        0.0, 0.0, 1.0,  # xs xr1 xr2
        1.0,  # g
        0.0002, 0.2, 11.6, 138.3,  # Ca_i Ca_sr Na_i K_i
    ]
)


# ---------------------------------------------------------------- gate rates

def m_inf(v):
    return 1.0 / (1.0 + np.exp((-56.86 - v) / 9.03)) ** 2


def tau_m(v):
    a = 1.0 / (1.0 + np.exp((-60.0 - v) / 5.0))
    b = 0.1 / (1.0 + np.exp((v + 35.0) / 5.0)) + 0.1 / (1.0 + np.exp((v - 50.0) / 200.0))
    return a * b


def h_inf(v):
    return 1.0 / (1.0 + np.exp((v + 71.55) / 7.43)) ** 2


def tau_h(v):
    v = np.asarray(v, dtype=float)
    a = np.where(v < -40.0, 0.057 * np.exp(-(v + 80.0) / 6.8), 0.0)
    b = np.where(
        v < -40.0,
        2.7 * np.exp(0.079 * v) + 3.1e5 * np.exp(0.3485 * v),
        0.77 / (0.13 * (1.0 + np.exp(-(v + 10.66) / 11.1))),
    )
    return 1.0 / (a + b)


def j_inf(v):
    return h_inf(v)


def tau_j(v):
    v = np.asarray(v, dtype=float)
    a = np.where(
        v < -40.0,
        (-2.5428e4 * np.exp(0.2444 * v) - 6.948e-6 * np.exp(-0.04391 * v))
        * (v + 37.78)
        / (1.0 + np.exp(0.311 * (v + 79.23))),
        0.0,
    )
    b = np.where(
        v < -40.0,
        0.02424 * np.exp(-0.01052 * v) / (1.0 + np.exp(-0.1378 * (v + 40.14))),
        0.6 * np.exp(0.057 * v) / (1.0 + np.exp(-0.1 * (v + 32.0))),
    )
    return 1.0 / (a + b)


def d_inf(v):
    return 1.0 / (1.0 + np.exp((-5.0 - v) / 7.5))


def tau_d(v):
    a = 1.4 / (1.0 + np.exp((-35.0 - v) / 13.0)) + 0.25
    b = 1.4 / (1.0 + np.exp((v + 5.0) / 5.0))
    c = 1.0 / (1.0 + np.exp((50.0 - v) / 20.0))
    return a * b + c


def f_inf(v):
    return 1.0 / (1.0 + np.exp((v + 20.0) / 7.0))


def tau_f(v):
    return (
        1125.0 * np.exp(-((v + 27.0) ** 2) / 240.0)
        + 80.0
        + 165.0 / (1.0 + np.exp((25.0 - v) / 10.0))
    )


def r_inf(v):
    return 1.0 / (1.0 + np.exp((20.0 - v) / 6.0))


def tau_r(v):
    return 9.5 * np.exp(-((v + 40.0) ** 2) / 1800.0) + 0.8


def s_inf_epi(v):
    return 1.0 / (1.0 + np.exp((v + 20.0) / 5.0))


def tau_s_epi(v):
    return (
        85.0 * np.exp(-((v + 45.0) ** 2) / 320.0)
        + 5.0 / (1.0 + np.exp((v - 20.0) / 5.0))
        + 3.0
    )


def s_inf_endo(v):
    return 1.0 / (1.0 + np.exp((v + 28.0) / 5.0))


def tau_s_endo(v):
    return 1000.0 * np.exp(-((v + 67.0) ** 2) / 1000.0) + 8.0


def xs_inf(v):
    return 1.0 / (1.0 + np.exp((-5.0 - v) / 14.0))


def tau_xs(v):
    a = 1100.0 / np.sqrt(1.0 + np.exp((-10.0 - v) / 6.0))
    b = 1.0 / (1.0 + np.exp((v - 60.0) / 20.0))
    return a * b


def xr1_inf(v):
    return 1.0 / (1.0 + np.exp((-26.0 - v) / 7.0))


def tau_xr1(v):
    a = 450.0 / (1.0 + np.exp((-45.0 - v) / 10.0))
    b = 6.0 / (1.0 + np.exp((v + 30.0) / 11.5))
    return a * b


def xr2_inf(v):
    return 1.0 / (1.0 + np.exp((v + 88.0) / 24.0))


def tau_xr2(v):
    a = 3.0 / (1.0 + np.exp((-60.0 - v) / 20.0))
    b = 1.12 / (1.0 + np.exp((v - 60.0) / 20.0))
    return a * b


# ------------------------------------------------------------ atypical gates

def f_ca_inf(ca_i):
    a = 1.0 / (1.0 + (ca_i / 0.000325) ** 8)
    b = 0.1 / (1.0 + np.exp((ca_i - 0.0005) / 0.0001))
    c = 0.2 / (1.0 + np.exp((ca_i - 0.00075) / 0.0008))
    return (a + b + c + 0.23) / 1.46


def g_inf(ca_i):
    ca_i = np.asarray(ca_i, dtype=float)
    lo = 1.0 / (1.0 + (ca_i / 0.00035) ** 6)
    hi = 1.0 / (1.0 + (ca_i / 0.00035) ** 16)
    return np.where(ca_i < 0.00035, lo, hi)


def _locked(rate, inf_val, gate_val, v):
    # f_Ca and g may only move toward steady state while depolarized
    return np.where((inf_val > gate_val) & (v > -60.0), 0.0, rate)


# ----------------------------------------------------------------- currents

def e_na(u):
    return RTONF * np.log(NA_O / u[iNAI])


def e_k(u):
    return RTONF * np.log(K_O / u[iKI])


def e_ks(u):
    return RTONF * np.log((K_O + P_KNA * NA_O) / (u[iKI] + P_KNA * u[iNAI]))


def e_ca(u):
    return 0.5 * RTONF * np.log(CA_O / u[iCAI])


def _i_na(u):
    return G_NA * u[iM] ** 3 * u[iH] * u[iJ] * (u[iV] - e_na(u))


def _i_cal(u):
    a = 2.0 * F / (R * T)
    w = a * np.asarray(u[iV], dtype=float)
    # V/(exp(aV)-1) has a removable singularity at V = 0
    small = np.abs(w) < 1e-7
    safe = np.where(small, 1.0, w)
    vf = np.where(small, 1.0 / a - u[iV] / 2.0, u[iV] / (np.exp(safe) - 1.0))
    return (
        G_CAL * u[iD] * u[iF] * u[iFCA] * 2.0 * F * a
        * vf * (u[iCAI] * np.exp(w) - 0.341 * CA_O)
    )


def _i_kr(u):
    return G_KR * np.sqrt(K_O / 5.4) * u[iXR1] * u[iXR2] * (u[iV] - e_k(u))


def _xk1_inf(v, ek):
    a = 0.1 / (1.0 + np.exp(0.06 * (v - ek - 200.0)))
    b = (
        3.0 * np.exp(0.0002 * (v - ek + 100.0)) + np.exp(0.1 * (v - ek - 10.0))
    ) / (1.0 + np.exp(-0.5 * (v - ek)))
    return a / (a + b)


def _i_k1(u):
    ek = e_k(u)
    return G_K1 * np.sqrt(K_O / 5.4) * _xk1_inf(u[iV], ek) * (u[iV] - ek)


def _i_naca(u):
    ex1 = np.exp(GAMMA * u[iV] * F / (R * T))
    ex2 = np.exp((GAMMA - 1.0) * u[iV] * F / (R * T))
    num = ex1 * u[iNAI] ** 3 * CA_O - ex2 * NA_O ** 3 * u[iCAI] * NACA_ALPHA
    den = (KM_NAI ** 3 + NA_O ** 3) * (KM_CA + CA_O) * (1.0 + K_SAT * ex2)
    return K_NACA * num / den


def _i_nak(u):
    den = (
        (K_O + K_MK)
        * (u[iNAI] + K_MNA)
        * (1.0 + 0.1245 * np.exp(-0.1 * u[iV] * F / (R * T)) + 0.0353 * np.exp(-u[iV] * F / (R * T)))
    )
    return P_NAK * K_O * u[iNAI] / den


def _i_pca(u):
    return G_PCA * u[iCAI] / (u[iCAI] + K_PCA)


def _i_pk(u):
    return G_PK * (u[iV] - e_k(u)) / (1.0 + np.exp((25.0 - u[iV]) / 5.98))


def _i_bna(u):
    return G_BNA * (u[iV] - e_na(u))


def _i_bca(u):
    return G_BCA * (u[iV] - e_ca(u))


def _i_rel(u):
    return (A_REL * u[iCASR] ** 2 / (B_REL ** 2 + u[iCASR] ** 2) + C_REL) * u[iD] * u[iG]


def _i_up(u):
    return VMAX_UP / (1.0 + (K_UP / u[iCAI]) ** 2)


def _i_leak(u):
    return V_LEAK * (u[iCASR] - u[iCAI])


def _make_variant_currents(g_ks, g_to):
    def i_ks(u):
        return g_ks * u[iXS] ** 2 * (u[iV] - e_ks(u))

    def i_to(u):
        return g_to * u[iR] * u[iS] * (u[iV] - e_k(u))

    return i_ks, i_to


def _make_rhs(i_ks_fn, i_to_fn, s_inf_fn, tau_s_fn):
    def rhs(u, t, i_stim, scales):
        u = np.asarray(u, dtype=float)
        v = u[iV]
        du = np.empty_like(u)

        ina = scales["I_Na"] * _i_na(u)
        ical = scales["I_CaL"] * _i_cal(u)
        ikr = scales["I_Kr"] * _i_kr(u)
        iks = scales["I_Ks"] * i_ks_fn(u)
        ik1 = scales["I_K1"] * _i_k1(u)
        ito = scales["I_to"] * i_to_fn(u)
        inaca = scales["I_NaCa"] * _i_naca(u)
        inak = scales["I_NaK"] * _i_nak(u)
        ipca = scales["I_pCa"] * _i_pca(u)
        ipk = scales["I_pK"] * _i_pk(u)
        ibna = scales["I_bNa"] * _i_bna(u)
        ibca = scales["I_bCa"] * _i_bca(u)
        irel = scales["I_rel"] * _i_rel(u)
        iup = _i_up(u)
        ileak = _i_leak(u)

        du[iV] = -(
            ina + ical + ikr + iks + ik1 + ito + inaca + inak + ipca + ipk
            + ibna + ibca + i_stim
        )

        du[iM] = (m_inf(v) - u[iM]) / tau_m(v)
        du[iH] = (h_inf(v) - u[iH]) / tau_h(v)
        du[iJ] = (j_inf(v) - u[iJ]) / tau_j(v)
        du[iD] = (d_inf(v) - u[iD]) / tau_d(v)
        du[iF] = (f_inf(v) - u[iF]) / tau_f(v)
        du[iR] = (r_inf(v) - u[iR]) / tau_r(v)
        du[iS] = (s_inf_fn(v) - u[iS]) / tau_s_fn(v)
        du[iXS] = (xs_inf(v) - u[iXS]) / tau_xs(v)
        du[iXR1] = (xr1_inf(v) - u[iXR1]) / tau_xr1(v)
        du[iXR2] = (xr2_inf(v) - u[iXR2]) / tau_xr2(v)

        fcai = f_ca_inf(u[iCAI])
        du[iFCA] = _locked((fcai - u[iFCA]) / TAU_FCA, fcai, u[iFCA], v)
        gi = g_inf(u[iCAI])
        du[iG] = _locked((gi - u[iG]) / TAU_G, gi, u[iG], v)

        caibuf = 1.0 / (1.0 + BUF_C * K_BUF_C / (u[iCAI] + K_BUF_C) ** 2)
        du[iCAI] = caibuf * (
            ileak - iup + irel
            - (ical + ibca + ipca - 2.0 * inaca) * CM / (2.0 * V_C * F)
        )
        casrbuf = 1.0 / (1.0 + BUF_SR * K_BUF_SR / (u[iCASR] + K_BUF_SR) ** 2)
        du[iCASR] = casrbuf * (V_C / V_SR) * (iup - irel - ileak)

        du[iNAI] = -(ina + ibna + 3.0 * inak + 3.0 * inaca) * CM / (V_C * F)
        du[iKI] = -(ik1 + ito + ikr + iks - 2.0 * inak + ipk + i_stim) * CM / (V_C * F)
        return du

    return rhs


def _make_rhs_nongate(rhs):
    gate_rows = (iM, iH, iJ, iD, iF, iR, iS, iXS, iXR1, iXR2)

    def rhs_nongate(u, t, i_stim, scales):
        du = rhs(u, t, i_stim, scales)
        for row in gate_rows:
            du[row] = 0.0
        return du

    return rhs_nongate


def build(variant: str = "epi") -> IonicModel:
    if variant not in VARIANTS:
        raise ModelError(f"unknown tnnp2004 variant {variant!r}")
    g_ks, g_to = VARIANTS[variant]
    i_ks_fn, i_to_fn = _make_variant_currents(g_ks, g_to)
    s_inf_fn = s_inf_epi if variant in ("epi", "mcell") else s_inf_endo
    tau_s_fn = tau_s_epi if variant in ("epi", "mcell") else tau_s_endo

    layout = StateLayout(names=NAMES, kinds=KINDS)
    partition = StatePartition(
        observables=(iV, iCAI),
        gnn_gates=(iM, iH, iJ, iD, iF, iXR1, iXR2, iXS, iR, iS),
        lstm_vars=(iV, iFCA, iG, iCAI, iCASR, iNAI, iKI),
    )
    gates = {
        iM: GateSpec(m_inf, tau_m),
        iH: GateSpec(h_inf, tau_h),
        iJ: GateSpec(j_inf, tau_j),
        iD: GateSpec(d_inf, tau_d),
        iF: GateSpec(f_inf, tau_f),
        iR: GateSpec(r_inf, tau_r),
        iS: GateSpec(s_inf_fn, tau_s_fn),
        iXS: GateSpec(xs_inf, tau_xs),
        iXR1: GateSpec(xr1_inf, tau_xr1),
        iXR2: GateSpec(xr2_inf, tau_xr2),
    }
    currents = (
        CurrentSpec("I_Na", _i_na),
        CurrentSpec("I_CaL", _i_cal),
        CurrentSpec("I_Kr", _i_kr),
        CurrentSpec("I_Ks", i_ks_fn),
        CurrentSpec("I_K1", _i_k1),
        CurrentSpec("I_to", i_to_fn),
        CurrentSpec("I_NaCa", _i_naca),
        CurrentSpec("I_NaK", _i_nak),
        CurrentSpec("I_pCa", _i_pca),
        CurrentSpec("I_pK", _i_pk),
        CurrentSpec("I_bNa", _i_bna),
        CurrentSpec("I_bCa", _i_bca),
        CurrentSpec("I_rel", _i_rel, membrane=False),
    )
    rhs = _make_rhs(i_ks_fn, i_to_fn, s_inf_fn, tau_s_fn)

    from . import fast_tnnp  # deferred: numba compilation is lazy

    return IonicModel(
        key="tnnp2004",
        layout=layout,
        partition=partition,
        gates=gates,
        currents=currents,
        rhs=rhs,
        c_m=CM,
        initial_state=INITIAL_STATE.copy(),
        variant=variant,
        fast_stepper=fast_tnnp.make_stepper(variant),
        rhs_nongate=_make_rhs_nongate(rhs),
    )
