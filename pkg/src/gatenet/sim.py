"""Pacing, fixed-step integration, and dataset generation.

The production integrator advances classic gates with the exact
exponential (Rush-Larsen) update and everything else with forward Euler.
A classic RK4 solver at a finer step serves as the in-repo oracle.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .models import IonicModel, clamp_state, get_model, with_perturbation
from .models.core import CLASSIC_GATE, CONCENTRATION, ATYPICAL_GATE, GATE_MIN, GATE_MAX, CONC_FLOOR

DEFAULT_STIM_AMPLITUDE = -52.0  # pA/pF, conventional tnnp2004 pacing pulse
DEFAULT_STIM_DURATION = 1.0  # ms
DEFAULT_INNER_DT = 0.02  # ms
DEFAULT_DT_OUT = 1.0  # ms
DEFAULT_TOTAL_MS = 20000.0
DEFAULT_DISCARD_MS = 10000.0
TRAIN_FRACTION = 76 / 101


class IntegrationDivergedError(RuntimeError):
    def __init__(self, t, name):
        super().__init__(f"integration diverged at t={t:g} ms (variable {name!r})")
        self.t = t
        self.name = name


@dataclass(frozen=True)
class PacingProtocol:
    cycle_length: float  # ms
    stimulus_amplitude: float = DEFAULT_STIM_AMPLITUDE  # pA/pF
    stimulus_duration: float = DEFAULT_STIM_DURATION  # ms
    total_duration: float = DEFAULT_TOTAL_MS  # ms

    def __post_init__(self):
        if not (self.cycle_length > self.stimulus_duration > 0):
            raise ValueError("cycle_length > stimulus_duration > 0 required")
        if self.total_duration < self.cycle_length:
            raise ValueError("total_duration must cover at least one cycle")

    def stimulus(self, t):
        """Stimulus current at time t; t and cycle_length may be arrays."""
        return np.where(
            (t % self.cycle_length) < self.stimulus_duration,
            self.stimulus_amplitude,
            0.0,
        )


@dataclass
class Trajectory:
    dt: float
    values: np.ndarray  # (n_vars, T)
    cycle_length: float
    model_key: str
    names: tuple
    t0: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.names):
            raise ValueError("values must be (n_vars, T) matching names")

    @property
    def n_samples(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_samples)

    def row(self, name: str) -> np.ndarray:
        return self.values[self.names.index(name)]

    def rows(self, names) -> np.ndarray:
        return self.values[[self.names.index(n) for n in names]]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", *self.names])
            for jcol, t in enumerate(self.times):
                writer.writerow([repr(float(t))] + [repr(float(x)) for x in self.values[:, jcol]])

    @classmethod
    def from_csv(cls, path, dt, cycle_length, model_key) -> "Trajectory":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [[float(x) for x in row] for row in reader]
        arr = np.array(rows).T
        return cls(
            dt=dt,
            values=arr[1:],
            cycle_length=cycle_length,
            model_key=model_key,
            names=tuple(header[1:]),
            t0=arr[0, 0] if arr.shape[1] else 0.0,
        )


@dataclass
class Dataset:
    segments: list  # of Trajectory, ordered by cycle length
    train_indices: tuple
    validation_indices: tuple
    seed: int
    model_key: str
    scenario: str = "base"

    def __post_init__(self):
        train, val = set(self.train_indices), set(self.validation_indices)
        if train & val:
            raise ValueError("train/validation overlap")
        if train | val != set(range(len(self.segments))):
            raise ValueError("train/validation must cover all segments")

    @property
    def l(self) -> int:
        return len(self.segments)

    @property
    def train_segments(self):
        return [self.segments[i] for i in self.train_indices]

    @property
    def validation_segments(self):
        return [self.segments[i] for i in self.validation_indices]


def _clamp_batch(model: IonicModel, u: np.ndarray) -> np.ndarray:
    u = np.array(u, dtype=float, copy=True)
    for i, kind in enumerate(model.layout.kinds):
        if kind in (CLASSIC_GATE, ATYPICAL_GATE):
            u[i] = np.clip(u[i], GATE_MIN, GATE_MAX)
        elif kind == CONCENTRATION:
            u[i] = np.maximum(u[i], CONC_FLOOR)
    return u


def _step(model: IonicModel, u, t, dt, i_stim):
    """One hybrid step; u may be (k,) or (k, n), i_stim scalar or (n,)."""
    u = _clamp_batch(model, u)
    v = u[model.layout.voltage_index]
    rhs = model.rhs_nongate if model.rhs_nongate is not None else model.rhs
    du = rhs(u, t, i_stim, model.scales)
    out = u + dt * du
    for i, spec in model.gates.items():
        minf = spec.steady_state(v)
        out[i] = minf + (u[i] - minf) * np.exp(-dt / spec.tau(v))
    return out


def _check_finite(model: IonicModel, u, t):
    if np.all(np.isfinite(u)):
        return
    bad = np.nonzero(~np.isfinite(u))[0][0] if u.ndim == 1 else np.nonzero(~np.isfinite(u).all(axis=tuple(range(1, u.ndim))))[0][0]
    raise IntegrationDivergedError(t, model.layout.names[int(bad)])


def rush_larsen_step(u, t, dt, model: IonicModel, protocol: PacingProtocol):
    """Advance one step: exact exponential gates, forward Euler elsewhere."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    out = _step(model, np.asarray(u, dtype=float), t, dt, protocol.stimulus(t))
    _check_finite(model, out, t + dt)
    return out


def reference_solve(model: IonicModel, protocol: PacingProtocol, dt_out: float,
                    inner_dt: float = 0.005) -> Trajectory:
    """Classic RK4 oracle at a fixed fine inner step, sampled at dt_out."""
    inner_dt = min(inner_dt, 0.005, dt_out)
    n_sub = max(1, int(round(dt_out / inner_dt)))
    h = dt_out / n_sub
    n_out = int(round(protocol.total_duration / dt_out))
    u = np.array(model.initial_state, dtype=float)
    out = np.empty((model.layout.k, n_out))
    scales = model.scales

    def f(u_, t_):
        return model.rhs(_clamp_batch(model, u_), t_, protocol.stimulus(t_), scales)

    for jcol in range(n_out):
        out[:, jcol] = u
        t = jcol * dt_out
        for i in range(n_sub):
            ti = t + i * h
            k1 = f(u, ti)
            k2 = f(u + 0.5 * h * k1, ti + 0.5 * h)
            k3 = f(u + 0.5 * h * k2, ti + 0.5 * h)
            k4 = f(u + h * k3, ti + h)
            u = u + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _check_finite(model, u, t + dt_out)
    return Trajectory(
        dt=dt_out,
        values=out,
        cycle_length=protocol.cycle_length,
        model_key=model.key,
        names=model.layout.names,
    )


def solve_rush_larsen(model: IonicModel, protocol: PacingProtocol, dt_out: float,
                      inner_dt: float = DEFAULT_INNER_DT, discard: float = 0.0,
                      u0=None) -> Trajectory:
    """Integrate with the hybrid scheme, keeping samples from t >= discard.

    Output samples are exact integrator states (every (dt_out/inner_dt)-th
    step), never interpolated.
    """
    every = int(round(dt_out / inner_dt))
    if abs(every * inner_dt - dt_out) > 1e-9:
        raise ValueError("dt_out must be an integer multiple of inner_dt")
    n_steps = int(round(protocol.total_duration / inner_dt))
    start = int(round(discard / inner_dt))
    n_keep = (n_steps - start + every - 1) // every if n_steps > start else 0
    u = np.array(model.initial_state if u0 is None else u0, dtype=float)
    out = np.empty((model.layout.k, n_keep))
    kept = 0
    for step in range(n_steps):
        if step >= start and (step - start) % every == 0 and kept < n_keep:
            out[:, kept] = u
            kept += 1
        t = step * inner_dt
        u = _step(model, u, t, inner_dt, protocol.stimulus(t))
    _check_finite(model, u, n_steps * inner_dt)
    _check_finite(model, out, protocol.total_duration)
    return Trajectory(
        dt=dt_out,
        values=out,
        cycle_length=protocol.cycle_length,
        model_key=model.key,
        names=model.layout.names,
        t0=discard,
    )


def generate_dataset(model: IonicModel, cycle_lengths, seed: int,
                     stimulus_amplitude: float = DEFAULT_STIM_AMPLITUDE,
                     stimulus_duration: float = DEFAULT_STIM_DURATION,
                     total_ms: float = DEFAULT_TOTAL_MS,
                     discard_ms: float = DEFAULT_DISCARD_MS,
                     dt_out: float = DEFAULT_DT_OUT,
                     inner_dt: float = DEFAULT_INNER_DT,
                     scenario: str = "base") -> Dataset:
    """Simulate one segment per cycle length and split train/validation.

    All segments are integrated side by side as one state matrix (or by
    the model's compiled stepper when available); segment order in the
    result follows ascending cycle length regardless of schedule.
    """
    cycle_lengths = sorted(float(c) for c in cycle_lengths)
    if not cycle_lengths:
        raise ValueError("cycle_lengths must be non-empty")
    n = len(cycle_lengths)
    cl = np.array(cycle_lengths)
    every = int(round(dt_out / inner_dt))
    n_steps = int(round(total_ms / inner_dt))
    start = int(round(discard_ms / inner_dt))
    n_keep = (n_steps - start + every - 1) // every

    u0 = np.repeat(model.initial_state[:, None], n, axis=1)
    if model.fast_stepper is not None:
        out = model.fast_stepper(
            u0, n_steps, inner_dt, cl, stimulus_amplitude, stimulus_duration,
            model.scales, start, every, n_keep,
        )
    else:
        out = np.empty((model.layout.k, n, n_keep))
        u = u0.copy()
        kept = 0
        for step in range(n_steps):
            if step >= start and (step - start) % every == 0 and kept < n_keep:
                out[:, :, kept] = u
                kept += 1
            t = step * inner_dt
            i_stim = np.where((t % cl) < stimulus_duration, stimulus_amplitude, 0.0)
            u = _step(model, u, t, inner_dt, i_stim)

    segments = []
    for idx, c in enumerate(cycle_lengths):
        vals = out[:, idx, :]
        if not np.all(np.isfinite(vals)):
            raise IntegrationDivergedError(discard_ms, f"segment at cycle length {c:g} ms")
        segments.append(
            Trajectory(
                dt=dt_out,
                values=vals,
                cycle_length=c,
                model_key=model.key,
                names=model.layout.names,
                t0=discard_ms,
            )
        )

    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_train = int(round(n * TRAIN_FRACTION))
    n_train = min(max(n_train, 1), n - 1) if n > 1 else n
    train = tuple(sorted(int(i) for i in perm[:n_train]))
    val = tuple(sorted(int(i) for i in perm[n_train:]))
    return Dataset(
        segments=segments,
        train_indices=train,
        validation_indices=val,
        seed=seed,
        model_key=model.key,
        scenario=scenario,
    )


def observables_only(dataset: Dataset, model: IonicModel) -> Dataset:
    """Restrict every segment to the observable rows (experimental view)."""
    obs_names = tuple(model.layout.names[i] for i in model.partition.observables)
    segments = [
        replace(seg, values=seg.rows(obs_names), names=obs_names)
        for seg in dataset.segments
    ]
    return replace(dataset, segments=segments)


def _segment_filename(cycle_length: float) -> str:
    return f"segment_cl{cycle_length:07.2f}.csv"


def save_dataset(dataset: Dataset, outdir) -> Path:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    files = []
    for seg in dataset.segments:
        name = _segment_filename(seg.cycle_length)
        seg.to_csv(outdir / name)
        files.append(name)
    manifest = {
        "model_key": dataset.model_key,
        "scenario": dataset.scenario,
        "seed": dataset.seed,
        "dt": dataset.segments[0].dt,
        "cycle_lengths": [seg.cycle_length for seg in dataset.segments],
        "files": files,
        "train_indices": list(dataset.train_indices),
        "validation_indices": list(dataset.validation_indices),
    }
    path = outdir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_dataset(indir) -> Dataset:
    indir = Path(indir)
    manifest = json.loads((indir / "manifest.json").read_text())
    segments = [
        Trajectory.from_csv(
            indir / fname,
            dt=manifest["dt"],
            cycle_length=cl,
            model_key=manifest["model_key"],
        )
        for fname, cl in zip(manifest["files"], manifest["cycle_lengths"])
    ]
    return Dataset(
        segments=segments,
        train_indices=tuple(manifest["train_indices"]),
        validation_indices=tuple(manifest["validation_indices"]),
        seed=manifest["seed"],
        model_key=manifest["model_key"],
        scenario=manifest["scenario"],
    )


def perturbed_model(model_key: str, scenario: str, variant_kwargs=None) -> IonicModel:
    model = get_model(model_key, **(variant_kwargs or {}))
    if scenario and scenario != "base":
        model = with_perturbation(model, scenario)
    return model
