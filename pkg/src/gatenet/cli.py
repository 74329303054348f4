"""Command-line pipeline: simulate, train, retrain, sweep, export, evaluate.

Commands compose through files only (datasets, checkpoints, CSV logs);
each one writes its resolved run configuration next to its outputs so a
run can be reproduced bit-exactly from that file alone. Nothing written
here embeds a timestamp.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import export, nn, sim, svgplot, train
from .models import ModelError, get_model
from .sim import IntegrationDivergedError
from .train import TrainConfig, TrainingDivergedError

OUTPUT_ROOT_ENV = "GATENET_OUT"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    model_key: str = "tnnp2004"
    variant: str = "epi"
    scenario: str = "base"
    cl_min: float = 300.0
    cl_max: float = 800.0
    cl_step: float = 5.0
    dt: float = sim.DEFAULT_DT_OUT
    inner_dt: float = sim.DEFAULT_INNER_DT
    total_ms: float = sim.DEFAULT_TOTAL_MS
    discard_ms: float = sim.DEFAULT_DISCARD_MS
    seed: int = 0
    out_dir: str = "."
    lambda_: float = 1e-4
    eta: float = 1e-3
    learning_rate: float = 1e-3
    epochs: int = 100
    bptt_window: int = 50

    def validate(self):
        if self.cl_min > self.cl_max:
            raise UsageError("cycle-length range: min exceeds max")
        if self.cl_step <= 0:
            raise UsageError("cycle-length step must be positive")
        if self.dt <= 0 or self.inner_dt <= 0:
            raise UsageError("time steps must be positive")
        if self.epochs < 0:
            raise UsageError("epochs must be nonnegative")
        if self.model_key == "tnnp2004" and self.variant not in ("epi", "endo", "mcell"):
            raise UsageError(f"unknown variant {self.variant!r}")

    @property
    def cycle_lengths(self):
        n = int(round((self.cl_max - self.cl_min) / self.cl_step)) + 1
        return [self.cl_min + i * self.cl_step for i in range(n)
                if self.cl_min + i * self.cl_step <= self.cl_max + 1e-9]

    def train_config(self, **overrides) -> TrainConfig:
        base = dict(
            lambda_=self.lambda_, eta=self.eta, learning_rate=self.learning_rate,
            epochs=self.epochs, bptt_window=self.bptt_window, seed=self.seed,
        )
        base.update(overrides)
        return TrainConfig(**base)

    def write(self, directory) -> None:
        path = Path(directory) / "run_config.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2) + "\n")


_CONFIG_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def resolve_config(args) -> RunConfig:
    """Defaults, then --config file values, then explicit CLI flags."""
    values = {}
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}")
        unknown = set(doc) - set(_CONFIG_FIELDS)
        if unknown:
            raise UsageError(f"unknown config fields {sorted(unknown)}")
        values.update(doc)
    for name in _CONFIG_FIELDS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    if "out_dir" not in values:
        values["out_dir"] = os.environ.get(OUTPUT_ROOT_ENV, ".")
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    path = Path(cfg.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _base_model(cfg: RunConfig):
    kwargs = {"variant": cfg.variant} if cfg.model_key == "tnnp2004" else {}
    return get_model(cfg.model_key, **kwargs)


def _load_checkpoint(path, cfg: RunConfig) -> nn.NetworkParams:
    try:
        params = nn.load_checkpoint(path)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise ModelError(f"cannot load checkpoint {path}: {exc}")
    if params.model_key != cfg.model_key:
        raise ModelError(
            f"checkpoint {path} was trained on {params.model_key!r}, "
            f"config says {cfg.model_key!r}")
    return params


# ----------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    model = sim.perturbed_model(
        cfg.model_key, cfg.scenario,
        {"variant": cfg.variant} if cfg.model_key == "tnnp2004" else None,
    )
    dataset = sim.generate_dataset(
        model, cfg.cycle_lengths, seed=cfg.seed,
        total_ms=cfg.total_ms, discard_ms=cfg.discard_ms,
        dt_out=cfg.dt, inner_dt=cfg.inner_dt, scenario=cfg.scenario,
    )
    out = _out_dir(cfg)
    try:
        manifest = sim.save_dataset(dataset, out / "dataset")
    except OSError as exc:
        raise ModelError(f"cannot write dataset under {out / 'dataset'}: {exc}")
    cfg.write(out)
    print(f"wrote {len(dataset.segments)} segments, manifest {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    dataset = sim.load_dataset(args.dataset)
    model = _base_model(cfg)
    params, report = train.train_first_pass(dataset, model, cfg.train_config())
    if report.aborted:
        raise TrainingDivergedError("training aborted on non-finite loss")
    out = _out_dir(cfg)
    nn.save_checkpoint(params, out / "pass1.json")
    report.to_csv(out / "pass1_loss.csv")
    cfg.write(out)
    final = report.final
    if final:
        print(f"pass 1 done: train loss {final['total']:.6g}, "
              f"validation {final['val_total']:.6g}")
    else:
        print("pass 1 done: 0 epochs, checkpoint equals initialization")
    print(f"checkpoint {out / 'pass1.json'}")
    return EXIT_OK


def _retrain_once(cfg: RunConfig, params1, dataset, model, eta: float):
    tc = cfg.train_config(eta=eta, freeze=train.FREEZE_SECOND_PASS)
    params, report = train.train_second_pass(params1, dataset, model, tc)
    if report.aborted:
        raise TrainingDivergedError("retraining aborted on non-finite loss")
    return params, report


def cmd_retrain(args) -> int:
    cfg = resolve_config(args)
    dataset = sim.load_dataset(args.dataset)
    model = _base_model(cfg)
    params1 = _load_checkpoint(args.checkpoint, cfg)
    params, report = _retrain_once(cfg, params1, dataset, model, cfg.eta)
    out = _out_dir(cfg)
    nn.save_checkpoint(params, out / "pass2.json")
    report.to_csv(out / "pass2_loss.csv")
    cfg.write(out)
    final = report.final
    if final:
        print(f"pass 2 done (eta={cfg.eta:g}): observable loss "
              f"{final['n1_or_data']:.6g}, gate drift {final['n2_or_drift']:.6g}")
    print(f"checkpoint {out / 'pass2.json'}")
    return EXIT_OK


def cmd_sweep_eta(args) -> int:
    cfg = resolve_config(args)
    try:
        etas = [float(x) for x in args.etas.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"cannot parse eta list {args.etas!r}")
    if not etas:
        raise UsageError("empty eta list")
    dataset = sim.load_dataset(args.dataset)
    model = _base_model(cfg)
    params1 = _load_checkpoint(args.checkpoint, cfg)
    out = _out_dir(cfg)
    rows = []
    for eta in etas:
        params, report = _retrain_once(cfg, params1, dataset, model, eta)
        name = f"pass2_eta{eta:g}.json"
        nn.save_checkpoint(params, out / name)
        drift = train.mean_gate_drift(params, params1, model, dataset.train_segments)
        final = report.final or {"n1_or_data": float("nan")}
        rows.append((eta, final["n1_or_data"], drift, name))
    with open(out / "sweep_summary.csv", "w", newline="") as fh:
        fh.write("eta,observable_loss,gate_drift,checkpoint\n")
        for eta, loss, drift, name in rows:
            fh.write(f"{eta!r},{loss!r},{drift!r},{name}\n")
    cfg.write(out)
    for eta, loss, drift, name in rows:
        print(f"eta={eta:g}: observable loss {loss:.6g}, gate drift {drift:.6g} -> {name}")
    return EXIT_OK


def _integrate(cfg: RunConfig, params, cycle_length: float, duration: float,
               warmup: float):
    host = _base_model(cfg)
    node = export.from_params(params, host)
    protocol = sim.PacingProtocol(
        cycle_length=cycle_length,
        total_duration=max(duration, cycle_length),
    )
    traj = export.integrate_neural_ode(
        node, protocol, duration=duration, inner_dt=cfg.inner_dt,
        dt_out=cfg.dt, warmup_ms=warmup,
    )
    return node, traj


def cmd_export_ode(args) -> int:
    cfg = resolve_config(args)
    params = _load_checkpoint(args.checkpoint, cfg)
    host = _base_model(cfg)
    node = export.from_params(params, host)
    out = _out_dir(cfg)
    gate_names = [host.layout.names[i] for i in node.gnn_gates]
    doc = {
        "model_key": host.key,
        "variant": host.variant,
        "gates": gate_names,
        "observables": [host.layout.names[i] for i in node.observables],
        "dt": node.dt,
        "rho_clamp": node.rho_clamp,
        "tensors": {k: {"shape": list(t.shape), "data": t.ravel().tolist()}
                    for k, t in node.tensors.items()},
        "norm": {"obs_shift": node.norm.obs_shift.tolist(),
                 "obs_scale": node.norm.obs_scale.tolist()},
    }
    (out / "neural_ode.json").write_text(json.dumps(doc) + "\n")
    duration = args.duration if args.duration else 4 * args.cl
    node, traj = _integrate(cfg, params, args.cl, duration, args.warmup)
    traj.to_csv(out / "ode_trajectory.csv")
    vname = host.layout.names[host.layout.voltage_index]
    svgplot.line_plot(out / "ode_voltage.svg",
                      [("neural ODE", traj.times, traj.row(vname))],
                      title=f"neural ODE at CL {args.cl:g} ms",
                      xlabel="t (ms)", ylabel=f"{vname} (mV)")
    # gate steady states and time constants over the sampled observables
    obs = traj.values[[traj.names.index(host.layout.names[i]) for i in node.observables]]
    hinf = np.empty((len(gate_names), traj.n_samples))
    tau = np.empty_like(hinf)
    for j in range(traj.n_samples):
        hinf[:, j], tau[:, j] = export.gate_law(node, obs[:, j])
    export.currents_to_csv({f"{g}_inf": hinf[i] for i, g in enumerate(gate_names)},
                           traj.times, out / "ode_gate_steady_states.csv")
    export.currents_to_csv({f"tau_{g}": tau[i] for i, g in enumerate(gate_names)},
                           traj.times, out / "ode_gate_time_constants.csv")
    cfg.write(out)
    print(f"neural ODE written to {out / 'neural_ode.json'}; "
          f"trajectory ({traj.n_samples} samples) to {out / 'ode_trajectory.csv'}")
    return EXIT_OK


def cmd_currents(args) -> int:
    cfg = resolve_config(args)
    params = _load_checkpoint(args.checkpoint, cfg)
    duration = args.duration if args.duration else 4 * args.cl
    node, traj = _integrate(cfg, params, args.cl, duration, args.warmup)
    currents = export.reconstruct_currents(node, traj)
    out = _out_dir(cfg)
    export.currents_to_csv(currents, traj.times, out / "currents.csv")
    for name, series in currents.items():
        svgplot.line_plot(out / f"current_{name}.svg",
                          [(name, traj.times, series)],
                          title=f"{name} at CL {args.cl:g} ms",
                          xlabel="t (ms)", ylabel="pA/pF")
    cfg.write(out)
    print(f"{len(currents)} current traces written to {out / 'currents.csv'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    control = _load_checkpoint(args.control, cfg)
    perturbed = _load_checkpoint(args.perturbed, cfg)
    if (control.observables, control.gnn_gates) != (perturbed.observables, perturbed.gnn_gates):
        raise ModelError("checkpoints partition the state differently")
    duration = args.duration if args.duration else 4 * args.cl
    out = _out_dir(cfg)
    results = {}
    for label, params in (("control", control), ("perturbed", perturbed)):
        node, traj = _integrate(cfg, params, args.cl, duration, args.warmup)
        currents = export.reconstruct_currents(node, traj)
        traj.to_csv(out / f"{label}_trajectory.csv")
        export.currents_to_csv(currents, traj.times, out / f"{label}_currents.csv")
        metrics = export.ap_metrics(
            traj, voltage_name=node.host.layout.names[node.host.layout.voltage_index])
        results[label] = (node, traj, currents, metrics)

    node_c, traj_c, cur_c, met_c = results["control"]
    _, traj_p, cur_p, met_p = results["perturbed"]
    vname = node_c.host.layout.names[node_c.host.layout.voltage_index]
    svgplot.line_plot(out / "voltage_overlay.svg",
                      [("control", traj_c.times, traj_c.row(vname)),
                       ("perturbed", traj_p.times, traj_p.row(vname))],
                      title=f"{vname} at CL {args.cl:g} ms",
                      xlabel="t (ms)", ylabel=f"{vname} (mV)")
    if "Ca_i" in traj_c.names:
        svgplot.line_plot(out / "calcium_overlay.svg",
                          [("control", traj_c.times, traj_c.row("Ca_i")),
                           ("perturbed", traj_p.times, traj_p.row("Ca_i"))],
                          title=f"Ca_i at CL {args.cl:g} ms",
                          xlabel="t (ms)", ylabel="Ca_i (mM)")
    for name in cur_c:
        svgplot.line_plot(out / f"current_{name}_overlay.svg",
                          [("control", traj_c.times, cur_c[name]),
                           ("perturbed", traj_p.times, cur_p[name])],
                          title=f"{name} at CL {args.cl:g} ms",
                          xlabel="t (ms)", ylabel="pA/pF")
    doc = {
        "control": json.loads(met_c.to_json()),
        "perturbed": json.loads(met_p.to_json()),
        "delta": {
            "apd90": met_p.apd90 - met_c.apd90,
            "peak_vm": met_p.peak_vm - met_c.peak_vm,
            "resting_vm": met_p.resting_vm - met_c.resting_vm,
            "ca_amplitude": met_p.ca_amplitude - met_c.ca_amplitude,
        },
    }
    (out / "metrics.json").write_text(json.dumps(doc, indent=2) + "\n")
    cfg.write(out)
    print(f"APD90 control {met_c.apd90:.1f} ms, perturbed {met_p.apd90:.1f} ms, "
          f"delta {met_p.apd90 - met_c.apd90:+.1f} ms")
    return EXIT_OK


# ------------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_config_flags(p):
    p.add_argument("--config", help="JSON run-config file; flags override it")
    p.add_argument("--model", dest="model_key", help="ionic model key")
    p.add_argument("--variant", help="model variant (epi, endo, mcell)")
    p.add_argument("--scenario", help="base, long_qt, short_qt, or ito")
    p.add_argument("--cl-min", dest="cl_min", type=float)
    p.add_argument("--cl-max", dest="cl_max", type=float)
    p.add_argument("--cl-step", dest="cl_step", type=float)
    p.add_argument("--dt", type=float, help="output sampling step, ms")
    p.add_argument("--inner-dt", dest="inner_dt", type=float)
    p.add_argument("--total-ms", dest="total_ms", type=float)
    p.add_argument("--discard-ms", dest="discard_ms", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", dest="out_dir",
                   help=f"output directory (default ${OUTPUT_ROOT_ENV} or .)")
    p.add_argument("--lambda", dest="lambda_", type=float, help="weight penalty")
    p.add_argument("--eta", type=float, help="gate-drift penalty")
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--bptt-window", dest="bptt_window", type=int)


def _add_eval_flags(p):
    p.add_argument("--cl", type=float, default=600.0, help="pacing cycle length, ms")
    p.add_argument("--duration", type=float, default=None,
                   help="integration span, ms (default 4 cycles)")
    p.add_argument("--warmup", type=float, default=10000.0,
                   help="host-model pacing before evaluation, ms")


def build_parser() -> _Parser:
    parser = _Parser(prog="gatenet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a paced dataset")
    _add_config_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="first pass on full-state data")
    _add_config_flags(p)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("retrain", help="second pass, gating cell only")
    _add_config_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True, help="first-pass checkpoint")
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("sweep-eta", help="retrain at several drift penalties")
    _add_config_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--etas", required=True, help="comma-separated eta values")
    p.set_defaults(func=cmd_sweep_eta)

    p = sub.add_parser("export-ode", help="convert a checkpoint to a neural ODE")
    _add_config_flags(p)
    _add_eval_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_export_ode)

    p = sub.add_parser("currents", help="reconstruct currents from a checkpoint")
    _add_config_flags(p)
    _add_eval_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_currents)

    p = sub.add_parser("evaluate", help="compare control and perturbed networks")
    _add_config_flags(p)
    _add_eval_flags(p)
    p.add_argument("--control", required=True, help="control checkpoint")
    p.add_argument("--perturbed", required=True, help="perturbed checkpoint")
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gatenet: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IntegrationDivergedError, TrainingDivergedError, export.NoBeatError) as exc:
        print(f"gatenet: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ModelError, OSError, json.JSONDecodeError) as exc:
        print(f"gatenet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
