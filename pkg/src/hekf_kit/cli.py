"""Command-line entry point: ``hekf-kit <subcommand> ...``.

Every subcommand accepts ``--seed`` and ``--config`` and echoes the resolved
protocol configuration before it starts.  Failures print one line starting
with ``error:`` on stderr and exit with a nonzero status.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import datagen, harness, hekf, ident, kvfile, vehicle
from .errors import HekfKitError
from .harness import ProtocolConfig


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _log(msg):
    print(f"[hekf-kit] {msg}", file=sys.stderr, flush=True)


def _resolve_config(args) -> ProtocolConfig:
    cfg = ProtocolConfig.read(args.config) if args.config else ProtocolConfig()
    if args.seed is not None:
        cfg = ProtocolConfig.from_dict({"seed": str(args.seed)}, base=cfg)
    print(kvfile.format_kv(cfg.to_dict(), header="resolved configuration"), end="", flush=True)
    return cfg


def _nominal(args) -> vehicle.VehicleParams:
    return vehicle.load_params(args.params) if getattr(args, "params", None) else vehicle.VehicleParams()


def _noise(args, cfg, trained=None) -> harness.TunedNoise:
    if args.noise:
        return harness.TunedNoise.read(args.noise)
    Q = hekf.default_Q()
    if trained is None:
        R0 = np.diag([cfg.noise_psi2_dot**2] + [s**2 for s in hekf.DEFAULT_SOFT_STD])
    else:
        R0 = harness.hekf_template(cfg, trained).R0
    return harness.TunedNoise(Q, Q, R0)


# -- subcommands -------------------------------------------------------------

def cmd_generate(args, cfg):
    splits = harness.generate_all(cfg, _nominal(args))
    paths = harness.write_datasets(splits, args.out)
    cfg.write(os.path.join(args.out, "config.txt"))
    vehicle.save_params(os.path.join(args.out, "truth_params.txt"), harness.truth_params(cfg, _nominal(args)),
                        header="parameters used to simulate the datasets")
    _log(f"wrote {len(paths)} datasets to {args.out}")


def cmd_identify(args, cfg):
    datasets = harness.read_datasets(args.data, args.split)[:args.max_maneuvers or None]
    if args.duration:
        datasets = [_truncate(ds, args.duration) for ds in datasets]
    base = _nominal(args)
    lower, upper = ident.read_bounds(args.bounds) if args.bounds else ident.default_bounds(base)
    pso_cfg = ident.PsoConfig(swarm_size=args.swarm, iterations=args.iterations)
    t0 = time.perf_counter()
    result = ident.identify(datasets, lower, upper, pso_cfg, cfg.seed, base, args.stride)
    ident.save_result(result, args.out, args.history)
    _log(f"identified {len(ident.PARAM_NAMES)} parameters on {len(datasets)} maneuvers: "
         f"NMSE {result.cost:.3g} in {time.perf_counter() - t0:.0f} s")


def _truncate(ds, duration):
    n = min(len(ds), int(round(duration / ds.dt)) + 1)
    return datagen.ManeuverDataset(ds.dt, {k: np.asarray(v)[:n] for k, v in ds.columns.items()}, dict(ds.meta))


def cmd_train(args, cfg):
    datasets = harness.read_datasets(args.data, "train")
    trained = harness.train_bank(datasets, cfg)
    harness.save_trained(args.out, trained)
    _log("trained soft sensors: " + ", ".join(
        f"{name} {c.hidden_layers}x{c.total_neurons}" for name, c in zip(harness.OUTPUT_CHANNELS, trained.bank.configs)))


def cmd_tune(args, cfg):
    trained = harness.load_trained(args.bank)
    tune_ds = harness.read_datasets(args.data, "tune")[0]
    tuned = harness.tune_noise(cfg, _nominal(args), trained, tune_ds, _log)
    tuned.write(args.out)


def cmd_run(args, cfg):
    ds = datagen.ManeuverDataset.read(args.data)
    nominal = _nominal(args)
    if args.method == "ekf":
        trace = hekf.run_ekf(ds, nominal, _noise(args, cfg).ekf_noise())
    else:
        if not args.bank:
            raise HekfKitError(f"--bank is required for method {args.method}")
        trained = harness.load_trained(args.bank)
        if args.method == "ann":
            trace = hekf.run_ann(ds, trained.bank)
        else:
            noise = _noise(args, cfg, trained)
            hcfg = hekf.HekfConfig(noise.hekf_Q, noise.R0, trained.bank, trained.confidence, cfg.c)
            trace = hekf.run_hekf(ds, nominal, hcfg, tau_override=args.tau)
    with open(args.out, "w") as fh:
        fh.write(trace.to_csv())
    _log(f"wrote {len(trace.time)} rows to {args.out}")


def cmd_evaluate(args, cfg):
    if not args.all and not args.maneuver:
        raise HekfKitError("pass --all or at least one --maneuver")
    nominal = _nominal(args)
    staged = [args.data, args.bank, args.noise]
    if any(staged) and not all(staged):
        raise HekfKitError("--data, --bank and --noise must be given together")
    t0 = time.perf_counter()
    if all(staged):
        trained = harness.load_trained(args.bank)
        noise = harness.TunedNoise.read(args.noise)
        datasets = _select(harness.read_datasets(args.data, "eval"), args)
        hcfg = hekf.HekfConfig(noise.hekf_Q, noise.R0, trained.bank, trained.confidence, cfg.c)
        warmup = int(round(cfg.warmup_s / datasets[0].dt))
        report, traces = harness.evaluate_maneuvers(datasets, nominal, noise.ekf_noise(), hcfg, warmup, trained)
        result = harness.ProtocolResult(report, traces, noise, trained, {})
    else:
        if args.maneuver:
            raise HekfKitError("--maneuver needs pre-staged --data, --bank and --noise")
        result = harness.run_protocol(cfg, nominal, log=_log)
        harness.save_trained(os.path.join(_mkdir(args.out), "bank.json"), result.trained)
        result.tuning.write(os.path.join(args.out, "noise.txt"))
    harness.write_outputs(result, _mkdir(args.out))
    print(result.report.to_table(), end="")
    _log(f"evaluation finished in {time.perf_counter() - t0:.0f} s; outputs in {args.out}")


def _select(datasets, args):
    if args.all:
        return datasets
    chosen = [ds for ds in datasets if (ds.loading or ds.name) in args.maneuver]
    if not chosen:
        raise HekfKitError(f"no evaluation maneuver matches {args.maneuver}")
    return chosen


def _mkdir(path):
    os.makedirs(path, exist_ok=True)
    return path


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hekf-kit", description="Hybrid ANN-aided EKF for truck-semitrailer state estimation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--config", help="protocol configuration file (name = value)")
        p.set_defaults(func=func)
        return p

    p = add("generate", cmd_generate, "simulate training, evaluation and tuning maneuvers")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--params", help="nominal vehicle parameter file")

    p = add("identify", cmd_identify, "identify vehicle parameters by particle swarm optimisation")
    p.add_argument("--data", required=True, help="dataset directory written by 'generate'")
    p.add_argument("--bounds", help="bounds file; default is nominal +-30%%")
    p.add_argument("--out", required=True, help="identified parameter file")
    p.add_argument("--history", help="cost-history CSV")
    p.add_argument("--params", help="nominal vehicle parameter file")
    p.add_argument("--split", default="ident", choices=harness.SPLITS)
    p.add_argument("--swarm", type=int, default=ident.PsoConfig.swarm_size)
    p.add_argument("--iterations", type=int, default=ident.PsoConfig.iterations)
    p.add_argument("--stride", type=int, default=1, help="integrate every stride-th sample")
    p.add_argument("--max-maneuvers", type=int, default=0, help="use only the first N maneuvers")
    p.add_argument("--duration", type=float, default=0.0, help="truncate maneuvers to this many seconds")

    p = add("train", cmd_train, "grid-search and train the soft-sensor bank and confidence model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="bank file (JSON)")

    p = add("tune", cmd_tune, "tune process and measurement noise")
    p.add_argument("--data", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--out", required=True, help="noise file (name = value)")
    p.add_argument("--params", help="filter vehicle parameter file")

    p = add("run", cmd_run, "run one estimator over one maneuver")
    p.add_argument("--method", required=True, choices=harness.METHODS)
    p.add_argument("--data", required=True, help="maneuver CSV")
    p.add_argument("--out", required=True, help="step-record CSV")
    p.add_argument("--bank")
    p.add_argument("--noise")
    p.add_argument("--params", help="filter vehicle parameter file")
    p.add_argument("--tau", type=float, help="fix the confidence instead of computing it")

    p = add("evaluate", cmd_evaluate, "run the evaluation protocol and write the RMSE report")
    p.add_argument("--all", action="store_true", help="evaluate every maneuver")
    p.add_argument("--maneuver", action="append", help="evaluate only this loading state (repeatable)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--data", help="pre-generated dataset directory")
    p.add_argument("--bank")
    p.add_argument("--noise")
    p.add_argument("--params", help="filter vehicle parameter file")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _resolve_config(args)
        args.func(args, cfg)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (HekfKitError, OSError, ValueError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
