"""Command-line entry point: ``qtransfer <command> [flags]``.

Every command prints a one-line JSON summary on stdout. Exit codes are 0 on
success, 1 on invalid input and 2 on numerical failure.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import re
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import cqcnn, dataset
from .dynamics import (
    DEFAULT_DT,
    DEFAULT_INTEGRATOR,
    INTEGRATORS,
    IntegrationError,
    classical_generator,
    integrate_classical,
    integrate_quantum,
    lindblad_spec_for,
    write_trajectory_csv,
)
from .efficiency import (
    HorizonError,
    SimulationParams,
    label,
    linear_grid,
    sweep_ground_truth,
    write_sweep_csv,
)
from .graphs import GraphError, parse_descriptor, transition_matrix

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


@contextmanager
def atomic_path(path):
    """Yield a temporary sibling path that replaces ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path, obj) -> None:
    with atomic_path(path) as tmp, open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _flags(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def _write_meta(path, args, extra: dict | None = None) -> None:
    meta = {"command": args.command, "flags": _flags(args)}
    if extra:
        meta.update(extra)
    _write_json(f"{path}.meta.json", meta)


# ---------------------------------------------------------------------------
# Argument types
# ---------------------------------------------------------------------------


def _log_base(text: str) -> float:
    if text.lower() == "e":
        return math.e
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid log base {text!r}") from None
    if value <= 1:
        raise argparse.ArgumentTypeError("log base must be > 1")
    return value


def _unit_interval(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"{value} is outside [0, 1]")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"{value} must be > 0")
    return value


def _nonneg_float(text: str) -> float:
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"{value} must be >= 0")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"{value} must be >= 1")
    return value


def split_descriptors(text: str) -> list[str]:
    """Split a comma-separated descriptor list; commas inside edge lists are kept."""
    return [part for part in re.split(r",(?=\s*(?:cycle|edges):)", text) if part.strip()]


def _params(args) -> SimulationParams:
    return SimulationParams(
        gamma=args.gamma,
        dt=args.dt,
        t_max=args.t_max,
        log_base=args.log_base,
        rate_convention=args.rate_convention,
        integrator=args.integrator,
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> dict:
    setup = parse_descriptor(args.graph)
    params = _params(args)
    t_max = params.horizon(setup.n)
    if args.walker == "quantum":
        spec = lindblad_spec_for(setup, args.p, params.gamma, params.rate_convention)
        traj = integrate_quantum(spec, setup, t_max, params.dt, integrator=params.integrator)
    else:
        Q = classical_generator(transition_matrix(setup.graph), setup.target, absorbing=not args.free)
        pi0 = np.zeros(setup.n)
        pi0[setup.source] = 1.0
        traj = integrate_classical(Q, pi0, setup.target, t_max, params.dt)
    with atomic_path(args.out) as tmp:
        write_trajectory_csv(traj, tmp, args.stride)
    _write_meta(args.out, args)
    return {"graph": setup.kind, "walker": args.walker, "steps": len(traj) - 1,
            "final_value": float(traj.values[-1]), "out": str(args.out)}


def cmd_label(args) -> dict:
    setup = parse_descriptor(args.graph)
    out = label(setup, args.p, _params(args))
    summary = {"graph": setup.kind, "p": out.p, "label": out.label, "threshold": out.threshold,
               "t_quantum": out.t_quantum, "t_classical": out.t_classical}
    if args.out:
        _write_json(args.out, summary)
    return summary


def cmd_sweep(args) -> dict:
    setup = parse_descriptor(args.graph)
    result = sweep_ground_truth(setup, linear_grid(args.grid), _params(args), args.workers)
    with atomic_path(args.out) as tmp:
        write_sweep_csv(result, tmp)
    summary = result.summary()
    _write_meta(args.out, args, {"crossover": summary})
    summary_path = args.summary or f"{args.out}.summary.json"
    _write_json(summary_path, summary)
    return summary


def cmd_gen_data(args) -> dict:
    setups = [parse_descriptor(d) for d in split_descriptors(args.graphs)]
    if args.samples < 1:
        raise ValueError("--samples must be >= 1")
    ds = dataset.generate(setups, args.samples, args.seed, _params(args), args.n_max, args.workers)
    with atomic_path(args.out) as tmp:
        dataset.save(ds, tmp)
    report = ds.report()
    _write_json(f"{args.out}.report.json", report)
    return {"examples": report["examples"], "failures": len(report["failures"]), "out": str(args.out)}


def cmd_train(args) -> dict:
    ds = dataset.load(args.data)
    excluded = 0
    if args.exclude:
        ds, test = dataset.split_exclude(ds, args.exclude)
        excluded = len(test)
    if not ds.examples:
        raise ValueError("training set is empty")
    cfg = cqcnn.TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        ensemble_size=args.ensemble,
        n_filters=args.filters,
        early_stop_loss=args.early_stop,
    )
    models, histories = cqcnn.train_ensemble(ds, cfg, args.workers)
    meta = {
        "data": str(args.data),
        "exclude": args.exclude,
        "train_examples": len(ds),
        "data_meta": ds.meta(),
        "history": [{"loss": h.loss, "accuracy": h.accuracy} for h in histories],
    }
    with atomic_path(args.out) as tmp:
        cqcnn.save_models(models, tmp, cfg, meta)
    return {
        "models": len(models),
        "train_examples": len(ds),
        "excluded_examples": excluded,
        "final_loss": [h.loss[-1] for h in histories],
        "final_accuracy": [h.accuracy[-1] for h in histories],
        "epochs": [len(h.loss) for h in histories],
        "out": str(args.out),
    }


def cmd_eval(args) -> dict:
    models, _ = cqcnn.load_models(args.model)
    setup = parse_descriptor(args.graph)
    grid = linear_grid(args.grid)
    curve = cqcnn.predict_curve(models, setup, grid)
    with atomic_path(args.out) as tmp:
        cqcnn.write_curve_csv(curve, tmp)
    summary = {"graph": setup.kind, "grid_size": len(grid), "models": len(models),
               "p_star": curve.p_star, "transitions": curve.transitions}
    if args.compare_truth:
        truth = sweep_ground_truth(setup, grid, _params(args), args.workers)
        summary["truth_p_star"] = truth.p_star
        summary["grid_accuracy"] = float(np.mean(np.array(curve.labels) == np.array(truth.labels)))
    _write_meta(args.out, args, {"summary": summary})
    return summary


def cmd_grad_check(args) -> dict:
    rng = np.random.default_rng(args.seed)
    model = cqcnn.init_model(args.n_max, args.filters, args.seed, scale=args.init_scale)
    B, N = args.examples, args.n_max
    A = rng.integers(0, 2, size=(B, N, N)).astype(float)
    A = np.triu(A, 1) + np.triu(A, 1).transpose(0, 2, 1)
    p = rng.uniform(size=B)
    n = rng.integers(3, N + 1, size=B)
    for b in range(B):
        A[b, n[b]:, :] = 0.0
        A[b, :, n[b]:] = 0.0
    y = rng.integers(0, 2, size=B)
    errors = cqcnn.gradient_check(model, A, p, n, y, h=args.step)
    worst = max(errors.values())
    summary = {"max_relative_error": worst, "tolerance": args.tol, "passed": worst < args.tol,
               "per_parameter": errors}
    if not summary["passed"]:
        raise ArithmeticError(f"gradient check failed: max relative error {worst:.3g}")
    return summary


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_physics(p: argparse.ArgumentParser, workers: bool = True) -> None:
    g = p.add_argument_group("simulation conventions")
    g.add_argument("--gamma", type=_nonneg_float, default=1.0, help="sink coupling (default: %(default)s)")
    g.add_argument("--dt", type=_positive_float, default=DEFAULT_DT, help="RK4 step (default: %(default)s)")
    g.add_argument("--t-max", type=_positive_float, default=None,
                   help="integration horizon (default: 30*n)")
    g.add_argument("--log-base", type=_log_base, default=math.e,
                   help="base of the 1/log(n) arrival threshold; 'e' or a number > 1 (default: e)")
    g.add_argument("--rate-convention", choices=("amplitude", "rate"), default="rate",
                   help="jump operators T_mk|m><k| ('amplitude') or sqrt(T_mk)|m><k| ('rate') "
                        "(default: %(default)s)")
    g.add_argument("--integrator", choices=INTEGRATORS, default=DEFAULT_INTEGRATOR,
                   help="quantum step: integrating-factor RK4 ('lawson') or classic RK4 ('rk4') "
                        "(default: %(default)s)")
    if workers:
        g.add_argument("--workers", type=_positive_int, default=1,
                       help="parallel worker processes (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="qtransfer", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="write a sink/target population trajectory as CSV")
    p.add_argument("--graph", required=True, help="graph descriptor, e.g. cycle:6")
    p.add_argument("--p", type=_unit_interval, default=0.0, help="decoherence parameter (default: %(default)s)")
    p.add_argument("--walker", choices=("quantum", "classical"), default="quantum",
                   help="which walk to integrate (default: %(default)s)")
    p.add_argument("--free", action="store_true",
                   help="classical walker without an absorbing target")
    p.add_argument("--stride", type=_positive_int, default=10, help="CSV row decimation (default: %(default)s)")
    p.add_argument("--out", required=True)
    _add_physics(p, workers=False)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("label", help="transfer-efficiency label for one (graph, p)")
    p.add_argument("--graph", required=True)
    p.add_argument("--p", type=_unit_interval, required=True)
    p.add_argument("--out", default=None, help="optional JSON output path")
    _add_physics(p, workers=False)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("sweep", help="ground-truth labels on a uniform p grid plus crossover")
    p.add_argument("--graph", required=True)
    p.add_argument("--grid", type=_positive_int, default=101, help="number of grid points (default: %(default)s)")
    p.add_argument("--out", required=True, help="sweep CSV path")
    p.add_argument("--summary", default=None, help="crossover JSON path (default: <out>.summary.json)")
    _add_physics(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gen-data", help="generate a labelled JSONL dataset")
    p.add_argument("--graphs", required=True, help="comma-separated graph descriptors")
    p.add_argument("--samples", type=int, default=100, help="p samples per graph (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="(default: %(default)s)")
    p.add_argument("--n-max", type=_positive_int, default=dataset.DEFAULT_N_MAX,
                   help="padding size (default: %(default)s)")
    p.add_argument("--out", required=True)
    _add_physics(p)
    p.set_defaults(func=cmd_gen_data)

    defaults = cqcnn.TrainConfig()
    p = sub.add_parser("train", help="train a CQCNN ensemble", formatter_class=fmt)
    p.add_argument("--data", required=True)
    p.add_argument("--exclude", default=None, help="graph descriptor to hold out")
    p.add_argument("--ensemble", type=_positive_int, default=defaults.ensemble_size, help="ensemble members")
    p.add_argument("--epochs", type=_positive_int, default=defaults.epochs, help="maximum epochs per member")
    p.add_argument("--lr", type=_positive_float, default=defaults.learning_rate, help="SGD learning rate")
    p.add_argument("--batch-size", type=_positive_int, default=defaults.batch_size, help="minibatch size")
    p.add_argument("--filters", type=_positive_int, default=defaults.n_filters, help="cross filters per level")
    p.add_argument("--early-stop", type=_nonneg_float, default=defaults.early_stop_loss,
                   help="stop once training loss falls below this")
    p.add_argument("--seed", type=int, default=defaults.seed, help="seed of the first member")
    p.add_argument("--workers", type=_positive_int, default=1, help="parallel worker processes")
    p.add_argument("--out", required=True, help="model JSON path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="prediction curve of a trained ensemble")
    p.add_argument("--model", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--grid", type=_positive_int, default=101, help="(default: %(default)s)")
    p.add_argument("--out", required=True, help="prediction-curve CSV path")
    p.add_argument("--compare-truth", action="store_true",
                   help="also run the ground-truth sweep and report grid accuracy")
    _add_physics(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference check of CQCNN gradients", formatter_class=fmt)
    p.add_argument("--n-max", type=_positive_int, default=4, help="padded matrix size")
    p.add_argument("--filters", type=_positive_int, default=2, help="cross filters per level")
    p.add_argument("--examples", type=_positive_int, default=5, help="random examples in the batch")
    p.add_argument("--seed", type=int, default=0, help="model and data seed")
    p.add_argument("--init-scale", type=_positive_float, default=1.0, help="uniform init half-width")
    p.add_argument("--step", type=_positive_float, default=1e-5, help="central-difference step")
    p.add_argument("--tol", type=_positive_float, default=1e-4, help="maximum relative error")
    p.set_defaults(func=cmd_grad_check)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        summary = args.func(args)
    except (UsageError, GraphError, ValueError, FileNotFoundError, IsADirectoryError) as exc:
        print(json.dumps({"status": "error", "kind": "invalid", "message": str(exc)}))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (IntegrationError, HorizonError, cqcnn.TrainingError, ArithmeticError) as exc:
        print(json.dumps({"status": "error", "kind": "numerical", "message": str(exc)}))
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps({"status": "ok", "command": args.command, **summary}))
    return EXIT_OK


def main() -> None:
    sys.exit(run())
