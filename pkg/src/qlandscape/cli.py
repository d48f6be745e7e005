"""Command line entry point: ``qlandscape <command> ...``.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import algebra
from .dynamics import ControlField, endpoint_jacobian, propagate
from .errors import (
    AllRejected,
    ConfigError,
    DegenerateDenominator,
    InvalidInput,
    IoError,
    KinematicCritical,
    LandscapeError,
    NumericalFailure,
)
from .harness import PRESETS, ExperimentConfig, preset_config, run_experiment
from .io import load_field, load_system, matrix_from_json, matrix_to_json, read_json, write_text
from .landscape import AscentOptions, Objective, classify_critical, gradient_ascent
from .singularity import exp_singularity_margin, is_transverse_to_level_set, larc_dimension
from .synthesis import (
    SearchOptions,
    fix_parameter_scan,
    project_seed,
    restriction_cascade,
    rows_to_csv,
    singular_critical_search,
    synthesize_singular_control,
)
from .tolerances import Tolerances


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _json_arg(text):
    """An option value that is either inline JSON (a list) or a file path."""
    if text.lstrip().startswith("["):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidInput(f"invalid inline JSON: {exc}") from exc
    return read_json(text)


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="write the result here instead of stdout")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    for f in fields(Tolerances):
        p.add_argument(f"--tol-{f.name.replace('_', '-')}", dest=f"tol_{f.name}", type=float, default=None,
                       help=f"override tolerance {f.name} (default {f.default})")


def _tolerances(args):
    over = {f.name: getattr(args, f"tol_{f.name}") for f in fields(Tolerances)}
    return Tolerances().override(**{k: v for k, v in over.items() if v is not None})


def _objective(args, system):
    if getattr(args, "objective", None):
        return Objective.from_dict(read_json(args.objective))
    return Objective.random_gate(system.dim, args.seed)


def _emit(args, payload, csv_text=None):
    if args.format == "csv" and csv_text is not None:
        text = csv_text
    else:
        text = json.dumps(payload, indent=1) + "\n"
    if args.out:
        write_text(args.out, text)
    else:
        sys.stdout.write(text)


def cmd_propagate(args):
    system = load_system(args.system)
    field = load_field(args.field)
    traj = propagate(system, field)
    out = {"U_T": matrix_to_json(traj.final)}
    if args.objective:
        obj = Objective.from_dict(read_json(args.objective))
        v = obj.evaluate(traj.final)
        out.update(objective=obj.kind, value=v, normalized=obj.normalized(v))
    _emit(args, out)


def cmd_optimize(args):
    system = load_system(args.system)
    if args.field:
        field0 = load_field(args.field)
    else:
        field0 = ControlField.random(args.T, args.p, args.kappa, args.seed, system.num_generators)
    obj = _objective(args, system)
    tols = _tolerances(args)
    rec = gradient_ascent(system, field0, obj, AscentOptions(max_iters=args.max_iters, value_tol=args.value_tol),
                          seed=args.seed)
    rep = endpoint_jacobian(system, rec.final_field, tols.rank_tol((system.dim**2 - 1, field0.coeffs.size)))
    rec.classification = classify_critical(system, rec.final_field, obj, rep, tols)
    row = rec.csv_row()
    _emit(args, rec.to_dict(), rows_to_csv_dicts([row]))


def rows_to_csv_dicts(rows):
    import csv
    import io

    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def cmd_corank(args):
    system = load_system(args.system)
    field = load_field(args.field)
    tols = _tolerances(args)
    m = system.num_generators * field.p
    rep = endpoint_jacobian(system, field, tols.rank_tol((system.dim**2 - 1, m)))
    residual = None
    if args.objective:
        obj = Objective.from_dict(read_json(args.objective))
        try:
            residual = is_transverse_to_level_set(rep, obj.riemannian_gradient(rep.trajectory.final),
                                                  tols.transversality)[1]
        except KinematicCritical:
            residual = None
    out = rep.summary(residual)
    # pieces where the per-piece exponential may be singular (sufficient-condition check)
    out["exp_margin_violations"] = [
        k for k, H in enumerate(rep.trajectory.piece_hamiltonians()) if not exp_singularity_margin(H, field.dt)[0]
    ]
    _emit(args, out)


def cmd_larc(args):
    system = load_system(args.system)
    dim = larc_dimension(system, _tolerances(args).larc)
    full = system.dim**2 - 1
    verdict = "controllable" if dim == full else "NOT controllable"
    if args.out or args.format == "csv":
        _emit(args, {"dimension": dim, "full": full, "controllable": dim == full},
              f"dimension,full,controllable\n{dim},{full},{dim == full}\n")
    else:
        print(f"Lie algebra dimension {dim} of {full}: {verdict}")


def cmd_synth(args):
    system = load_system(args.system)
    if args.B:
        B = matrix_from_json(_json_arg(args.B))
    else:
        B = algebra.random_element(system.dim, args.seed)
    if not args.raw:
        B = project_seed(system, B)
    syn = synthesize_singular_control(system, B, args.T, args.steps, _tolerances(args).denominator)
    out = {"diagnostics": syn.diagnostics(), "B": matrix_to_json(syn.seed.B),
           "times": syn.times.tolist(), "control": syn.control.tolist(),
           "invariant": syn.invariant.tolist()}
    csv_text = "t,E,invariant\n" + "".join(
        f"{t!r},{e!r},{r!r}\n" for t, e, r in zip(syn.times, syn.control, syn.invariant))
    _emit(args, out, csv_text)


def cmd_search(args):
    system = load_system(args.system)
    obj = Objective.from_dict(read_json(args.objective)) if args.objective else None
    opts = SearchOptions(restarts=args.restarts, iters=args.iters, sigma=args.sigma,
                         project=not args.raw, steps_per_piece=args.steps_per_piece)
    rec = singular_critical_search(system, args.T, args.p, args.kappa, opts, args.seed, obj)
    _emit(args, rec.to_dict())


def cmd_scan(args):
    system = load_system(args.system)
    field = load_field(args.field)
    obj = Objective.from_dict(read_json(args.objective)) if args.objective else None
    values = np.linspace(-field.kappa, field.kappa, args.num)
    tols = _tolerances(args)
    rows = fix_parameter_scan(system, field, args.j, args.k, values, obj,
                              tols.rank_tol((system.dim**2 - 1, field.coeffs.size)))
    _emit(args, [asdict(r) for r in rows], rows_to_csv(rows))


def cmd_cascade(args):
    system = load_system(args.system)
    field = load_field(args.field)
    obj = Objective.from_dict(read_json(args.objective)) if args.objective else None
    fixes = [tuple(f) for f in _json_arg(args.fixes)]
    rep = restriction_cascade(system, field, fixes, obj, _tolerances(args).transversality)
    _emit(args, rep.to_dict(), rows_to_csv(rep.steps))


def cmd_run(args):
    path = Path(args.config)
    if not path.exists():
        raise IoError(f"no such file: {path}")
    cfg = ExperimentConfig.from_json(path.read_text())
    _finish_experiment(args, cfg)


def cmd_reproduce(args):
    overrides = {"master_seed": args.master_seed}
    cfg = preset_config(args.preset, **overrides)
    _finish_experiment(args, cfg)


def _finish_experiment(args, cfg):
    if args.out:
        out = Path(args.out)
        cfg.output_json = str(out / f"{cfg.kind}.json")
        cfg.output_csv = str(out / f"{cfg.kind}.csv")
    report = run_experiment(cfg)
    if not args.out:
        sys.stdout.write(report.to_csv() if args.format == "csv" else report.to_json() + "\n")
    else:
        print(json.dumps(report.aggregate, indent=1))


def build_parser():
    parser = _Parser(prog="qlandscape", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("propagate", help="propagate a field; print U_T and fidelity")
    p.add_argument("--system", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--objective")
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("optimize", help="single gradient-ascent run")
    p.add_argument("--system", required=True)
    p.add_argument("--field")
    p.add_argument("--objective")
    p.add_argument("--T", type=float, default=10.0)
    p.add_argument("--p", type=int, default=100)
    p.add_argument("--kappa", type=float, default=2.0)
    p.add_argument("--max-iters", type=int, default=1000)
    p.add_argument("--value-tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("corank", help="end-point Jacobian singular values and corank")
    p.add_argument("--system", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--objective")
    p.set_defaults(func=cmd_corank)

    p = sub.add_parser("larc", help="Lie algebra rank condition")
    p.add_argument("--system", required=True)
    p.set_defaults(func=cmd_larc)

    p = sub.add_parser("synth-singular", help="integrate the singular-control law for one seed")
    p.add_argument("--system", required=True)
    p.add_argument("--B", help="JSON matrix for the seed, inline or a file path (random if omitted)")
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--raw", action="store_true", help="do not project the seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("search-singular", help="stochastic search for singular critical controls")
    p.add_argument("--system", required=True)
    p.add_argument("--objective")
    p.add_argument("--T", type=float, default=10.0)
    p.add_argument("--p", type=int, default=100)
    p.add_argument("--kappa", type=float, default=1.0)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--steps-per-piece", type=int, default=10)
    p.add_argument("--raw", action="store_true", help="do not project seeds onto the constraint complement")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("scan-fix", help="corank while one parameter of a fully actuated field is swept")
    p.add_argument("--system", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--objective")
    p.add_argument("--j", type=int, default=0)
    p.add_argument("--k", type=int, default=0)
    p.add_argument("--num", type=int, default=101)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("cascade", help="fix parameters one at a time")
    p.add_argument("--system", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--fixes", required=True, help="JSON list of [j, k, K] (inline or a file path)")
    p.add_argument("--objective")
    p.set_defaults(func=cmd_cascade)

    p = sub.add_parser("run", help="run an experiment config file")
    p.add_argument("config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("reproduce", help="run a bundled experiment preset")
    p.add_argument("preset", choices=sorted(PRESETS))
    p.add_argument("--master-seed", type=int, default=None)
    p.set_defaults(func=cmd_reproduce)

    for name, sp in sub.choices.items():
        _add_common(sp)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return 1
    if args.command is None:
        print(parser.format_usage(), file=sys.stderr, end="")
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        args.func(args)
    except (NumericalFailure, DegenerateDenominator, AllRejected) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (IoError, InvalidInput, ConfigError, KeyError, LandscapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0
