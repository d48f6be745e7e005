"""Seeded batch experiments with JSON/CSV reports.

Seed splitting: every derived seed is the first 8 bytes (little endian) of
``blake2b("<master>/<tag>/<i>/<j>")``, so runs can execute in any order or
in parallel and still reproduce bit-for-bit.
"""

import csv
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field as dc_field, fields
from datetime import datetime, timezone
from typing import Optional

import numpy as np

from . import __version__, algebra
from .dynamics import ControlField, ControlSystem, endpoint_jacobian
from .errors import AllRejected, ConfigError
from .io import write_text
from .landscape import AscentOptions, Objective, classify_critical, gradient_ascent
from .singularity import larc_dimension, state_map_rank
from .synthesis import (
    SearchOptions,
    fix_parameter_scan,
    restriction_cascade,
    singular_critical_search,
    verify_singular_critical,
)
from .tolerances import Tolerances

log = logging.getLogger(__name__)

KINDS = ("optimize_batch", "singular_search", "fix_scan", "cascade", "larc_census")
WORKERS_ENV = "QLANDSCAPE_WORKERS"

OPTIMIZE_COLUMNS = [
    "system_index", "seed_index", "final_value", "normalized_value", "iterations",
    "grad_norm", "corank_at_final", "classification", "termination", "wall_ms",
]


def derive_seed(master, tag, *indices):
    key = "/".join(str(x) for x in (master, tag, *indices)).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


@dataclass
class ExperimentConfig:
    kind: str = "optimize_batch"
    n: int = 2
    T: float = 10.0
    p: int = 100
    kappa: float = 2.0
    num_systems: int = 1
    num_seeds_per_system: int = 1
    objective: str = "J2_gate"
    num_generators: int = 1
    system_norm: float = 3.0
    require_controllable: bool = True
    # relative bracket-residual threshold for the LARC screen; 0 uses the tolerance record
    larc_margin: float = 0.0
    success_threshold: float = 0.999
    optimizer: dict = dc_field(default_factory=dict)
    search: dict = dc_field(default_factory=dict)
    scan_points: int = 101
    tolerances: dict = dc_field(default_factory=dict)
    master_seed: int = 0
    output_json: Optional[str] = None
    output_csv: Optional[str] = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError("kind", f"must be one of {KINDS}, got {self.kind!r}")
        for name in ("num_systems", "num_seeds_per_system", "p", "scan_points", "num_generators"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(name, f"must be an integer >= 1, got {v!r}")
        if not isinstance(self.n, (int, np.integer)) or self.n < 2:
            raise ConfigError("n", f"must be an integer >= 2, got {self.n!r}")
        for name in ("T", "kappa", "system_norm"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not v > 0:
                raise ConfigError(name, f"must be > 0, got {v!r}")
        if self.objective not in ("J1_gate", "J2_gate"):
            raise ConfigError("objective", "only J1_gate and J2_gate targets are generated in batches")
        for name, cls in (("optimizer", AscentOptions), ("search", SearchOptions)):
            known = {f.name for f in fields(cls)}
            bad = set(getattr(self, name)) - known
            if bad:
                raise ConfigError(name, f"unknown option(s) {sorted(bad)}")
        try:
            self.tolerance_record()
        except (KeyError, TypeError) as exc:
            raise ConfigError("tolerances", str(exc)) from exc

    def tolerance_record(self):
        return Tolerances().override(**self.tolerances)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(key, "unknown configuration field")
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<document>", f"invalid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("<document>", "config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self):
        return asdict(self)


@dataclass
class ExperimentReport:
    config: dict
    runs: list
    aggregate: dict
    version: str
    tolerances: dict
    columns: list
    timing: dict = dc_field(default_factory=dict)

    def to_dict(self, include_timing=True):
        d = asdict(self)
        if not include_timing:
            d.pop("timing")
        return d

    def to_json(self, include_timing=True):
        return json.dumps(self.to_dict(include_timing), indent=1, sort_keys=True, allow_nan=True)

    def to_csv(self, include_timing=True):
        cols = [c for c in self.columns if include_timing or c != "wall_ms"]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        walls = self.timing.get("wall_ms", [None] * len(self.runs))
        for row, wall in zip(self.runs, walls):
            r = dict(row)
            if "wall_ms" in cols:
                r["wall_ms"] = None if wall is None else round(wall, 3)
            w.writerow({c: _csv_value(r.get(c)) for c in cols})
        return buf.getvalue()


def _csv_value(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def make_system(config, i):
    """System ``i`` of the batch; redrawn until LARC holds when required.

    ``config.larc_margin > 0`` demands that every bracket accepted by the
    closure carries at least that fraction of new direction, which screens
    out nearly dependent (slowly controllable) drift/control pairs.
    """
    full = config.n**2 - 1
    for attempt in range(100):
        seed = derive_seed(config.master_seed, "system", i, attempt)
        if config.kind in ("fix_scan", "cascade"):
            drift = algebra.random_element(config.n, seed, config.system_norm)
            system = ControlSystem.fully_actuated(config.n, drift)
        else:
            system = ControlSystem.random(config.n, seed, config.num_generators, config.system_norm)
        if not config.require_controllable or config.kind == "larc_census":
            return system
        rel_tol = max(config.tolerance_record().larc, config.larc_margin)
        if larc_dimension(system, rel_tol) == full:
            return system
    raise ConfigError("require_controllable", "no controllable system found in 100 draws")


def make_objective(config, i):
    seed = derive_seed(config.master_seed, "target", i)
    return Objective.random_gate(config.n, seed, config.objective)


def _optimize_system(config, i):
    tols = config.tolerance_record()
    system = make_system(config, i)
    objective = make_objective(config, i)
    opts = AscentOptions(**config.optimizer)
    rows, walls = [], []
    for j in range(config.num_seeds_per_system):
        seed = derive_seed(config.master_seed, "run", i, j)
        field0 = ControlField.random(config.T, config.p, config.kappa, seed, system.num_generators)
        rec = gradient_ascent(system, field0, objective, opts, seed=seed)
        rep = endpoint_jacobian(system, rec.final_field, tols.rank_tol((config.n**2 - 1, system.num_generators * config.p)))
        tag = classify_critical(system, rec.final_field, objective, rep, tols)
        rec.classification = tag
        walls.append(rec.wall_ms)
        rows.append({
            "system_index": i,
            "seed_index": j,
            "run_seed": seed,
            "final_value": rec.final_value,
            "normalized_value": rec.normalized_value,
            "iterations": rec.iterations,
            "grad_norm": rec.grad_norm,
            "corank_at_final": int(rep.corank),
            "classification": tag,
            "termination": rec.termination,
            "trace": rec.trace,
        })
    return rows, walls


def _search_system(config, i):
    tols = config.tolerance_record()
    system = make_system(config, i)
    objective = make_objective(config, i)
    sopts = dict(config.search)
    sopts["restarts"] = config.num_seeds_per_system
    opts = SearchOptions(**sopts)
    seed = derive_seed(config.master_seed, "search", i)
    t0 = time.perf_counter()
    try:
        rec = singular_critical_search(system, config.T, config.p, config.kappa, opts, seed, objective)
        restarts = rec.restarts
        rejections = rec.rejections
    except AllRejected:
        restarts = [{"restart": r, "accepted": False} for r in range(opts.restarts)]
        rejections = opts.restarts * opts.max_draws
    wall = 1e3 * (time.perf_counter() - t0)
    psi0 = np.zeros(config.n, dtype=complex)
    psi0[0] = 1.0
    rows = []
    for r in restarts:
        row = {"system_index": i, "seed_index": r["restart"], "accepted": r["accepted"]}
        if not r["accepted"]:
            row.update(termination="rejected", classification="rejected", final_value=None,
                       normalized_value=None, iterations=0, grad_norm=None, corank_at_final=None,
                       state_rank=None, history=[])
            rows.append(row)
            continue
        field = ControlField(config.T, np.asarray(r["coeffs"])[None, :], config.kappa)
        gate = verify_singular_critical(system, field, objective, opts.verify_grad_tol)
        rep = endpoint_jacobian(system, field, tols.rank_tol((config.n**2 - 1, config.p)))
        srank = state_map_rank(system, field, psi0, report=rep)
        if r["converged"]:
            cls = "verified_singular_critical" if gate["verified"] else "false_positive"
        else:
            cls = "not_converged"
        row.update(
            termination="converged" if r["converged"] else "max_iters",
            classification=cls,
            final_value=r["value"],
            normalized_value=r["ratio"],
            xi_norm=r["xi_norm"],
            iterations=r["iterations"],
            grad_norm=gate["grad_norm"],
            corank_at_final=int(rep.corank),
            state_rank=int(srank),
            plateau_reached=bool(r["ratio"] >= 1 - opts.plateau_rel),
            verified=bool(gate["verified"]),
            B=r["B"],
            history=r["history"],
        )
        rows.append(row)
    return rows, [wall / max(len(rows), 1)] * len(rows), {"rejections": rejections}


def _scan_system(config, i):
    tols = config.tolerance_record()
    system = make_system(config, i)
    objective = make_objective(config, i)
    rows, walls = [], []
    m = system.num_generators
    for j in range(config.num_seeds_per_system):
        seed = derive_seed(config.master_seed, "run", i, j)
        rng = np.random.default_rng(seed)
        field = ControlField(config.T, rng.uniform(-config.kappa, config.kappa, (m, config.p)), config.kappa)
        jf, kf = int(rng.integers(m)), int(rng.integers(config.p))
        values = np.linspace(-config.kappa, config.kappa, config.scan_points)
        t0 = time.perf_counter()
        scan = fix_parameter_scan(system, field, jf, kf, values, objective,
                                  tols.rank_tol((config.n**2 - 1, m * config.p)))
        wall = 1e3 * (time.perf_counter() - t0) / len(scan)
        for row in scan:
            rows.append({"system_index": i, "seed_index": j, "j_fix": jf, "k_fix": kf,
                         "K": row.K, "corank": row.corank, "residual": row.residual})
            walls.append(wall)
    return rows, walls


def _cascade_system(config, i):
    tols = config.tolerance_record()
    system = make_system(config, i)
    objective = make_objective(config, i)
    rows, walls = [], []
    m = system.num_generators
    for j in range(config.num_seeds_per_system):
        seed = derive_seed(config.master_seed, "run", i, j)
        rng = np.random.default_rng(seed)
        field = ControlField(config.T, rng.uniform(-config.kappa, config.kappa, (m, config.p)), config.kappa)
        order = rng.permutation(m * config.p)[: m * config.p - 1]
        fixes = [(int(c // config.p), int(c % config.p), float(rng.uniform(-config.kappa, config.kappa)))
                 for c in order]
        t0 = time.perf_counter()
        rep = restriction_cascade(system, field, fixes, objective, tols.transversality)
        wall = 1e3 * (time.perf_counter() - t0) / len(rep.steps)
        for s, step in enumerate(rep.steps):
            d = asdict(step)
            d.update(system_index=i, seed_index=j, step=s)
            rows.append(d)
            walls.append(wall)
    return rows, walls


def _larc_system(config, i):
    system = make_system(config, i)
    t0 = time.perf_counter()
    dim = larc_dimension(system, config.tolerance_record().larc)
    wall = 1e3 * (time.perf_counter() - t0)
    return [{"system_index": i, "seed_index": 0, "dimension": dim,
             "controllable": dim == config.n**2 - 1}], [wall]


_RUNNERS = {
    "optimize_batch": _optimize_system,
    "singular_search": _search_system,
    "fix_scan": _scan_system,
    "cascade": _cascade_system,
    "larc_census": _larc_system,
}

COLUMNS = {
    "optimize_batch": OPTIMIZE_COLUMNS,
    "singular_search": [
        "system_index", "seed_index", "final_value", "normalized_value", "iterations", "grad_norm",
        "corank_at_final", "state_rank", "classification", "termination", "wall_ms",
    ],
    "fix_scan": ["system_index", "seed_index", "j_fix", "k_fix", "K", "corank", "residual", "wall_ms"],
    "cascade": [
        "system_index", "seed_index", "step", "j", "k", "K", "free_parameters", "corank", "rank_deficiency", "residual",
        "larc_dimension", "transversality_failed", "wall_ms",
    ],
    "larc_census": ["system_index", "dimension", "controllable", "wall_ms"],
}


def _run_one(args):
    config, i = args
    return _RUNNERS[config.kind](config, i)


def aggregate(config, runs, extras=()):
    """Summary statistics recomputable from the per-run rows."""
    agg = {"num_runs": len(runs)}
    if config.kind == "optimize_batch":
        ok = [r["normalized_value"] >= config.success_threshold for r in runs]
        agg["success_fraction"] = float(np.mean(ok)) if runs else 0.0
        agg["trap_candidates"] = sum(
            r["classification"] in ("singular_critical", "second_order_critical") for r in runs
        )
        agg["terminations"] = _histogram(r["termination"] for r in runs)
        agg["classifications"] = _histogram(r["classification"] for r in runs)
        agg["corank_histogram"] = _histogram(r["corank_at_final"] for r in runs)
    elif config.kind == "singular_search":
        acc = [r for r in runs if r["accepted"]]
        agg["accepted_restarts"] = len(acc)
        agg["rejected_restarts"] = len(runs) - len(acc)
        agg["rejections"] = int(sum(e.get("rejections", 0) for e in extras))
        agg["plateau_reached"] = sum(r["plateau_reached"] for r in acc)
        agg["converged"] = sum(r["termination"] == "converged" for r in acc)
        agg["verified_singular_critical"] = sum(r["verified"] for r in acc)
        agg["false_positives"] = sum(r["classification"] == "false_positive" for r in acc)
        agg["max_ratio"] = max((r["normalized_value"] for r in acc), default=None)
        agg["corank_histogram"] = _histogram(r["corank_at_final"] for r in acc)
        full = 2 * config.n - 2
        agg["state_map_violations"] = sum(
            r["corank_at_final"] == 0 and r["state_rank"] != full for r in acc
        )
    elif config.kind == "fix_scan":
        agg["checks"] = len(runs)
        agg["nonzero_corank"] = sum(r["corank"] > 0 for r in runs)
        agg["corank_histogram"] = _histogram(r["corank"] for r in runs)
    elif config.kind == "cascade":
        agg["steps"] = len(runs)
        agg["nonzero_corank_steps"] = sum(r["corank"] > 0 for r in runs)
        agg["rank_deficient_steps"] = sum(r["rank_deficiency"] > 0 for r in runs)
        agg["flagged"] = sum(r["transversality_failed"] for r in runs)
    elif config.kind == "larc_census":
        agg["controllable_fraction"] = float(np.mean([r["controllable"] for r in runs]))
        agg["dimension_histogram"] = _histogram(r["dimension"] for r in runs)
    return agg


def _histogram(values):
    out = {}
    for v in values:
        out[str(v)] = out.get(str(v), 0) + 1
    return dict(sorted(out.items()))


def run_experiment(config, workers=None):
    """Run a batch, write the configured outputs, and return the report."""
    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    config.validate()
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    t0 = time.perf_counter()
    jobs = [(config, i) for i in range(config.num_systems)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(job) for job in jobs]
    runs, walls, extras = [], [], []
    for res in results:
        runs.extend(res[0])
        walls.extend(res[1])
        if len(res) > 2:
            extras.append(res[2])
    report = ExperimentReport(
        # where the report is written is not part of the experiment's identity
        config={k: v for k, v in config.to_dict().items() if k not in ("output_json", "output_csv")},
        runs=runs,
        aggregate=aggregate(config, runs, extras),
        version=__version__,
        tolerances=config.tolerance_record().as_dict(),
        columns=COLUMNS[config.kind],
        timing={
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "wall_time_s": time.perf_counter() - t0,
            "wall_ms": walls,
        },
    )
    if config.output_json:
        write_text(config.output_json, report.to_json())
    if config.output_csv:
        write_text(config.output_csv, report.to_csv())
    log.info("experiment %s finished: %s", config.kind, report.aggregate)
    return report


PRESETS = {
    # singular-control search, 10 systems x 10 restarts (desk scale)
    "confirmation-small": dict(kind="singular_search", n=4, T=10.0, p=100, kappa=1.0, num_systems=10,
                               num_seeds_per_system=10, system_norm=1.0, master_seed=2024),
    "confirmation-full": dict(kind="singular_search", n=4, T=10.0, p=1000, kappa=1.0, num_systems=100,
                              num_seeds_per_system=100, system_norm=1.0, master_seed=2024,
                              search={"steps_per_piece": 1}),
    "trapfree-n2": dict(kind="optimize_batch", n=2, T=10.0, p=100, kappa=2.0, num_systems=20,
                        num_seeds_per_system=5, system_norm=5.0, master_seed=7,
                        optimizer={"max_iters": 3000, "value_tol": 1e-4}),
    "trapfree-n4": dict(kind="optimize_batch", n=4, T=10.0, p=100, kappa=2.0, num_systems=10,
                        num_seeds_per_system=5, system_norm=5.0, master_seed=11,
                        optimizer={"max_iters": 3000, "value_tol": 1e-4}),
    "optimize-small": dict(kind="optimize_batch", n=2, T=8.0, p=32, kappa=2.0, num_systems=5,
                           num_seeds_per_system=5, system_norm=5.0, master_seed=3, larc_margin=0.2,
                           optimizer={"max_iters": 2000, "value_tol": 1e-4}),
    "larc-census": dict(kind="larc_census", n=4, num_systems=200, system_norm=1.0, master_seed=5),
    "fixed-parameter-scan": dict(kind="fix_scan", n=2, T=1.0, p=4, kappa=1.0, num_systems=1, num_seeds_per_system=10,
                       system_norm=1.0, master_seed=13, scan_points=101),
    "cascade-n2": dict(kind="cascade", n=2, T=1.0, p=2, kappa=1.0, num_systems=5, num_seeds_per_system=10,
                       system_norm=1.0, master_seed=17),
}


def preset_config(name, **overrides):
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    d = dict(PRESETS[name])
    d.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(d)
