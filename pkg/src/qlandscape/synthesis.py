"""Candidate singular controls, the stochastic search over their seeds, and
parameter-fixing scans of fully actuated systems."""

import csv
import io
import json
from dataclasses import asdict, dataclass, field as dc_field
from typing import Optional

import numpy as np

from . import algebra
from .algebra import dag
from .dynamics import ControlField, ControlSystem, Trajectory, endpoint_jacobian, objective_gradient, propagate
from .errors import AllRejected, DegenerateDenominator, InvalidInput
from .landscape import Objective
from .singularity import is_transverse_to_level_set, larc_dimension
from .tolerances import DEFAULT_TOLERANCES


def _pair(system):
    if system.num_generators != 1:
        raise InvalidInput("singular-control synthesis needs a single-generator system")
    return system.drift, system.generators[0]


def singular_brackets(system):
    """``(ad_a ad_b a, ad_b ad_b a)``: numerator and denominator directions."""
    a, b = _pair(system)
    ba = algebra.commutator(b, a)
    return algebra.commutator(a, ba), algebra.commutator(b, ba)


@dataclass(frozen=True)
class SingularSeed:
    B: np.ndarray
    r0: float
    r1: float

    @classmethod
    def from_matrix(cls, system, B):
        a, b = _pair(system)
        B = np.asarray(B, dtype=complex)
        norm = np.linalg.norm(B)
        if norm == 0:
            raise InvalidInput("seed B must be nonzero")
        B = B / norm
        return cls(B, algebra.inner(b, B), algebra.inner(algebra.commutator(b, a), B))

    @property
    def is_consistent(self):
        return abs(self.r0) <= 1e-10 and abs(self.r1) <= 1e-10


def constraint_basis(system):
    """Orthonormal coordinate basis of span{b, [b, a]}."""
    a, b = _pair(system)
    C = np.array([algebra.coordinates(b), algebra.coordinates(algebra.commutator(b, a))]).T
    Uc, s, _ = np.linalg.svd(C, full_matrices=False)
    return Uc[:, s > 1e-12 * max(s.max(), 1e-300)]


def project_seed(system, B, basis=None):
    """Remove the components of ``B`` along ``b`` and ``[b, a]``, then normalize."""
    if basis is None:
        basis = constraint_basis(system)
    c = algebra.coordinates(B)
    c = c - basis @ (basis.T @ c)
    norm = np.linalg.norm(c)
    if norm == 0:
        raise InvalidInput("seed lies entirely in span{b, [b, a]}")
    return algebra.from_coordinates(c / norm, system.dim)


@dataclass
class SingularSynthesis:
    times: np.ndarray
    control: np.ndarray
    trajectory: Trajectory
    invariant: np.ndarray  # inner(Ad_{U(t)} b, B) at every step boundary, length steps + 1
    numerators: np.ndarray
    denominators: np.ndarray
    seed: SingularSeed

    @property
    def max_invariant_residual(self):
        return float(np.max(np.abs(self.invariant)))

    @property
    def non_singular_seed(self):
        return not self.seed.is_consistent

    @property
    def max_abs_control(self):
        return float(np.max(np.abs(self.control)))

    def diagnostics(self):
        return {
            "r0": self.seed.r0,
            "r1": self.seed.r1,
            "non_singular_seed": self.non_singular_seed,
            "max_invariant_residual": self.max_invariant_residual,
            "min_abs_denominator": float(np.min(np.abs(self.denominators))),
            "max_abs_control": self.max_abs_control,
        }


class ControlBoundExceeded(ArithmeticError):
    """Raised early by the synthesis when ``max_control`` is given and exceeded."""


def synthesize_singular_control(system, B, T, steps, denom_tol=DEFAULT_TOLERANCES.denominator,
                                max_control=None):
    """Integrate the implicit singular-control law forward in time.

    At each step the control is ``E = -K(Ad_U(ad_a ad_b a), B) /
    K(Ad_U(ad_b ad_b a), B)`` evaluated at the current ``U``, held constant
    over the step of length ``T / steps``. Raises
    :class:`DegenerateDenominator` when ``|den| < denom_tol * (|num| + 1)``.
    With ``max_control`` set, integration stops with
    :class:`ControlBoundExceeded` as soon as ``|E| > max_control``.
    """
    if steps < 100:
        raise InvalidInput("steps must be >= 100")
    a, b = _pair(system)
    seed = SingularSeed.from_matrix(system, B)
    B = seed.B
    x_num, x_den = singular_brackets(system)
    n = system.dim
    dt = T / steps
    U = np.eye(n, dtype=complex)
    ops = np.empty((steps + 1, n, n), dtype=complex)
    lams = np.empty((steps, n))
    vecs = np.empty((steps, n, n), dtype=complex)
    E = np.empty(steps)
    nums = np.empty(steps)
    dens = np.empty(steps)
    inv = np.empty(steps + 1)
    ops[0] = U
    # flattened conj for Re Tr(X^dagger Y) = Re sum(conj(X) * Y)
    cn, cd, cb = x_num.conj().ravel(), x_den.conj().ravel(), b.conj().ravel()
    for i in range(steps):
        Bt = (U @ B @ dag(U)).ravel()
        num = float((cn @ Bt).real)
        den = float((cd @ Bt).real)
        inv[i] = float((cb @ Bt).real)
        if abs(den) < denom_tol * (abs(num) + 1.0):
            raise DegenerateDenominator(i * dt, num, den)
        e = -num / den
        if max_control is not None and abs(e) > max_control:
            raise ControlBoundExceeded(i * dt)
        lam, V = np.linalg.eigh(1j * (a + e * b))
        U = (V * np.exp(-1j * dt * lam)) @ dag(V) @ U
        E[i], nums[i], dens[i] = e, num, den
        lams[i], vecs[i], ops[i + 1] = lam, V, U
    inv[steps] = float((cb @ (U @ B @ dag(U)).ravel()).real)
    kappa = max(float(np.max(np.abs(E))), 1e-300) if np.any(E) else 1.0
    field = ControlField(T, E[None, :], kappa)
    ops.setflags(write=False)
    traj = Trajectory(system, field, ops, lams, vecs)
    return SingularSynthesis(np.arange(steps) * dt, E, traj, inv, nums, dens, seed)


def piece_average(control, p):
    control = np.asarray(control)
    if len(control) % p:
        raise InvalidInput(f"{len(control)} samples do not split into {p} pieces")
    return control.reshape(p, -1).mean(axis=1)


@dataclass
class SearchOptions:
    restarts: int = 10
    iters: int = 30
    sigma: float = 0.05
    eta0: float = 0.5
    tau: float = 10.0
    steps_per_piece: int = 10
    max_draws: int = 50
    project: bool = True
    plateau_rel: float = 1e-6
    grad_tol: Optional[float] = None
    verify_grad_tol: float = 1e-8


@dataclass
class SearchRecord:
    seed: int
    iterations: int
    best_value: float
    best_xi_norm: float
    converged: bool
    verified: bool
    false_positive: bool
    history: list
    final_B: Optional[list]
    rejections: int
    restarts: list = dc_field(default_factory=list)
    degenerate_system: bool = False
    all_rejected: bool = False
    estimator: dict = dc_field(default_factory=dict)
    verification: Optional[dict] = None

    def to_dict(self):
        return asdict(self)

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


class _Evaluator:
    """``B -> f(B) = inner(B, xi_{U_T(B)})`` with the amplitude-bound rejection rule."""

    def __init__(self, system, T, p, kappa, objective, opts):
        self.system, self.T, self.p, self.kappa = system, T, p, kappa
        self.objective, self.opts = objective, opts
        self.rejections = 0

    def __call__(self, B):
        spp = max(self.opts.steps_per_piece, -(-100 // self.p))
        try:
            syn = synthesize_singular_control(self.system, B, self.T, self.p * spp, max_control=self.kappa)
        except (DegenerateDenominator, ControlBoundExceeded):
            self.rejections += 1
            return None
        field = ControlField(self.T, piece_average(syn.control, self.p)[None, :], self.kappa)
        traj = propagate(self.system, field)
        xi = self.objective.riemannian_gradient(traj.final)
        return algebra.inner(syn.seed.B, xi), float(np.linalg.norm(xi)), field, traj


def _unit(c):
    return c / np.linalg.norm(c)


def singular_critical_search(system, T, p, kappa, opts=None, seed=0, objective=None):
    """Stochastic ascent of ``f(B) = inner(B, U_T^dagger grad J)`` over unit seeds ``B``.

    Each restart draws ``B`` at random (redrawing while the synthesized
    control breaks ``|E| <= kappa``), then iterates two-point simultaneous
    perturbation steps ``B <- normalize(B + eta_k g_hat)`` with
    ``eta_k = eta0 / (1 + k / tau)``. A restart is declared convergent when
    ``f >= (1 - plateau_rel) |xi|`` and the control gradient norm is at most
    ``grad_tol``; convergent seeds are then re-verified (gradient norm
    ``<= verify_grad_tol`` and corank > 0).
    """
    opts = opts or SearchOptions()
    rng = np.random.default_rng(seed)
    n = system.dim
    if objective is None:
        objective = Objective.random_gate(n, rng)
    grad_tol = opts.grad_tol if opts.grad_tol is not None else DEFAULT_TOLERANCES.grad_tol(kappa, p)
    estimator = {
        "kind": "spsa-two-point",
        "sigma": opts.sigma,
        "eta0": opts.eta0,
        "tau": opts.tau,
        "steps_per_piece": opts.steps_per_piece,
        "resampling": "piece-average",
        "projected": opts.project,
    }
    _, x_den = singular_brackets(system)
    if np.linalg.norm(x_den) <= 1e-14 * max(1.0, np.linalg.norm(system.drift)):
        # the denominator vanishes identically: f cannot depend on B through E
        traj = propagate(system, ControlField.zeros(T, p, kappa))
        xi = objective.riemannian_gradient(traj.final)
        B = _unit(rng.standard_normal(n * n - 1))
        return SearchRecord(
            seed=int(seed) if np.isscalar(seed) else None, iterations=0,
            best_value=float(B @ algebra.coordinates(xi)), best_xi_norm=float(np.linalg.norm(xi)),
            converged=False, verified=False, false_positive=False, history=[], final_B=B.tolist(),
            rejections=0, degenerate_system=True, estimator=estimator,
        )

    cbasis = constraint_basis(system) if opts.project else None
    dim = n * n - 1

    def prep(c):
        c = np.asarray(c, dtype=float)
        if cbasis is not None:
            c = c - cbasis @ (cbasis.T @ c)
        return _unit(c)

    evaluate = _Evaluator(system, T, p, kappa, objective, opts)
    restarts = []
    best = None
    total_iters = 0
    for r in range(opts.restarts):
        c = None
        for _ in range(opts.max_draws):
            trial = prep(rng.standard_normal(dim))
            out = evaluate(algebra.from_coordinates(trial, n))
            if out is not None:
                c = trial
                break
        if c is None:
            restarts.append({"restart": r, "accepted": False, "history": []})
            continue
        f, xin, field, traj = out
        history = [f]
        converged = False
        grad_norm = None
        k = 0
        for k in range(opts.iters):
            if f >= (1 - opts.plateau_rel) * xin:
                grad_norm = float(np.linalg.norm(objective_gradient(system, field, objective, traj)))
                if grad_norm <= grad_tol:
                    converged = True
                    break
            delta = rng.choice([-1.0, 1.0], size=dim)
            cp, cm = prep(c + opts.sigma * delta), prep(c - opts.sigma * delta)
            op, om = evaluate(algebra.from_coordinates(cp, n)), evaluate(algebra.from_coordinates(cm, n))
            if op is None or om is None:
                history.append(f)
                continue
            ghat = (op[0] - om[0]) / (2 * opts.sigma) * delta
            eta = opts.eta0 / (1 + k / opts.tau)
            cn = prep(c + eta * ghat)
            out = evaluate(algebra.from_coordinates(cn, n))
            if out is not None:
                c = cn
                f, xin, field, traj = out
            history.append(f)
        total_iters += k + 1
        rec = {
            "restart": r,
            "accepted": True,
            "iterations": k + 1,
            "value": f,
            "xi_norm": xin,
            "ratio": f / xin if xin > 0 else float("nan"),
            "converged": converged,
            "grad_norm": grad_norm,
            "B": c.tolist(),
            "coeffs": field.coeffs[0].tolist(),
            "history": history,
        }
        if converged:
            rec["verification"] = verify_singular_critical(system, field, objective, opts.verify_grad_tol)
        restarts.append(rec)
        if best is None or rec["ratio"] > best["ratio"]:
            best = rec
    if best is None:
        raise AllRejected(f"all {opts.restarts} restarts rejected by |E| <= {kappa}")
    converged_any = any(r.get("converged") for r in restarts)
    verified_any = any(r.get("verification", {}).get("verified") for r in restarts)
    return SearchRecord(
        seed=int(seed) if np.isscalar(seed) else None,
        iterations=total_iters,
        best_value=best["value"],
        best_xi_norm=best["xi_norm"],
        converged=converged_any,
        verified=verified_any,
        false_positive=converged_any and not verified_any,
        history=[r["history"] for r in restarts],
        final_B=best["B"],
        rejections=evaluate.rejections,
        restarts=restarts,
        estimator=estimator,
        verification=best.get("verification"),
    )


def verify_singular_critical(system, field, objective, grad_tol=1e-8):
    """Independent gate: full control gradient vanishes and the Jacobian is rank deficient."""
    traj = propagate(system, field)
    g = objective_gradient(system, field, objective, traj)
    rep = endpoint_jacobian(system, field, traj=traj)
    gn = float(np.linalg.norm(g))
    return {
        "grad_norm": gn,
        "corank": int(rep.corank),
        "verified": bool(gn <= grad_tol and rep.corank > 0),
    }


@dataclass
class ScanRow:
    K: float
    corank: int
    residual: Optional[float]


def _require_full(system, field):
    n = system.dim
    if system.num_generators != n * n - 1 or field.num_generators != n * n - 1:
        raise InvalidInput(f"fully actuated system expected ({n * n - 1} generators)")


def _residual(report, objective, tol=DEFAULT_TOLERANCES.kinematic):
    if objective is None:
        return None
    xi = objective.riemannian_gradient(report.trajectory.final)
    if np.linalg.norm(xi) <= tol:
        return None
    return is_transverse_to_level_set(report, xi)[1]


def fix_parameter_scan(system, field, j_fix, k_fix, values, objective=None, rank_tol=None):
    """Corank and transversality of the map with ``a[j_fix, k_fix] = K`` held fixed."""
    _require_full(system, field)
    values = [float(K) for K in values]
    for K in values:
        if abs(K) > field.kappa:
            raise InvalidInput(f"K={K} outside [-{field.kappa}, {field.kappa}]")
    col = j_fix * field.p + k_fix
    rows = []
    for K in values:
        rep = endpoint_jacobian(system, field.with_value(j_fix, k_fix, K))
        restricted = rep.with_columns_removed(col, rank_tol)
        rows.append(ScanRow(K, int(restricted.corank), _residual(restricted, objective)))
    return rows


@dataclass
class CascadeStep:
    j: int
    k: int
    K: float
    free_parameters: int
    corank: int
    rank_deficiency: int
    residual: Optional[float]
    larc_dimension: int
    transversality_failed: bool


@dataclass
class CascadeReport:
    steps: list
    flagged_step: Optional[int]
    final_field: ControlField

    @property
    def flagged(self):
        return self.flagged_step is not None

    def to_dict(self):
        return {
            "steps": [asdict(s) for s in self.steps],
            "flagged_step": self.flagged_step,
            "final_field": self.final_field.to_dict(),
        }


def restriction_cascade(system, field, fixes, objective=None, tol=DEFAULT_TOLERANCES.transversality, rank_tol=None):
    """Fix parameters one at a time, re-checking corank and transversality.

    ``corank`` is measured against su(n); ``rank_deficiency`` against the
    largest rank the remaining free parameters could reach,
    ``min(n^2 - 1, free)``. The LARC dimension reported after each step is that of the drift
    together with the generators that still own a free parameter. Stops at
    the first step whose transversality residual is ``<= tol`` at a point
    that is not kinematic critical.
    """
    _require_full(system, field)
    keys = [(int(j), int(k)) for j, k, _ in fixes]
    if len(set(keys)) != len(keys):
        raise InvalidInput("fixes must be distinct")
    m, p = field.coeffs.shape
    fixed = np.zeros((m, p), dtype=bool)
    current = field
    steps = []
    flagged = None
    for i, (j, k, K) in enumerate(fixes):
        if abs(K) > field.kappa:
            raise InvalidInput(f"K={K} outside [-{field.kappa}, {field.kappa}]")
        current = current.with_value(j, k, K)
        fixed[j, k] = True
        rep = endpoint_jacobian(system, current)
        restricted = rep.with_columns_removed(np.flatnonzero(fixed.ravel()), rank_tol)
        residual = _residual(restricted, objective)
        free_gens = [system.generators[jj] for jj in range(m) if not fixed[jj].all()]
        ldim = larc_dimension(ControlSystem(system.drift, tuple(free_gens))) if free_gens else (
            larc_dimension(ControlSystem(system.drift, (np.zeros_like(system.drift),)))
        )
        failed = residual is not None and residual <= tol
        free = int((~fixed).sum())
        deficiency = min(system.dim**2 - 1, free) - restricted.numerical_rank
        steps.append(CascadeStep(int(j), int(k), float(K), free, int(restricted.corank), int(deficiency),
                                 residual, int(ldim), bool(failed)))
        if failed:
            flagged = i
            break
    return CascadeReport(steps, flagged, current)


def rows_to_csv(rows):
    rows = [asdict(r) for r in rows]
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()
