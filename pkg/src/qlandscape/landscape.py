"""Objectives on SU(n), gradient ascent over controls, Hessians, classification."""

import json
import time
from dataclasses import asdict, dataclass, field as dc_field
from typing import Optional

import numpy as np

from . import algebra
from .algebra import dag
from .dynamics import ControlField, objective_gradient, propagate
from .errors import DimensionMismatch, InvalidInput
from .tolerances import DEFAULT_TOLERANCES

KINDS = ("J1_gate", "J2_gate", "state_transfer", "observable")


@dataclass(frozen=True)
class Objective:
    """A fidelity-type function ``J`` on SU(n).

    Build with :meth:`gate_j1`, :meth:`gate_j2`, :meth:`state_transfer` or
    :meth:`observable` rather than directly.
    """

    kind: str
    dim: int
    G: Optional[np.ndarray] = None
    psi_i: Optional[np.ndarray] = None
    psi_f: Optional[np.ndarray] = None
    rho0: Optional[np.ndarray] = None
    O: Optional[np.ndarray] = None

    @classmethod
    def gate_j1(cls, G):
        G = _check_target(G)
        return cls("J1_gate", G.shape[0], G=G)

    @classmethod
    def gate_j2(cls, G):
        G = _check_target(G)
        return cls("J2_gate", G.shape[0], G=G)

    @classmethod
    def state_transfer(cls, psi_i, psi_f):
        psi_i = np.asarray(psi_i, dtype=complex)
        psi_f = np.asarray(psi_f, dtype=complex)
        if psi_i.shape != psi_f.shape or psi_i.ndim != 1:
            raise DimensionMismatch("state vectors must be 1-d and of equal length")
        for name, v in (("psi_i", psi_i), ("psi_f", psi_f)):
            if abs(np.linalg.norm(v) - 1.0) > 1e-12:
                raise InvalidInput(f"{name} is not normalized")
        return cls("state_transfer", psi_i.shape[0], psi_i=psi_i, psi_f=psi_f)

    @classmethod
    def observable(cls, rho0, O):
        rho0 = np.asarray(rho0, dtype=complex)
        O = np.asarray(O, dtype=complex)
        if rho0.shape != O.shape:
            raise DimensionMismatch("rho0 and O must have the same shape")
        if np.linalg.norm(O - dag(O)) > 1e-12 * max(1.0, np.linalg.norm(O)):
            raise InvalidInput("O is not Hermitian")
        if np.linalg.norm(rho0 - dag(rho0)) > 1e-10 or abs(np.trace(rho0) - 1) > 1e-10:
            raise InvalidInput("rho0 must be Hermitian with unit trace")
        if np.linalg.eigvalsh(rho0).min() < -1e-10:
            raise InvalidInput("rho0 is not positive semidefinite")
        return cls("observable", O.shape[0], rho0=rho0, O=O)

    @classmethod
    def random_gate(cls, n, seed, kind="J2_gate"):
        G = algebra.random_special_unitary(n, seed)
        return cls.gate_j1(G) if kind == "J1_gate" else cls.gate_j2(G)

    def _check(self, U):
        U = np.asarray(U)
        if U.shape != (self.dim, self.dim):
            raise DimensionMismatch(f"U has shape {U.shape}, objective has dim {self.dim}")
        return U

    def evaluate(self, U):
        U = self._check(U)
        if self.kind == "J1_gate":
            return float(np.vdot(self.G, U).real)
        if self.kind == "J2_gate":
            return float(abs(np.vdot(self.G, U)) ** 2)
        if self.kind == "state_transfer":
            return float(abs(np.vdot(self.psi_f, U @ self.psi_i)) ** 2)
        return float(np.trace(self.O @ U @ self.rho0 @ dag(U)).real)

    def euclidean_gradient(self, U):
        """``Gamma`` with ``dJ = Re Tr(Gamma^dagger dU)`` for any tangent ``dU``."""
        U = self._check(U)
        if self.kind == "J1_gate":
            return self.G.copy()
        if self.kind == "J2_gate":
            return 2.0 * np.vdot(self.G, U) * self.G
        if self.kind == "state_transfer":
            w = np.vdot(self.psi_f, U @ self.psi_i)
            return 2.0 * w * np.outer(self.psi_f, self.psi_i.conj())
        return 2.0 * self.O @ U @ self.rho0

    def riemannian_gradient(self, U):
        """Translated gradient ``xi`` in su(n): ``dJ(U delta) = inner(xi, delta)``."""
        return algebra.project_su(dag(U) @ self.euclidean_gradient(U))

    @property
    def max_value(self):
        """Kinematic maximum of ``J`` over SU(n)."""
        if self.kind == "J1_gate":
            return float(self.dim)
        if self.kind == "J2_gate":
            return float(self.dim**2)
        if self.kind == "state_transfer":
            return 1.0
        o = np.sort(np.linalg.eigvalsh(self.O))[::-1]
        r = np.sort(np.linalg.eigvalsh(self.rho0))[::-1]
        return float(o @ r)

    def normalized(self, value):
        return value / self.max_value

    def to_dict(self):
        from .io import matrix_to_json

        d = {"kind": self.kind, "dim": self.dim}
        for name in ("G", "psi_i", "psi_f", "rho0", "O"):
            v = getattr(self, name)
            if v is not None:
                d[name] = matrix_to_json(v)
        return d

    @classmethod
    def from_dict(cls, d):
        from .io import matrix_from_json

        kind = d.get("kind")
        if kind in ("J1_gate", "J2_gate"):
            G = matrix_from_json(d["G"])
            return cls.gate_j1(G) if kind == "J1_gate" else cls.gate_j2(G)
        if kind == "state_transfer":
            return cls.state_transfer(matrix_from_json(d["psi_i"]), matrix_from_json(d["psi_f"]))
        if kind == "observable":
            return cls.observable(matrix_from_json(d["rho0"]), matrix_from_json(d["O"]))
        raise InvalidInput(f"unknown objective kind {kind!r}")


def _check_target(G):
    G = np.asarray(G, dtype=complex)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise InvalidInput("target must be a square matrix")
    if not algebra.is_special_unitary(G):
        raise InvalidInput("target gate is not special unitary")
    return G


@dataclass
class AscentOptions:
    max_iters: int = 1000
    step0: Optional[float] = None
    shrink: float = 0.5
    grow: float = 2.0
    armijo: float = 1e-4
    max_backtracks: int = 40
    grad_tol: Optional[float] = None
    value_tol: float = 1e-3


@dataclass
class RunRecord:
    seed: Optional[int]
    iterations: int
    trace: list
    final_field: ControlField
    final_value: float
    normalized_value: float
    grad_norm: float
    termination: str
    classification: str = "unclassified"
    line_search: dict = dc_field(default_factory=dict)
    wall_ms: float = 0.0

    def to_dict(self):
        d = asdict(self)
        d["final_field"] = self.final_field.to_dict()
        return d

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    def csv_row(self):
        return {
            "seed": self.seed,
            "final_value": self.final_value,
            "normalized_value": self.normalized_value,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "classification": self.classification,
            "termination": self.termination,
        }


def gradient_ascent(system, field0, objective, opts=None, seed=None):
    """Projected gradient ascent on the control coefficients.

    Armijo backtracking keeps the recorded objective trace non-decreasing.
    The step grows by ``opts.grow`` after an accepted step and the very
    first trial step moves the largest coefficient by ``0.1 * kappa``.
    """
    opts = opts or AscentOptions()
    kappa, p = field0.kappa, field0.p
    grad_tol = opts.grad_tol if opts.grad_tol is not None else DEFAULT_TOLERANCES.grad_tol(kappa, p)
    vmax = objective.max_value
    t_start = time.perf_counter()

    def value_grad(c):
        f = field0.with_coeffs(c)
        traj = propagate(system, f)
        return objective.evaluate(traj.final), objective_gradient(system, f, objective, traj)

    def projected(x, g):
        # components pushing against an active bound cannot be followed
        blocked = ((x >= kappa) & (g > 0)) | ((x <= -kappa) & (g < 0))
        return np.where(blocked, 0.0, g)

    x = np.array(field0.coeffs)
    F, g = value_grad(x)
    trace = [F]
    step = opts.step0
    termination = "max_iters"
    it = 0
    for it in range(opts.max_iters + 1):
        gn = float(np.linalg.norm(projected(x, g)))
        if vmax - F <= opts.value_tol * vmax:
            termination = "converged"
            break
        if gn <= grad_tol:
            termination = "converged"
            break
        if it == opts.max_iters:
            break
        gmax = float(np.max(np.abs(projected(x, g))))
        if step is None:
            step = 0.1 * kappa / gmax
        t = step
        accepted = False
        for _ in range(opts.max_backtracks):
            x_new = np.clip(x + t * g, -kappa, kappa)
            F_new, g_new = value_grad(x_new)
            if F_new >= F + opts.armijo * float(np.sum(g * (x_new - x))) and F_new >= F:
                accepted = True
                break
            t *= opts.shrink
        if not accepted:
            termination = "stalled"
            break
        x, F, g = x_new, F_new, g_new
        trace.append(F)
        step = t * opts.grow
    final = field0.with_coeffs(x)
    return RunRecord(
        seed=seed,
        iterations=it,
        trace=trace,
        final_field=final,
        final_value=F,
        normalized_value=F / vmax,
        grad_norm=float(np.linalg.norm(projected(x, g))),
        termination=termination,
        line_search={
            "rule": "armijo-backtracking",
            "shrink": opts.shrink,
            "grow": opts.grow,
            "armijo": opts.armijo,
            "initial_max_change": 0.1 * kappa,
            "grad_tol": grad_tol,
            "value_tol": opts.value_tol,
        },
        wall_ms=1e3 * (time.perf_counter() - t_start),
    )


def hessian(system, field, objective, h=None):
    """Symmetrized central differences of the exact gradient, ``h = 1e-4 kappa``."""
    if h is None:
        h = 1e-4 * field.kappa
    x0 = np.array(field.coeffs)
    m, p = x0.shape
    N = m * p
    Hm = np.empty((N, N))
    for i in range(N):
        e = np.zeros(N)
        e[i] = h
        e = e.reshape(m, p)
        # finite differences may step outside the kappa box; the map is smooth there
        big = field.kappa + 2 * h
        gp = objective_gradient(system, ControlField(field.T, x0 + e, big), objective)
        gm = objective_gradient(system, ControlField(field.T, x0 - e, big), objective)
        Hm[:, i] = ((gp - gm) / (2 * h)).ravel()
    return 0.5 * (Hm + Hm.T)


TAGS = ("regular", "kinematic_critical", "singular_critical", "second_order_critical", "global_optimum")


def classify_critical(system, field, objective, report, tols=None, check_second_order=False):
    """Tag a control by its critical-point type.

    Precedence: ``global_optimum`` (value gap), ``kinematic_critical``
    (translated gradient vanishes), ``regular`` (control gradient above
    tolerance), then ``singular_critical`` and optionally
    ``second_order_critical`` when ``check_second_order`` asks for the
    Hessian test.
    """
    tols = tols or DEFAULT_TOLERANCES
    traj = report.trajectory if report.trajectory is not None else propagate(system, field)
    U = traj.final
    value = objective.evaluate(U)
    vmax = objective.max_value
    if vmax - value <= tols.value_gap * vmax:
        return "global_optimum"
    xi = objective.riemannian_gradient(U)
    if np.linalg.norm(xi) <= tols.kinematic:
        return "kinematic_critical"
    g = report.M.T @ algebra.coordinates(xi)
    if np.linalg.norm(g) > tols.grad_tol(field.kappa, field.p):
        return "regular"
    if report.corank == 0:
        # |g| small with a surjective Jacobian only happens through tolerance mismatch
        return "regular"
    if check_second_order:
        ev = np.linalg.eigvalsh(hessian(system, field, objective))
        if ev.max() <= tols.hessian:
            return "second_order_critical"
    return "singular_critical"


def is_trap_candidate(tag):
    return tag == "second_order_critical"
