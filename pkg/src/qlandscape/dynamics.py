"""Piecewise-constant controls, propagation, and the end-point Jacobian.

Conventions
-----------
* ``dU/dt = (a + sum_j E_j(t) b_j) U`` with ``a``/``b_j`` in su(n).
* Piece ``k`` covers ``[k T/p, (k+1) T/p)``; the value at ``t = T`` belongs
  to the last piece.
* Column ``(j, k)`` of the Jacobian is flattened to index ``j * p + k``, the
  row-major order of ``ControlField.coeffs``.
"""

import json
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from . import algebra
from .algebra import dag
from .errors import DimensionMismatch, InvalidInput
from .tolerances import DEFAULT_TOLERANCES


@dataclass(frozen=True)
class ControlSystem:
    drift: np.ndarray
    generators: tuple

    def __post_init__(self):
        drift = algebra.check_element(self.drift, name="drift")
        gens = tuple(np.asarray(g, dtype=complex) for g in self.generators)
        if not gens:
            raise InvalidInput("a control system needs at least one generator")
        n = drift.shape[0]
        if n < 2:
            raise InvalidInput("dimension must be >= 2")
        for j, g in enumerate(gens):
            if g.shape != (n, n):
                raise DimensionMismatch(f"generator {j} has shape {g.shape}, expected {(n, n)}")
            algebra.check_element(g, name=f"generator {j}")
        object.__setattr__(self, "drift", drift)
        object.__setattr__(self, "generators", gens)

    @property
    def dim(self):
        return self.drift.shape[0]

    @property
    def num_generators(self):
        return len(self.generators)

    @property
    def generator_stack(self):
        return np.array(self.generators)

    @classmethod
    def dipole(cls, drift, generator):
        return cls(drift, (generator,))

    @classmethod
    def fully_actuated(cls, n, drift=None):
        """Drift plus one independent control on every basis direction."""
        if drift is None:
            drift = np.zeros((n, n), dtype=complex)
        return cls(drift, tuple(algebra.standard_basis(n)))

    @classmethod
    def random(cls, n, seed, num_generators=1, norm_bound=1.0):
        """Random drift and generators, each from ``algebra.random_element``."""
        rng = np.random.default_rng(seed)
        drift = algebra.random_element(n, rng, norm_bound)
        gens = tuple(algebra.random_element(n, rng, norm_bound) for _ in range(num_generators))
        return cls(drift, gens)


@dataclass(frozen=True)
class ControlField:
    T: float
    coeffs: np.ndarray
    kappa: float

    def __post_init__(self):
        coeffs = np.array(self.coeffs, dtype=float)
        if coeffs.ndim == 1:
            coeffs = coeffs[None, :]
        if coeffs.ndim != 2 or coeffs.shape[1] < 1 or coeffs.shape[0] < 1:
            raise InvalidInput(f"coeffs must be (num_generators, p), got {coeffs.shape}")
        if not (np.isfinite(self.T) and self.T > 0):
            raise InvalidInput(f"T must be positive, got {self.T}")
        if not (np.isfinite(self.kappa) and self.kappa > 0):
            raise InvalidInput(f"kappa must be positive, got {self.kappa}")
        if not np.all(np.isfinite(coeffs)):
            raise InvalidInput("coeffs contain non-finite values")
        if np.any(np.abs(coeffs) > self.kappa):
            raise InvalidInput(f"|coeff| exceeds kappa={self.kappa}")
        coeffs.setflags(write=False)
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "kappa", float(self.kappa))
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def p(self):
        return self.coeffs.shape[1]

    @property
    def num_generators(self):
        return self.coeffs.shape[0]

    @property
    def dt(self):
        return self.T / self.p

    @property
    def boundaries(self):
        return np.arange(self.p + 1) * self.dt

    def piece_index(self, t):
        """Piece containing time ``t`` (left-closed pieces, ``T`` in the last)."""
        if t < 0 or t > self.T:
            raise InvalidInput(f"t={t} outside [0, {self.T}]")
        return min(int(np.floor(t / self.dt)), self.p - 1)

    def with_coeffs(self, coeffs):
        return ControlField(self.T, coeffs, self.kappa)

    def with_value(self, j, k, value):
        c = np.array(self.coeffs)
        c[j, k] = value
        return ControlField(self.T, c, self.kappa)

    @classmethod
    def zeros(cls, T, p, kappa, num_generators=1):
        return cls(T, np.zeros((num_generators, p)), kappa)

    @classmethod
    def random(cls, T, p, kappa, seed, num_generators=1):
        rng = np.random.default_rng(seed)
        return cls(T, rng.uniform(-kappa, kappa, size=(num_generators, p)), kappa)

    def refine(self, factor=2):
        """Same piecewise-constant function on ``factor`` times more pieces."""
        return ControlField(self.T, np.repeat(self.coeffs, factor, axis=1), self.kappa)

    def to_dict(self):
        return {
            "T": self.T,
            "p": self.p,
            "kappa": self.kappa,
            "generators": self.num_generators,
            "coeffs": [float(x) for x in self.coeffs.ravel()],
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d):
        try:
            p, m = int(d["p"]), int(d["generators"])
            coeffs = np.asarray(d["coeffs"], dtype=float)
            T, kappa = float(d["T"]), float(d["kappa"])
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInput(f"malformed control field document: {exc}") from exc
        if coeffs.size != p * m:
            raise InvalidInput(f"expected {p * m} coefficients, got {coeffs.size}")
        return cls(T, coeffs.reshape(m, p), kappa)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Trajectory:
    system: ControlSystem
    field: ControlField
    boundary_ops: np.ndarray  # (p + 1, n, n); boundary_ops[0] = I
    # per-piece spectra of i*H_k: eigenvalues (p, n) and eigenvectors (p, n, n)
    _lam: np.ndarray = dc_field(repr=False, compare=False)
    _vec: np.ndarray = dc_field(repr=False, compare=False)

    @property
    def final(self):
        return self.boundary_ops[-1]

    @property
    def dim(self):
        return self.system.dim

    def piece_hamiltonians(self):
        return piece_generators(self.system, self.field)

    def operator_at(self, t):
        """``U(t)`` recomputed inside its piece."""
        k = self.field.piece_index(t)
        s = t - k * self.field.dt
        step = algebra.expm_from_spectrum(self._lam[k], self._vec[k], s)
        return step @ self.boundary_ops[k]

    def semigroup_residual(self):
        """``max_k || U(t_{k+1}) - exp(dt H_k) U(t_k) ||_F`` recomputed from scratch."""
        steps = algebra.expm(self.piece_hamiltonians(), self.field.dt)
        pred = steps @ self.boundary_ops[:-1]
        return float(np.max(np.linalg.norm(pred - self.boundary_ops[1:], axis=(-2, -1))))


def _check_compatible(system, field):
    if field.num_generators != system.num_generators:
        raise InvalidInput(
            f"field has {field.num_generators} generator rows, system has {system.num_generators}"
        )


def piece_generators(system, field):
    """Stack of ``H_k = a + sum_j a_{j,k} b_j``, shape ``(p, n, n)``."""
    _check_compatible(system, field)
    return system.drift[None] + np.einsum("jk,jab->kab", field.coeffs, system.generator_stack)


def propagate(system, field):
    """Propagate ``U`` through every piece; returns a :class:`Trajectory`."""
    H = piece_generators(system, field)
    lam, V = algebra.spectrum(H)
    steps = algebra.expm_from_spectrum(lam, V, field.dt)
    n = system.dim
    ops = np.empty((field.p + 1, n, n), dtype=complex)
    ops[0] = np.eye(n)
    U = ops[0]
    for k in range(field.p):
        U = steps[k] @ U
        ops[k + 1] = U
    ops.setflags(write=False)
    return Trajectory(system, field, ops, lam, V)


def jacobian_columns(traj):
    """Exact ``int_{I_k} U_t^dagger b_j U_t dt`` for every ``(j, k)``.

    Returns a complex array ``(num_generators, p, n, n)`` of su(n) elements.
    Inside piece ``k`` with ``iH_k = V diag(lam) V^dagger`` the integrand is
    ``Q^dagger (b~ * exp(i (lam_l - lam_m) s)) Q`` with ``Q = V^dagger U(t_k)``,
    so the time integral reduces to an elementwise product.
    """
    V = traj._vec
    W = algebra.phase_integral(traj._lam, traj.field.dt)  # (p, n, n)
    Q = dag(V) @ traj.boundary_ops[:-1]  # (p, n, n)
    b = traj.system.generator_stack  # (m, n, n)
    bt = dag(V)[None] @ b[:, None] @ V[None]  # (m, p, n, n)
    return dag(Q)[None] @ (bt * W[None]) @ Q[None]


@dataclass(frozen=True)
class JacobianReport:
    """Translated Jacobian of the end-point map and its singular values.

    ``M`` has one row per basis direction of su(n) and one column per control
    parameter. ``numerical_rank`` counts singular values above
    ``rank_tol * sigma_max``.
    """

    M: np.ndarray
    singular_values: np.ndarray
    left_vectors: np.ndarray
    rank_tol: float
    numerical_rank: int
    dim: int
    trajectory: Optional[Trajectory] = dc_field(default=None, repr=False, compare=False)

    @property
    def corank(self):
        return (self.dim * self.dim - 1) - self.numerical_rank

    @classmethod
    def from_matrix(cls, M, dim, rank_tol=None, trajectory=None):
        M = np.asarray(M, dtype=float)
        if M.shape[0] != dim * dim - 1:
            raise DimensionMismatch(f"M has {M.shape[0]} rows, su({dim}) needs {dim * dim - 1}")
        if rank_tol is None:
            rank_tol = DEFAULT_TOLERANCES.rank_tol(M.shape)
        if M.shape[1] == 0:
            sv = np.zeros(0)
            Ul = np.zeros((M.shape[0], 0))
        else:
            Ul, sv, _ = np.linalg.svd(M, full_matrices=False)
        rank = numerical_rank(sv, rank_tol)
        return cls(M, sv, Ul, float(rank_tol), rank, dim, trajectory)

    def with_columns_removed(self, cols, rank_tol=None):
        keep = np.setdiff1d(np.arange(self.M.shape[1]), np.atleast_1d(cols))
        return JacobianReport.from_matrix(
            self.M[:, keep], self.dim, self.rank_tol if rank_tol is None else rank_tol, self.trajectory
        )

    def summary(self, residual=None):
        d = {
            "sigma": [float(s) for s in self.singular_values],
            "rank": int(self.numerical_rank),
            "corank": int(self.corank),
            "tolerances": {"rank_tol": self.rank_tol},
        }
        if residual is not None:
            d["residual"] = float(residual)
        return d


def numerical_rank(singular_values, rank_tol):
    sv = np.asarray(singular_values)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.count_nonzero(sv > rank_tol * sv[0]))


def endpoint_jacobian(system, field, rank_tol=None, traj=None):
    """Translated Jacobian ``U_T^dagger dU_T`` in basis coordinates, with SVD."""
    if traj is None:
        traj = propagate(system, field)
    cols = jacobian_columns(traj)
    m, p = cols.shape[:2]
    coords = algebra.coordinates(cols)  # (m, p, n^2 - 1)
    M = coords.reshape(m * p, -1).T
    return JacobianReport.from_matrix(M, system.dim, rank_tol, traj)


def objective_gradient(system, field, objective, traj=None):
    """Exact gradient of ``F = J(V_T[field])`` w.r.t. ``field.coeffs``."""
    if traj is None:
        traj = propagate(system, field)
    xi = objective.riemannian_gradient(traj.final)
    cols = jacobian_columns(traj)
    # inner(xi, col) = Re Tr(xi^dagger col)
    return np.einsum("ab,jkab->jk", xi.conj(), cols).real


def value_and_gradient(system, field, objective):
    traj = propagate(system, field)
    return objective.evaluate(traj.final), objective_gradient(system, field, objective, traj)


def adjoint_orbit_samples(traj, X, samples_per_piece):
    """``Ad_{U(t)} X = U(t)^dagger X U(t)`` on a uniform grid.

    Returns ``(times, samples)`` where ``times`` has ``p * samples_per_piece + 1``
    entries from 0 to T inclusive.
    """
    if samples_per_piece < 1:
        raise InvalidInput("samples_per_piece must be >= 1")
    X = np.asarray(X, dtype=complex)
    if X.shape != (traj.dim, traj.dim):
        raise DimensionMismatch(f"X has shape {X.shape}, trajectory has dim {traj.dim}")
    dt = traj.field.dt
    p = traj.field.p
    s = np.arange(samples_per_piece) * (dt / samples_per_piece)
    # within piece k: U(t_k + s) = V e^{-i s lam} V^dagger U(t_k)
    phases = np.exp(-1j * s[None, :, None] * traj._lam[:, None, :])  # (p, S, n)
    Q = dag(traj._vec) @ traj.boundary_ops[:-1]  # (p, n, n)
    Xt = dag(traj._vec) @ X @ traj._vec  # (p, n, n)
    inner_part = np.conj(phases)[..., :, None] * Xt[:, None] * phases[..., None, :]
    out = dag(Q)[:, None] @ inner_part @ Q[:, None]
    samples = np.concatenate([out.reshape(p * samples_per_piece, traj.dim, traj.dim),
                              algebra.adjoint_action(traj.final, X)[None]])
    times = np.concatenate([(np.arange(p)[:, None] * dt + s[None]).ravel(), [traj.field.T]])
    return times, samples
