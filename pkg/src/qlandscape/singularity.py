"""Rank, transversality and controllability diagnostics of the end-point map."""

import numpy as np

from . import algebra
from .dynamics import JacobianReport, endpoint_jacobian, jacobian_columns, numerical_rank, propagate
from .errors import InvalidInput, KinematicCritical
from .tolerances import DEFAULT_TOLERANCES

__all__ = [
    "JacobianReport",
    "corank",
    "is_transverse_to_level_set",
    "larc_dimension",
    "exp_singularity_margin",
    "exp_derivative_matrix",
    "state_map_rank",
    "endpoint_jacobian",
]


def corank(report, rank_tol=None):
    if rank_tol is None or rank_tol == report.rank_tol:
        return report.corank
    return (report.dim**2 - 1) - numerical_rank(report.singular_values, rank_tol)


def is_transverse_to_level_set(report, xi, tol=DEFAULT_TOLERANCES.transversality, rank_tol=None):
    """Does some admissible variation move ``U_T`` along ``xi``?

    ``xi`` is either an su(n) matrix or its coordinate vector. Returns
    ``(transverse, residual)`` where ``residual`` is the norm of the
    projection of ``xi`` onto the column span of ``M`` divided by ``|xi|``.
    """
    xi = np.asarray(xi)
    if xi.ndim == 2:
        xi = algebra.coordinates(xi)
    xi = xi.astype(float)
    norm = np.linalg.norm(xi)
    if norm == 0.0:
        raise KinematicCritical("translated gradient is zero; transversality is undefined")
    rank = report.numerical_rank if rank_tol is None else numerical_rank(report.singular_values, rank_tol)
    Ur = report.left_vectors[:, :rank]
    residual = float(np.linalg.norm(Ur.T @ xi) / norm)
    return residual > tol, residual


def _orthogonalize(v, Q):
    # two passes of modified Gram-Schmidt
    for _ in range(2):
        for q in Q:
            v = v - (q @ v) * q
    return v


def larc_dimension(system, rel_tol=DEFAULT_TOLERANCES.larc, return_basis=False):
    """Dimension of the Lie algebra generated by the drift and the generators.

    Breadth-first bracket closure: every newly accepted direction is
    bracketed with each generating element; a candidate is kept when its
    component orthogonal to the current span exceeds ``rel_tol`` times its
    natural scale (its own norm for generators, ``|g| |X|`` for a bracket
    ``[g, X]``). Stops when a level adds nothing or the dimension reaches n^2 - 1.
    """
    n = system.dim
    full = n * n - 1
    gens = [g for g in (system.drift, *system.generators) if np.linalg.norm(g) > 0]
    Q, mats = [], []

    def add(X, scale=None):
        v = algebra.coordinates(X)
        norm = np.linalg.norm(v) if scale is None else scale
        if norm == 0.0:
            return None
        r = _orthogonalize(v, Q)
        rn = np.linalg.norm(r)
        if rn <= rel_tol * norm:
            return None
        q = r / rn
        Q.append(q)
        M = algebra.from_coordinates(q, n)
        mats.append(M)
        return M

    frontier = [M for M in (add(g) for g in gens) if M is not None]
    levels_without_growth = 0
    while frontier and len(Q) < full and levels_without_growth <= full:
        new = []
        for X in frontier:
            for g in gens:
                # X has unit norm; measure the bracket against |g| |X|
                M = add(algebra.commutator(g, X), np.linalg.norm(g))
                if M is not None:
                    new.append(M)
                if len(Q) == full:
                    break
            if len(Q) == full:
                break
        levels_without_growth = 0 if new else levels_without_growth + 1
        frontier = new
    if return_basis:
        return len(Q), np.array(mats)
    return len(Q)


def is_controllable(system, rel_tol=DEFAULT_TOLERANCES.larc):
    return larc_dimension(system, rel_tol) == system.dim**2 - 1


def exp_singularity_margin(H_piece, dt):
    """Spectral-gap test for the per-piece exponential.

    ``safe`` iff ``dt * (lam_max - lam_min) < 2 pi`` for the spectrum of
    ``i H_piece``; ``margin = 2 pi - dt * gap``.
    """
    if not dt > 0:
        raise InvalidInput("dt must be positive")
    lam = np.linalg.eigvalsh(1j * np.asarray(H_piece))
    gap = float(lam[-1] - lam[0])
    margin = 2 * np.pi - dt * gap
    return margin > 0, margin


def exp_derivative_matrix(X, dt=1.0):
    """Real ``n^2 x n^2`` matrix of ``Y -> exp(Y)^dagger d exp(Y)`` at ``Y = dt X``.

    Input and output directions use the basis of su(n) extended by
    ``i I / sqrt(n)`` (i.e. u(n)). Its singular values vanish exactly when the
    exponential is singular at ``dt X``.
    """
    X = np.asarray(X, dtype=complex)
    n = X.shape[0]
    basis = np.concatenate([algebra.standard_basis(n), (1j * np.eye(n) / np.sqrt(n))[None]])
    Y = dt * X
    E = algebra.expm(Y)
    cols = [algebra.dag(E) @ algebra.exp_frechet(Y, B, 1.0) for B in basis]
    return np.einsum("iab,jab->ij", basis.conj(), np.array(cols)).real


def state_map_rank(system, field, psi0, rank_tol=None, report=None):
    """Rank of the derivative of ``field -> U_T psi0`` onto the tangent of CP^{n-1}.

    Each column is ``U_T C psi0`` for a Jacobian column ``C`` (``U_T^dagger
    dU_T``), taken as a real 2n-vector after removing the components along
    ``psi_T`` and ``i psi_T``.
    """
    psi0 = np.asarray(psi0, dtype=complex)
    if psi0.shape != (system.dim,) or abs(np.linalg.norm(psi0) - 1.0) > 1e-10:
        raise InvalidInput("psi0 must be a unit vector of the system dimension")
    traj = report.trajectory if report is not None and report.trajectory is not None else propagate(system, field)
    S = state_derivative_matrix(traj, psi0)
    if rank_tol is None:
        rank_tol = DEFAULT_TOLERANCES.rank_tol(S.shape)
    sv = np.linalg.svd(S, compute_uv=False) if S.size else np.zeros(0)
    return numerical_rank(sv, rank_tol)


def state_derivative_matrix(traj, psi0):
    cols = jacobian_columns(traj)
    m, p, n, _ = cols.shape
    psiT = traj.final @ psi0
    V = (traj.final[None, None] @ cols @ psi0).reshape(m * p, n)
    V = V - np.outer(V @ psiT.conj(), psiT)
    return np.concatenate([V.real, V.imag], axis=1).T
