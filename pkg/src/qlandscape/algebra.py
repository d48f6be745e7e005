"""The su(n) layer: basis, inner product, brackets, exact exponentials.

Elements of su(n) are plain complex ``(n, n)`` numpy arrays that are
anti-Hermitian and traceless; unitaries are plain ``(n, n)`` arrays too.
Nothing here mutates its arguments.
"""

from functools import lru_cache

import numpy as np

from .errors import DimensionMismatch, InvalidDimension, InvalidInput, NumericalFailure
from .tolerances import DEFAULT_TOLERANCES


def dag(X):
    return np.conj(np.swapaxes(X, -1, -2))


def _dim(X):
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] != X.shape[1]:
        raise InvalidInput(f"expected a square matrix, got shape {X.shape}")
    return X.shape[0]


def _same_dim(X, Y):
    nx, ny = _dim(X), _dim(Y)
    if nx != ny:
        raise DimensionMismatch(f"dimension mismatch: {nx} vs {ny}")
    return nx


@lru_cache(maxsize=None)
def _basis(n):
    elems = []
    # off-diagonal symmetric, then antisymmetric, then diagonal generators
    for j in range(n):
        for k in range(j + 1, n):
            m = np.zeros((n, n), dtype=complex)
            m[j, k] = m[k, j] = 1j / np.sqrt(2.0)
            elems.append(m)
    for j in range(n):
        for k in range(j + 1, n):
            m = np.zeros((n, n), dtype=complex)
            m[j, k] = 1.0 / np.sqrt(2.0)
            m[k, j] = -1.0 / np.sqrt(2.0)
            elems.append(m)
    for l in range(1, n):
        d = np.zeros(n)
        d[:l] = 1.0
        d[l] = -float(l)
        d /= np.sqrt(l * (l + 1))
        elems.append(np.diag(1j * d))
    out = np.array(elems)
    out.setflags(write=False)
    return out


def standard_basis(n):
    """Orthonormal generalized Gell-Mann basis of su(n), shape ``(n*n - 1, n, n)``.

    Ordering: the ``i*(E_jk + E_kj)/sqrt(2)`` elements for ``j < k`` in
    row-major order, then ``(E_jk - E_kj)/sqrt(2)``, then the ``n - 1``
    diagonal elements ``i*diag(1,..,1,-l,0,..)/sqrt(l(l+1))``. For ``n = 2``
    this is ``(i sx, i sy, i sz)/sqrt(2)`` up to the sign of the middle one.
    """
    if int(n) != n or n < 2:
        raise InvalidDimension(f"su(n) needs n >= 2, got {n}")
    return _basis(int(n))


def coordinates(X, basis=None):
    """Real coordinate vector(s) of ``X`` over the orthonormal basis.

    Accepts a single ``(n, n)`` matrix or a stack ``(..., n, n)``.
    """
    X = np.asarray(X)
    if basis is None:
        basis = standard_basis(X.shape[-1])
    return np.einsum("iab,...ab->...i", basis.conj(), X).real


def from_coordinates(c, n=None):
    c = np.asarray(c, dtype=float)
    if n is None:
        n = int(round(np.sqrt(c.shape[-1] + 1)))
    basis = standard_basis(n)
    if c.shape[-1] != len(basis):
        raise DimensionMismatch(f"{c.shape[-1]} coordinates do not fit su({n})")
    return np.tensordot(c, basis, axes=([-1], [0]))


def project_su(Z):
    """Orthogonal projection of any complex matrix onto su(n)."""
    Z = np.asarray(Z, dtype=complex)
    n = Z.shape[-1]
    A = 0.5 * (Z - dag(Z))
    tr = np.trace(A, axis1=-2, axis2=-1)
    return A - (tr / n)[..., None, None] * np.eye(n)


def is_element(X, tol=DEFAULT_TOLERANCES.element):
    X = np.asarray(X)
    scale = max(1.0, np.linalg.norm(X))
    return (
        np.linalg.norm(X + dag(X)) <= tol * scale
        and abs(np.trace(X)) <= tol * scale
    )


def check_element(X, tol=DEFAULT_TOLERANCES.element, name="element"):
    _dim(X)
    if not np.all(np.isfinite(X)):
        raise InvalidInput(f"{name} has non-finite entries")
    if not is_element(X, tol):
        raise InvalidInput(f"{name} is not a traceless anti-Hermitian matrix")
    return np.asarray(X, dtype=complex)


def unitarity_error(U):
    U = np.asarray(U)
    return np.linalg.norm(dag(U) @ U - np.eye(U.shape[-1]), axis=(-2, -1))


def is_special_unitary(U, tol=DEFAULT_TOLERANCES.unitarity, det_tol=DEFAULT_TOLERANCES.determinant):
    return bool(unitarity_error(U) <= tol and abs(np.linalg.det(U) - 1.0) <= det_tol)


def inner(X, Y):
    """``Re Tr(X^dagger Y)``; the bi-invariant form used throughout."""
    _same_dim(X, Y)
    z = np.vdot(X, Y)
    if abs(z.imag) > 1e-12 * max(1.0, np.linalg.norm(X) * np.linalg.norm(Y)):
        raise InvalidInput("inner product of non-anti-Hermitian arguments has an imaginary part")
    return float(z.real)


def commutator(X, Y):
    _same_dim(X, Y)
    return X @ Y - Y @ X


def adjoint_action(U, X):
    """``U^dagger X U``: the adjoint orbit convention used for ``b_t``."""
    _same_dim(U, X)
    return dag(U) @ X @ U


def spectrum(X):
    """Eigen-decomposition of the Hermitian matrix ``iX``.

    Returns ``(lam, V)`` with ``X = V diag(-i lam) V^dagger``. Works on stacks.
    """
    X = np.asarray(X)
    if not np.all(np.isfinite(X)):
        raise NumericalFailure("non-finite entries in exponent")
    H = 1j * X
    H = 0.5 * (H + dag(H))
    try:
        return np.linalg.eigh(H)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - eigh rarely fails on finite input
        raise NumericalFailure(str(exc)) from exc


def expm_from_spectrum(lam, V, dt):
    phase = np.exp(-1j * dt * lam)
    return (V * phase[..., None, :]) @ dag(V)


def expm(X, dt=1.0):
    """Exact ``exp(dt X)`` for anti-Hermitian ``X`` (stacks allowed)."""
    if not np.isfinite(dt):
        raise NumericalFailure(f"non-finite time step {dt}")
    lam, V = spectrum(X)
    return expm_from_spectrum(lam, V, dt)


def phase_integral(lam, tau):
    """Matrix ``W[l, m] = int_0^tau exp(i (lam_l - lam_m) s) ds``.

    Written with ``sinc`` so that the equal-eigenvalue limit ``tau`` is exact.
    """
    omega = lam[..., :, None] - lam[..., None, :]
    return tau * np.exp(0.5j * omega * tau) * np.sinc(omega * tau / (2 * np.pi))


def frechet_kernel(lam, dt):
    """Loewner matrix of ``exp(dt .)`` at ``diag(-i lam)``; diagonal is ``dt exp(-i dt lam)``."""
    s = lam[..., :, None] + lam[..., None, :]
    d = lam[..., :, None] - lam[..., None, :]
    return dt * np.exp(-0.5j * dt * s) * np.sinc(dt * d / (2 * np.pi))


def exp_frechet(X, D, dt=1.0):
    """Directional derivative ``d/de exp(dt (X + e D))`` at ``e = 0``."""
    _same_dim(X, D)
    lam, V = spectrum(X)
    Dt = dag(V) @ D @ V
    return V @ (frechet_kernel(lam, dt) * Dt) @ dag(V)


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def random_coefficients(n, seed):
    return _rng(seed).standard_normal(n * n - 1)


def random_element(n, seed, norm_bound=1.0, mode="renormalize", max_draws=10_000):
    """Random su(n) element with i.i.d. N(0,1) coordinates, then bounded in norm.

    ``mode="renormalize"`` rescales onto the sphere of radius ``norm_bound``
    when the draw exceeds it; ``mode="reject"`` redraws instead.
    """
    basis = standard_basis(n)
    if norm_bound <= 0:
        raise InvalidInput("norm_bound must be positive")
    rng = _rng(seed)
    for _ in range(max_draws):
        c = rng.standard_normal(len(basis))
        norm = np.linalg.norm(c)
        if norm == 0.0:
            continue
        if norm > norm_bound:
            if mode == "reject":
                continue
            if mode != "renormalize":
                raise InvalidInput(f"unknown mode {mode!r}")
            c = c * (norm_bound / norm)
        return np.tensordot(c, basis, axes=1)
    raise NumericalFailure(f"no draw within norm {norm_bound} after {max_draws} attempts")


def random_special_unitary(n, seed):
    """Haar-distributed element of SU(n) (QR of a Ginibre matrix, phase-fixed)."""
    rng = _rng(seed)
    Z = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) / np.sqrt(2)
    Q, R = np.linalg.qr(Z)
    d = np.diagonal(R)
    Q = Q * (d / np.abs(d))
    det = np.linalg.det(Q)
    return Q / det ** (1.0 / n)
