"""Single record of numerical tolerances; every default lives here."""

from dataclasses import asdict, dataclass, replace


@dataclass(frozen=True)
class Tolerances:
    # algebra invariants (relative to max(1, ||X||_F))
    element: float = 1e-12
    unitarity: float = 1e-10
    determinant: float = 1e-9
    # relative singular-value threshold factor; multiplied by sqrt(max dim)
    rank_factor: float = 1e-8
    # normalized projection residual below which transversality fails
    transversality: float = 1e-6
    # LARC closure: new direction accepted if residual > larc * norm
    larc: float = 1e-10
    # critical-point tests: grad <= grad_factor * kappa * sqrt(p)
    grad_factor: float = 1e-8
    # value gap (relative to the kinematic max) counting as a global optimum
    value_gap: float = 1e-3
    # translated gradient norm below which a point is kinematic critical
    kinematic: float = 1e-10
    # Hessian eigenvalues above this are treated as positive
    hessian: float = 1e-6
    # singular-control denominator guard
    denominator: float = 1e-8

    def rank_tol(self, shape):
        return self.rank_factor * float(max(shape)) ** 0.5

    def grad_tol(self, kappa, p):
        return self.grad_factor * kappa * p ** 0.5

    def override(self, **kwargs):
        unknown = set(kwargs) - set(asdict(self))
        if unknown:
            raise KeyError(f"unknown tolerance(s): {sorted(unknown)}")
        return replace(self, **kwargs)

    def as_dict(self):
        return asdict(self)


DEFAULT_TOLERANCES = Tolerances()
