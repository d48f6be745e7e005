import json

import numpy as np
import pytest

from qlandscape import algebra
from qlandscape.dynamics import (
    ControlField,
    ControlSystem,
    endpoint_jacobian,
    jacobian_columns,
    objective_gradient,
    propagate,
)
from qlandscape.errors import InvalidInput
from qlandscape.landscape import Objective


def rk4_propagate(system, field, substeps):
    """Fixed-step RK4 on dU/dt = H(t) U, aligned with the piece boundaries."""
    n = system.dim
    U = np.eye(n, dtype=complex)
    H = system.drift[None] + np.einsum("jk,jab->kab", field.coeffs, system.generator_stack)
    h = field.dt / substeps
    for k in range(field.p):
        A = H[k]
        for _ in range(substeps):
            k1 = A @ U
            k2 = A @ (U + 0.5 * h * k1)
            k3 = A @ (U + 0.5 * h * k2)
            k4 = A @ (U + h * k3)
            U = U + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
    return U


def endpoint(system, coeffs, field):
    return propagate(system, ControlField(field.T, coeffs, field.kappa + 1.0)).final


def test_zero_drift_zero_field_is_identity():
    system = ControlSystem(np.zeros((3, 3), complex), (algebra.standard_basis(3)[0],))
    traj = propagate(system, ControlField.zeros(2.0, 5, 1.0))
    np.testing.assert_allclose(traj.final, np.eye(3))
    assert np.array_equal(traj.boundary_ops[0], np.eye(3))


def test_single_piece_is_one_exponential():
    system = ControlSystem.random(3, 1)
    field = ControlField(1.7, [[0.4]], 1.0)
    expected = algebra.expm(system.drift + 0.4 * system.generators[0], 1.7)
    np.testing.assert_allclose(propagate(system, field).final, expected, atol=1e-13)


def test_propagate_matches_rk4():
    system = ControlSystem.random(4, 2)
    field = ControlField.random(10.0, 100, 1.0, 3)
    U_rk4 = rk4_propagate(system, field, 1000)
    assert np.linalg.norm(propagate(system, field).final - U_rk4) <= 1e-7


def test_trajectory_invariants():
    system = ControlSystem.random(3, 4, num_generators=2, norm_bound=2.0)
    field = ControlField.random(5.0, 32, 2.0, 5, num_generators=2)
    traj = propagate(system, field)
    for U in traj.boundary_ops:
        assert algebra.unitarity_error(U) <= 1e-10
        assert abs(np.linalg.det(U) - 1) <= 1e-9
    assert traj.semigroup_residual() <= 1e-10
    np.testing.assert_allclose(traj.operator_at(field.T), traj.final, atol=1e-12)
    np.testing.assert_allclose(traj.operator_at(field.dt * 3), traj.boundary_ops[3], atol=1e-12)


def test_refinement_leaves_endpoint_unchanged():
    system = ControlSystem.random(3, 6)
    field = ControlField.random(4.0, 16, 1.5, 7)
    U1 = propagate(system, field).final
    U2 = propagate(system, field.refine(2)).final
    assert np.linalg.norm(U1 - U2) <= 1e-10


def test_piece_convention():
    field = ControlField.zeros(1.0, 4, 1.0)
    assert field.piece_index(0.0) == 0
    assert field.piece_index(0.25) == 1
    assert field.piece_index(0.2499) == 0
    assert field.piece_index(1.0) == 3


def test_field_validation():
    with pytest.raises(InvalidInput):
        ControlField(1.0, [[2.0]], 1.0)
    with pytest.raises(InvalidInput):
        ControlField(-1.0, [[0.0]], 1.0)
    system = ControlSystem.random(2, 0)
    with pytest.raises(InvalidInput):
        propagate(system, ControlField.zeros(1.0, 3, 1.0, num_generators=2))
    with pytest.raises(InvalidInput):
        ControlSystem(np.eye(2, dtype=complex), (algebra.standard_basis(2)[0],))


def test_field_json_roundtrip_is_exact():
    rng = np.random.default_rng(8)
    field = ControlField(np.pi, rng.uniform(-1, 1, (3, 7)) / 3.0, 1.0 / 3.0 + 1e-17)
    doc = json.loads(field.to_json())
    assert set(doc) == {"T", "p", "kappa", "generators", "coeffs"}
    assert doc["p"] == 7 and doc["generators"] == 3
    back = ControlField.from_json(field.to_json())
    assert back.T == field.T and back.kappa == field.kappa
    assert np.array_equal(back.coeffs, field.coeffs)


def test_jacobian_full_basis_at_identity():
    n = 3
    system = ControlSystem.fully_actuated(n)
    field = ControlField.zeros(2.5, 1, 1.0, num_generators=n * n - 1)
    rep = endpoint_jacobian(system, field)
    np.testing.assert_allclose(rep.M, 2.5 * np.eye(n * n - 1), atol=1e-14)
    assert rep.numerical_rank == n * n - 1 and rep.corank == 0


def test_jacobian_single_generator_single_piece_rank_one():
    system = ControlSystem.random(3, 9)
    rep = endpoint_jacobian(system, ControlField(1.0, [[0.3]], 1.0))
    assert rep.numerical_rank == 1


@pytest.mark.parametrize("seed", range(5))
def test_jacobian_columns_match_finite_differences(seed):
    system = ControlSystem.random(2, seed, norm_bound=2.0)
    field = ControlField.random(3.0, 5, 1.0, seed + 50)
    rep = endpoint_jacobian(system, field)
    UT = rep.trajectory.final
    h = 1e-6
    for k in range(field.p):
        e = np.zeros_like(field.coeffs)
        e[0, k] = h
        dU = (endpoint(system, field.coeffs + e, field) - endpoint(system, field.coeffs - e, field)) / (2 * h)
        fd = algebra.coordinates(algebra.dag(UT) @ dU)
        col = rep.M[:, k]
        assert np.linalg.norm(fd - col) <= 1e-5 * np.linalg.norm(col)


def test_jacobian_column_norm_bound():
    system = ControlSystem.random(4, 10, num_generators=3, norm_bound=2.0)
    field = ControlField.random(6.0, 12, 2.0, 11, num_generators=3)
    cols = jacobian_columns(propagate(system, field))
    for j in range(3):
        bound = field.dt * np.linalg.norm(system.generators[j])
        norms = np.linalg.norm(cols[j], axis=(-2, -1))
        assert np.all(norms <= bound * (1 + 1e-12))
        assert np.all([algebra.is_element(c) for c in cols[j]])


def _fd_gradient(system, field, obj, h=1e-6):
    g = np.zeros_like(field.coeffs)
    for idx in np.ndindex(*field.coeffs.shape):
        e = np.zeros_like(field.coeffs)
        e[idx] = h
        fp = obj.evaluate(endpoint(system, field.coeffs + e, field))
        fm = obj.evaluate(endpoint(system, field.coeffs - e, field))
        g[idx] = (fp - fm) / (2 * h)
    return g


def test_gradient_matches_finite_differences_random_pairs():
    rng = np.random.default_rng(12)
    worst = 0.0
    for case in range(20):
        n = (2, 3)[case % 2]
        p = (4, 16)[(case // 2) % 2]
        system = ControlSystem.random(n, rng, num_generators=1 + case % 2, norm_bound=2.0)
        field = ControlField.random(3.0, p, 1.0, rng, num_generators=system.num_generators)
        obj = Objective.random_gate(n, rng, ("J1_gate", "J2_gate")[case % 2])
        g = objective_gradient(system, field, obj)
        fd = _fd_gradient(system, field, obj)
        worst = max(worst, np.max(np.abs(g - fd)) / np.max(np.abs(g)))
    assert worst <= 1e-6


def test_gradient_vanishes_at_target_and_without_coupling():
    system = ControlSystem.random(3, 13)
    field = ControlField.random(2.0, 6, 1.0, 14)
    U_T = propagate(system, field).final
    g = objective_gradient(system, field, Objective.gate_j2(U_T))
    assert np.max(np.abs(g)) <= 1e-10
    decoupled = ControlSystem(system.drift, (np.zeros((3, 3), complex),))
    g0 = objective_gradient(decoupled, field, Objective.random_gate(3, 1))
    assert np.all(g0 == 0)


def test_gradient_j1_random_target():
    system = ControlSystem.random(2, 15)
    field = ControlField.random(2.0, 8, 1.0, 16)
    obj = Objective.gate_j1(propagate(system, field).final @ algebra.expm(algebra.random_element(2, 17), 0.5))
    g = objective_gradient(system, field, obj)
    assert np.linalg.norm(g) > 0
    assert np.max(np.abs(g - _fd_gradient(system, field, obj))) <= 1e-6 * np.max(np.abs(g))
