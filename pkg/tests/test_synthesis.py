import numpy as np
import pytest

from oracles import fd_jacobian, numeric_rank
from qlandscape import algebra
from qlandscape.dynamics import ControlField, ControlSystem, endpoint_jacobian
from qlandscape.errors import AllRejected, DegenerateDenominator, InvalidInput
from qlandscape.landscape import Objective
from qlandscape.synthesis import (
    SearchOptions,
    SingularSeed,
    constraint_basis,
    fix_parameter_scan,
    piece_average,
    project_seed,
    restriction_cascade,
    rows_to_csv,
    singular_critical_search,
    synthesize_singular_control,
    verify_singular_critical,
)

SX = np.array([[0, 1], [1, 0]], dtype=complex)
SZ = np.diag([1.0, -1.0]).astype(complex)
PAULI = ControlSystem(1j * SZ / np.sqrt(2), (1j * SX / np.sqrt(2),))


def test_pauli_seed_preserves_invariant():
    a, b = PAULI.drift, PAULI.generators[0]
    B = project_seed(PAULI, algebra.random_element(2, 0))
    seed = SingularSeed.from_matrix(PAULI, B)
    assert seed.is_consistent
    # numerator bracket [a,[b,a]] is along b, so E vanishes at t = 0
    res = synthesize_singular_control(PAULI, B, 2.0, 1000)
    assert res.numerators[0] == pytest.approx(0.0, abs=1e-14)
    assert res.max_invariant_residual <= 1e-6
    assert not res.non_singular_seed
    np.testing.assert_allclose(abs(algebra.inner(B, a)) / np.linalg.norm(a), 1.0, atol=1e-12)
    # halving the step leaves the (exactly preserved) invariant at round-off
    assert synthesize_singular_control(PAULI, B, 2.0, 2000).max_invariant_residual <= 1e-6


def test_seed_equal_to_generator_is_degenerate():
    with pytest.raises(DegenerateDenominator) as info:
        synthesize_singular_control(PAULI, PAULI.generators[0], 1.0, 200)
    assert info.value.t == 0.0


def test_mixed_seed_is_flagged_non_singular():
    system = ControlSystem.random(3, 1)
    b = system.generators[0]
    Bp = project_seed(system, algebra.random_element(3, 2))
    B = b / np.linalg.norm(b) + Bp
    res = synthesize_singular_control(system, B, 0.5, 500)
    diag = res.diagnostics()
    assert diag["non_singular_seed"]
    assert abs(diag["r0"]) == pytest.approx(1 / np.sqrt(2), rel=1e-6)
    assert res.max_invariant_residual >= 0.5


def test_invariant_converges_first_order_n3():
    system = ControlSystem.random(3, 3)
    rng = np.random.default_rng(4)
    for _ in range(3):
        B = project_seed(system, algebra.random_element(3, rng))
        try:
            r1 = synthesize_singular_control(system, B, 0.5, 2000).max_invariant_residual
        except DegenerateDenominator:
            continue
        r2 = synthesize_singular_control(system, B, 0.5, 4000).max_invariant_residual
        assert r1 <= 1e-4
        assert 0.4 <= r2 / r1 <= 0.6
        return
    pytest.fail("no seed with a nonvanishing denominator")


def test_synthesis_validation():
    with pytest.raises(InvalidInput):
        synthesize_singular_control(PAULI, PAULI.drift, 1.0, 50)
    two = ControlSystem.random(2, 0, num_generators=2)
    with pytest.raises(InvalidInput):
        synthesize_singular_control(two, two.drift, 1.0, 200)
    with pytest.raises(InvalidInput):
        project_seed(PAULI, PAULI.generators[0])
    assert constraint_basis(PAULI).shape == (3, 2)


def test_piece_average():
    np.testing.assert_allclose(piece_average(np.arange(6.0), 3), [0.5, 2.5, 4.5])


def test_search_flags_degenerate_system():
    system = ControlSystem(algebra.random_element(2, 5), (np.zeros((2, 2), complex),))
    rec = singular_critical_search(system, 1.0, 4, 1.0, SearchOptions(restarts=2, iters=2), seed=1)
    assert rec.degenerate_system and not rec.verified


def test_search_all_rejected():
    system = ControlSystem.random(3, 6, norm_bound=3.0)
    opts = SearchOptions(restarts=2, iters=2, max_draws=3)
    with pytest.raises(AllRejected):
        singular_critical_search(system, 2.0, 10, 1e-9, opts, seed=2)


def test_search_small_run_is_sound():
    system = ControlSystem.random(2, 7, norm_bound=0.5)
    opts = SearchOptions(restarts=2, iters=5, max_draws=20)
    rec = singular_critical_search(system, 1.0, 10, 5.0, opts, seed=3)
    assert len(rec.restarts) == 2
    assert rec.verification is None or set(rec.verification) >= {"grad_norm", "corank", "verified"}
    # a convergent record is only verified by the independent gate
    if rec.converged:
        assert rec.verified != rec.false_positive
    again = singular_critical_search(system, 1.0, 10, 5.0, opts, seed=3)
    assert again.best_value == rec.best_value


def test_verify_gate():
    system = ControlSystem(algebra.random_element(2, 8), (np.zeros((2, 2), complex),))
    field = ControlField.random(1.0, 4, 1.0, 9)
    out = verify_singular_critical(system, field, Objective.random_gate(2, 10))
    assert out["verified"] and out["corank"] == 3 and out["grad_norm"] == 0.0
    live = ControlSystem.random(2, 11)
    out = verify_singular_critical(live, field, Objective.random_gate(2, 12))
    assert not out["verified"]


def test_fix_scan_zero_field_column_structure():
    n, T = 2, 1.3
    system = ControlSystem.fully_actuated(n)
    field = ControlField.zeros(T, 1, 1.0, num_generators=3)
    rows = fix_parameter_scan(system, field, 1, 0, [0.0], objective=Objective.random_gate(2, 13))
    assert rows[0].corank == 1
    assert rows[0].residual > 0


def test_fix_scan_full_actuation_corank_zero():
    rng = np.random.default_rng(14)
    system = ControlSystem.fully_actuated(2, algebra.random_element(2, rng))
    field = ControlField.random(1.0, 4, 1.0, rng, num_generators=3)
    values = np.linspace(-1.0, 1.0, 101)
    rows = fix_parameter_scan(system, field, 2, 1, values)
    assert [r.corank for r in rows] == [0] * 101
    for K in values[[0, 50, 100]]:
        M = fd_jacobian(system, field.with_value(2, 1, K))
        assert 3 - numeric_rank(np.delete(M, 2 * 4 + 1, axis=1), 1e-6) == 0
    assert fix_parameter_scan(system, field, 2, 1, values) == rows
    with pytest.raises(InvalidInput):
        fix_parameter_scan(system, field, 0, 0, [2.0])


def test_fix_scan_null_generator_leaves_corank():
    gens = list(algebra.standard_basis(2))
    gens[0] = np.zeros((2, 2), complex)
    system = ControlSystem(algebra.random_element(2, 15), tuple(gens))
    field = ControlField.random(1.0, 3, 1.0, 16, num_generators=3)
    rows = fix_parameter_scan(system, field, 0, 1, np.linspace(-1, 1, 7))
    base = endpoint_jacobian(system, field).corank
    assert {r.corank for r in rows} == {base}


def test_random_cascades_keep_full_rank():
    rng = np.random.default_rng(17)
    failures = 0
    for _ in range(50):
        system = ControlSystem.fully_actuated(2, algebra.random_element(2, rng))
        field = ControlField.random(1.0, 2, 1.0, rng, num_generators=3)
        order = rng.permutation(6)[:5]
        fixes = [(int(c // 2), int(c % 2), float(rng.uniform(-1, 1))) for c in order]
        rep = restriction_cascade(system, field, fixes, objective=Objective.random_gate(2, rng))
        failures += sum(s.rank_deficiency != 0 for s in rep.steps) + rep.flagged
        assert all(s.corank == 0 for s in rep.steps if s.free_parameters >= 3)
    assert failures == 0


def test_engineered_abelian_cascade_is_flagged():
    # drift along the diagonal generator; fixing every off-diagonal parameter to
    # zero leaves commuting dynamics on a torus. With the remaining diagonal
    # parameters placed at the torus maximizer, xi is orthogonal to the only
    # reachable direction while not vanishing.
    bx, by, bz = algebra.standard_basis(2)
    system = ControlSystem.fully_actuated(2, 0.3 * bz)
    coeffs = np.zeros((3, 2))
    coeffs[2] = 0.2  # total diagonal phase 0.3 + 0.5 * 0.4 = 0.5
    field = ControlField(1.0, coeffs, 1.0)
    G = algebra.expm(bz, 0.5) @ algebra.expm(bx, 0.3)
    fixes = [(0, 0, 0.0), (1, 0, 0.0), (0, 1, 0.0), (1, 1, 0.0)]
    rep = restriction_cascade(system, field, fixes, objective=Objective.gate_j2(G))
    assert rep.flagged
    step = rep.steps[rep.flagged_step]
    assert step.larc_dimension < 3 and step.residual <= 1e-6
    assert len(rep.to_dict()["steps"]) == rep.flagged_step + 1


def test_cascade_validation_and_csv():
    system = ControlSystem.fully_actuated(2)
    field = ControlField.zeros(1.0, 2, 1.0, num_generators=3)
    with pytest.raises(InvalidInput):
        restriction_cascade(system, field, [(0, 0, 0.0), (0, 0, 0.1)])
    with pytest.raises(InvalidInput):
        restriction_cascade(ControlSystem.random(2, 0), ControlField.zeros(1.0, 2, 1.0), [(0, 0, 0.0)])
    rows = fix_parameter_scan(system, field, 0, 0, [0.0, 0.5])
    text = rows_to_csv(rows)
    assert text.splitlines()[0].startswith("K")
    assert len(text.strip().splitlines()) == 3
