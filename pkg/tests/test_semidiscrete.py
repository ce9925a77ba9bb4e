import math
import warnings

import numpy as np
import pytest
from scipy.integrate import quad

from w2clt.exact_ot import w2_exact
from w2clt.inference import sigma2_plugin
from w2clt.measures import DiscreteMeasure, SamplableMeasure, SeedSpec, moment
from w2clt.semidiscrete import (MonteCarloBatch, NonConvergenceWarning, SolverConfig,
                                center_potentials, dual_objective, psi_eval, psi_values,
                                solve_semidiscrete, w2_semidiscrete)


@pytest.fixture(scope="module")
def sym_solution():
    P = DiscreteMeasure([[-1.0], [1.0]])
    Q = SamplableMeasure("uniform-box", 1, {"low": [-1.0], "high": [1.0]})
    return P, Q, solve_semidiscrete(P, Q, SolverConfig(), seed=11)


@pytest.fixture(scope="module")
def shifted_solution():
    P = DiscreteMeasure([[0.0], [2.0]])
    Q = SamplableMeasure("uniform-box", 1, {"low": [-1.0], "high": [1.0]})
    return P, Q, solve_semidiscrete(P, Q, SolverConfig(), seed=12)


# --- dual objective ------------------------------------------------------------

def test_single_atom_gradient_zero(unif_pm1):
    res = dual_objective(DiscreteMeasure([[0.3]]), [1.7], unif_pm1, 1000, 1)
    assert res.grad.tolist() == [0.0]


def test_objective_symmetric_example(two_point_sym, unif_pm1):
    mc = 100_000
    res = dual_objective(two_point_sym, [0.0, 0.0], unif_pm1, mc, SeedSpec(5))
    assert abs(res.value - 0.5) <= 3 * res.se
    assert np.all(np.abs(res.grad) <= 3 * math.sqrt(0.25 / mc))


@pytest.mark.parametrize("c", [1.0, -3.0, 0.5, 1024.0])
def test_objective_shift_bit_identical(rng, c):
    P = DiscreteMeasure(rng.normal(size=(5, 2)), rng.dirichlet(np.ones(5)))
    Q = SamplableMeasure("gaussian", 2, {})
    # dyadic z so that z + c is computed without rounding
    z = np.round(rng.normal(size=5) * 256) / 256
    assert np.array_equal((z + c) - c, z)
    a = dual_objective(P, z, Q, 20_000, SeedSpec(3))
    b = dual_objective(P, z + c, Q, 20_000, SeedSpec(3))
    assert a.value == b.value
    assert np.array_equal(a.grad, b.grad)


def test_gradient_sums_to_zero(rng):
    P = DiscreteMeasure(rng.normal(size=(7, 3)), rng.dirichlet(np.ones(7)))
    Q = SamplableMeasure("uniform-ball", 3, {"radius": 2.0})
    for s in range(10):
        res = dual_objective(P, rng.normal(size=7), Q, 5_000, SeedSpec(s))
        assert abs(res.grad.sum()) <= 1e-12


def test_convexity_probe(rng):
    P = DiscreteMeasure(rng.normal(size=(4, 2)), rng.dirichlet(np.ones(4)))
    Q = SamplableMeasure("gaussian", 2, {"mean": [0.5, 0.0]})
    batch = MonteCarloBatch.draw(P.points, Q, 50_000, SeedSpec(8).generator(), antithetic=False)
    for _ in range(20):
        za, zb = rng.normal(size=4), rng.normal(size=4)
        t = float(rng.uniform(0.05, 0.95))
        ea, eb = batch.evaluate(P.weights, za), batch.evaluate(P.weights, zb)
        em = batch.evaluate(P.weights, t * za + (1 - t) * zb)
        se = math.sqrt(ea.se**2 + eb.se**2 + em.se**2)
        assert em.value <= t * ea.value + (1 - t) * eb.value + 4 * se


# --- psi and cells --------------------------------------------------------------

def test_psi_examples(two_point_sym):
    one = DiscreteMeasure([[2.0, 1.0]])
    v = psi_eval(one, [0.5], [1.0, 3.0])
    assert v.value == 4.5 and v.cell.index == 0
    v = psi_eval(two_point_sym, [0.0, 0.0], [0.7])
    assert v.value == pytest.approx(0.7) and v.cell.index == 1
    assert v.cell.margin == pytest.approx(1.4)
    tie = psi_eval(two_point_sym, [0.0, 0.0], [0.0])
    assert tie.cell.index == 0 and tie.cell.margin == 0.0


def test_psi_values_vectorized(rng):
    P = DiscreteMeasure(rng.normal(size=(5, 2)))
    z = rng.normal(size=5)
    Y = rng.normal(size=(30, 2))
    expect = [psi_eval(P, z, y).value for y in Y]
    np.testing.assert_allclose(psi_values(P, z, Y), expect, rtol=0, atol=1e-14)


# --- centering --------------------------------------------------------------------

def test_centering_examples(two_point_sym, unif_pm1):
    z = center_potentials([0.0, 0.0], two_point_sym, Q=unif_pm1)
    np.testing.assert_allclose(z, [5 / 6, 5 / 6], atol=1e-12)
    z2 = center_potentials(z, two_point_sym, M=4 / 3)
    assert np.max(np.abs(z2 - z)) <= 1e-12
    base = np.array([0.3, -1.2])
    np.testing.assert_allclose(center_potentials(base, two_point_sym, "match-reference",
                                                 z_ref=base + 3), base + 3, atol=1e-12)
    with pytest.raises(ValueError):
        center_potentials(base, two_point_sym, "nope")


# --- solver -----------------------------------------------------------------------

def test_single_atom_normalized(unif_pm1):
    P = DiscreteMeasure([[0.5]])
    pot = solve_semidiscrete(P, unif_pm1, seed=1)
    M = 0.25 + 1 / 3
    assert pot.converged
    assert pot.z[0] == pytest.approx(M - 0.125, abs=1e-12)
    w = w2_semidiscrete(DiscreteMeasure([[0.0]]), unif_pm1,
                        solve_semidiscrete(DiscreteMeasure([[0.0]]), unif_pm1, seed=1), 10_000, 2)
    assert w.w2sq == pytest.approx(1 / 3, abs=1e-12)


def test_symmetric_potential(sym_solution):
    P, Q, pot = sym_solution
    assert pot.converged and pot.normalized
    np.testing.assert_allclose(pot.z, [5 / 6, 5 / 6], atol=2e-3)
    assert pot.M == pytest.approx(4 / 3, abs=1e-15)


def test_normalization_invariants(shifted_solution):
    P, Q, pot = shifted_solution
    slack = pot.z + P.sq_norms / 2
    assert np.all(slack >= -1e-6)
    assert abs(P.weights @ slack - pot.M) <= 1e-6 * (1 + abs(pot.M))
    np.testing.assert_allclose(pot.z, [10 / 3, 10 / 3], atol=5e-3)


def test_w2_analytic_values(sym_solution, shifted_solution):
    for (P, Q, pot), truth in ((sym_solution, 1 / 3), (shifted_solution, 4 / 3)):
        est = w2_semidiscrete(P, Q, pot, 1_000_000, SeedSpec(21))
        assert abs(est.w2sq - truth) <= max(3 * est.se, 0.01 * truth)


def test_cell_masses_at_optimum(shifted_solution):
    P, Q, pot = shifted_solution
    mc = 200_000
    res = dual_objective(P, pot.z, Q, mc, SeedSpec(99))
    hits = P.weights - res.grad
    tol = 3 * np.sqrt(P.weights * (1 - P.weights) / mc) + SolverConfig().tol_grad
    assert np.all(np.abs(hits - P.weights) <= tol)


def test_value_upper_bound(rng):
    P = DiscreteMeasure(rng.normal(size=(4, 2)), rng.dirichlet(np.ones(4)))
    Q = SamplableMeasure("gaussian", 2, {"cov": 0.5})
    pot = solve_semidiscrete(P, Q, seed=4)
    m2 = float(P.weights @ P.sq_norms) + moment(Q, 2).value
    assert pot.v_value <= 0.5 * m2 + 3 * pot.v_se


def test_gapped_uniform_cells_and_cost(two_point_sym, gapped_q):
    pot = solve_semidiscrete(two_point_sym, gapped_q, seed=6)
    assert pot.converged
    boundary = (pot.z[1] - pot.z[0]) / 2
    assert abs(boundary) <= 0.02
    # cost of y -> sign(y) under the two-interval uniform law, integrated numerically
    cost = quad(lambda y: (y + 1) ** 2, -1.1, -0.1)[0] / 2 + quad(lambda y: (y - 1) ** 2, 0.1, 1.1)[0] / 2
    est = w2_semidiscrete(two_point_sym, gapped_q, pot, 1_000_000, SeedSpec(7))
    assert abs(est.w2sq - cost) <= 0.01 * cost


def test_agrees_with_exact_on_fine_discretization(shifted_solution):
    P, Q, pot = shifted_solution
    QN = DiscreteMeasure(Q.draw(10_000, SeedSpec(31).generator()), None, n_obs=10_000)
    res = w2_exact(P, QN)
    se_exact = math.sqrt(sigma2_plugin(QN, res.dual.psi).sigma2 / QN.k)
    est = w2_semidiscrete(P, Q, pot, 1_000_000, SeedSpec(32))
    assert abs(est.w2sq - res.cost) <= 5 * math.hypot(est.se, se_exact)


def test_zero_weight_atoms_dropped(unif_pm1):
    P = DiscreteMeasure([[0.0], [1.0], [2.0]], [0.5, 0.0, 0.5])
    pot = solve_semidiscrete(P, unif_pm1, seed=3)
    assert math.isnan(pot.z[1]) and pot.diagnostics["dropped"] == [1]
    assert pot.converged
    np.testing.assert_allclose(pot.z[[0, 2]], [10 / 3, 10 / 3], atol=5e-3)


def test_warm_start_and_reproducibility(shifted_solution):
    P, Q, pot = shifted_solution
    a = solve_semidiscrete(P, Q, seed=12)
    assert np.array_equal(a.z, pot.z)
    Pn = DiscreteMeasure(P.points, [0.48, 0.52])
    warm = solve_semidiscrete(Pn, Q, seed=2, warm_start=pot.z)
    assert warm.converged and warm.diagnostics["phase1_steps"] == SolverConfig().warm_iters
    # boundary moves to the 0.48 quantile of Q: y = -0.04, and z2 - z1 = 2y
    assert (warm.z[1] - warm.z[0]) == pytest.approx(-0.08, abs=4e-3)


def test_non_convergence_flagged(shifted_solution):
    P, Q, _ = shifted_solution
    cfg = SolverConfig(tol_grad=1e-7, max_iters=10, refine_iters=1, saa_mc=1000, eval_mc=1000)
    pot = solve_semidiscrete(P, Q, cfg, seed=1)
    assert not pot.converged
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        est = w2_semidiscrete(P, Q, pot, 1000, 1)
    assert est.warning is not None
    assert any(issubclass(w.category, NonConvergenceWarning) for w in rec)


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(tol_grad=0)
    with pytest.raises(ValueError):
        SolverConfig.from_dict({"tolerance": 1})
    assert SolverConfig.from_dict(SolverConfig().to_dict()) == SolverConfig()
