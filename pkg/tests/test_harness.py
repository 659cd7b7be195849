import math

import numpy as np
import pytest

from gbsde.errors import InvalidInputError
from gbsde.forward import ScenarioPolicy, SdeCoefficients, simulate_paths
from gbsde.gcore import GammaSet, QuadratureRule, discretize_gamma
from gbsde.grid import GridSpec, ValueField
from gbsde.harness import (
    abs_profile_errors,
    cross_validate,
    fitted_order,
    k_monotonicity,
    markov_consistency,
    refinement_levels,
    regularity_report,
)
from gbsde.picard import SystemSpec, stitch_solve_global
from gbsde.presets import abs_terminal_value

BM = SdeCoefficients.from_strings(["0"], [["1"]])
G = GammaSet.interval(1.0, 4.0)
G14 = discretize_gamma(G, 9)
R7 = QuadratureRule(7, 1)
SMALL = GridSpec((-6.0,), (6.0,), (201,), 100)
HEAT = SystemSpec.from_strings(["0"], ["x1^2"], BM, None, 1.0, 2.0)


@pytest.fixture(scope="module")
def heat_field():
    u, _ = stitch_solve_global(HEAT, SMALL, G14, R7)
    return u


def test_fitted_order_examples():
    assert fitted_order([1, 2, 4], [1, 4, 16]) == pytest.approx(2.0)
    assert fitted_order([0.1, 0.01], [3.0, 0.3]) == pytest.approx(1.0)
    assert fitted_order([1, 2], [0.0, 1.0]) is None
    assert fitted_order([1], [1]) is None


def test_refinement_levels_shape():
    levels = refinement_levels(GridSpec((-6.0,), (6.0,), (401,), 200))
    assert [g.nodes[0] for g in levels] == [26, 101, 401]
    assert [g.n_t for g in levels] == [50, 100, 200]
    with pytest.raises(InvalidInputError):
        refinement_levels(GridSpec((-6.0,), (6.0,), (203,), 200))


def test_cross_validate_g_heat_converges():
    rep = cross_validate(HEAT, G, refinement_levels(GridSpec((-6.0,), (6.0,), (161,), 64)), name="g-heat")
    assert rep.monotone
    assert rep.order >= 0.5
    assert rep.passed
    rows = rep.table()
    assert [r["level"] for r in rows] == [0, 1, 2]
    assert set(rows[0]) == {"level", "dx", "dt", "sup_distance", "fitted_order"}


def test_cross_validate_rejects_bad_levels():
    with pytest.raises(InvalidInputError):
        cross_validate(HEAT, G, [SMALL])
    with pytest.raises(InvalidInputError):
        cross_validate(HEAT, G, [SMALL, SMALL])


def test_regularity_of_g_heat(heat_field):
    rep = regularity_report(heat_field)
    # |d/dx (x^2)| on the interior half [-3, 3] is at most 6
    assert rep.lipschitz[0] == pytest.approx(6.0, rel=0.05)
    # u(T - tau, x) - u(T, x) = 4 tau, so the increments are linear in tau
    assert rep.exponent == pytest.approx(1.0, abs=0.02)
    assert rep.increments[0] == pytest.approx(4 * rep.taus[0], rel=0.02)
    assert rep.flags == []


def test_regularity_flags_constant_field():
    const = SystemSpec.from_strings(["0"], ["1"], BM, None, 1.0, 2.0)
    u, _ = stitch_solve_global(const, GridSpec((-6.0,), (6.0,), (41,), 8), G14, R7)
    rep = regularity_report(u)
    assert rep.constant_field
    assert "constant field" in rep.flags
    assert rep.exponent is None
    assert rep.lipschitz[0] < 1e-12


def test_regularity_lipschitz_variation_across_refinement():
    coarse, _ = stitch_solve_global(HEAT, SMALL, G14, R7)
    fine, _ = stitch_solve_global(HEAT, SMALL.refined(2), G14, R7)
    rep = regularity_report([coarse, fine])
    assert len(rep.lipschitz) == 2
    assert rep.lipschitz_stable


def test_regularity_needs_three_slices():
    grid = GridSpec((-6.0,), (6.0,), (41,), 1)
    u = ValueField(grid, np.zeros((2, 1, 41)))
    with pytest.raises(InvalidInputError):
        regularity_report(u)


@pytest.fixture(scope="module")
def bundle():
    return simulate_paths(BM, SMALL.times, [0.0], G14, ScenarioPolicy.uniform(), 50, 3, "quadrature", R7)


def test_markov_restart_at_start_is_exact(heat_field, bundle):
    rep = markov_consistency(HEAT, G, SMALL, bundle, [0], per_time=3, field_=heat_field)
    assert rep.max_discrepancy == 0.0
    assert rep.passed


def test_markov_restart_at_terminal_time(heat_field, bundle):
    rep = markov_consistency(HEAT, G, SMALL, bundle, [SMALL.n_t], per_time=3, field_=heat_field)
    # only linear interpolation of x^2 separates the two: at most dx^2 / 4
    assert rep.max_discrepancy <= SMALL.dx[0] ** 2 / 4 + 1e-12
    assert rep.passed


def test_markov_restart_midway(heat_field, bundle):
    rep = markov_consistency(HEAT, G, SMALL, bundle, [SMALL.n_t // 2], per_time=3, field_=heat_field)
    assert rep.escaped == 0
    assert rep.max_discrepancy < 0.01 * max(abs(s["restart"][0]) for s in rep.samples)
    assert rep.passed


def test_markov_rejects_mismatched_times(heat_field):
    other = simulate_paths(BM, np.linspace(0, 1, 11), [0.0], G14, ScenarioPolicy.fixed(0), 5, 0)
    with pytest.raises(InvalidInputError):
        markov_consistency(HEAT, G, SMALL, other, [0], field_=heat_field)


def test_abs_profile_errors():
    spec = SystemSpec.from_strings(["0"], ["abs(x1)"], BM, None, 1.0, 2.0)
    u, _ = stitch_solve_global(spec, GridSpec((-6.0,), (6.0,), (401,), 200), G14, R7)
    errs = abs_profile_errors(u, abs_terminal_value, [0.0, 0.5])
    assert len(errs) == 2
    assert max(errs) < 0.02
    assert math.isinf(abs_profile_errors(u, abs_terminal_value, [1.0])[0])


def test_k_monotonicity_on_g_heat(heat_field):
    rep = k_monotonicity(HEAT, G14, heat_field, [0.0], M=500)
    assert rep.passed
    assert len(rep.policies) == len(G14)
    lo, hi = rep.policies[0], rep.policies[-1]
    assert hi.gamma == 4.0 and abs(hi.mean_terminal) < 0.05
    assert lo.gamma == 1.0 and lo.mean_terminal == pytest.approx(-3.0, rel=0.1)
    assert rep.to_dict()["passed"] is True
