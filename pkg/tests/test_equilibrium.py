import math

import numpy as np
import pytest

from dynamics import find_equilibrium_by_flow
from equilibrium import (
    EquationKind,
    Solvability,
    SolveSettings,
    SolveStatus,
    admit_to_domains,
    check_solvability,
    check_structural_solvability,
    damped_newton,
    find_degenerate_point,
    intervene_lee,
    lee_from_ode,
    lee_graph,
    newton_multistart,
    render_lee,
    solve_lee,
)
from modelspec import Interval, builtin_mass_spring
from system import Digraph, Intervention, box_xi_sampler, build_system, graph, intervene_hard


def test_lotka_volterra_lee_rendering(lv_system):
    assert render_lee(lee_from_ode(lv_system)) == (
        "E[X1]: 0 = X1 * (th11 - th12 * X2)\n"
        "E[X2]: 0 = -X2 * (th22 - th21 * X1)\n"
    )


def test_clamp_equation_rendering(lv_system):
    lee = intervene_lee(lee_from_ode(lv_system), Intervention.of(lv_system.spec, {"X2": [2.0]}))
    assert lee.equation("X2").kind == EquationKind.CLAMP
    assert lee.equation("X2").render() == "E[X2]: 0 = X2 - 2.0"
    assert lee.equation("X1").parents == {"X1", "X2"}


@pytest.mark.parametrize("assignments", [{"X2": 2.0}, {"X1": 0.5}, {"X1": 0.5, "X2": 3.0}])
def test_intervening_commutes_with_equilibrating_lotka_volterra(lv_system, assignments):
    iv = Intervention.from_assignments(lv_system.spec, assignments)
    via_lee = intervene_lee(lee_from_ode(lv_system), iv)
    via_ode = lee_from_ode(intervene_hard(lv_system, iv))
    assert via_lee == via_ode
    assert render_lee(via_lee) == render_lee(via_ode)


def test_intervening_commutes_with_equilibrating_mass_spring():
    system = build_system(builtin_mass_spring(4))
    iv = Intervention.from_assignments(system.spec, {"Q1": 0.7, "Q3": 3.4})
    assert intervene_lee(lee_from_ode(system), iv) == lee_from_ode(intervene_hard(system, iv))


def test_lee_graph_is_ode_graph_without_self_loops(spring_system):
    g = graph(spring_system)
    assert lee_graph(lee_from_ode(spring_system)) == Digraph(g.nodes, g.edges)


def test_lotka_volterra_has_two_equilibria(lv_system):
    result = solve_lee(lee_from_ode(lv_system))
    assert result.status == SolveStatus.MULTIPLE
    assert result.solution is None
    found = sorted(tuple(np.round(s, 8)) for s in result.solutions)
    assert found == [(0.0, 0.0), (1.0, 1.0)]


def test_clamped_predator_gives_unique_equilibrium(lv_system):
    lee = intervene_lee(lee_from_ode(lv_system), Intervention.of(lv_system.spec, {"X2": [2.0]}))
    result = solve_lee(lee)
    assert result.status == SolveStatus.UNIQUE
    assert result.solution == pytest.approx([0.0, 2.0], abs=1e-10)


def test_mass_spring_equilibrium(spring_system):
    result = solve_lee(lee_from_ode(spring_system))
    assert result.status == SolveStatus.UNIQUE
    assert result.solution == pytest.approx([1.0, 0.0, 2.0, 0.0], abs=1e-9)
    assert result.residual < 1e-10


def test_fully_clamped_lee_needs_no_newton(spring_system):
    iv = Intervention.from_assignments(spring_system.spec, {"Q1": 1.2, "Q2": 2.2})
    result = solve_lee(intervene_lee(lee_from_ode(spring_system), iv))
    assert result.status == SolveStatus.UNIQUE
    assert result.iterations == 0
    assert result.solution.tolist() == [1.2, 0.0, 2.2, 0.0]


def test_solve_is_deterministic(lv_system):
    first = solve_lee(lee_from_ode(lv_system), SolveSettings(seed=3))
    second = solve_lee(lee_from_ode(lv_system), SolveSettings(seed=3))
    assert first.summary() == second.summary()


def test_damped_newton_on_scalar_root():
    result = damped_newton(lambda x: x ** 2 - 4.0, lambda x: np.array([[2.0 * x[0]]]), np.array([3.0]))
    assert result.converged
    assert result.solution == pytest.approx([2.0])


def test_damped_newton_reports_singular_start():
    result = damped_newton(lambda x: x ** 2 - 4.0, lambda x: np.array([[2.0 * x[0]]]), np.array([0.0]))
    assert not result.converged
    assert result.reason == "singular jacobian"


def test_multistart_without_roots_finds_none():
    starts = [np.array([v]) for v in (-1.0, 0.5, 2.0)]
    result = newton_multistart(
        lambda x: x ** 2 + 1.0, lambda x: np.array([[2.0 * x[0]]]), starts, SolveSettings(max_iter=30)
    )
    assert result.status == SolveStatus.NONE_FOUND
    assert sum(result.failures.values()) == 3


def test_multistart_clusters_two_roots():
    starts = [np.array([v]) for v in (-3.0, -1.0, 1.0, 3.0)]
    result = newton_multistart(lambda x: x ** 2 - 4.0, lambda x: np.array([[2.0 * x[0]]]), starts)
    assert result.status == SolveStatus.MULTIPLE
    assert [s[0] for s in result.solutions] == pytest.approx([-2.0, 2.0])


def test_admission_clips_within_slack():
    domains = [Interval(0.0, math.inf, True, False)]
    assert admit_to_domains(np.array([-1e-9]), domains, 1e-6).tolist() == [0.0]
    assert admit_to_domains(np.array([-1.0]), domains, 1e-6) is None
    assert admit_to_domains(np.array([2.0]), domains, 1e-6).tolist() == [2.0]


def test_solvability_of_predator_clamps(lv_system):
    sampler = box_xi_sampler(lv_system.spec, box={"X2": (1.5, 4.0)})
    checks = check_solvability(lee_from_ode(lv_system), [{"X2"}], sampler, SolveSettings(xi_draws=3))
    check = checks[frozenset({"X2"})]
    assert check.solvable
    assert len(check.runs) == 3
    assert check.witness() is None


def test_degenerate_prey_rate_is_found(lv_system):
    point = find_degenerate_point(lee_from_ode(lv_system), "X1")
    assert point is not None
    assert point.values["X2"] == pytest.approx(1.0, abs=1e-6)


def test_lotka_volterra_is_only_generically_solvable(lv_system):
    report = check_structural_solvability(lee_from_ode(lv_system))
    assert report.verdict == Solvability.GENERIC_ONLY
    assert set(report.degenerate) == {"X1", "X2"}
    assert "degenerate" in report.witness()


def test_mass_spring_is_structurally_solvable(spring_system, position_sampler):
    report = check_structural_solvability(lee_from_ode(spring_system), position_sampler(spring_system.spec))
    assert report.verdict == Solvability.SOLVABLE
    assert report.degenerate == {}
    assert report.summary()["labels"]["X1"]["targets"] == ["X2"]


def _random_chain(rng, D):
    k = rng.uniform(0.5, 2.0, size=D + 1)
    l = rng.uniform(0.5, 1.5, size=D + 1)
    spec = builtin_mass_spring(
        D,
        masses=rng.uniform(0.5, 2.0, size=D).tolist(),
        springs=k.tolist(),
        lengths=l.tolist(),
        frictions=rng.uniform(0.5, 2.0, size=D).tolist(),
        wall=float(l.sum() * rng.uniform(0.8, 1.2)),
    )
    return spec, k, l


def _chain_rest_positions(spec, k, l):
    """Dense linear solve of the force balance at every mass"""
    D = len(spec.blocks)
    L = spec.param_values["L"]
    A = np.zeros((D, D))
    rhs = np.zeros(D)
    for i in range(D):
        A[i, i] = -(k[i] + k[i + 1])
        rhs[i] = k[i + 1] * l[i + 1] - k[i] * l[i]
        if i > 0:
            A[i, i - 1] = k[i]
        if i < D - 1:
            A[i, i + 1] = k[i + 1]
        else:
            rhs[i] -= k[i + 1] * L
    return np.linalg.solve(A, rhs)


@pytest.mark.parametrize("D", [2, 3, 4])
def test_random_chain_flow_solve_and_linear_oracle_agree(D):
    rng = np.random.default_rng(100 + D)
    spec, k, l = _random_chain(rng, D)
    system = build_system(spec)
    oracle = _chain_rest_positions(spec, k, l)

    flow = find_equilibrium_by_flow(system)
    solved = solve_lee(lee_from_ode(system))
    assert flow.converged
    assert solved.status == SolveStatus.UNIQUE
    assert solved.solution[::2] == pytest.approx(oracle, abs=1e-6)
    assert flow.equilibrium[::2] == pytest.approx(oracle, abs=1e-6)
    assert flow.equilibrium == pytest.approx(solved.solution, abs=1e-6)
    assert solved.solution[1::2] == pytest.approx(np.zeros(D), abs=1e-9)


def test_degenerate_predator_clamp_gives_a_line_of_equilibria(lv_system):
    lee = intervene_lee(lee_from_ode(lv_system), Intervention.of(lv_system.spec, {"X2": [1.0]}))
    result = solve_lee(lee)
    assert result.status == SolveStatus.MULTIPLE
    assert result.solution is None
    assert len(result.solutions) >= 2
    assert all(s[1] == 1.0 for s in result.solutions)


def test_solvability_check_reports_degenerate_predator_clamp(lv_system):
    sampler = box_xi_sampler(lv_system.spec, box={"X2": (1.0, 1.0)})
    checks = check_solvability(lee_from_ode(lv_system), [{"X2"}], sampler, SolveSettings(xi_draws=2))
    check = checks[frozenset({"X2"})]
    assert not check.solvable
    assert check.status == SolveStatus.MULTIPLE
    iv, result = check.witness()
    assert iv.value("X2") == (1.0,)
    assert len(result.solutions) >= 2
    assert check.summary()["status"] == "multiple"
