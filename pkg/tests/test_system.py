import numpy as np
import pytest

from equilibrium import SolveSettings, lee_from_ode, solve_lee
from modelspec import Const, builtin_mass_spring, parse_model
from system import (
    BoxXiSampler,
    Digraph,
    Intervention,
    InterventionError,
    box_xi_sampler,
    build_system,
    coordinate_graph,
    default_box,
    draw_interventions,
    drift,
    graph,
    intervene_hard,
    intervene_soft,
)


def test_lotka_volterra_graph_and_dot(lv_system):
    g = graph(lv_system)
    assert g.edges == (("X1", "X2"), ("X2", "X1"))
    assert g.self_loops == {"X1", "X2"}
    assert g.to_dot() == (
        "digraph G {\n"
        '  "X1";\n'
        '  "X2";\n'
        '  "X1" -> "X1";\n'
        '  "X1" -> "X2";\n'
        '  "X2" -> "X1";\n'
        '  "X2" -> "X2";\n'
        "}\n"
    )
    assert not g.is_acyclic()


def test_mass_spring_graph_is_a_chain():
    system = build_system(builtin_mass_spring(4))
    g = graph(system)
    assert set(g.edges) == {
        ("X1", "X2"), ("X2", "X1"), ("X2", "X3"), ("X3", "X2"), ("X3", "X4"), ("X4", "X3"),
    }
    assert g.self_loops == {"X1", "X2", "X3", "X4"}
    assert system.warnings == ()


def test_coordinate_graph_of_mass_spring(spring_system):
    g = coordinate_graph(spring_system)
    assert g.nodes == ("Q1", "P1", "Q2", "P2")
    assert g.parents("Q1") == {"P1"}
    assert g.parents("P1") == {"Q1", "P1", "Q2"}


def test_drift_of_lotka_volterra(lv_system):
    assert drift(lv_system, [2.0, 3.0]) == pytest.approx([2.0 * (1 - 3.0), -3.0 * (1 - 2.0)])


def test_default_box_respects_domains(lv_spec, spring_spec):
    assert default_box(lv_spec) == ((0.0, 4.0), (0.0, 4.0))
    assert default_box(spring_spec)[0] == (0.5 - 3.0, 0.5 + 3.0)


def test_hard_intervention_clamps_block(lv_system):
    intervened = intervene_hard(lv_system, Intervention.of(lv_system.spec, {"X2": [2.0]}))
    assert intervened.spec.dynamics[1] == Const(0.0)
    assert intervened.spec.inits == (1.0, 2.0)
    assert intervened.clamped == {"X2"}
    assert intervened.parents["X2"] == frozenset()
    assert graph(intervened).parents("X1") == {"X1", "X2"}
    assert drift(intervened, [0.5, 2.0])[1] == 0.0


def test_hard_interventions_compose(spring_system):
    spec = spring_system.spec
    first = Intervention.from_assignments(spec, {"Q1": 0.8})
    second = Intervention.from_assignments(spec, {"Q2": 2.4})
    stepwise = intervene_hard(intervene_hard(spring_system, first), second)
    assert stepwise == intervene_hard(spring_system, first.merge(second))


def test_identity_intervention_is_a_no_op(lv_system):
    assert intervene_hard(lv_system, Intervention.identity()) is lv_system


def test_position_sugar_expands_to_block_clamp(spring_spec):
    iv = Intervention.from_assignments(spring_spec, {"Q2": 3.0})
    assert iv.value("X2") == (3.0, 0.0)
    assert iv.label() == "do(X2=(3.0, 0.0))"


def test_singleton_block_label(lv_spec):
    assert Intervention.from_assignments(lv_spec, {"X2": 2}).label() == "do(X2=2.0)"


def test_interventions_compare_independent_of_order(spring_spec):
    a = Intervention.of(spring_spec, {"X1": [1.0, 0.0], "X2": [2.0, 0.0]})
    b = Intervention.of(spring_spec, {"X2": [2.0, 0.0], "X1": [1.0, 0.0]})
    assert a == b


@pytest.mark.parametrize("values", [{"X3": [1.0]}, {"X1": [1.0, 2.0]}, {"X1": [-1.0]}])
def test_invalid_interventions(lv_spec, values):
    with pytest.raises(InterventionError):
        Intervention.of(lv_spec, values)


def test_unknown_coordinate_assignment(spring_spec):
    with pytest.raises(InterventionError):
        Intervention.from_assignments(spring_spec, {"Q9": 1.0})


def test_soft_intervention_rejects_nonpositive_gain(lv_system):
    iv = Intervention.of(lv_system.spec, {"X2": [2.0]})
    with pytest.raises(InterventionError):
        intervene_soft(lv_system, iv, 0.0)


def test_soft_interventions_approach_hard_equilibrium(lv_system):
    iv = Intervention.of(lv_system.spec, {"X2": [2.0]})
    target = np.array([0.0, 2.0])
    settings = SolveSettings(starts=8, box=((0.0, 0.5), (1.5, 2.5)))
    distances = []
    for kappa in (10.0, 100.0, 1e3, 1e4):
        result = solve_lee(lee_from_ode(intervene_soft(lv_system, iv, kappa)), settings)
        assert result.solution[1] == pytest.approx(2.0 * kappa / (1.0 + kappa))
        distances.append(np.max(np.abs(result.solution - target)))
    assert all(later < earlier for earlier, later in zip(distances, distances[1:]))
    assert distances[-1] < 1e-3


def test_suspected_constant_dependence_is_warned(caplog):
    spec = parse_model(
        "var X in (-inf,inf)\nvar Y in (-inf,inf)\ndyn X = Y - Y - X\ndyn Y = -Y\ninit X = 1\ninit Y = 1"
    )
    system = build_system(spec)
    assert len(system.warnings) == 1
    assert "'Y'" in system.warnings[0]
    assert "semantic constancy" in caplog.text
    # syntactic parents are kept
    assert system.parents["X"] == {"X", "Y"}


def test_digraph_surgery_and_order():
    g = Digraph.from_parents(["A", "B", "C"], {"B": ["A"], "C": ["A", "B", "C"]})
    cut = g.without_incoming(["C"])
    assert cut.is_acyclic()
    assert cut.topological_order() == ["A", "B", "C"]
    assert cut.to_networkx().number_of_edges() == 1


def test_box_sampler_offers_corners_first(lv_spec):
    sampler = box_xi_sampler(lv_spec, box={"X2": (1.5, 4.0)})
    assert isinstance(sampler, BoxXiSampler)
    draws = draw_interventions(sampler, ["X2"], 4, (0, 0, 1))
    assert [iv.value("X2") for iv in draws[:2]] == [(1.5,), (4.0,)]
    assert all(1.5 <= iv.value("X2")[0] <= 4.0 for iv in draws)
    assert draws == draw_interventions(sampler, ["X2"], 4, (0, 0, 1))


def test_position_sampler_pins_momenta(spring_spec, position_sampler, rng):
    iv = position_sampler(spring_spec)(rng, ["X1", "X2"])
    assert iv.value("X1")[1] == 0.0 and iv.value("X2")[1] == 0.0


def test_empty_target_draws_identity(lv_spec):
    assert draw_interventions(box_xi_sampler(lv_spec), [], 5, (0,)) == [Intervention.identity()]


def test_hard_intervention_is_idempotent(spring_system, lv_system):
    iv = Intervention.from_assignments(spring_system.spec, {"Q1": 0.8, "Q2": 2.4})
    once = intervene_hard(spring_system, iv)
    assert intervene_hard(once, iv) == once
    clamp = Intervention.of(lv_system.spec, {"X2": [2.0]})
    assert intervene_hard(intervene_hard(lv_system, clamp), clamp) == intervene_hard(lv_system, clamp)
