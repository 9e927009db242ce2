import math

import numpy as np
import pytest

from modelspec import (
    BinOp,
    Const,
    DivisionByZeroError,
    DomainError,
    DuplicateDeclarationError,
    ExprEvaluationError,
    Interval,
    MissingDefinitionError,
    ModelParameterError,
    ModelSyntaxError,
    Neg,
    Param,
    Pow,
    UnboundNameError,
    UnknownIdentifierError,
    Var,
    affine_decomposition,
    builtin_lotka_volterra,
    builtin_mass_spring,
    compile_exprs,
    const,
    differentiate,
    eval_expr,
    free_coords,
    load_model,
    mass_spring_positions,
    parse_expr,
    parse_model,
    print_expr,
    print_model,
    simplify,
)

LV_COORDS = ("X1", "X2")
LV_PARAMS = ("th11", "th12", "th21", "th22")


def test_bundled_lotka_volterra_matches_builtin(data_dir, lv_spec):
    assert load_model(data_dir / "lotka_volterra.model") == lv_spec


def test_bundled_mass_spring_matches_builtin(data_dir, spring_spec):
    loaded = load_model(data_dir / "mass_spring_2.model")
    assert loaded == spring_spec
    assert loaded.name == "mass_spring_2"


@pytest.mark.parametrize("spec", [builtin_lotka_volterra(2.0, 0.5, 1.5, 3.0), builtin_mass_spring(3)])
def test_print_model_round_trips(spec):
    text = print_model(spec)
    assert parse_model(text) == spec
    assert print_model(parse_model(text)) == text


@pytest.mark.parametrize("text", [
    "X1 * (th11 - th12 * X2)",
    "-X2 * (th22 - th21 * X1)",
    "-X1^2 + X2 / (X1 - X2)",
    "X1 - (X2 - X1)",
    "(X1 + X2)^-2",
    "-(X1 + X2) * 3.5",
    "X1 * -X2",
    "X1 / (X2 / th11)",
])
def test_print_expr_round_trips(text):
    e = parse_expr(text, LV_COORDS, LV_PARAMS)
    assert parse_expr(print_expr(e), LV_COORDS, LV_PARAMS) == e


def test_print_expr_uses_minimal_parentheses():
    e = parse_expr("(X1 * X2) + ((th11))", LV_COORDS, LV_PARAMS)
    assert print_expr(e) == "X1 * X2 + th11"


def test_lotka_volterra_builtin_structure(lv_spec):
    assert lv_spec.coords == LV_COORDS
    assert [b.name for b in lv_spec.blocks] == ["X1", "X2"]
    assert str(lv_spec.domain("X1")) == "[0.0,inf)"
    assert lv_spec.param_values == {"th11": 1.0, "th12": 1.0, "th21": 1.0, "th22": 1.0}


def test_mass_spring_builtin_structure():
    spec = builtin_mass_spring(3)
    assert [b.coords for b in spec.blocks] == [("Q1", "P1"), ("Q2", "P2"), ("Q3", "P3")]
    assert spec.param_values["L"] == 4.0
    assert spec.inits == (0.5, 0.0, 1.5, 0.0, 2.5, 0.0)
    assert mass_spring_positions(spec) == ["Q1", "Q2", "Q3"]
    assert spec.domain("P2") == Interval.real_line()


@pytest.mark.parametrize("kwargs", [{"D": 0}, {"D": 2, "masses": [1.0, -1.0]}, {"D": 2, "springs": [1.0, 1.0]}])
def test_mass_spring_rejects_bad_parameters(kwargs):
    with pytest.raises(ModelParameterError):
        builtin_mass_spring(**kwargs)


def test_lotka_volterra_rejects_nonpositive_rates():
    with pytest.raises(ModelParameterError):
        builtin_lotka_volterra(th11=0.0)


def test_syntax_error_reports_line_and_column():
    text = "param a = 1\nvar X in [0,inf)\ndyn X = X * $\ninit X = 1"
    with pytest.raises(ModelSyntaxError) as info:
        parse_model(text)
    assert (info.value.line, info.value.column) == (3, 13)
    assert str(info.value).startswith("line 3, column 13:")


def test_unknown_identifier_is_located():
    text = "var X in [0,inf)\ndyn X = X * c\ninit X = 1"
    with pytest.raises(UnknownIdentifierError) as info:
        parse_model(text)
    assert (info.value.line, info.value.column) == (2, 13)


@pytest.mark.parametrize("text, error", [
    ("var X in [0,inf)\nvar X in [0,inf)\ndyn X = X\ninit X = 1", DuplicateDeclarationError),
    ("var X in [0,inf)\ndyn X = X\ndyn X = X\ninit X = 1", DuplicateDeclarationError),
    ("var X in [0,inf)\ndyn X = X", MissingDefinitionError),
    ("var X in [0,inf)\ninit X = 1", MissingDefinitionError),
    ("var X in [0,inf)\ndyn X = X\ninit X = -1", DomainError),
    ("var X in [1,0]\ndyn X = X\ninit X = 1", DomainError),
    ("var X in [0,inf]\ndyn X = X\ninit X = 1", ModelSyntaxError),
    ("var X in [0,inf)\ndyn X = X ^ 0.5\ninit X = 1", ModelSyntaxError),
    ("let X = 1", ModelSyntaxError),
    ("# only a comment", MissingDefinitionError),
])
def test_invalid_models_are_rejected(text, error):
    with pytest.raises(error):
        parse_model(text)


def test_eval_expr_reports_division_by_zero():
    e = parse_expr("X1 / (X2 - th11)", LV_COORDS, LV_PARAMS)
    env = {"X1": 1.0, "X2": 1.0, "th11": 1.0}
    with pytest.raises(DivisionByZeroError):
        eval_expr(e, env)
    with pytest.raises(ZeroDivisionError):
        eval_expr(e, env)


def test_eval_expr_unbound_name_is_key_error():
    with pytest.raises(KeyError):
        eval_expr(Var("X1"), {})
    with pytest.raises(UnboundNameError):
        eval_expr(Param("th11"), {"X1": 0.0})


def test_power_overflow_is_an_evaluation_error():
    for text, value in (("X1^400", 10.0), ("X1^-400", 0.01)):
        e = parse_expr(text, LV_COORDS, LV_PARAMS)
        with pytest.raises(ExprEvaluationError, match="overflow"):
            eval_expr(e, {"X1": value})
        with pytest.raises(ExprEvaluationError, match="overflow"):
            compile_exprs([e], LV_COORDS, {})([value, 1.0])


def test_constant_folding_leaves_overflowing_power_for_evaluation():
    e = Pow(Const(10.0), 400)
    assert simplify(e) == e
    assert simplify(Pow(Const(10.0), 2)) == Const(100.0)
    with pytest.raises(ExprEvaluationError):
        eval_expr(simplify(e), {})


def test_compiled_exprs_match_eval_and_keep_division_contract():
    exprs = [parse_expr(t, LV_COORDS, LV_PARAMS) for t in ("X1 * (th11 - th12 * X2)", "X2^-1")]
    params = {"th11": 2.0, "th12": 0.5, "th21": 1.0, "th22": 1.0}
    f = compile_exprs(exprs, LV_COORDS, params)
    x = [1.5, 4.0]
    env = {**params, "X1": 1.5, "X2": 4.0}
    assert f(x) == pytest.approx([eval_expr(e, env) for e in exprs])
    with pytest.raises(DivisionByZeroError):
        f([1.0, 0.0])


def test_const_normalizes_and_signed_helper():
    assert Const(-0.0) == Const(0.0)
    assert math.copysign(1.0, Const(-0.0).value) == 1.0
    with pytest.raises(ValueError):
        Const(-1.0)
    assert const(-2.0) == Neg(Const(2.0))


def test_simplify_folds_constants_and_identities():
    x = Var("X1")
    assert simplify(BinOp("*", Const(1.0), x)) == x
    assert simplify(BinOp("+", Const(0.0), BinOp("*", x, Const(0.0)))) == Const(0.0)
    assert simplify(BinOp("-", Const(2.0), Const(5.0))) == const(-3.0)


def test_differentiate_lotka_volterra_row():
    e = parse_expr("X1 * (th11 - th12 * X2)", LV_COORDS, LV_PARAMS)
    env = {"X1": 0.7, "X2": 2.0, "th11": 1.0, "th12": 3.0}
    assert eval_expr(differentiate(e, "X1"), env) == pytest.approx(1.0 - 3.0 * 2.0)
    assert eval_expr(differentiate(e, "X2"), env) == pytest.approx(-0.7 * 3.0)
    assert differentiate(e, "Y") == Const(0.0)


def test_differentiate_quotient_and_negative_power():
    e = parse_expr("X1 / X2 + X2^-2", LV_COORDS, LV_PARAMS)
    env = {"X1": 3.0, "X2": 2.0}
    assert eval_expr(differentiate(e, "X2"), env) == pytest.approx(-3.0 / 4.0 - 2.0 / 8.0)


def test_affine_decomposition():
    rows = [parse_expr("X1 * (th11 - th12 * X2)", LV_COORDS, LV_PARAMS)]
    A, b = affine_decomposition(rows, ["X1"])
    assert free_coords(A[0][0]) == {"X2"}
    assert b == (Const(0.0),)
    assert affine_decomposition([parse_expr("X1^2", LV_COORDS, LV_PARAMS)], ["X1"]) is None


def test_interval_contains_and_clip():
    half_open = Interval(0.0, math.inf, True, False)
    assert half_open.contains(0.0) and not half_open.contains(-1e-300)
    assert not half_open.contains(float("nan"))
    assert half_open.clip(-2.0, 4.0) == (0.0, 4.0)


def test_eval_expr_prey_rate():
    e = parse_expr("X1 * (th11 - th12 * X2)", LV_COORDS, LV_PARAMS)
    assert eval_expr(e, {"X1": 2.0, "X2": 0.0, "th11": 1.5, "th12": 1.0}) == 3.0
    assert eval_expr(e, {"X1": 1.0, "X2": 1.0, "th11": 1.0, "th12": 1.0}) == 0.0


@pytest.mark.parametrize("text, coords", [
    ("X1 * (th11 - th12 * X2)", {"X1", "X2"}),
    ("5", set()),
    ("X1 - X1", {"X1"}),
])
def test_free_coords_is_syntactic(text, coords):
    assert free_coords(parse_expr(text, LV_COORDS, LV_PARAMS)) == coords


def test_cube_derivative_matches_finite_difference():
    e = parse_expr("X1^3", LV_COORDS, LV_PARAMS)
    assert eval_expr(differentiate(e, "X1"), {"X1": 2.0}) == pytest.approx(12.0)
    h = 1e-5
    central = (eval_expr(e, {"X1": 2.0 + h}) - eval_expr(e, {"X1": 2.0 - h})) / (2 * h)
    assert central == pytest.approx(12.0, abs=1e-6)


@pytest.mark.parametrize("text", [
    "X1 * (th11 - th12 * X2)",
    "-X2 * (th22 - th21 * X1)",
    "X1^3 - X2 * X1 + 4",
    "(X1 + 2) / (X2^2 + 1)",
    "X1 * X2^-2 - th11 / (X1^2 + 3)",
])
def test_derivatives_agree_with_central_differences(text):
    e = parse_expr(text, LV_COORDS, LV_PARAMS)
    params = {"th11": 1.3, "th12": 0.7, "th21": 1.1, "th22": 0.9}
    rng = np.random.default_rng(11)
    h = 1e-5
    checked = 0
    while checked < 20:
        x1, x2 = rng.uniform(-2.0, 2.0, size=2)
        if abs(x2) < 0.2:
            continue
        env = {**params, "X1": x1, "X2": x2}
        for coord in LV_COORDS:
            d = differentiate(e, coord)
            assert free_coords(d) <= free_coords(e)
            up, down = dict(env), dict(env)
            up[coord] += h
            down[coord] -= h
            central = (eval_expr(e, up) - eval_expr(e, down)) / (2 * h)
            assert eval_expr(d, env) == pytest.approx(central, rel=1e-5, abs=1e-6)
        checked += 1


def test_single_mass_rests_between_walls():
    spec = builtin_mass_spring(1, springs=[1.0, 1.0], lengths=[1.0, 1.0], wall=2.0)
    f = compile_exprs(spec.dynamics, spec.coords, spec.param_values)
    assert f([1.0, 0.0]) == pytest.approx([0.0, 0.0])
    assert f([1.5, 0.0])[1] == pytest.approx(-1.0)
