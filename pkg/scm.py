"""
ODE2SCM: Structural Causal Models

Deterministic SCMs X_i = h_i(X_pa(i)) derived from structurally solvable
labeled equilibrium equations. pa(i) is the label's parent set without i,
so an SCM never has self-loops.

Mechanism kinds:
- closed-form: the labeled equation is affine in its own block and is solved
  symbolically (Gaussian elimination); pivots that depend on parents are
  checked at every evaluation
- implicit: the equation is kept and solved for the own block by Newton on
  every evaluation
- clamp: X_i = xi_i after an intervention
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from equilibrium import (
    EquationKind,
    LabeledEquation,
    Lee,
    SolveResult,
    SolveSettings,
    SolveStatus,
    Solvability,
    StructuralSolvabilityReport,
    admit_to_domains,
    box_starts,
    check_structural_solvability,
    damped_newton,
    newton_multistart,
    own_block_affine,
)
from modelspec import (
    ZERO,
    BinOp,
    Expr,
    ExprEvaluationError,
    Interval,
    ModelSpec,
    Neg,
    UnboundNameError,
    compile_exprs,
    const,
    differentiate,
    eval_expr,
    free_coords,
    print_expr,
    simplify,
)
from system import Box, Digraph, Intervention, XiSampler, default_box, sample_box

logger = logging.getLogger(__name__)

DEGENERATE_PIVOT = 1e-12
DEPENDENCE_PROBES = 50
DEPENDENCE_THRESHOLD = 1e-12
INNER_TOL = 1e-10
INNER_STARTS = 8


class ScmError(ValueError):
    pass


class StructuralSolvabilityError(ScmError):
    """SCM derivation refused: the labeled equations are not structurally solvable"""


class DegenerateMechanismError(ScmError):
    """A mechanism is undefined at these parent values (singular own-block coefficients)"""

    def __init__(self, label: str, values: Mapping[str, float], detail: str = ""):
        self.label = label
        self.values = dict(values)
        message = f"mechanism of {label} is degenerate at {self.values}"
        if detail:
            message += f": {detail}"
        super().__init__(message)


class MechanismSolveError(ScmError):
    """Inner root solve of an implicit mechanism failed"""


class MechanismKind(str, Enum):
    CLOSED_FORM = "closed-form"
    IMPLICIT = "implicit"
    CLAMP = "clamp"


@dataclass(frozen=True)
class Mechanism:
    """
    h_i for one label

    exprs are the closed-form outputs (closed-form) or the retained equation
    bodies g_i (implicit). guards are pivots that must stay nonzero.
    """
    label: str
    coords: Tuple[str, ...]
    kind: MechanismKind
    parents: FrozenSet[str]
    exprs: Tuple[Expr, ...] = ()
    guards: Tuple[Expr, ...] = ()
    xi: Tuple[float, ...] = ()
    start: Tuple[float, ...] = field(default=(), compare=False)

    def render(self, positions_only: bool = False) -> str:
        if self.kind == MechanismKind.IMPLICIT:
            body = "implicit root of: " + "; ".join(f"0 = {print_expr(g)}" for g in self.exprs)
        else:
            outputs = self.exprs if self.kind == MechanismKind.CLOSED_FORM else tuple(const(v) for v in self.xi)
            shown = [
                f"{c} = {print_expr(e)}"
                for c, e in zip(self.coords, outputs)
                if not (positions_only and len(self.coords) > 1 and e == ZERO)
            ]
            body = "; ".join(shown)
        line = f"X[{self.label}]: {body}"
        if self.parents:
            line += "  [pa: " + ", ".join(sorted(self.parents)) + "]"
        return line


class _CompiledMechanism:
    """Numeric evaluation of one mechanism over full state vectors"""

    def __init__(self, mechanism: Mechanism, spec: ModelSpec, seed: int = 0):
        self.mechanism = mechanism
        self.spec = spec
        self.seed = seed
        self.own = spec.indices(mechanism.label)
        self.d = len(self.own)
        self.n = spec.dimension
        coords, params = spec.coords, spec.param_values
        self.needed = sorted(
            set().union(*(free_coords(e) for e in mechanism.exprs + mechanism.guards)) - set(mechanism.coords),
            key=spec.coord_index.__getitem__,
        )
        if mechanism.kind == MechanismKind.CLOSED_FORM:
            self._outputs = compile_exprs(mechanism.exprs, coords, params)
            self._guards = compile_exprs(mechanism.guards, coords, params)
            self._jac = compile_exprs([differentiate(e, c) for e in mechanism.exprs for c in coords], coords, params)
        elif mechanism.kind == MechanismKind.IMPLICIT:
            self._g = compile_exprs(mechanism.exprs, coords, params)
            self._dg = compile_exprs([differentiate(e, c) for e in mechanism.exprs for c in coords], coords, params)

    def _parent_values(self, x: np.ndarray) -> Dict[str, float]:
        return {c: float(x[self.spec.coord_index[c]]) for c in self.needed}

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        m = self.mechanism
        if m.kind == MechanismKind.CLAMP:
            return np.array(m.xi, dtype=float)
        if m.kind == MechanismKind.CLOSED_FORM:
            y = np.array(x, dtype=float)
            y[self.own] = 0.0
            for guard in self._guards(y):
                if abs(guard) <= DEGENERATE_PIVOT:
                    raise DegenerateMechanismError(m.label, self._parent_values(y))
            try:
                return np.array(self._outputs(y), dtype=float)
            except ExprEvaluationError as exc:
                raise DegenerateMechanismError(m.label, self._parent_values(y), str(exc)) from None
        return self._solve_implicit(np.array(x, dtype=float))

    def _solve_implicit(self, x: np.ndarray) -> np.ndarray:
        own, d = self.own, self.d

        def residual(z):
            y = x.copy()
            y[own] = z
            return np.array(self._g(y), dtype=float)

        def jacobian(z):
            y = x.copy()
            y[own] = z
            return np.array(self._dg(y), dtype=float).reshape(d, self.n)[:, own]

        starts = [np.array(self.mechanism.start, dtype=float)]
        if np.all(np.isfinite(x[own])):
            starts.append(x[own].copy())
        box = [default_box(self.spec)[k] for k in own]
        starts += [sample_box(np.random.default_rng([self.seed, 5, k]), box) for k in range(INNER_STARTS)]
        for start in starts:
            result = damped_newton(residual, jacobian, start, INNER_TOL)
            if result.converged:
                return result.solution
        raise MechanismSolveError(f"no root of {self.mechanism.label} at {self._parent_values(x)}")

    def jacobian(self, x: np.ndarray, value: Optional[np.ndarray] = None) -> np.ndarray:
        """d h / d x over the full state (own columns are zero)"""
        m = self.mechanism
        if m.kind == MechanismKind.CLAMP:
            return np.zeros((self.d, self.n))
        y = np.array(x, dtype=float)
        if m.kind == MechanismKind.CLOSED_FORM:
            y[self.own] = 0.0
            return np.array(self._jac(y), dtype=float).reshape(self.d, self.n)
        y[self.own] = self.evaluate(y) if value is None else value
        G = np.array(self._dg(y), dtype=float).reshape(self.d, self.n)
        try:
            dh = -np.linalg.solve(G[:, self.own], G)
        except np.linalg.LinAlgError:
            raise DegenerateMechanismError(m.label, self._parent_values(y), "singular own-block jacobian") from None
        dh[:, self.own] = 0.0
        return dh


@dataclass(frozen=True)
class Scm:
    mechanisms: Tuple[Mechanism, ...]
    params: Tuple[Tuple[str, float], ...]
    domains: Tuple[Interval, ...]
    spec: ModelSpec = field(compare=False)
    seed: int = field(default=0, compare=False)

    def __post_init__(self):
        for m in self.mechanisms:
            if m.label in m.parents:
                raise ScmError(f"self-loop on {m.label}")

    @property
    def labels(self) -> Tuple[str, ...]:
        return tuple(m.label for m in self.mechanisms)

    def mechanism(self, label: str) -> Mechanism:
        return self.mechanisms[self.spec.block_index[label]]

    @cached_property
    def compiled(self) -> Dict[str, _CompiledMechanism]:
        return {m.label: _CompiledMechanism(m, self.spec, self.seed) for m in self.mechanisms}

    def structural_graph(self) -> Digraph:
        return Digraph.from_parents(self.labels, {m.label: m.parents for m in self.mechanisms})


# ─── Derivation ─────────────────────────────────────────────────────────────

def _is_zero(e: Expr) -> bool:
    return e == ZERO


def _constant_value(e: Expr, params: Mapping[str, float]) -> Optional[float]:
    if free_coords(e):
        return None
    try:
        return eval_expr(e, params)
    except ExprEvaluationError:
        return 0.0


def _choose_pivot(rows: List[List[Expr]], col: int, params: Mapping[str, float]) -> Optional[int]:
    fallback = None
    for r in range(col, len(rows)):
        entry = rows[r][col]
        if _is_zero(entry):
            continue
        value = _constant_value(entry, params)
        if value is None:
            fallback = r if fallback is None else fallback
        elif abs(value) > DEGENERATE_PIVOT:
            return r
    return fallback


def solve_affine_block(
    label: str, A: Sequence[Sequence[Expr]], b: Sequence[Expr], params: Mapping[str, float]
) -> Tuple[Tuple[Expr, ...], Tuple[Expr, ...]]:
    """
    Symbolic solution of A·X + b = 0 by Gauss-Jordan elimination

    Returns (outputs, guards); guards are the parent-dependent pivots.
    """
    d = len(b)
    rows = [list(A[r]) + [simplify(Neg(b[r]))] for r in range(d)]
    guards = []
    for col in range(d):
        chosen = _choose_pivot(rows, col, params)
        if chosen is None:
            raise DegenerateMechanismError(label, {}, "own-block coefficients are singular")
        rows[col], rows[chosen] = rows[chosen], rows[col]
        pivot = rows[col][col]
        if free_coords(pivot):
            guards.append(pivot)
        for r in range(d):
            if r == col or _is_zero(rows[r][col]):
                continue
            factor = simplify(BinOp("/", rows[r][col], pivot))
            for k in range(col + 1, d + 1):
                rows[r][k] = simplify(BinOp("-", rows[r][k], BinOp("*", factor, rows[col][k])))
            rows[r][col] = ZERO
    outputs = tuple(simplify(BinOp("/", rows[c][d], rows[c][c])) for c in range(d))
    return outputs, tuple(guards)


def mechanism_from_equation(eq: LabeledEquation, spec: ModelSpec) -> Mechanism:
    """h_i for one labeled equation; parents are the label's parents without itself"""
    parents = eq.parents - {eq.label}
    if eq.kind == EquationKind.CLAMP:
        return Mechanism(eq.label, eq.coords, MechanismKind.CLAMP, frozenset(), xi=eq.xi)
    hint = tuple(spec.inits[k] for k in spec.indices(eq.label))
    decomposition = own_block_affine(eq)
    if decomposition is None:
        return Mechanism(eq.label, eq.coords, MechanismKind.IMPLICIT, parents, exprs=eq.exprs, start=hint)
    outputs, guards = solve_affine_block(eq.label, decomposition[0], decomposition[1], spec.param_values)
    return Mechanism(eq.label, eq.coords, MechanismKind.CLOSED_FORM, parents, exprs=outputs, guards=guards, start=hint)


def derive_scm(
    lee: Lee,
    force: bool = False,
    xi_sampler: Optional[XiSampler] = None,
    settings: SolveSettings = SolveSettings(),
    report: Optional[StructuralSolvabilityReport] = None,
) -> Scm:
    """
    Induced SCM of a structurally solvable LEE

    Args:
        lee: labeled equilibrium equations
        force: derive even when structural solvability is not confirmed
        xi_sampler, settings: used for the structural solvability probes;
            settings.seed also keys the inner Newton starts of implicit mechanisms
        report: a structural solvability report already computed for lee

    Raises:
        StructuralSolvabilityError: probes did not return solvable and force is off
    """
    report = report or check_structural_solvability(lee, xi_sampler, settings)
    if report.verdict != Solvability.SOLVABLE:
        message = f"labeled equations are {report.verdict.value}: {report.witness()}"
        if not force:
            raise StructuralSolvabilityError(message)
        logger.warning("deriving SCM anyway (forced); %s", message)
    mechanisms = tuple(mechanism_from_equation(eq, lee.spec) for eq in lee.equations)
    return Scm(mechanisms, lee.params, lee.domains, lee.spec, settings.seed)


# ─── Evaluation, intervention, solving ──────────────────────────────────────

def eval_mechanism(scm: Scm, label: str, parent_values: Mapping[str, float]) -> np.ndarray:
    """
    h_i at the given parent coordinate values

    Only coordinates the mechanism actually reads are required; every given
    value must lie in its coordinate domain (ScmError otherwise).
    """
    compiled = scm.compiled[label]
    missing = [c for c in compiled.needed if c not in parent_values]
    if missing:
        raise UnboundNameError(missing[0])
    x = np.full(scm.spec.dimension, np.nan)
    for name, value in parent_values.items():
        value = float(value)
        if not np.isfinite(value):
            raise ValueError(f"parent value for '{name}' must be finite")
        domain = scm.spec.domain(name)
        if not domain.contains(value):
            raise ScmError(f"parent value {value!r} for '{name}' outside domain {domain}")
        x[scm.spec.coord_index[name]] = value
    if compiled.mechanism.kind == MechanismKind.CLOSED_FORM:
        x[np.isnan(x)] = 0.0
    return compiled.evaluate(x)


def intervene_scm(scm: Scm, iv: Intervention) -> Scm:
    """Targeted mechanisms become clamps with no parents"""
    iv.validate(scm.spec)
    if iv.is_identity:
        return scm
    spec = scm.spec
    mechanisms = list(scm.mechanisms)
    inits = list(spec.inits)
    for name, values in iv.targets:
        mechanisms[spec.block_index[name]] = Mechanism(
            name, spec.block(name).coords, MechanismKind.CLAMP, frozenset(), xi=tuple(values)
        )
        for k, value in zip(spec.indices(name), values):
            inits[k] = value
    return Scm(tuple(mechanisms), scm.params, scm.domains, replace(spec, inits=tuple(inits)), scm.seed)


def scm_residual(scm: Scm, x: Sequence[float]) -> np.ndarray:
    """X - h(X) stacked over all labels"""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for compiled in scm.compiled.values():
        out[compiled.own] = x[compiled.own] - compiled.evaluate(x)
    return out


def solve_scm(scm: Scm, settings: SolveSettings = SolveSettings(), stream: Tuple[int, ...] = ()) -> SolveResult:
    """
    Solve the structural equations

    Acyclic parent structure: one substitution pass in topological order.
    Otherwise multistart damped Newton on X - h(X) with exact mechanism
    Jacobians, clamps substituted.
    """
    spec = scm.spec
    graph = scm.structural_graph()
    if graph.is_acyclic():
        x = np.array(spec.inits, dtype=float)
        try:
            for label in graph.topological_order():
                compiled = scm.compiled[label]
                x[compiled.own] = compiled.evaluate(x)
        except (ScmError, ExprEvaluationError) as exc:
            return SolveResult(SolveStatus.NONE_FOUND, None, np.inf, [], 0, 1, 0, {str(exc): 1})
        size = float(np.max(np.abs(scm_residual(scm, x)), initial=0.0))
        return SolveResult(SolveStatus.UNIQUE, x, size, [x], 0, 1, 1)

    fixed = np.array(spec.inits, dtype=float)
    free: List[int] = []
    for m in scm.mechanisms:
        rows = spec.indices(m.label)
        if m.kind == MechanismKind.CLAMP:
            fixed[rows] = m.xi
        else:
            free.extend(rows)
    n_free = len(free)

    def embed(z):
        x = fixed.copy()
        x[free] = z
        return x

    def residual(z):
        return scm_residual(scm, embed(z))[free]

    def jacobian(z):
        x = embed(z)
        dH = np.zeros((spec.dimension, spec.dimension))
        for compiled in scm.compiled.values():
            dH[compiled.own] = compiled.jacobian(x)
        return np.eye(n_free) - dH[np.ix_(free, free)]

    box = settings.box or default_box(spec)
    free_domains = [spec.domains[k] for k in free]
    reduced = newton_multistart(
        residual, jacobian, [s[free] for s in box_starts(fixed, box, settings, stream)], settings,
        admit=lambda z: admit_to_domains(z, free_domains, settings.cluster_tol),
    )
    return replace(
        reduced,
        solution=None if reduced.solution is None else embed(reduced.solution),
        solutions=[embed(z) for z in reduced.solutions],
    )


def scm_graph(scm: Scm, seed: int = 0, box: Optional[Box] = None) -> Digraph:
    """
    Edge j -> i iff h_i numerically depends on block j

    Each structural parent is probed with 50 random perturbations of its
    coordinates; a change above 1e-12 in h_i records the edge.
    """
    spec = scm.spec
    box = box or default_box(spec)
    parents: Dict[str, set] = {}
    for i_index, m in enumerate(scm.mechanisms):
        compiled = scm.compiled[m.label]
        read = set().union(*(free_coords(e) for e in m.exprs))
        found = set()
        for parent in sorted(m.parents, key=spec.block_index.__getitem__):
            columns = spec.indices(parent)
            if m.kind == MechanismKind.CLOSED_FORM and not (set(spec.block(parent).coords) & read):
                continue
            rng = np.random.default_rng([seed, 4, i_index, spec.block_index[parent]])
            for _ in range(DEPENDENCE_PROBES):
                x = sample_box(rng, box)
                moved = x.copy()
                moved[columns] = sample_box(rng, [box[k] for k in columns])
                try:
                    change = np.max(np.abs(compiled.evaluate(moved) - compiled.evaluate(x)))
                except (ScmError, ExprEvaluationError):
                    continue
                if change > DEPENDENCE_THRESHOLD:
                    found.add(parent)
                    break
        parents[m.label] = found
    return Digraph.from_parents(scm.labels, parents)


def render_scm(scm: Scm, positions_only: bool = False) -> str:
    """
    One line per label, X[i]: <coord> = <expr>; ...  [pa: ...]

    positions_only drops block components whose mechanism is identically zero.
    """
    return "\n".join(m.render(positions_only) for m in scm.mechanisms) + "\n"
