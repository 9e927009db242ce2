"""
ODE2SCM: Labeled Equilibrium Equations

Equilibrium equations 0 = g_i(X_pa(i)) labeled by the block they came from.
An intervention on block i replaces its equation by the clamp 0 = X_i - xi_i.

Solving is multistart damped Newton (Armijo backtracking); uniqueness is
always "with respect to the probes", never certified.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares

from modelspec import (
    BinOp,
    Expr,
    ExprEvaluationError,
    Interval,
    ModelSpec,
    Var,
    affine_decomposition,
    compile_exprs,
    const,
    differentiate,
    free_coords,
    print_expr,
)
from system import (
    Box,
    Digraph,
    Intervention,
    OdeSystem,
    XiSampler,
    box_xi_sampler,
    default_box,
    draw_interventions,
    sample_box,
)

logger = logging.getLogger(__name__)

ARMIJO_C = 1e-4
MIN_STEP = 1e-10
DEGENERATE_STARTS = 8


class EquationKind(str, Enum):
    EQUATION = "equation"
    CLAMP = "clamp"


class SolveStatus(str, Enum):
    UNIQUE = "unique-w.r.t.-probes"
    MULTIPLE = "multiple"
    NONE_FOUND = "none-found"
    UNCONFIRMED = "unconfirmed"


class Solvability(str, Enum):
    SOLVABLE = "solvable"
    GENERIC_ONLY = "generic-only"
    NOT_SOLVABLE = "not-solvable"


@dataclass(frozen=True)
class SolveSettings:
    """Multistart Newton knobs shared by the LEE and SCM solvers"""
    starts: int = 32
    tol: float = 1e-10
    max_iter: int = 200
    cluster_tol: float = 1e-6
    xi_draws: int = 5
    seed: int = 0
    box: Optional[Box] = None


# ─── Types ──────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class LabeledEquation:
    """
    Equation of one label (block)

    EQUATION carries the bodies g_i (one per block coordinate); CLAMP carries
    the clamp vector xi_i and stands for 0 = X_i - xi_i.
    """
    label: str
    coords: Tuple[str, ...]
    kind: EquationKind
    parents: FrozenSet[str]
    exprs: Tuple[Expr, ...] = ()
    xi: Tuple[float, ...] = ()

    @property
    def bodies(self) -> Tuple[Expr, ...]:
        if self.kind == EquationKind.CLAMP:
            return tuple(BinOp("-", Var(c), const(v)) for c, v in zip(self.coords, self.xi))
        return self.exprs

    def render(self) -> str:
        return f"E[{self.label}]: " + "; ".join(f"0 = {print_expr(g)}" for g in self.bodies)


def clamp_equation(label: str, coords: Sequence[str], xi: Sequence[float]) -> LabeledEquation:
    return LabeledEquation(label, tuple(coords), EquationKind.CLAMP, frozenset((label,)), (), tuple(float(v) for v in xi))


@dataclass(frozen=True)
class Lee:
    """
    Labeled equilibrium equations in block order

    spec is the originating model (block layout, start hint); it does not
    take part in equality.
    """
    equations: Tuple[LabeledEquation, ...]
    params: Tuple[Tuple[str, float], ...]
    domains: Tuple[Interval, ...]
    spec: ModelSpec = field(compare=False)

    @property
    def labels(self) -> Tuple[str, ...]:
        return tuple(eq.label for eq in self.equations)

    @property
    def coords(self) -> Tuple[str, ...]:
        return self.spec.coords

    @property
    def start(self) -> np.ndarray:
        return np.array(self.spec.inits, dtype=float)

    def equation(self, label: str) -> LabeledEquation:
        return self.equations[self.spec.block_index[label]]

    def parents(self, label: str) -> FrozenSet[str]:
        return self.equation(label).parents

    @cached_property
    def _residual(self):
        bodies = [g for eq in self.equations for g in eq.bodies]
        return compile_exprs(bodies, self.coords, self.spec.param_values)

    def residual(self, x: Sequence[float]) -> np.ndarray:
        """All labeled bodies evaluated at x (clamps as X - xi)"""
        return np.array(self._residual(x), dtype=float)


# ─── Construction and intervention ──────────────────────────────────────────

def lee_from_ode(sys: OdeSystem) -> Lee:
    """
    Equilibrium equations of an ODE, labeled by block

    Hard-clamped blocks (dynamics 0, init xi) become clamp equations.
    """
    spec = sys.spec
    equations = []
    for block in spec.blocks:
        rows = spec.indices(block.name)
        if block.name in sys.clamped:
            equations.append(clamp_equation(block.name, block.coords, [spec.inits[k] for k in rows]))
        else:
            equations.append(LabeledEquation(
                block.name, block.coords, EquationKind.EQUATION, sys.parents[block.name],
                tuple(spec.dynamics[k] for k in rows),
            ))
    return Lee(tuple(equations), spec.params, spec.domains, spec)


def intervene_lee(lee: Lee, iv: Intervention) -> Lee:
    """Replace the equations of targeted labels by clamps; nothing else changes"""
    iv.validate(lee.spec)
    if iv.is_identity:
        return lee
    spec = lee.spec
    equations = list(lee.equations)
    inits = list(spec.inits)
    for name, values in iv.targets:
        position = spec.block_index[name]
        equations[position] = clamp_equation(name, spec.block(name).coords, values)
        for k, value in zip(spec.indices(name), values):
            inits[k] = value
    return Lee(tuple(equations), lee.params, lee.domains, replace(spec, inits=tuple(inits)))


def render_lee(lee: Lee) -> str:
    """One line per label: E[i]: 0 = <g>; ..."""
    return "\n".join(eq.render() for eq in lee.equations) + "\n"


def lee_graph(lee: Lee) -> Digraph:
    return Digraph.from_parents(lee.labels, {eq.label: eq.parents - {eq.label} for eq in lee.equations})


# ─── Multistart Newton ──────────────────────────────────────────────────────

@dataclass
class StartResult:
    start: np.ndarray
    converged: bool
    iterations: int
    solution: Optional[np.ndarray] = None
    residual: float = np.inf
    reason: str = ""


@dataclass
class SolveResult:
    status: SolveStatus
    solution: Optional[np.ndarray]
    residual: float
    solutions: List[np.ndarray]
    iterations: int
    starts: int
    converged_starts: int
    failures: Dict[str, int] = field(default_factory=dict)

    def summary(self) -> Dict:
        return {
            "status": self.status.value,
            "solution": None if self.solution is None else [float(v) for v in self.solution],
            "residual": self.residual,
            "solutions": [[float(v) for v in s] for s in self.solutions],
            "starts": self.starts,
            "converged_starts": self.converged_starts,
            "iterations": self.iterations,
            "failures": dict(sorted(self.failures.items())),
        }


def damped_newton(
    residual: Callable[[np.ndarray], np.ndarray],
    jacobian: Callable[[np.ndarray], np.ndarray],
    start: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 200,
) -> StartResult:
    """Newton with Armijo backtracking on 0.5*|F|^2; any evaluation failure fails the start"""
    x = np.array(start, dtype=float)
    try:
        F = residual(x)
    except (ExprEvaluationError, ArithmeticError, ValueError) as exc:
        return StartResult(start, False, 0, reason=f"evaluation: {exc}")
    merit = 0.5 * float(F @ F)

    for iteration in range(max_iter + 1):
        size = float(np.max(np.abs(F), initial=0.0))
        if size < tol:
            return StartResult(start, True, iteration, x, size)
        if iteration == max_iter:
            break
        try:
            step = np.linalg.solve(jacobian(x), -F)
        except np.linalg.LinAlgError:
            return StartResult(start, False, iteration, reason="singular jacobian")
        except (ExprEvaluationError, ArithmeticError, ValueError) as exc:
            return StartResult(start, False, iteration, reason=f"evaluation: {exc}")
        if not np.all(np.isfinite(step)):
            return StartResult(start, False, iteration, reason="singular jacobian")

        alpha = 1.0
        while True:
            candidate = x + alpha * step
            try:
                F_new = residual(candidate)
                merit_new = 0.5 * float(F_new @ F_new)
            except (ExprEvaluationError, ArithmeticError, ValueError):
                merit_new = np.inf
            if np.isfinite(merit_new) and merit_new <= (1.0 - 2.0 * ARMIJO_C * alpha) * merit:
                break
            alpha *= 0.5
            if alpha < MIN_STEP:
                return StartResult(start, False, iteration, reason="line search stalled")
        x, F, merit = candidate, F_new, merit_new

    return StartResult(start, False, max_iter, reason="iteration limit")


def _cluster(points: Sequence[np.ndarray], tol: float) -> List[np.ndarray]:
    reps: List[np.ndarray] = []
    for p in points:
        if not any(np.max(np.abs(p - r)) < tol for r in reps):
            reps.append(p)
    return sorted(reps, key=lambda r: tuple(r))


def admit_to_domains(x: np.ndarray, domains: Sequence[Interval], slack: float) -> Optional[np.ndarray]:
    """x inside the domains, with closed bounds allowed a slack and clipped onto"""
    x = x.copy()
    for k, domain in enumerate(domains):
        value = x[k]
        if domain.contains(value):
            continue
        if domain.lower_closed and domain.lower - slack <= value < domain.lower:
            x[k] = domain.lower
        elif domain.upper_closed and domain.upper < value <= domain.upper + slack:
            x[k] = domain.upper
        else:
            return None
    return x


def newton_multistart(
    residual: Callable[[np.ndarray], np.ndarray],
    jacobian: Callable[[np.ndarray], np.ndarray],
    starts: Sequence[np.ndarray],
    settings: SolveSettings = SolveSettings(),
    admit: Optional[Callable[[np.ndarray], Optional[np.ndarray]]] = None,
) -> SolveResult:
    """
    Run damped Newton from every start, cluster the admitted roots

    Status is unique when exactly one cluster exists and at least half the
    starts reached it, unconfirmed when one cluster is backed by fewer starts.
    """
    found: List[np.ndarray] = []
    failures: Dict[str, int] = {}
    iterations = 0
    for start in starts:
        result = damped_newton(residual, jacobian, start, settings.tol, settings.max_iter)
        iterations += result.iterations
        if result.converged and admit is not None:
            admitted = admit(result.solution)
            if admitted is None:
                result.converged, result.reason = False, "outside domain"
            else:
                result.solution = admitted
        if result.converged:
            found.append(result.solution)
        else:
            failures[result.reason] = failures.get(result.reason, 0) + 1
            logger.debug("newton start failed: %s", result.reason)

    clusters = _cluster(found, settings.cluster_tol)
    if not clusters:
        status = SolveStatus.NONE_FOUND
    elif len(clusters) > 1:
        status = SolveStatus.MULTIPLE
    elif 2 * len(found) >= len(starts):
        status = SolveStatus.UNIQUE
    else:
        status = SolveStatus.UNCONFIRMED

    solution, size = None, np.inf
    if status in (SolveStatus.UNIQUE, SolveStatus.UNCONFIRMED):
        solution = clusters[0]
        size = float(np.max(np.abs(residual(solution)), initial=0.0))
    return SolveResult(status, solution, size, clusters, iterations, len(starts), len(found), failures)


def box_starts(
    first: np.ndarray, box: Box, settings: SolveSettings, stream: Tuple[int, ...] = ()
) -> List[np.ndarray]:
    """first, then starts-1 uniform draws from default_rng([seed, *stream, k])"""
    starts = [np.array(first, dtype=float)]
    for k in range(1, settings.starts):
        starts.append(sample_box(np.random.default_rng([settings.seed, *stream, k]), box))
    return starts


# ─── Solving labeled equations ──────────────────────────────────────────────

def solve_lee(lee: Lee, settings: SolveSettings = SolveSettings(), stream: Tuple[int, ...] = ()) -> SolveResult:
    """
    Solve all labeled equations jointly

    Clamped blocks are substituted exactly; Newton runs on the remaining
    coordinates. Solutions are reported as full state vectors.
    """
    spec = lee.spec
    fixed = np.array(spec.inits, dtype=float)
    free: List[int] = []
    bodies: List[Expr] = []
    for eq in lee.equations:
        rows = spec.indices(eq.label)
        if eq.kind == EquationKind.CLAMP:
            fixed[rows] = eq.xi
        else:
            free.extend(rows)
            bodies.extend(eq.exprs)

    box = settings.box or default_box(spec)
    full_starts = box_starts(fixed, box, settings, stream)
    slack = settings.cluster_tol

    if not free:
        size = float(np.max(np.abs(lee.residual(fixed))))
        return SolveResult(SolveStatus.UNIQUE, fixed, size, [fixed], 0, len(full_starts), len(full_starts))

    unknowns = [spec.coords[k] for k in free]
    g = compile_exprs(bodies, spec.coords, spec.param_values)
    dg = compile_exprs([differentiate(b, c) for b in bodies for c in unknowns], spec.coords, spec.param_values)
    n = len(free)

    def embed(z: np.ndarray) -> np.ndarray:
        x = fixed.copy()
        x[free] = z
        return x

    def residual(z: np.ndarray) -> np.ndarray:
        return np.array(g(embed(z)), dtype=float)

    def jacobian(z: np.ndarray) -> np.ndarray:
        return np.array(dg(embed(z)), dtype=float).reshape(n, n)

    free_domains = [spec.domains[k] for k in free]
    reduced = newton_multistart(
        residual, jacobian, [s[free] for s in full_starts], settings,
        admit=lambda z: admit_to_domains(z, free_domains, slack),
    )
    return replace(
        reduced,
        solution=None if reduced.solution is None else embed(reduced.solution),
        solutions=[embed(z) for z in reduced.solutions],
    )


@dataclass
class SolvabilityCheck:
    """Solve results of one target set over its sampled clamp values"""
    target: FrozenSet[str]
    runs: List[Tuple[Intervention, SolveResult]]

    @property
    def solvable(self) -> bool:
        return all(r.status == SolveStatus.UNIQUE for _, r in self.runs)

    @property
    def status(self) -> SolveStatus:
        for _, r in self.runs:
            if r.status != SolveStatus.UNIQUE:
                return r.status
        return SolveStatus.UNIQUE

    def witness(self) -> Optional[Tuple[Intervention, SolveResult]]:
        for iv, r in self.runs:
            if r.status != SolveStatus.UNIQUE:
                return iv, r
        return None

    def summary(self) -> Dict:
        return {
            "target": sorted(self.target),
            "status": self.status.value,
            "runs": [{"intervention": iv.label(), "status": r.status.value} for iv, r in self.runs],
        }


def _ordered(lee: Lee, targets: Iterable[Iterable[str]]) -> List[FrozenSet[str]]:
    position = lee.spec.block_index
    return sorted({frozenset(t) for t in targets}, key=lambda s: (len(s), sorted(position[b] for b in s)))


def check_solvability(
    lee: Lee,
    targets: Iterable[Iterable[str]],
    xi_sampler: Optional[XiSampler] = None,
    settings: SolveSettings = SolveSettings(),
) -> Dict[FrozenSet[str], SolvabilityCheck]:
    """solve_lee of do(X_I = xi) for each target set and xi_draws sampled xi"""
    sampler = xi_sampler or box_xi_sampler(lee.spec)
    checks: Dict[FrozenSet[str], SolvabilityCheck] = {}
    for t_index, target in enumerate(_ordered(lee, targets)):
        runs = []
        draws = draw_interventions(sampler, target, settings.xi_draws, (settings.seed, t_index, 2))
        for d, iv in enumerate(draws):
            runs.append((iv, solve_lee(intervene_lee(lee, iv), settings, stream=(t_index, d))))
        checks[target] = SolvabilityCheck(target, runs)
    return checks


# ─── Structural solvability ─────────────────────────────────────────────────

@dataclass
class DegeneratePoint:
    """Parent values at which the own-block coefficient matrix is singular"""
    label: str
    values: Dict[str, float]


def own_block_affine(eq: LabeledEquation):
    """(A, b) with g = A·X_i + b when the equation is affine in its own block, else None"""
    if eq.kind == EquationKind.CLAMP:
        return None
    return affine_decomposition(eq.exprs, eq.coords)


def find_degenerate_point(lee: Lee, label: str, settings: SolveSettings = SolveSettings()) -> Optional[DegeneratePoint]:
    """
    Search parent values where det A(x_pa) = 0 for an affine labeled equation

    Uses bounded least squares on det from a few seeded starts inside the
    sampling box of the parent coordinates.
    """
    eq = lee.equation(label)
    decomposition = own_block_affine(eq)
    if decomposition is None:
        return None
    A, _ = decomposition
    spec = lee.spec
    entries = [a for row in A for a in row]
    involved = sorted(set().union(*(free_coords(a) for a in entries)), key=spec.coord_index.__getitem__)
    d = len(eq.coords)
    evaluate = compile_exprs(entries, spec.coords, spec.param_values)
    base = np.array(spec.inits, dtype=float)
    columns = [spec.coord_index[c] for c in involved]

    def det(z: np.ndarray) -> float:
        x = base.copy()
        x[columns] = z
        try:
            return float(np.linalg.det(np.array(evaluate(x), dtype=float).reshape(d, d)))
        except ExprEvaluationError:
            return 0.0

    if not involved:
        return DegeneratePoint(label, {}) if det(np.zeros(0)) == 0.0 else None

    box = settings.box or default_box(spec)
    sub_box = [box[k] for k in columns]
    lows = np.array([lo for lo, _ in sub_box])
    highs = np.array([hi for _, hi in sub_box])
    scale = max(1.0, abs(det(base[columns])))
    for k in range(DEGENERATE_STARTS):
        z0 = sample_box(np.random.default_rng([settings.seed, 3, k]), sub_box)
        try:
            fit = least_squares(lambda z: [det(z)], z0, bounds=(lows, highs), xtol=1e-14, ftol=1e-14, gtol=1e-14)
        except ValueError:
            continue
        if abs(fit.fun[0]) <= 1e-12 * scale:
            values = {c: float(v) for c, v in zip(involved, fit.x)}
            logger.debug("degenerate parent values for %s: %s", label, values)
            return DegeneratePoint(label, values)
    return None


@dataclass
class StructuralSolvabilityReport:
    verdict: Solvability
    targets: Dict[str, FrozenSet[str]]
    checks: Dict[str, SolvabilityCheck]
    degenerate: Dict[str, DegeneratePoint]

    def witness(self) -> Optional[str]:
        for label, check in self.checks.items():
            found = check.witness()
            if found is not None:
                return f"{label}: {found[0].label()} gives {found[1].status.value}"
        for label, point in self.degenerate.items():
            return f"{label}: degenerate at {point.values}"
        return None

    def summary(self) -> Dict:
        return {
            "verdict": self.verdict.value,
            "labels": {
                label: {
                    "targets": sorted(self.targets[label]),
                    "status": self.checks[label].status.value,
                    "degenerate": None if label not in self.degenerate else self.degenerate[label].values,
                }
                for label in self.targets
            },
            "witness": self.witness(),
        }


def check_structural_solvability(
    lee: Lee,
    xi_sampler: Optional[XiSampler] = None,
    settings: SolveSettings = SolveSettings(),
) -> StructuralSolvabilityReport:
    """
    For each label i, solvability w.r.t. I_i = pa(i) minus i over sampled xi,
    plus a search for degenerate parent values of affine equations.
    """
    targets = {label: lee.parents(label) - {label} for label in lee.labels}
    probed = check_solvability(lee, targets.values(), xi_sampler, settings)
    checks = {label: probed[targets[label]] for label in lee.labels}
    degenerate = {}
    for label in lee.labels:
        point = find_degenerate_point(lee, label, settings)
        if point is not None:
            degenerate[label] = point

    if not all(check.solvable for check in checks.values()):
        verdict = Solvability.NOT_SOLVABLE
    elif degenerate:
        verdict = Solvability.GENERIC_ONLY
    else:
        verdict = Solvability.SOLVABLE
    return StructuralSolvabilityReport(verdict, targets, checks, degenerate)
