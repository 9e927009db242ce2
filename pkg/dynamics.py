"""
ODE2SCM: Dynamics Engine

Numerical side of the ODE level:
- adaptive Dormand-Prince integration (scipy RK45 stepper) with dense sampling
- equilibrium detection by flow (converged / oscillating / diverged / timeout)
- finite randomized stability probes with three-valued verdicts and witnesses
- Jacobian evaluation and eigenvalue classification of equilibria
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import RK45

from modelspec import ExprEvaluationError
from system import (
    Box,
    Intervention,
    OdeSystem,
    XiSampler,
    box_xi_sampler,
    default_box,
    draw_interventions,
    intervene_hard,
    sample_box,
)

logger = logging.getLogger(__name__)

DIVERGENCE_NORM = 1e8
MAX_EIGEN_DIMENSION = 64


class EigenSolveError(RuntimeError):
    """Eigenvalue iteration did not converge"""


class Termination(str, Enum):
    REACHED_END = "reached t_end"
    CONVERGED = "converged"
    DIVERGED = "diverged"
    LEFT_DOMAIN = "left domain"
    STEP_UNDERFLOW = "step underflow"


class FlowStatus(str, Enum):
    CONVERGED = "converged"
    OSCILLATING = "oscillating"
    DIVERGED = "diverged"
    TIMEOUT = "timeout"


class Verdict(str, Enum):
    STABLE = "stable-w.r.t.-probes"
    REFUTED = "refuted"
    INCONCLUSIVE = "inconclusive"


class EquilibriumKind(str, Enum):
    ASYMPTOTICALLY_STABLE = "asymptotically-stable"
    UNSTABLE = "unstable"
    MARGINAL = "marginal"


@dataclass(frozen=True)
class ProbeSettings:
    """Knobs of flow-based equilibrium detection and stability probing"""
    n_trials: int = 20
    xi_draws: int = 5
    t_max: float = 1e3
    eq_tol: float = 1e-8
    match_tol: float = 1e-5
    rtol: float = 1e-9
    atol: float = 1e-9
    window_fraction: float = 0.01
    min_window_steps: int = 10
    seed: int = 0
    box: Optional[Box] = None
    stop_on_refutation: bool = True


# ─── Integration ────────────────────────────────────────────────────────────

@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    termination: Termination
    diagnostics: List[str] = field(default_factory=list)

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]


def _outside_domain(sys: OdeSystem, x: np.ndarray) -> Optional[str]:
    for coord, domain, value in zip(sys.coords, sys.spec.domains, x):
        if not domain.contains(float(value)):
            return f"'{coord}' = {value!r} left domain {domain}"
    return None


def _stepper(sys: OdeSystem, x0, t_end, rtol, atol, first_step=None, max_step=np.inf) -> RK45:
    return RK45(
        lambda t, y: sys.drift(y),
        0.0,
        np.array(x0, dtype=float),
        float(t_end),
        rtol=rtol,
        atol=atol,
        first_step=first_step,
        max_step=max_step,
    )


def integrate(
    sys: OdeSystem,
    x0: Optional[Sequence[float]] = None,
    t_end: float = 10.0,
    rtol: float = 1e-9,
    atol: float = 1e-9,
    sample_times: Optional[Sequence[float]] = None,
    stop_on_domain_exit: bool = False,
    first_step: Optional[float] = None,
    max_step: float = np.inf,
) -> Trajectory:
    """
    Integrate the initial value problem on [0, t_end]

    Args:
        sys: system to integrate
        x0: initial state (default: the system's init)
        t_end: final time (> 0)
        rtol, atol: per-step local error control
        sample_times: report the state at these times (4th-order dense output);
            default is every accepted step
        stop_on_domain_exit: terminate when a coordinate leaves its domain
            (otherwise a diagnostic is recorded once)
        first_step, max_step: step-size overrides

    Returns:
        Trajectory whose first row is x0
    """
    if not t_end > 0:
        raise ValueError(f"t_end must be positive, got {t_end!r}")
    x0 = sys.x0 if x0 is None else np.array(x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial state must be finite")

    requested = None
    if sample_times is not None:
        requested = np.array(sorted(t for t in sample_times if 0 < t <= t_end), dtype=float)

    times, states = [0.0], [x0.copy()]
    diagnostics: List[str] = []
    cursor = 0
    termination = Termination.REACHED_END
    solver = _stepper(sys, x0, t_end, rtol, atol, first_step, max_step)

    while solver.status == "running":
        t_old = solver.t
        try:
            message = solver.step()
        except ExprEvaluationError as exc:
            diagnostics.append(f"evaluation error at t={t_old!r}: {exc}")
            termination = Termination.DIVERGED
            break
        if solver.status == "failed":
            diagnostics.append(f"step underflow at t={solver.t!r}: {message}")
            logger.info("integration stopped: %s", diagnostics[-1])
            termination = Termination.STEP_UNDERFLOW
            break

        if requested is None:
            times.append(solver.t)
            states.append(solver.y.copy())
        else:
            dense = None
            while cursor < len(requested) and requested[cursor] <= solver.t:
                if dense is None:
                    dense = solver.dense_output()
                times.append(float(requested[cursor]))
                states.append(solver.y.copy() if requested[cursor] == solver.t else dense(requested[cursor]))
                cursor += 1

        y = solver.y
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > DIVERGENCE_NORM:
            diagnostics.append(f"state norm exceeded {DIVERGENCE_NORM:g} at t={solver.t!r}")
            logger.info("integration stopped: %s", diagnostics[-1])
            termination = Termination.DIVERGED
            break
        exit_note = _outside_domain(sys, y)
        if exit_note and not any(d.startswith("domain:") for d in diagnostics):
            diagnostics.append(f"domain: {exit_note} at t={solver.t!r}")
            if stop_on_domain_exit:
                termination = Termination.LEFT_DOMAIN
                break

    return Trajectory(np.array(times), np.array(states), termination, diagnostics)


def trajectory_csv(traj: Trajectory, coords: Sequence[str]) -> str:
    """CSV text: header t,<coords>; %.17g values; trailing termination comment"""
    lines = [",".join(["t", *coords])]
    for t, row in zip(traj.times, traj.states):
        lines.append(",".join("%.17g" % v for v in (t, *row)))
    lines.append(f"# terminated: {traj.termination.value}")
    return "\n".join(lines) + "\n"


def write_trajectory_csv(traj: Trajectory, coords: Sequence[str], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(trajectory_csv(traj, coords), encoding="utf-8")
    return path


# ─── Equilibrium by flow ────────────────────────────────────────────────────

@dataclass
class EquilibriumOutcome:
    status: FlowStatus
    equilibrium: Optional[np.ndarray]
    residual: float
    time: float
    final_state: np.ndarray
    diagnostic: str = ""

    @property
    def converged(self) -> bool:
        return self.status == FlowStatus.CONVERGED


def _looks_oscillating(times, residuals, signs, t_max) -> bool:
    times = np.asarray(times)
    late = times >= 0.5 * t_max
    if late.sum() < 8:
        return False
    flips = np.abs(np.diff(np.asarray(signs)[late], axis=0)).sum(axis=0)
    if flips.max() < 4:
        return False
    res = np.asarray(residuals)
    third = res[(times >= 0.5 * t_max) & (times < 0.75 * t_max)]
    fourth = res[times >= 0.75 * t_max]
    if len(third) == 0 or len(fourth) == 0:
        return False
    return fourth.max() >= 0.5 * third.max()


def find_equilibrium_by_flow(
    sys: OdeSystem,
    x0: Optional[Sequence[float]] = None,
    settings: ProbeSettings = ProbeSettings(),
) -> EquilibriumOutcome:
    """
    Integrate until the drift stays below eq_tol over a trailing window

    The window spans window_fraction of the elapsed time and at least
    min_window_steps accepted steps. Bounded runs whose drift keeps changing
    sign in the second half without residual decay are classified as
    oscillating; norm growth past 1e8 as diverged; anything else as timeout.
    """
    if not settings.eq_tol > 0:
        raise ValueError("eq_tol must be positive")
    x0 = sys.x0 if x0 is None else np.array(x0, dtype=float)

    try:
        start_drift = sys.drift(x0)
    except ExprEvaluationError as exc:
        return EquilibriumOutcome(FlowStatus.DIVERGED, None, np.inf, 0.0, x0, f"evaluation error: {exc}")
    if np.max(np.abs(start_drift), initial=0.0) == 0.0:
        return EquilibriumOutcome(FlowStatus.CONVERGED, x0.copy(), 0.0, 0.0, x0.copy())

    solver = _stepper(sys, x0, settings.t_max, settings.rtol, settings.atol)
    times, residuals, signs = [], [], []
    below_since, below_steps = None, 0

    while solver.status == "running":
        try:
            message = solver.step()
            current = sys.drift(solver.y)
        except ExprEvaluationError as exc:
            return EquilibriumOutcome(
                FlowStatus.DIVERGED, None, np.inf, solver.t, solver.y.copy(), f"evaluation error: {exc}"
            )
        if solver.status == "failed":
            logger.info("flow stopped by step underflow at t=%r", solver.t)
            return EquilibriumOutcome(
                FlowStatus.TIMEOUT, None, float(np.max(np.abs(current))), solver.t, solver.y.copy(),
                f"step underflow: {message}",
            )
        y = solver.y
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > DIVERGENCE_NORM:
            return EquilibriumOutcome(
                FlowStatus.DIVERGED, None, np.inf, solver.t, y.copy(),
                f"state norm exceeded {DIVERGENCE_NORM:g} at t={solver.t!r}",
            )

        residual = float(np.max(np.abs(current)))
        times.append(solver.t)
        residuals.append(residual)
        signs.append(np.sign(current))

        if residual < settings.eq_tol:
            if below_since is None:
                below_since, below_steps = solver.t, 0
            below_steps += 1
            if below_steps >= settings.min_window_steps and solver.t - below_since >= settings.window_fraction * solver.t:
                return EquilibriumOutcome(FlowStatus.CONVERGED, y.copy(), residual, solver.t, y.copy())
        else:
            below_since = None

    final = solver.y.copy()
    if _looks_oscillating(times, residuals, signs, settings.t_max):
        return EquilibriumOutcome(FlowStatus.OSCILLATING, None, residuals[-1], solver.t, final)
    return EquilibriumOutcome(
        FlowStatus.TIMEOUT, None, residuals[-1] if residuals else np.inf, solver.t, final,
        f"no sustained convergence by t={settings.t_max!r}",
    )


# ─── Stability probes ───────────────────────────────────────────────────────

InitSampler = Callable[[np.random.Generator], np.ndarray]


@dataclass
class Trial:
    index: int
    x0: np.ndarray
    outcome: EquilibriumOutcome


@dataclass
class Witness:
    """Evidence against stability: a non-converging init or two inits with different limits"""
    kind: str
    inits: Tuple[Tuple[float, ...], ...]
    limits: Tuple[Tuple[float, ...], ...] = ()
    status: str = ""
    intervention: str = ""


@dataclass
class StabilityReport:
    verdict: Verdict
    trials: List[Trial]
    max_distance: float
    witness: Optional[Witness] = None
    interventions: List[Intervention] = field(default_factory=list)
    stopped_early: bool = False

    def summary(self) -> Dict:
        counts: Dict[str, int] = {}
        for trial in self.trials:
            counts[trial.outcome.status.value] = counts.get(trial.outcome.status.value, 0) + 1
        return {
            "verdict": self.verdict.value,
            "trials": len(self.trials),
            "outcomes": counts,
            "max_distance": self.max_distance,
            "witness": None if self.witness is None else self.witness.__dict__,
        }


def box_init_sampler(sys: OdeSystem, box: Optional[Box] = None) -> InitSampler:
    """Uniform inits over box (default: inflated init box within domains)"""
    box = default_box(sys.spec) if box is None else box

    def sample(rng: np.random.Generator) -> np.ndarray:
        return sample_box(rng, box)

    return sample


def _pin_clamped(sys: OdeSystem, x: np.ndarray) -> np.ndarray:
    x = np.array(x, dtype=float)
    for name, values in sys.clamp_vector().items():
        x[sys.spec.indices(name)] = values
    return x


def probe_stability(
    sys: OdeSystem,
    settings: ProbeSettings = ProbeSettings(),
    init_sampler: Optional[InitSampler] = None,
    stream: Tuple[int, ...] = (),
) -> StabilityReport:
    """
    Flow to equilibrium from n_trials sampled inits

    Trial k draws from default_rng([seed, *stream, k]). Clamped blocks always
    start at their clamp value. Verdict is stable-w.r.t.-probes iff every
    trial converges and all limits lie within match_tol of each other.
    """
    if settings.n_trials < 2:
        raise ValueError("probe_stability needs at least 2 trials")
    sampler = init_sampler or box_init_sampler(sys, settings.box)
    trials: List[Trial] = []
    witness: Optional[Witness] = None
    timeouts = 0
    limits: List[Tuple[np.ndarray, np.ndarray]] = []
    max_distance = 0.0

    for k in range(settings.n_trials):
        rng = np.random.default_rng([settings.seed, *stream, k])
        x0 = _pin_clamped(sys, sampler(rng))
        outcome = find_equilibrium_by_flow(sys, x0, settings)
        trials.append(Trial(k, x0, outcome))

        if outcome.converged:
            for other_x0, other_limit in limits:
                distance = float(np.max(np.abs(outcome.equilibrium - other_limit)))
                max_distance = max(max_distance, distance)
                if distance >= settings.match_tol and witness is None:
                    witness = Witness(
                        "multiple-limits",
                        (tuple(other_x0), tuple(x0)),
                        (tuple(other_limit), tuple(outcome.equilibrium)),
                    )
            limits.append((x0, outcome.equilibrium))
        elif outcome.status == FlowStatus.TIMEOUT:
            timeouts += 1
        elif witness is None:
            witness = Witness("non-converging", (tuple(x0),), status=outcome.status.value)

        if witness is not None and settings.stop_on_refutation:
            break

    if witness is not None:
        verdict = Verdict.REFUTED
    elif timeouts:
        verdict = Verdict.INCONCLUSIVE
    else:
        verdict = Verdict.STABLE
    stopped = len(trials) < settings.n_trials
    logger.debug("stability probe: %s after %d trials", verdict.value, len(trials))
    return StabilityReport(verdict, trials, max_distance, witness, stopped_early=stopped)


def _combine(reports: Sequence[StabilityReport], interventions: Sequence[Intervention]) -> StabilityReport:
    verdicts = {r.verdict for r in reports}
    if Verdict.REFUTED in verdicts:
        verdict = Verdict.REFUTED
    elif Verdict.INCONCLUSIVE in verdicts:
        verdict = Verdict.INCONCLUSIVE
    else:
        verdict = Verdict.STABLE
    witness = None
    for report, iv in zip(reports, interventions):
        if report.witness is not None:
            witness = replace(report.witness, intervention=iv.label())
            break
    return StabilityReport(
        verdict,
        [t for r in reports for t in r.trials],
        max((r.max_distance for r in reports), default=0.0),
        witness,
        list(interventions),
        any(r.stopped_early for r in reports),
    )


def _ordered_targets(sys: OdeSystem, targets: Iterable[Iterable[str]]) -> List[FrozenSet[str]]:
    position = sys.spec.block_index
    unique = {frozenset(t) for t in targets}
    return sorted(unique, key=lambda s: (len(s), sorted(position[b] for b in s)))


def probe_interventional_stability(
    sys: OdeSystem,
    targets: Iterable[Iterable[str]],
    xi_sampler: Optional[XiSampler] = None,
    settings: ProbeSettings = ProbeSettings(),
) -> Dict[FrozenSet[str], StabilityReport]:
    """
    Probe stability of do(X_I = xi) for every target set I and xi_draws sampled xi

    Returns target set -> combined report (refuted if any draw refutes).
    """
    sampler = xi_sampler or box_xi_sampler(sys.spec)
    results: Dict[FrozenSet[str], StabilityReport] = {}
    for t_index, target in enumerate(_ordered_targets(sys, targets)):
        reports, used = [], []
        draws = draw_interventions(sampler, target, settings.xi_draws, (settings.seed, t_index, 1))
        for d, iv in enumerate(draws):
            report = probe_stability(intervene_hard(sys, iv), settings, stream=(t_index, d))
            reports.append(report)
            used.append(iv)
            if report.verdict == Verdict.REFUTED and settings.stop_on_refutation:
                break
        results[target] = _combine(reports, used)
    return results


@dataclass
class StructuralStabilityReport:
    verdict: Verdict
    targets: Dict[str, FrozenSet[str]]
    reports: Dict[str, StabilityReport]

    def summary(self) -> Dict:
        return {
            "verdict": self.verdict.value,
            "blocks": {
                name: {"targets": sorted(self.targets[name]), "verdict": self.reports[name].verdict.value}
                for name in self.targets
            },
        }


def probe_structural_stability(
    sys: OdeSystem,
    settings: ProbeSettings = ProbeSettings(),
    xi_sampler: Optional[XiSampler] = None,
) -> StructuralStabilityReport:
    """For each block i probe stability w.r.t. interventions on pa(i) minus i"""
    targets = {name: sys.parents[name] - {name} for name in sys.blocks}
    probed = probe_interventional_stability(sys, targets.values(), xi_sampler, settings)
    reports = {name: probed[targets[name]] for name in sys.blocks}
    verdicts = {r.verdict for r in reports.values()}
    if Verdict.REFUTED in verdicts:
        verdict = Verdict.REFUTED
    elif Verdict.INCONCLUSIVE in verdicts:
        verdict = Verdict.INCONCLUSIVE
    else:
        verdict = Verdict.STABLE
    return StructuralStabilityReport(verdict, targets, reports)


# ─── Local analysis ─────────────────────────────────────────────────────────

def jacobian_at(sys: OdeSystem, x: Sequence[float]) -> np.ndarray:
    """Symbolic partial derivatives evaluated at x"""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("jacobian_at needs a finite point")
    return sys.jacobian(x)


@dataclass(frozen=True)
class EquilibriumClass:
    kind: EquilibriumKind
    eigenvalues: Tuple[complex, ...]


def classify_equilibrium(J, tol: float = 1e-9) -> EquilibriumClass:
    """
    Classify by eigenvalue real parts

    Eigenvalues come from LAPACK geev (balancing, Hessenberg reduction and
    shifted QR) through numpy.linalg.eigvals.
    """
    J = np.asarray(J, dtype=float)
    if J.ndim != 2 or J.shape[0] != J.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {J.shape}")
    if J.shape[0] > MAX_EIGEN_DIMENSION:
        raise ValueError(f"matrix dimension {J.shape[0]} exceeds {MAX_EIGEN_DIMENSION}")
    if not np.all(np.isfinite(J)):
        raise ValueError("matrix has non-finite entries")
    try:
        eigenvalues = np.linalg.eigvals(J)
    except np.linalg.LinAlgError as exc:
        raise EigenSolveError(str(exc)) from exc
    ordered = tuple(complex(v) for v in sorted(eigenvalues, key=lambda v: (v.real, v.imag)))
    real = np.array([v.real for v in ordered])
    if len(real) and np.all(real < -tol):
        kind = EquilibriumKind.ASYMPTOTICALLY_STABLE
    elif np.any(real > tol):
        kind = EquilibriumKind.UNSTABLE
    else:
        kind = EquilibriumKind.MARGINAL
    return EquilibriumClass(kind, ordered)
