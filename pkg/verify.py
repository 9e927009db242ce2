"""
ODE2SCM: Verification Engine

Numerical checks that intervening and equilibrating commute across the
three levels ODE -> labeled equilibrium equations -> SCM:
- check_theorem1: LEE of the intervened ODE vs. intervened LEE, and flow
  equilibrium vs. algebraic solution
- check_lemma1: SCM of the intervened LEE vs. intervened SCM, and solution
  agreement
- check_commutative_diagram: all four paths from an ODE to the intervened
  equilibrium

Every check returns pass, fail or precondition-unmet; an unmet hypothesis is
never reported as a failure.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from dynamics import (
    ProbeSettings,
    StructuralStabilityReport,
    Verdict,
    find_equilibrium_by_flow,
    probe_stability,
    probe_structural_stability,
)
from equilibrium import (
    Lee,
    Solvability,
    SolveSettings,
    SolveStatus,
    check_structural_solvability,
    intervene_lee,
    lee_from_ode,
    render_lee,
    solve_lee,
)
from modelspec import ModelSpec, builtin_lotka_volterra, builtin_mass_spring, mass_spring_positions
from scm import StructuralSolvabilityError, derive_scm, intervene_scm, render_scm, solve_scm
from system import BoxXiSampler, Intervention, OdeSystem, XiSampler, box_xi_sampler, build_system, intervene_hard

logger = logging.getLogger(__name__)


class Outcome(str, Enum):
    PASS = "pass"
    FAIL = "fail"
    PRECONDITION_UNMET = "precondition-unmet"


@dataclass(frozen=True)
class VerifySettings:
    """
    tol is the single tolerance for every numeric path agreement. Probe
    settings are lighter than the dynamics defaults because the diagram
    check probes every block of two systems.
    """
    tol: float = 1e-6
    probe: ProbeSettings = ProbeSettings(n_trials=3, xi_draws=2, t_max=200.0)
    solve: SolveSettings = SolveSettings()


@dataclass
class CheckReport:
    check: str
    model: str
    intervention: str
    outcome: Outcome
    structural_equal: Optional[bool] = None
    discrepancies: Dict[str, float] = field(default_factory=dict)
    paths: Dict[str, Optional[List[float]]] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.outcome == Outcome.PASS

    def as_record(self) -> Dict:
        return {
            "check": self.check,
            "model": self.model,
            "intervention": self.intervention,
            "outcome": self.outcome.value,
            "structural_equal": self.structural_equal,
            "discrepancies": dict(sorted(self.discrepancies.items())),
            "paths": dict(sorted(self.paths.items())),
            "notes": list(self.notes),
        }


@dataclass
class CommutationReport(CheckReport):
    lemma1_equal: Optional[bool] = None

    def as_record(self) -> Dict:
        record = super().as_record()
        record["lemma1_equal"] = self.lemma1_equal
        return record


def _distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def _as_list(x: Optional[np.ndarray]) -> Optional[List[float]]:
    return None if x is None else [float(v) for v in x]


def _pairwise(paths: Dict[str, Optional[np.ndarray]]) -> Dict[str, float]:
    found = {k: v for k, v in paths.items() if v is not None}
    return {f"{a}-{b}": _distance(found[a], found[b]) for a, b in combinations(sorted(found), 2)}


# ─── LEE commutation ────────────────────────────────────────────────────────

def check_theorem1(
    sys: OdeSystem,
    iv: Intervention,
    settings: VerifySettings = VerifySettings(),
    model_id: str = "model",
) -> CheckReport:
    """
    (i) intervene_lee(lee_from_ode(sys), iv) equals lee_from_ode(intervene_hard(sys, iv)) exactly
    (ii) when the intervened ODE probes stable, its flow equilibrium matches solve_lee within tol
    """
    intervened = intervene_hard(sys, iv)
    lee_do = intervene_lee(lee_from_ode(sys), iv)
    lee_of_do = lee_from_ode(intervened)
    equal = lee_do == lee_of_do and render_lee(lee_do) == render_lee(lee_of_do)
    report = CheckReport("theorem1", model_id, iv.label(), Outcome.PASS, structural_equal=equal)
    if not equal:
        report.notes.append("intervened LEE differs from LEE of intervened ODE")

    stability = probe_stability(intervened, settings.probe)
    if stability.verdict != Verdict.STABLE:
        report.notes.append(f"part (ii) skipped: intervened ODE is {stability.verdict.value}")
    else:
        flow = find_equilibrium_by_flow(intervened, intervened.x0, settings.probe)
        solved = solve_lee(lee_of_do, settings.solve)
        report.paths = {"flow": _as_list(flow.equilibrium), "lee": _as_list(solved.solution)}
        if not flow.converged or solved.status != SolveStatus.UNIQUE:
            report.outcome = Outcome.FAIL
            report.notes.append(f"flow {flow.status.value}, LEE solve {solved.status.value}")
        else:
            report.discrepancies["flow-lee"] = _distance(flow.equilibrium, solved.solution)

    if not equal or any(d >= settings.tol for d in report.discrepancies.values()):
        report.outcome = Outcome.FAIL
    return report


# ─── SCM commutation ────────────────────────────────────────────────────────

def check_lemma1(
    lee: Lee,
    iv: Intervention,
    settings: VerifySettings = VerifySettings(),
    model_id: str = "model",
    xi_sampler: Optional[XiSampler] = None,
) -> CheckReport:
    """
    (i) intervene_scm(derive_scm(lee), iv) equals derive_scm(intervene_lee(lee, iv)) exactly
    (ii) both SCM solutions and the LEE solution agree within tol when unique

    Both LEEs must probe structurally solvable; otherwise precondition-unmet.
    """
    lee_do = intervene_lee(lee, iv)
    base = check_structural_solvability(lee, xi_sampler, settings.solve)
    after = check_structural_solvability(lee_do, xi_sampler, settings.solve)
    report = CheckReport("lemma1", model_id, iv.label(), Outcome.PASS)
    if base.verdict != Solvability.SOLVABLE or after.verdict != Solvability.SOLVABLE:
        report.outcome = Outcome.PRECONDITION_UNMET
        report.notes.append(
            f"structural solvability: base {base.verdict.value}, intervened {after.verdict.value}"
        )
        return report

    scm_do = intervene_scm(derive_scm(lee, settings=settings.solve, report=base), iv)
    scm_of_do = derive_scm(lee_do, settings=settings.solve, report=after)
    report.structural_equal = scm_do == scm_of_do and render_scm(scm_do) == render_scm(scm_of_do)

    results = {
        "scm-intervened": solve_scm(scm_do, settings.solve),
        "scm-derived": solve_scm(scm_of_do, settings.solve),
        "lee": solve_lee(lee_do, settings.solve),
    }
    report.paths = {k: _as_list(r.solution) for k, r in results.items()}
    unique = {k: r.solution for k, r in results.items() if r.status == SolveStatus.UNIQUE}
    if len(unique) < 2:
        report.notes.append("fewer than two unique solutions; part (ii) not compared")
    report.discrepancies = _pairwise(unique)

    if not report.structural_equal:
        report.outcome = Outcome.FAIL
        report.notes.append("intervened SCM differs from SCM of intervened LEE")
    if any(d >= settings.tol for d in report.discrepancies.values()):
        report.outcome = Outcome.FAIL
    return report


# ─── Commutative diagram ────────────────────────────────────────────────────

def check_commutative_diagram(
    sys: OdeSystem,
    iv: Intervention,
    settings: VerifySettings = VerifySettings(),
    model_id: str = "model",
    xi_sampler: Optional[XiSampler] = None,
    base_stability: Optional[StructuralStabilityReport] = None,
) -> CommutationReport:
    """
    Compute the intervened equilibrium along all four paths

        a: flow equilibrium of the intervened ODE
        b: solve of the intervened LEE
        c: solve of the intervened SCM derived before intervening
        d: solve of the SCM derived from the intervened LEE

    Precondition: the ODE and the intervened ODE probe structurally stable.
    Path a takes part only when the intervened ODE itself probes stable.
    """
    report = CommutationReport("diagram", model_id, iv.label(), Outcome.PASS)
    intervened = intervene_hard(sys, iv)
    base = base_stability or probe_structural_stability(sys, settings.probe, xi_sampler)
    after = probe_structural_stability(intervened, settings.probe, xi_sampler)
    if base.verdict != Verdict.STABLE or after.verdict != Verdict.STABLE:
        report.outcome = Outcome.PRECONDITION_UNMET
        report.notes.append(
            f"structural stability: base {base.verdict.value}, intervened {after.verdict.value}"
        )
        return report

    lee = lee_from_ode(sys)
    lee_do = intervene_lee(lee, iv)
    lee_of_do = lee_from_ode(intervened)
    report.structural_equal = lee_do == lee_of_do

    paths: Dict[str, Optional[np.ndarray]] = {"a": None, "b": None, "c": None, "d": None}
    stability = probe_stability(intervened, settings.probe)
    if stability.verdict == Verdict.STABLE:
        flow = find_equilibrium_by_flow(intervened, intervened.x0, settings.probe)
        paths["a"] = flow.equilibrium
        if not flow.converged:
            report.notes.append(f"path a: flow {flow.status.value}")
    else:
        report.notes.append(f"path a skipped: intervened ODE is {stability.verdict.value}")

    solved = solve_lee(lee_of_do, settings.solve)
    if solved.status == SolveStatus.UNIQUE:
        paths["b"] = solved.solution
    else:
        report.notes.append(f"path b: {solved.status.value}")

    try:
        scm_do = intervene_scm(derive_scm(lee, xi_sampler=xi_sampler, settings=settings.solve), iv)
        scm_of_do = derive_scm(lee_of_do, xi_sampler=xi_sampler, settings=settings.solve)
    except StructuralSolvabilityError as exc:
        report.outcome = Outcome.FAIL
        report.notes.append(f"SCM derivation refused: {exc}")
    else:
        report.lemma1_equal = scm_do == scm_of_do
        for key, scm in (("c", scm_do), ("d", scm_of_do)):
            result = solve_scm(scm, settings.solve)
            if result.status == SolveStatus.UNIQUE:
                paths[key] = result.solution
            else:
                report.notes.append(f"path {key}: {result.status.value}")

    report.paths = {k: _as_list(v) for k, v in paths.items()}
    report.discrepancies = _pairwise(paths)
    required = ["b", "c", "d"] + (["a"] if stability.verdict == Verdict.STABLE else [])
    if (
        not report.structural_equal
        or report.lemma1_equal is False
        or any(paths[k] is None for k in required)
        or any(d >= settings.tol for d in report.discrepancies.values())
    ):
        report.outcome = Outcome.FAIL
    return report


# ─── Suite ──────────────────────────────────────────────────────────────────

@dataclass
class SuiteModel:
    """A model in the verification sweep with the clamp values it may receive"""
    name: str
    spec: ModelSpec
    sampler: BoxXiSampler
    targets: Sequence[str]
    joint: bool = True


def default_suite_models() -> List[SuiteModel]:
    """Mass-spring chains D = 2, 3, 4 (positions only) and Lotka-Volterra under do(X2 in [1.5, 4])"""
    models = []
    for D in (2, 3, 4):
        spec = builtin_mass_spring(D)
        models.append(SuiteModel(
            f"mass-spring-{D}", spec,
            box_xi_sampler(spec, random_coords=mass_spring_positions(spec)),
            [b.name for b in spec.blocks],
        ))
    lv = builtin_lotka_volterra()
    models.append(SuiteModel("lotka-volterra", lv, box_xi_sampler(lv, box={"X2": (1.5, 4.0)}), ["X2"], joint=False))
    return models


@dataclass
class SuiteReport:
    records: List[CheckReport]

    @property
    def failed(self) -> bool:
        return any(r.outcome == Outcome.FAIL for r in self.records)

    def counts(self) -> Dict[str, int]:
        counts = {o.value: 0 for o in Outcome}
        for r in self.records:
            counts[r.outcome.value] += 1
        return counts

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.as_record(), sort_keys=True) + "\n" for r in self.records)

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        return path


def sample_suite_interventions(model: SuiteModel, count: int, seed: int, index: int) -> List[Intervention]:
    """count random single or joint interventions on the model's target blocks"""
    rng = np.random.default_rng([seed, index])
    interventions = []
    for _ in range(count):
        size = int(rng.integers(1, len(model.targets) + 1)) if model.joint else 1
        chosen = sorted(rng.choice(len(model.targets), size=size, replace=False).tolist())
        interventions.append(model.sampler(rng, [model.targets[k] for k in chosen]))
    return interventions


def run_verification_suite(
    models: Optional[Sequence[SuiteModel]] = None,
    n_random_interventions: int = 3,
    seed: int = 0,
    settings: VerifySettings = VerifySettings(),
) -> SuiteReport:
    """
    Sweep models x sampled interventions through all three checks

    Deterministic given seed; records come in model order, then intervention
    order, then theorem1 / lemma1 / diagram.
    """
    models = default_suite_models() if models is None else models
    records: List[CheckReport] = []
    for index, model in enumerate(models):
        sys = build_system(model.spec, seed=seed)
        lee = lee_from_ode(sys)
        base = probe_structural_stability(sys, settings.probe, model.sampler)
        for iv in sample_suite_interventions(model, n_random_interventions, seed, index):
            logger.info("verifying %s under %s", model.name, iv.label())
            records.append(check_theorem1(sys, iv, settings, model.name))
            records.append(check_lemma1(lee, iv, settings, model.name, model.sampler))
            records.append(check_commutative_diagram(sys, iv, settings, model.name, model.sampler, base))
    return SuiteReport(records)
