"""
ODE2SCM: Command-Line Interface

Commands:
- simulate: integrate a (possibly intervened) model to CSV
- stability: probe stability, interventional or structural stability
- derive: labeled equilibrium equations or the induced SCM, with DOT graphs
- solve: equilibrium by LEE (and SCM) root finding
- verify: commutation checks, single model or the default suite
- export: canonical model text and graph DOT

Exit codes: 0 ok/pass, 1 refuted/fail, 2 usage or parse error,
3 inconclusive, 4 SCM derivation refused.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from dynamics import (
    ProbeSettings,
    Verdict,
    find_equilibrium_by_flow,
    integrate,
    probe_interventional_stability,
    probe_stability,
    probe_structural_stability,
    trajectory_csv,
)
from equilibrium import SolveSettings, SolveStatus, intervene_lee, lee_from_ode, lee_graph, render_lee, solve_lee
from modelspec import (
    ModelSpec,
    ModelSpecError,
    builtin_lotka_volterra,
    builtin_mass_spring,
    load_model,
    mass_spring_positions,
    print_model,
)
from scm import ScmError, StructuralSolvabilityError, derive_scm, intervene_scm, render_scm, scm_graph, solve_scm
from system import (
    Intervention,
    InterventionError,
    box_xi_sampler,
    build_system,
    coordinate_graph,
    graph,
    intervene_hard,
)
from verify import (
    SuiteModel,
    SuiteReport,
    VerifySettings,
    check_commutative_diagram,
    check_lemma1,
    check_theorem1,
    run_verification_suite,
    sample_suite_interventions,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_INCONCLUSIVE = 3
EXIT_REFUSED = 4

VERDICT_EXIT = {
    Verdict.STABLE: EXIT_OK,
    Verdict.REFUTED: EXIT_FAIL,
    Verdict.INCONCLUSIVE: EXIT_INCONCLUSIVE,
}


class UsageError(ValueError):
    """Bad flag combination or value"""


def print_banner():
    """Display application banner"""
    banner = """
╔═══════════════════════════════════════════════════════════╗
║                       ODE2SCM v0.1.0                      ║
║     Dynamical systems -> equilibrium equations -> SCMs    ║
║                                                           ║
║      Simulate • Probe • Derive • Solve • Verify           ║
╚═══════════════════════════════════════════════════════════╝
    """
    print(banner, file=sys.stderr)


def print_section(title: str, stream=None):
    """Print section header"""
    stream = stream or sys.stdout
    print(f"\n{'─' * 60}", file=stream)
    print(f"  {title}", file=stream)
    print('─' * 60, file=stream)


def format_dict_output(data: dict, indent: int = 0, stream=None):
    """Pretty print nested dictionary"""
    stream = stream or sys.stdout
    prefix = "  " * indent
    for key, value in data.items():
        label = key.replace('_', ' ').title()
        if isinstance(value, dict):
            print(f"{prefix}{label}:", file=stream)
            format_dict_output(value, indent + 1, stream)
        elif isinstance(value, list):
            print(f"{prefix}{label}: {', '.join(map(str, value))}", file=stream)
        else:
            print(f"{prefix}{label}: {value}", file=stream)


def verdict_marker(verdict: str) -> str:
    if verdict in ("stable-w.r.t.-probes", "pass", "solvable", "unique-w.r.t.-probes", "converged"):
        return "✅"
    if verdict in ("inconclusive", "precondition-unmet", "generic-only", "unconfirmed"):
        return "⚠️ "
    return "❌"


# ─── Argument parsing ───────────────────────────────────────────────────────

def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got '{text}'")
    if value < 0:
        raise argparse.ArgumentTypeError(f"seed must be non-negative, got {value}")
    return value


def default_seed() -> int:
    raw = os.getenv("ODE2SCM_SEED", "0")
    try:
        return _seed(raw)
    except argparse.ArgumentTypeError:
        logger.warning("ignoring ODE2SCM_SEED=%r, expected a non-negative integer", raw)
        return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    source = common.add_argument_group("model")
    source.add_argument("--model", metavar="PATH", help="model file in the text format")
    source.add_argument("--builtin", choices=["lv", "mass-spring"], help="built-in model")
    source.add_argument("--theta", type=_floats, metavar="T11,T12,T21,T22",
                        help="Lotka-Volterra rates (default 1,1,1,1)")
    source.add_argument("--init", type=_floats, metavar="X1,X2", help="Lotka-Volterra initial state")
    source.add_argument("--D", type=int, default=2, help="number of masses (default 2)")
    source.add_argument("--masses", type=_floats, metavar="M,...", help="m_1..m_D")
    source.add_argument("--springs", type=_floats, metavar="K,...", help="k_0..k_D")
    source.add_argument("--lengths", type=_floats, metavar="L,...", help="rest lengths l_0..l_D")
    source.add_argument("--frictions", type=_floats, metavar="B,...", help="b_1..b_D")
    source.add_argument("--wall", type=float, help="right wall position L")
    source.add_argument("--positions", type=_floats, metavar="Q,...", help="initial positions")
    source.add_argument("--momenta", type=_floats, metavar="P,...", help="initial momenta")
    common.add_argument("--do", action="append", default=[], metavar="NAME=VALUE[,NAME=VALUE...]",
                        help="perfect intervention; repeat to combine. On mass-spring Q2=3 clamps X2=(3,0)")
    common.add_argument("--seed", type=_seed, default=default_seed(),
                        help="random seed (default: $ODE2SCM_SEED or 0)")
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(
        prog="ode2scm",
        description="Map ODE models to labeled equilibrium equations and structural causal models",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", parents=[common], help="integrate to trajectory CSV")
    simulate.add_argument("--t-end", type=float, default=10.0, help="final time (default 10)")
    simulate.add_argument("--points", type=int, default=0,
                          help="evenly spaced output samples (default: every accepted step)")
    simulate.add_argument("--out", metavar="PATH", help="CSV file (default stdout)")
    simulate.add_argument("--gnuplot", metavar="PATH", help="also write a gnuplot script for --out")

    stability = commands.add_parser("stability", parents=[common], help="probe stability")
    stability.add_argument("--targets", metavar="BLOCK,...",
                           help="probe stability w.r.t. random interventions on these blocks")
    stability.add_argument("--structural", action="store_true", help="probe structural stability")
    stability.add_argument("--trials", type=int, default=20, help="initial conditions per probe")
    stability.add_argument("--xi-draws", type=int, default=5, help="clamp values per target set")
    stability.add_argument("--t-max", type=float, default=1e3, help="integration horizon per trial")

    derive = commands.add_parser("derive", parents=[common], help="LEE or SCM with DOT graph")
    derive.add_argument("--to", choices=["lee", "scm"], default="lee", help="target level (default lee)")
    derive.add_argument("--force", action="store_true", help="derive the SCM without solvability")
    derive.add_argument("--positions-only", action="store_true", help="hide identically zero mechanisms")
    derive.add_argument("--out", metavar="DIR", help="write <name>.<level>.txt and <name>.<level>.dot")

    solve = commands.add_parser("solve", parents=[common], help="equilibrium by root finding")
    solve.add_argument("--scm", action="store_true", help="also derive and solve the SCM")
    solve.add_argument("--force", action="store_true", help="derive the SCM without solvability")
    solve.add_argument("--starts", type=int, default=32, help="Newton starts (default 32)")

    verify = commands.add_parser("verify", parents=[common], help="commutation checks")
    verify.add_argument("--suite", choices=["default"], help="run the default model suite")
    verify.add_argument("--interventions", type=int, default=3,
                        help="random interventions per model when --do is absent (default 3)")
    verify.add_argument("--tol", type=float, default=1e-6, help="agreement tolerance (default 1e-6)")
    verify.add_argument("--out", metavar="PATH", help="JSON Lines report (default stdout)")

    export = commands.add_parser("export", parents=[common], help="model text and graph DOT")
    export.add_argument("--coordinates", action="store_true", help="coordinate-level graph")
    export.add_argument("--out", metavar="DIR", help="write <name>.model and <name>.dot")
    return parser


def load_spec(args) -> ModelSpec:
    if bool(args.model) == bool(args.builtin):
        raise UsageError("give exactly one of --model or --builtin")
    if args.model:
        return load_model(args.model)
    if args.builtin == "lv":
        theta = args.theta or [1.0, 1.0, 1.0, 1.0]
        if len(theta) != 4:
            raise UsageError("--theta takes four values")
        init = args.init or [1.0, 1.0]
        if len(init) != 2:
            raise UsageError("--init takes two values")
        return builtin_lotka_volterra(*theta, *init)
    return builtin_mass_spring(
        args.D, args.masses, args.springs, args.lengths, args.frictions, args.wall, args.positions, args.momenta
    )


def parse_interventions(spec: ModelSpec, flags: List[str]) -> Intervention:
    """Every --do flag merged into one joint intervention"""
    assignments = {}
    for flag in flags:
        for item in flag.split(","):
            name, sep, value = item.partition("=")
            name = name.strip()
            if not sep or not name:
                raise UsageError(f"expected NAME=VALUE, got '{item}'")
            try:
                number = float(value)
            except ValueError:
                raise UsageError(f"not a number: '{value}'")
            if name in assignments:
                raise UsageError(f"'{name}' assigned twice")
            assignments[name] = number
    return Intervention.from_assignments(spec, assignments) if assignments else Intervention.identity()


def _is_mass_spring(args, spec: ModelSpec) -> bool:
    return args.builtin == "mass-spring" or spec.name.replace("_", "-").startswith("mass-spring")


def _xi_sampler(args, spec: ModelSpec):
    if _is_mass_spring(args, spec):
        return box_xi_sampler(spec, random_coords=mass_spring_positions(spec))
    return None


def _emit(text: str, path: Optional[Path]) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        print(f"✅ wrote {path}", file=sys.stderr)


# ─── Commands ───────────────────────────────────────────────────────────────

def gnuplot_script(csv_path: str, coords: List[str], title: str) -> str:
    lines = [
        f"# {title}",
        "set datafile separator ','",
        "set datafile commentschars '#'",
        "set key autotitle columnhead",
        "set xlabel 't'",
    ]
    plots = [f"'{csv_path}' using 1:{k + 2} with lines" for k in range(len(coords))]
    lines.append("plot " + ", \\\n     ".join(plots))
    return "\n".join(lines) + "\n"


def cmd_simulate(args, spec: ModelSpec, iv: Intervention) -> int:
    if args.gnuplot and not args.out:
        raise UsageError("--gnuplot needs --out")
    if not args.t_end > 0:
        raise UsageError("--t-end must be positive")
    system = intervene_hard(build_system(spec, args.seed), iv)
    samples = np.linspace(0.0, args.t_end, args.points + 1)[1:] if args.points > 0 else None
    traj = integrate(system, t_end=args.t_end, sample_times=samples)
    _emit(trajectory_csv(traj, system.coords), Path(args.out) if args.out else None)
    if args.gnuplot:
        _emit(gnuplot_script(args.out, list(system.coords), f"{spec.name} {iv.label()}"), Path(args.gnuplot))

    outcome = find_equilibrium_by_flow(system, settings=ProbeSettings(t_max=args.t_end, seed=args.seed))
    stream = sys.stdout if args.out else sys.stderr
    print_section(f"📈 {spec.name} {iv.label()}", stream)
    print(f"{verdict_marker(outcome.status.value)} flow: {outcome.status.value} at t={outcome.time:.6g}", file=stream)
    print(f"  termination: {traj.termination.value}", file=stream)
    if outcome.equilibrium is not None:
        print(f"  equilibrium: {', '.join(f'{c}={v:.10g}' for c, v in zip(system.coords, outcome.equilibrium))}",
              file=stream)
    for note in traj.diagnostics + ([outcome.diagnostic] if outcome.diagnostic else []):
        print(f"⚠️  {note}", file=stream)
    return EXIT_OK


def cmd_stability(args, spec: ModelSpec, iv: Intervention) -> int:
    settings = ProbeSettings(n_trials=args.trials, xi_draws=args.xi_draws, t_max=args.t_max, seed=args.seed)
    system = intervene_hard(build_system(spec, args.seed), iv)
    sampler = _xi_sampler(args, spec)
    print_section(f"🔍 STABILITY: {spec.name} {iv.label()}")
    if args.structural:
        report = probe_structural_stability(system, settings, sampler)
        format_dict_output(report.summary())
    elif args.targets:
        targets = frozenset(t.strip() for t in args.targets.split(",") if t.strip())
        unknown = sorted(targets - set(system.blocks))
        if unknown:
            raise UsageError(f"unknown blocks: {', '.join(unknown)}")
        report = probe_interventional_stability(system, [targets], sampler, settings)[targets]
        format_dict_output(report.summary())
    else:
        report = probe_stability(system, settings)
        format_dict_output(report.summary())
    print(f"\n{verdict_marker(report.verdict.value)} {report.verdict.value}")
    return VERDICT_EXIT[report.verdict]


def cmd_derive(args, spec: ModelSpec, iv: Intervention) -> int:
    system = build_system(spec, args.seed)
    lee = intervene_lee(lee_from_ode(system), iv)
    out = Path(args.out) if args.out else None
    stem = spec.name
    if args.to == "lee":
        text, dot = render_lee(lee), lee_graph(lee).to_dot(f"{stem}_lee".replace("-", "_"))
    else:
        scm = derive_scm(lee, force=args.force, xi_sampler=_xi_sampler(args, spec),
                         settings=SolveSettings(seed=args.seed))
        text = render_scm(scm, positions_only=args.positions_only)
        dot = scm_graph(scm, seed=args.seed).to_dot(f"{stem}_scm".replace("-", "_"))
    _emit(text, None if out is None else out / f"{stem}.{args.to}.txt")
    _emit(dot, None if out is None else out / f"{stem}.{args.to}.dot")
    return EXIT_OK


def cmd_solve(args, spec: ModelSpec, iv: Intervention) -> int:
    settings = SolveSettings(starts=args.starts, seed=args.seed)
    system = build_system(spec, args.seed)
    lee = lee_from_ode(system)
    results = {"lee": solve_lee(intervene_lee(lee, iv), settings)}
    if args.scm:
        scm = derive_scm(lee, force=args.force, xi_sampler=_xi_sampler(args, spec), settings=settings)
        results["scm"] = solve_scm(intervene_scm(scm, iv), settings)
    for level, result in results.items():
        print_section(f"🧮 {level.upper()} SOLVE: {spec.name} {iv.label()}")
        print(f"{verdict_marker(result.status.value)} {result.status.value}")
        for solution in result.solutions:
            print("  " + ", ".join(f"{c}={v:.10g}" for c, v in zip(spec.coords, solution)))
        print(f"  residual: {result.residual:.3g}  converged starts: {result.converged_starts}/{result.starts}")
    statuses = {r.status for r in results.values()}
    if statuses == {SolveStatus.UNIQUE}:
        return EXIT_OK
    if statuses <= {SolveStatus.UNIQUE, SolveStatus.UNCONFIRMED}:
        return EXIT_INCONCLUSIVE
    return EXIT_FAIL


def cmd_verify(args, spec: Optional[ModelSpec], iv: Intervention) -> int:
    settings = VerifySettings(tol=args.tol)
    if args.suite:
        report = run_verification_suite(None, args.interventions, args.seed, settings)
    else:
        sampler = _xi_sampler(args, spec) or box_xi_sampler(spec)
        model = SuiteModel(spec.name, spec, sampler, [b.name for b in spec.blocks])
        interventions = [iv] if not iv.is_identity else sample_suite_interventions(model, args.interventions, args.seed, 0)
        system = build_system(spec, args.seed)
        lee = lee_from_ode(system)
        base = probe_structural_stability(system, settings.probe, sampler)
        records = []
        for item in interventions:
            records.append(check_theorem1(system, item, settings, spec.name))
            records.append(check_lemma1(lee, item, settings, spec.name, sampler))
            records.append(check_commutative_diagram(system, item, settings, spec.name, sampler, base))
        report = SuiteReport(records)

    _emit(report.to_jsonl(), Path(args.out) if args.out else None)
    print_section("🧪 VERIFICATION", sys.stderr)
    for record in report.records:
        print(f"{verdict_marker(record.outcome.value)} {record.check:8s} {record.model} {record.intervention}: "
              f"{record.outcome.value}", file=sys.stderr)
    format_dict_output(report.counts(), 1, sys.stderr)
    return EXIT_FAIL if report.failed else EXIT_OK


def cmd_export(args, spec: ModelSpec, iv: Intervention) -> int:
    system = intervene_hard(build_system(spec, args.seed), iv)
    digraph = coordinate_graph(system) if args.coordinates else graph(system)
    out = Path(args.out) if args.out else None
    _emit(print_model(spec), None if out is None else out / f"{spec.name}.model")
    _emit(digraph.to_dot(spec.name.replace("-", "_")), None if out is None else out / f"{spec.name}.dot")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "stability": cmd_stability,
    "derive": cmd_derive,
    "solve": cmd_solve,
    "verify": cmd_verify,
    "export": cmd_export,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Run one command; returns the exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.verbose:
        print_banner()

    try:
        if args.command == "verify" and args.suite:
            if args.model or args.builtin or args.do:
                raise UsageError("--suite takes no model or --do")
            return cmd_verify(args, None, Intervention.identity())
        spec = load_spec(args)
        iv = parse_interventions(spec, args.do)
        return COMMANDS[args.command](args, spec, iv)
    except (UsageError, ModelSpecError, InterventionError) as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StructuralSolvabilityError as exc:
        print(f"❌ SCM derivation refused: {exc}", file=sys.stderr)
        return EXIT_REFUSED
    except ScmError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
