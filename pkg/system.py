"""
ODE2SCM: Executable ODE Systems

dX_i/dt = f_i(X_pa(i)) over variable blocks, with:
- syntactic parent sets and a numeric non-constancy probe
- hard interventions (dynamics clamped to 0, init set to xi)
- soft interventions (feedback term kappa * (xi - X))
- block-level and coordinate-level graphs with DOT export
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from modelspec import (
    BinOp,
    Const,
    ExprEvaluationError,
    ModelSpec,
    Var,
    compile_exprs,
    const,
    differentiate,
    free_coords,
)

logger = logging.getLogger(__name__)

NON_CONSTANCY_POINTS = 50
NON_CONSTANCY_THRESHOLD = 1e-12

Box = Tuple[Tuple[float, float], ...]


class InterventionError(ValueError):
    """Unknown target block, wrong clamp dimension or clamp value outside its domain"""


# ─── Interventions ──────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Intervention:
    """
    do(X_I = xi_I): clamp values per targeted block

    targets are kept sorted by block name so equal interventions compare equal.
    """
    targets: Tuple[Tuple[str, Tuple[float, ...]], ...] = ()

    def __post_init__(self):
        normalized = tuple(sorted((name, tuple(float(v) for v in values)) for name, values in self.targets))
        names = [name for name, _ in normalized]
        if len(set(names)) != len(names):
            raise InterventionError(f"block targeted twice in {names}")
        object.__setattr__(self, "targets", normalized)

    @classmethod
    def identity(cls) -> "Intervention":
        return cls(())

    @classmethod
    def of(cls, spec: ModelSpec, values: Mapping[str, Sequence[float]]) -> "Intervention":
        """Validated intervention from {block name: clamp vector}"""
        iv = cls(tuple((name, tuple(np.atleast_1d(np.asarray(v, dtype=float)).tolist())) for name, v in values.items()))
        iv.validate(spec)
        return iv

    @classmethod
    def from_assignments(cls, spec: ModelSpec, assignments: Mapping[str, float]) -> "Intervention":
        """
        Coordinate (or singleton block) assignments expanded to whole blocks

        Coordinates of a touched block that are not assigned are clamped to 0.0,
        so on a mass-spring chain Q2=3 means do(X2 = (3, 0)).
        """
        per_block: Dict[str, List[float]] = {}
        for name, value in assignments.items():
            if name in spec.block_index and spec.block(name).dim == 1:
                name = spec.block(name).coords[0]
            if name not in spec.coord_index:
                raise InterventionError(f"unknown coordinate '{name}'")
            block = spec.blocks[spec.block_of[name]]
            vector = per_block.setdefault(block.name, [0.0] * block.dim)
            vector[block.coords.index(name)] = float(value)
        return cls.of(spec, per_block)

    @property
    def blocks(self) -> FrozenSet[str]:
        return frozenset(name for name, _ in self.targets)

    @property
    def is_identity(self) -> bool:
        return not self.targets

    def value(self, block: str) -> Tuple[float, ...]:
        return dict(self.targets)[block]

    def as_dict(self) -> Dict[str, Tuple[float, ...]]:
        return dict(self.targets)

    def merge(self, other: "Intervention") -> "Intervention":
        """Joint intervention; later values win on shared blocks"""
        combined = self.as_dict()
        combined.update(other.as_dict())
        return Intervention(tuple(combined.items()))

    def restrict(self, blocks: Iterable[str]) -> "Intervention":
        keep = set(blocks)
        return Intervention(tuple(t for t in self.targets if t[0] in keep))

    def validate(self, spec: ModelSpec) -> None:
        for name, values in self.targets:
            if name not in spec.block_index:
                raise InterventionError(f"unknown block '{name}'")
            block = spec.block(name)
            if len(values) != block.dim:
                raise InterventionError(
                    f"block '{name}' has dimension {block.dim}, got {len(values)} clamp values"
                )
            for coord, value in zip(block.coords, values):
                domain = spec.domain(coord)
                if not domain.contains(value):
                    raise InterventionError(f"clamp value {value!r} for '{coord}' outside domain {domain}")

    def label(self) -> str:
        if not self.targets:
            return "do()"
        parts = []
        for name, values in self.targets:
            shown = repr(values[0]) if len(values) == 1 else "(" + ", ".join(repr(v) for v in values) + ")"
            parts.append(f"{name}={shown}")
        return "do(" + ", ".join(parts) + ")"

    def __str__(self) -> str:
        return self.label()


# ─── Graphs ─────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Digraph:
    """Directed graph with explicit self-loop flags; edges are (source, target) with source != target"""
    nodes: Tuple[str, ...]
    edges: Tuple[Tuple[str, str], ...]
    self_loops: FrozenSet[str] = frozenset()

    @classmethod
    def from_parents(cls, nodes: Sequence[str], parents: Mapping[str, Iterable[str]]) -> "Digraph":
        order = {n: k for k, n in enumerate(nodes)}
        edges = sorted(
            ((j, i) for i in nodes for j in parents.get(i, ()) if j != i),
            key=lambda e: (order[e[0]], order[e[1]]),
        )
        loops = frozenset(i for i in nodes if i in set(parents.get(i, ())))
        return cls(tuple(nodes), tuple(edges), loops)

    def parents(self, node: str) -> FrozenSet[str]:
        found = {j for j, i in self.edges if i == node}
        if node in self.self_loops:
            found.add(node)
        return frozenset(found)

    def without_incoming(self, targets: Iterable[str]) -> "Digraph":
        """Graph surgery: drop every edge and self-loop into targets"""
        cut = set(targets)
        return Digraph(
            self.nodes,
            tuple(e for e in self.edges if e[1] not in cut),
            frozenset(n for n in self.self_loops if n not in cut),
        )

    def to_networkx(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        graph.add_nodes_from(self.nodes)
        graph.add_edges_from(self.edges)
        graph.add_edges_from((n, n) for n in self.self_loops)
        return graph

    def is_acyclic(self) -> bool:
        """Self-loops count as cycles"""
        return not self.self_loops and nx.is_directed_acyclic_graph(self.to_networkx())

    def topological_order(self) -> List[str]:
        order = {n: k for k, n in enumerate(self.nodes)}
        return list(nx.lexicographical_topological_sort(self.to_networkx(), key=order.__getitem__))

    def to_dot(self, name: str = "G") -> str:
        """
        DOT text: node lines in node order, then edge lines (self-loops
        included) sorted by (source position, target position).
        """
        order = {n: k for k, n in enumerate(self.nodes)}
        arrows = sorted(
            list(self.edges) + [(n, n) for n in self.self_loops],
            key=lambda e: (order[e[0]], order[e[1]]),
        )
        lines = [f"digraph {name} {{"]
        lines += [f'  "{n}";' for n in self.nodes]
        lines += [f'  "{j}" -> "{i}";' for j, i in arrows]
        lines.append("}")
        return "\n".join(lines) + "\n"


# ─── Systems ────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class OdeSystem:
    """
    Executable dynamics of a ModelSpec

    clamped names the blocks fixed by a hard intervention; their dynamics are
    the constant 0 and their init is the clamp value.
    """
    spec: ModelSpec
    clamped: FrozenSet[str] = frozenset()
    warnings: Tuple[str, ...] = field(default=(), compare=False)

    @property
    def blocks(self) -> Tuple[str, ...]:
        return tuple(b.name for b in self.spec.blocks)

    @property
    def coords(self) -> Tuple[str, ...]:
        return self.spec.coords

    @property
    def dimension(self) -> int:
        return self.spec.dimension

    @property
    def x0(self) -> np.ndarray:
        return np.array(self.spec.inits, dtype=float)

    @cached_property
    def parents(self) -> Dict[str, FrozenSet[str]]:
        """Block -> parent blocks, from syntactic dependence of the block's dynamics"""
        spec = self.spec
        result = {}
        for block in spec.blocks:
            names = set()
            for coord in block.coords:
                names |= free_coords(spec.dynamics[spec.coord_index[coord]])
            result[block.name] = frozenset(spec.blocks[spec.block_of[c]].name for c in names)
        return result

    @cached_property
    def _drift(self) -> Callable[[Sequence[float]], List[float]]:
        return compile_exprs(self.spec.dynamics, self.spec.coords, self.spec.param_values)

    @cached_property
    def jacobian_exprs(self):
        return tuple(tuple(differentiate(f, c) for c in self.spec.coords) for f in self.spec.dynamics)

    @cached_property
    def _jacobian(self) -> Callable[[Sequence[float]], List[float]]:
        flat = [entry for row in self.jacobian_exprs for entry in row]
        return compile_exprs(flat, self.spec.coords, self.spec.param_values)

    def drift(self, x: Sequence[float]) -> np.ndarray:
        return np.array(self._drift(x), dtype=float)

    def jacobian(self, x: Sequence[float]) -> np.ndarray:
        n = self.dimension
        return np.array(self._jacobian(x), dtype=float).reshape(n, n)

    def clamp_vector(self) -> Dict[str, Tuple[float, ...]]:
        """Clamp values of hard-clamped blocks (their stored inits)"""
        spec = self.spec
        return {name: tuple(spec.inits[k] for k in spec.indices(name)) for name in sorted(self.clamped)}


def default_box(spec: ModelSpec, scale: float = 3.0) -> Box:
    """Per-coordinate sampling box: init +- scale*max(|init|, 1), intersected with the domain"""
    box = []
    for value, domain in zip(spec.inits, spec.domains):
        half = scale * max(abs(value), 1.0)
        box.append(domain.clip(value - half, value + half))
    return tuple(box)


def sample_box(rng: np.random.Generator, box: Box) -> np.ndarray:
    lows = np.array([b[0] for b in box], dtype=float)
    highs = np.array([b[1] for b in box], dtype=float)
    return rng.uniform(lows, highs)


def _probe_non_constancy(spec: ModelSpec, seed: int) -> List[str]:
    box = default_box(spec)
    evaluate = compile_exprs(spec.dynamics, spec.coords, spec.param_values)
    rng = np.random.default_rng(seed)
    warnings = []
    for block in spec.blocks:
        rows = spec.indices(block.name)
        claimed = set()
        for r in rows:
            claimed |= free_coords(spec.dynamics[r])
        for coord in sorted(claimed, key=spec.coord_index.__getitem__):
            c = spec.coord_index[coord]
            largest = 0.0
            for _ in range(NON_CONSTANCY_POINTS):
                point = sample_box(rng, box)
                moved = point.copy()
                moved[c] = rng.uniform(*box[c])
                try:
                    before = np.array(evaluate(point))[rows]
                    after = np.array(evaluate(moved))[rows]
                except ExprEvaluationError:
                    continue
                largest = max(largest, float(np.max(np.abs(after - before))))
            if largest <= NON_CONSTANCY_THRESHOLD:
                message = (
                    f"dynamics of block '{block.name}' show no variation in '{coord}' "
                    f"over {NON_CONSTANCY_POINTS} probes (semantic constancy suspected)"
                )
                logger.warning(message)
                warnings.append(message)
    return warnings


def build_system(spec: ModelSpec, seed: int = 0) -> OdeSystem:
    """
    Executable system with syntactic parent sets

    Every claimed parent coordinate is probed at 50 random points; a claimed
    dependence that never moves the dynamics is reported as a warning.
    """
    return OdeSystem(spec, frozenset(), tuple(_probe_non_constancy(spec, seed)))


def drift(sys: OdeSystem, x: Sequence[float]) -> np.ndarray:
    return sys.drift(x)


def intervene_hard(sys: OdeSystem, iv: Intervention) -> OdeSystem:
    """Clamp the targeted blocks: dynamics 0, init xi, no parents"""
    iv.validate(sys.spec)
    if iv.is_identity:
        return sys
    spec = sys.spec
    dynamics = list(spec.dynamics)
    inits = list(spec.inits)
    for name, values in iv.targets:
        for k, value in zip(spec.indices(name), values):
            dynamics[k] = Const(0.0)
            inits[k] = value
    clamped_spec = replace(spec, dynamics=tuple(dynamics), inits=tuple(inits))
    return OdeSystem(clamped_spec, sys.clamped | iv.blocks, sys.warnings)


def intervene_soft(sys: OdeSystem, iv: Intervention, kappa: float) -> OdeSystem:
    """Add kappa * (xi - X) to each targeted coordinate's dynamics; inits unchanged"""
    if not kappa > 0:
        raise InterventionError(f"kappa must be positive, got {kappa!r}")
    iv.validate(sys.spec)
    spec = sys.spec
    dynamics = list(spec.dynamics)
    for name, values in iv.targets:
        for k, value in zip(spec.indices(name), values):
            feedback = BinOp("*", Const(float(kappa)), BinOp("-", const(value), Var(spec.coords[k])))
            dynamics[k] = BinOp("+", dynamics[k], feedback)
    return OdeSystem(replace(spec, dynamics=tuple(dynamics)), sys.clamped, sys.warnings)


def graph(sys: OdeSystem) -> Digraph:
    """Block-level graph: j -> i iff block j is a parent of block i"""
    return Digraph.from_parents(sys.blocks, sys.parents)


def coordinate_graph(sys: OdeSystem) -> Digraph:
    spec = sys.spec
    parents = {c: free_coords(f) for c, f in zip(spec.coords, spec.dynamics)}
    return Digraph.from_parents(spec.coords, parents)


XiSampler = Callable[[np.random.Generator, Iterable[str]], Intervention]


class BoxXiSampler:
    """
    Clamp values for a set of target blocks, uniform over a per-coordinate box

    Coordinates outside random_coords are pinned to 0.0. The box corners are
    offered as deterministic extreme draws (see draw_interventions).
    """

    def __init__(
        self,
        spec: ModelSpec,
        random_coords: Optional[Iterable[str]] = None,
        box: Optional[Mapping[str, Tuple[float, float]]] = None,
    ):
        self.spec = spec
        self.ranges = dict(zip(spec.coords, default_box(spec)))
        if box:
            self.ranges.update({k: (float(lo), float(hi)) for k, (lo, hi) in box.items()})
        self.varying = set(spec.coords if random_coords is None else random_coords)

    def _ordered(self, targets: Iterable[str]) -> List[str]:
        return sorted(targets, key=self.spec.block_index.__getitem__)

    def __call__(self, rng: np.random.Generator, targets: Iterable[str]) -> Intervention:
        values = {}
        for name in self._ordered(targets):
            values[name] = [
                float(rng.uniform(*self.ranges[c])) if c in self.varying else 0.0
                for c in self.spec.block(name).coords
            ]
        return Intervention.of(self.spec, values)

    def extremes(self, targets: Iterable[str]) -> List[Intervention]:
        """Lower and upper box corners that lie inside the domains"""
        corners = []
        for side in (0, 1):
            values = {
                name: [self.ranges[c][side] if c in self.varying else 0.0 for c in self.spec.block(name).coords]
                for name in self._ordered(targets)
            }
            try:
                corners.append(Intervention.of(self.spec, values))
            except InterventionError:
                continue
        return corners


def box_xi_sampler(
    spec: ModelSpec,
    random_coords: Optional[Iterable[str]] = None,
    box: Optional[Mapping[str, Tuple[float, float]]] = None,
) -> BoxXiSampler:
    """
    Default clamp-value sampler

    Args:
        spec: model the interventions apply to
        random_coords: coordinates that receive random values; every other
            coordinate of a targeted block is pinned to 0.0 (default: all)
        box: per-coordinate sampling range overriding default_box
    """
    return BoxXiSampler(spec, random_coords, box)


def draw_interventions(
    sampler: XiSampler, target: Iterable[str], count: int, seed_key: Sequence[int]
) -> List[Intervention]:
    """
    count clamp-value draws for one target set

    Box samplers contribute their corners first; remaining draws come from
    default_rng([*seed_key, d]). The empty target set yields the identity once.
    """
    target = list(target)
    if not target:
        return [Intervention.identity()]
    draws = sampler.extremes(target)[:count] if isinstance(sampler, BoxXiSampler) else []
    for d in range(len(draws), count):
        draws.append(sampler(np.random.default_rng([*seed_key, d]), target))
    return draws
