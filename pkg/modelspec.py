"""
ODE2SCM: Model Specification Layer

Expression trees, the line-oriented model DSL and the built-in systems:
- Expr AST (constants, coordinate refs, parameter refs, +, -, *, /, integer powers)
- parse_model / print_model (canonical form, round-trips exactly)
- exact evaluation with reported division by zero
- symbolic differentiation and affine decomposition
- Lotka-Volterra and damped mass-spring chain builders

DSL example (Lotka-Volterra):

    param th11 = 1.0
    var X1 in [0,inf)
    dyn X1 = X1 * (th11 - th12 * X2)
    init X1 = 1.0
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Callable, Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np


# ─── Errors ─────────────────────────────────────────────────────────────────

class ModelSpecError(ValueError):
    """Invalid model source or model construction"""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"line {line}, column {column}: {message}"
        super().__init__(message)


class ModelSyntaxError(ModelSpecError):
    pass


class UnknownIdentifierError(ModelSpecError):
    pass


class DuplicateDeclarationError(ModelSpecError):
    pass


class MissingDefinitionError(ModelSpecError):
    pass


class DomainError(ModelSpecError):
    pass


class ModelParameterError(ModelSpecError):
    pass


class ExprEvaluationError(ArithmeticError):
    pass


class DivisionByZeroError(ExprEvaluationError, ZeroDivisionError):
    pass


class UnboundNameError(ExprEvaluationError, KeyError):
    def __str__(self) -> str:
        return f"unbound name '{self.args[0]}'"


# ─── Expression tree ────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Const:
    """Nonnegative finite literal; negative numbers are Neg(Const)"""
    value: float

    def __post_init__(self):
        value = float(self.value)
        if not math.isfinite(value) or value < 0:
            raise ValueError(f"Const must be finite and nonnegative, got {self.value!r}")
        object.__setattr__(self, "value", value + 0.0)


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Param:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Pow:
    base: "Expr"
    exponent: int


Expr = Union[Const, Var, Param, Neg, BinOp, Pow]

ZERO = Const(0.0)
ONE = Const(1.0)


def const(value: float) -> Expr:
    """Signed literal"""
    value = float(value)
    return Neg(Const(-value)) if value < 0 else Const(value)


def _apply(op: str, left: float, right: float) -> float:
    if op == "+":
        return left + right
    if op == "-":
        return left - right
    if op == "*":
        return left * right
    if right == 0.0:
        raise DivisionByZeroError("division by zero")
    return left / right


def _power(base: float, exponent: int) -> float:
    try:
        return base ** exponent
    except OverflowError as exc:
        raise ExprEvaluationError(f"overflow: {base!r} ^ {exponent}: {exc}") from None


def eval_expr(e: Expr, env: Mapping[str, float]) -> float:
    """Evaluate in double precision; env binds coordinate and parameter names"""
    if isinstance(e, Const):
        return e.value
    if isinstance(e, (Var, Param)):
        try:
            return float(env[e.name])
        except KeyError:
            raise UnboundNameError(e.name) from None
    if isinstance(e, Neg):
        return -eval_expr(e.arg, env)
    if isinstance(e, Pow):
        base = eval_expr(e.base, env)
        if base == 0.0 and e.exponent < 0:
            raise DivisionByZeroError(f"0 raised to negative power in {print_expr(e)}")
        return _power(base, e.exponent)
    left = eval_expr(e.left, env)
    right = eval_expr(e.right, env)
    if e.op == "/" and right == 0.0:
        raise DivisionByZeroError(f"division by zero in {print_expr(e)}")
    return _apply(e.op, left, right)


def _children(e: Expr) -> Tuple[Expr, ...]:
    if isinstance(e, Neg):
        return (e.arg,)
    if isinstance(e, Pow):
        return (e.base,)
    if isinstance(e, BinOp):
        return (e.left, e.right)
    return ()


@lru_cache(maxsize=None)
def free_coords(e: Expr) -> FrozenSet[str]:
    """Coordinate names syntactically present in e"""
    if isinstance(e, Var):
        return frozenset((e.name,))
    names: FrozenSet[str] = frozenset()
    for child in _children(e):
        names |= free_coords(child)
    return names


@lru_cache(maxsize=None)
def free_params(e: Expr) -> FrozenSet[str]:
    if isinstance(e, Param):
        return frozenset((e.name,))
    names: FrozenSet[str] = frozenset()
    for child in _children(e):
        names |= free_params(child)
    return names


def substitute(e: Expr, mapping: Mapping[str, Expr]) -> Expr:
    """Replace coordinate references by expressions"""
    if isinstance(e, Var):
        return mapping.get(e.name, e)
    if isinstance(e, Neg):
        return Neg(substitute(e.arg, mapping))
    if isinstance(e, Pow):
        return Pow(substitute(e.base, mapping), e.exponent)
    if isinstance(e, BinOp):
        return BinOp(e.op, substitute(e.left, mapping), substitute(e.right, mapping))
    return e


def _numeric(e: Expr) -> Optional[float]:
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Neg) and isinstance(e.arg, Const):
        return -e.arg.value
    return None


def _negate(e: Expr) -> Expr:
    value = _numeric(e)
    if value is not None:
        return const(-value)
    if isinstance(e, Neg):
        return e.arg
    return Neg(e)


def simplify(e: Expr) -> Expr:
    """Constant folding and 0/1 identities; nothing more"""
    if isinstance(e, (Const, Var, Param)):
        return e
    if isinstance(e, Neg):
        return _negate(simplify(e.arg))
    if isinstance(e, Pow):
        base = simplify(e.base)
        if e.exponent == 0:
            return ONE
        if e.exponent == 1:
            return base
        value = _numeric(base)
        if value is not None and not (value == 0.0 and e.exponent < 0):
            # left unfolded on overflow so evaluation reports it
            try:
                return const(_power(value, e.exponent))
            except ExprEvaluationError:
                pass
        return Pow(base, e.exponent)

    left, right = simplify(e.left), simplify(e.right)
    lv, rv = _numeric(left), _numeric(right)
    op = e.op
    if lv is not None and rv is not None and not (op == "/" and rv == 0.0):
        return const(_apply(op, lv, rv))
    if op == "+":
        if lv == 0.0:
            return right
        if rv == 0.0:
            return left
        if isinstance(right, Neg):
            return BinOp("-", left, right.arg)
    elif op == "-":
        if rv == 0.0:
            return left
        if lv == 0.0:
            return _negate(right)
    elif op == "*":
        if lv == 0.0 or rv == 0.0:
            return ZERO
        if lv == 1.0:
            return right
        if rv == 1.0:
            return left
        if lv == -1.0:
            return _negate(right)
        if rv == -1.0:
            return _negate(left)
    elif op == "/":
        if lv == 0.0:
            return ZERO
        if rv == 1.0:
            return left
    return BinOp(op, left, right)


def _derive(e: Expr, coord: str) -> Expr:
    if coord not in free_coords(e):
        return ZERO
    if isinstance(e, Var):
        return ONE
    if isinstance(e, Neg):
        return Neg(_derive(e.arg, coord))
    if isinstance(e, Pow):
        inner = BinOp("*", Const(abs(e.exponent)), Pow(e.base, e.exponent - 1))
        if e.exponent < 0:
            inner = Neg(inner)
        return BinOp("*", inner, _derive(e.base, coord))
    dl, dr = _derive(e.left, coord), _derive(e.right, coord)
    if e.op in "+-":
        return BinOp(e.op, dl, dr)
    if e.op == "*":
        return BinOp("+", BinOp("*", dl, e.right), BinOp("*", e.left, dr))
    numerator = BinOp("-", BinOp("*", dl, e.right), BinOp("*", e.left, dr))
    return BinOp("/", numerator, Pow(e.right, 2))


def differentiate(e: Expr, coord: str) -> Expr:
    """Symbolic partial derivative de/dcoord"""
    return simplify(_derive(e, coord))


def affine_decomposition(
    exprs: Sequence[Expr], coords: Sequence[str]
) -> Optional[Tuple[Tuple[Tuple[Expr, ...], ...], Tuple[Expr, ...]]]:
    """
    Split exprs = A·coords + b when the vector is affine in coords.

    Returns (A, b) with A[r][c] = d exprs[r] / d coords[c], or None when some
    coefficient still depends on coords (the test is syntactic and conservative).
    """
    own = set(coords)
    rows = []
    for e in exprs:
        row = tuple(differentiate(e, c) for c in coords)
        if any(free_coords(entry) & own for entry in row):
            return None
        rows.append(row)
    zeros = {c: ZERO for c in coords}
    offset = tuple(simplify(substitute(e, zeros)) for e in exprs)
    return tuple(rows), offset


# ─── Printing ───────────────────────────────────────────────────────────────

_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2}
_ATOM = 5


def _format_number(value: float) -> str:
    return repr(float(value))


def _render(e: Expr) -> Tuple[str, int]:
    if isinstance(e, Const):
        return _format_number(e.value), _ATOM
    if isinstance(e, (Var, Param)):
        return e.name, _ATOM
    if isinstance(e, Neg):
        text, prec = _render(e.arg)
        if prec < 4:
            text = f"({text})"
        return f"-{text}", 3
    if isinstance(e, Pow):
        text, prec = _render(e.base)
        if prec < _ATOM:
            text = f"({text})"
        return f"{text}^{e.exponent}", 4
    prec = _PRECEDENCE[e.op]
    left, lp = _render(e.left)
    right, rp = _render(e.right)
    if lp < prec:
        left = f"({left})"
    if rp <= prec:
        right = f"({right})"
    return f"{left} {e.op} {right}", prec


def print_expr(e: Expr) -> str:
    """Canonical text; parse_expr(print_expr(e)) == e"""
    return _render(e)[0]


# ─── Model types ────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Interval:
    lower: float
    upper: float
    lower_closed: bool = True
    upper_closed: bool = True

    @classmethod
    def real_line(cls) -> "Interval":
        return cls(-math.inf, math.inf, False, False)

    def contains(self, value: float) -> bool:
        if math.isnan(value):
            return False
        above = value >= self.lower if self.lower_closed else value > self.lower
        below = value <= self.upper if self.upper_closed else value < self.upper
        return above and below

    def clip(self, low: float, high: float) -> Tuple[float, float]:
        """Intersect [low, high] with the interval's bounds"""
        return max(low, self.lower), min(high, self.upper)

    def __str__(self) -> str:
        left = "[" if self.lower_closed else "("
        right = "]" if self.upper_closed else ")"
        return f"{left}{_format_number(self.lower)},{_format_number(self.upper)}{right}"


@dataclass(frozen=True)
class Block:
    name: str
    coords: Tuple[str, ...]

    @property
    def dim(self) -> int:
        return len(self.coords)


@dataclass(frozen=True)
class ModelSpec:
    """
    Parsed model: ordered variable blocks, parameters and per-coordinate
    domain, dynamics and initial value (all in state order).
    """
    blocks: Tuple[Block, ...]
    params: Tuple[Tuple[str, float], ...]
    domains: Tuple[Interval, ...]
    dynamics: Tuple[Expr, ...]
    inits: Tuple[float, ...]
    name: str = field(default="model", compare=False)

    def __post_init__(self):
        n = len(self.coords)
        if len(set(self.coords)) != n:
            raise DuplicateDeclarationError("coordinate names must be unique across blocks")
        if not (len(self.domains) == len(self.dynamics) == len(self.inits) == n):
            raise MissingDefinitionError("every coordinate needs one domain, dynamics and init")

    @cached_property
    def coords(self) -> Tuple[str, ...]:
        return tuple(c for block in self.blocks for c in block.coords)

    @cached_property
    def coord_index(self) -> Dict[str, int]:
        return {c: i for i, c in enumerate(self.coords)}

    @cached_property
    def block_index(self) -> Dict[str, int]:
        return {block.name: i for i, block in enumerate(self.blocks)}

    @cached_property
    def block_of(self) -> Dict[str, int]:
        """Coordinate name -> block index"""
        return {c: i for i, block in enumerate(self.blocks) for c in block.coords}

    @property
    def param_values(self) -> Dict[str, float]:
        return dict(self.params)

    @property
    def dimension(self) -> int:
        return len(self.coords)

    def block(self, name: str) -> Block:
        return self.blocks[self.block_index[name]]

    def indices(self, block_name: str) -> List[int]:
        """State-vector positions of a block's coordinates"""
        return [self.coord_index[c] for c in self.block(block_name).coords]

    def domain(self, coord: str) -> Interval:
        return self.domains[self.coord_index[coord]]


# ─── Lexing ─────────────────────────────────────────────────────────────────

_TOKEN_TYPES = [
    ("NUMBER", r"\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?"),
    ("NAME", r"[A-Za-z_][A-Za-z0-9_]*"),
    ("OP", r"[-+*/^(),=\[\]]"),
    ("SKIP", r"[ \t\r]+"),
    ("MISMATCH", r"."),
]
_TOKEN_PATTERN = re.compile("|".join(f"(?P<{name}>{pattern})" for name, pattern in _TOKEN_TYPES))
_KEYWORDS = ("param", "var", "block", "dyn", "init")


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    line: int
    column: int


def _tokenize(source: str, line: int) -> List[_Token]:
    source = source.split("#", 1)[0]
    tokens = []
    for match in _TOKEN_PATTERN.finditer(source):
        kind = match.lastgroup
        column = match.start() + 1
        if kind == "SKIP":
            continue
        if kind == "MISMATCH":
            raise ModelSyntaxError(f"unexpected character '{match.group()}'", line, column)
        tokens.append(_Token(kind, match.group(), line, column))
    return tokens


class _TokenStream:
    def __init__(self, tokens: List[_Token], line: int, end_column: int):
        self.tokens = tokens
        self.position = 0
        self.line = line
        self.end_column = end_column

    @property
    def finished(self) -> bool:
        return self.position >= len(self.tokens)

    def peek(self) -> Optional[_Token]:
        return None if self.finished else self.tokens[self.position]

    def accept(self, *texts: str) -> Optional[_Token]:
        token = self.peek()
        if token is not None and token.kind == "OP" and token.text in texts:
            self.position += 1
            return token
        return None

    def expect(self, text: str) -> _Token:
        token = self.accept(text)
        if token is None:
            raise self.error(f"expected '{text}'")
        return token

    def expect_name(self, what: str = "name") -> _Token:
        token = self.peek()
        if token is None or token.kind != "NAME":
            raise self.error(f"expected {what}")
        self.position += 1
        return token

    def next(self) -> _Token:
        token = self.peek()
        if token is None:
            raise self.error("unexpected end of line")
        self.position += 1
        return token

    def expect_end(self) -> None:
        if not self.finished:
            raise self.error("unexpected trailing input")

    def error(self, message: str) -> ModelSyntaxError:
        token = self.peek()
        if token is None:
            return ModelSyntaxError(message, self.line, self.end_column)
        return ModelSyntaxError(f"{message} (found '{token.text}')", token.line, token.column)


# ─── Parsing ────────────────────────────────────────────────────────────────

Resolver = Callable[[_Token], Expr]


def _parse_expression(stream: _TokenStream, resolve: Resolver) -> Expr:
    node = _parse_term(stream, resolve)
    while True:
        token = stream.accept("+", "-")
        if token is None:
            return node
        node = BinOp(token.text, node, _parse_term(stream, resolve))


def _parse_term(stream: _TokenStream, resolve: Resolver) -> Expr:
    node = _parse_factor(stream, resolve)
    while True:
        token = stream.accept("*", "/")
        if token is None:
            return node
        node = BinOp(token.text, node, _parse_factor(stream, resolve))


def _parse_factor(stream: _TokenStream, resolve: Resolver) -> Expr:
    negate = stream.accept("-") is not None
    node = _parse_atom(stream, resolve)
    if stream.accept("^"):
        node = Pow(node, _parse_integer(stream))
    return Neg(node) if negate else node


def _parse_integer(stream: _TokenStream) -> int:
    sign = -1 if stream.accept("-") else 1
    token = stream.peek()
    if token is None or token.kind != "NUMBER" or not token.text.isdigit():
        raise stream.error("expected integer exponent")
    stream.position += 1
    return sign * int(token.text)


def _parse_atom(stream: _TokenStream, resolve: Resolver) -> Expr:
    token = stream.peek()
    if token is None:
        raise stream.error("unexpected end of expression")
    if token.kind == "NUMBER":
        stream.position += 1
        return Const(float(token.text))
    if token.kind == "NAME":
        stream.position += 1
        return resolve(token)
    if stream.accept("("):
        node = _parse_expression(stream, resolve)
        stream.expect(")")
        return node
    raise stream.error("expected number, name or '('")


def _parse_real(stream: _TokenStream, allow_infinite: bool = False) -> float:
    sign = 1.0
    if stream.accept("-"):
        sign = -1.0
    elif stream.accept("+"):
        pass
    token = stream.peek()
    if token is not None and token.kind == "NUMBER":
        stream.position += 1
        return sign * float(token.text)
    if allow_infinite and token is not None and token.text == "inf":
        stream.position += 1
        return sign * math.inf
    raise stream.error("expected real number")


def _parse_interval(stream: _TokenStream) -> Interval:
    opening = stream.accept("[", "(")
    if opening is None:
        raise stream.error("expected interval")
    lower = _parse_real(stream, allow_infinite=True)
    stream.expect(",")
    upper = _parse_real(stream, allow_infinite=True)
    closing = stream.accept("]", ")")
    if closing is None:
        raise stream.error("expected ']' or ')'")
    lower_closed, upper_closed = opening.text == "[", closing.text == "]"
    if (lower_closed and math.isinf(lower)) or (upper_closed and math.isinf(upper)):
        raise ModelSyntaxError("closed bracket at an infinite bound", opening.line, opening.column)
    if lower > upper or (lower == upper and not (lower_closed and upper_closed)):
        raise DomainError("empty interval", opening.line, opening.column)
    return Interval(lower, upper, lower_closed, upper_closed)


def _stream_for(text: str, line: int) -> _TokenStream:
    return _TokenStream(_tokenize(text, line), line, len(text.split("#", 1)[0]) + 1)


def parse_expr(
    text: str, coords: Sequence[str] = (), params: Sequence[str] = ()
) -> Expr:
    """Parse a standalone expression; names must be known coords or params"""
    coord_set, param_set = set(coords), set(params)

    def resolve(token: _Token) -> Expr:
        if token.text in coord_set:
            return Var(token.text)
        if token.text in param_set:
            return Param(token.text)
        raise UnknownIdentifierError(f"unknown identifier '{token.text}'", token.line, token.column)

    stream = _stream_for(text, 1)
    node = _parse_expression(stream, resolve)
    stream.expect_end()
    return node


def parse_model(text: str, name: str = "model") -> ModelSpec:
    """
    Parse and validate model DSL text

    Args:
        text: UTF-8 model source
        name: identifier carried on the ModelSpec (not part of equality)

    Returns:
        validated ModelSpec

    Raises:
        ModelSyntaxError, UnknownIdentifierError, DuplicateDeclarationError,
        MissingDefinitionError, DomainError
    """
    params: Dict[str, float] = {}
    var_order: List[str] = []
    domains: Dict[str, Interval] = {}
    block_decls: List[Tuple[str, Tuple[str, ...], _Token]] = []
    deferred: List[Tuple[str, _TokenStream]] = []

    def declared(token: _Token) -> None:
        if token.text in params or token.text in domains or any(b[0] == token.text for b in block_decls):
            raise DuplicateDeclarationError(
                f"duplicate declaration of '{token.text}'", token.line, token.column
            )

    for line_number, raw in enumerate(text.splitlines(), start=1):
        stream = _stream_for(raw, line_number)
        if stream.finished:
            continue
        keyword = stream.expect_name("declaration keyword")
        if keyword.text not in _KEYWORDS:
            raise ModelSyntaxError(f"unknown declaration '{keyword.text}'", keyword.line, keyword.column)

        if keyword.text == "param":
            target = stream.expect_name("parameter name")
            declared(target)
            stream.expect("=")
            value = _parse_real(stream)
            stream.expect_end()
            params[target.text] = value
        elif keyword.text == "var":
            target = stream.expect_name("coordinate name")
            declared(target)
            marker = stream.expect_name("'in'")
            if marker.text != "in":
                raise ModelSyntaxError("expected 'in'", marker.line, marker.column)
            domains[target.text] = _parse_interval(stream)
            stream.expect_end()
            var_order.append(target.text)
        elif keyword.text == "block":
            target = stream.expect_name("block name")
            declared(target)
            stream.expect("=")
            stream.expect("(")
            members = [stream.expect_name("coordinate name")]
            while stream.accept(","):
                members.append(stream.expect_name("coordinate name"))
            stream.expect(")")
            stream.expect_end()
            block_decls.append((target.text, tuple(m.text for m in members), target))
        else:
            deferred.append((keyword.text, stream))

    if not var_order:
        raise MissingDefinitionError("model declares no variables")

    # block names may shadow nothing; members must be declared vars used once
    grouped: Dict[str, str] = {}
    for block_name, members, token in block_decls:
        if block_name in domains:
            raise DuplicateDeclarationError(
                f"block name '{block_name}' collides with a coordinate", token.line, token.column
            )
        for member in members:
            if member not in domains:
                raise UnknownIdentifierError(
                    f"block '{block_name}' references unknown coordinate '{member}'",
                    token.line, token.column,
                )
            if member in grouped:
                raise DuplicateDeclarationError(
                    f"coordinate '{member}' appears in more than one block", token.line, token.column
                )
            grouped[member] = block_name

    declared_blocks = {b[0]: b[1] for b in block_decls}
    blocks: List[Block] = []
    emitted = set()
    for coord in var_order:
        owner = grouped.get(coord)
        if owner is None:
            blocks.append(Block(coord, (coord,)))
        elif owner not in emitted:
            emitted.add(owner)
            blocks.append(Block(owner, declared_blocks[owner]))
    coords = [c for block in blocks for c in block.coords]

    def resolve(token: _Token) -> Expr:
        if token.text in domains:
            return Var(token.text)
        if token.text in params:
            return Param(token.text)
        raise UnknownIdentifierError(f"unknown identifier '{token.text}'", token.line, token.column)

    dynamics: Dict[str, Expr] = {}
    inits: Dict[str, float] = {}
    for keyword, stream in deferred:
        target = stream.expect_name("coordinate name")
        if target.text not in domains:
            raise UnknownIdentifierError(f"unknown coordinate '{target.text}'", target.line, target.column)
        table = dynamics if keyword == "dyn" else inits
        if target.text in table:
            raise DuplicateDeclarationError(
                f"duplicate {keyword} for '{target.text}'", target.line, target.column
            )
        stream.expect("=")
        if keyword == "dyn":
            dynamics[target.text] = _parse_expression(stream, resolve)
        else:
            value = _parse_real(stream)
            if not domains[target.text].contains(value):
                raise DomainError(
                    f"init {value!r} of '{target.text}' outside domain {domains[target.text]}",
                    target.line, target.column,
                )
            inits[target.text] = value
        stream.expect_end()

    for coord in coords:
        if coord not in dynamics:
            raise MissingDefinitionError(f"coordinate '{coord}' has no dyn declaration")
        if coord not in inits:
            raise MissingDefinitionError(f"coordinate '{coord}' has no init declaration")

    return ModelSpec(
        blocks=tuple(blocks),
        params=tuple(sorted(params.items())),
        domains=tuple(domains[c] for c in coords),
        dynamics=tuple(dynamics[c] for c in coords),
        inits=tuple(inits[c] for c in coords),
        name=name,
    )


def print_model(spec: ModelSpec) -> str:
    """Canonical DSL text: params sorted, everything else in state order"""
    lines = [f"param {name} = {_format_number(value)}" for name, value in spec.params]
    for coord, domain in zip(spec.coords, spec.domains):
        lines.append(f"var {coord} in {domain}")
    for block in spec.blocks:
        if block.coords != (block.name,):
            lines.append(f"block {block.name} = ({', '.join(block.coords)})")
    for coord, expr in zip(spec.coords, spec.dynamics):
        lines.append(f"dyn {coord} = {print_expr(expr)}")
    for coord, value in zip(spec.coords, spec.inits):
        lines.append(f"init {coord} = {_format_number(value)}")
    return "\n".join(lines) + "\n"


def load_model(path: Union[str, Path]) -> ModelSpec:
    """Read a model file"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Model file not found: {path}")
    return parse_model(path.read_text(encoding="utf-8"), name=path.stem)


# ─── Compilation ────────────────────────────────────────────────────────────

def _source(e: Expr, index: Mapping[str, int], params: Mapping[str, float]) -> str:
    if isinstance(e, Const):
        return repr(e.value)
    if isinstance(e, Var):
        return f"x[{index[e.name]}]"
    if isinstance(e, Param):
        return f"({float(params[e.name])!r})"
    if isinstance(e, Neg):
        return f"(-{_source(e.arg, index, params)})"
    if isinstance(e, Pow):
        return f"({_source(e.base, index, params)} ** {e.exponent})"
    return f"({_source(e.left, index, params)} {e.op} {_source(e.right, index, params)})"


def compile_exprs(
    exprs: Sequence[Expr], coords: Sequence[str], params: Mapping[str, float]
) -> Callable[[Sequence[float]], List[float]]:
    """
    Lower an expression vector to a Python callable over a flat state.

    Parameters are inlined. Arithmetic runs on Python floats so division by
    zero raises (as DivisionByZeroError) instead of producing inf/nan.
    """
    index = {c: i for i, c in enumerate(coords)}
    body = ", ".join(_source(e, index, params) for e in exprs)
    namespace: Dict[str, object] = {}
    exec(compile(f"def _compiled(x):\n    return [{body}]\n", "<ode2scm>", "exec"), namespace)
    raw = namespace["_compiled"]

    def evaluate(x: Sequence[float]) -> List[float]:
        try:
            return raw(np.asarray(x, dtype=float).tolist())
        except ZeroDivisionError as exc:
            raise DivisionByZeroError(str(exc)) from None
        except OverflowError as exc:
            raise ExprEvaluationError(f"overflow: {exc}") from None

    return evaluate


# ─── Built-in systems ───────────────────────────────────────────────────────

def builtin_lotka_volterra(
    th11: float = 1.0,
    th12: float = 1.0,
    th21: float = 1.0,
    th22: float = 1.0,
    a: float = 1.0,
    b: float = 1.0,
) -> ModelSpec:
    """
    Predator-prey model on [0,inf)^2

        dX1/dt =  X1 (th11 - th12 X2)
        dX2/dt = -X2 (th22 - th21 X1)
    """
    for label, value in (("th11", th11), ("th12", th12), ("th21", th21), ("th22", th22)):
        if not value > 0:
            raise ModelParameterError(f"{label} must be positive, got {value!r}")
    if a < 0 or b < 0:
        raise ModelParameterError("initial populations must be nonnegative")
    text = "\n".join([
        f"param th11 = {float(th11)!r}",
        f"param th12 = {float(th12)!r}",
        f"param th21 = {float(th21)!r}",
        f"param th22 = {float(th22)!r}",
        "var X1 in [0,inf)",
        "var X2 in [0,inf)",
        "dyn X1 = X1 * (th11 - th12 * X2)",
        "dyn X2 = -X2 * (th22 - th21 * X1)",
        f"init X1 = {float(a)!r}",
        f"init X2 = {float(b)!r}",
    ])
    return parse_model(text, name="lotka-volterra")


def _per_mass(values: Optional[Sequence[float]], count: int, default: float, label: str) -> List[float]:
    if values is None:
        return [default] * count
    values = [float(v) for v in values]
    if len(values) != count:
        raise ModelParameterError(f"expected {count} {label}, got {len(values)}")
    return values


def builtin_mass_spring(
    D: int = 2,
    masses: Optional[Sequence[float]] = None,
    springs: Optional[Sequence[float]] = None,
    lengths: Optional[Sequence[float]] = None,
    frictions: Optional[Sequence[float]] = None,
    wall: Optional[float] = None,
    positions: Optional[Sequence[float]] = None,
    momenta: Optional[Sequence[float]] = None,
) -> ModelSpec:
    """
    Chain of D damped masses between fixed walls at 0 and L

    Args:
        D: number of masses (>= 1)
        masses: m_1..m_D (default 1)
        springs: k_0..k_D (default 1)
        lengths: rest lengths l_0..l_D (default 1)
        frictions: b_1..b_D (default 1)
        wall: L (default sum of rest lengths)
        positions / momenta: initial Q_i / P_i

    Block X_i = (Q_i, P_i):
        dQ_i/dt = P_i / m_i
        dP_i/dt = k_i (Q_{i+1} - Q_i - l_i) - k_{i-1} (Q_i - Q_{i-1} - l_{i-1}) - b_i / m_i P_i
    with Q_0 = 0 and Q_{D+1} = L.
    """
    if int(D) != D or D < 1:
        raise ModelParameterError(f"D must be a positive integer, got {D!r}")
    D = int(D)
    m = _per_mass(masses, D, 1.0, "masses")
    k = _per_mass(springs, D + 1, 1.0, "spring constants")
    l = _per_mass(lengths, D + 1, 1.0, "rest lengths")
    b = _per_mass(frictions, D, 1.0, "friction coefficients")
    for label, group in (("mass", m), ("spring constant", k), ("friction", b)):
        if any(not v > 0 for v in group):
            raise ModelParameterError(f"every {label} must be positive")
    if any(v < 0 for v in l):
        raise ModelParameterError("rest lengths must be nonnegative")
    L = float(sum(l)) if wall is None else float(wall)
    if not math.isfinite(L):
        raise ModelParameterError("wall position must be finite")
    q0 = _per_mass(positions, D, 0.0, "initial positions") if positions is not None else [
        L * (i + 0.5) / (D + 1) for i in range(D)
    ]
    p0 = _per_mass(momenta, D, 0.0, "initial momenta")

    lines = [f"# damped mass-spring chain, D={D}", f"param L = {L!r}"]
    lines += [f"param k{i} = {k[i]!r}" for i in range(D + 1)]
    lines += [f"param l{i} = {l[i]!r}" for i in range(D + 1)]
    lines += [f"param m{i + 1} = {m[i]!r}" for i in range(D)]
    lines += [f"param b{i + 1} = {b[i]!r}" for i in range(D)]
    for i in range(1, D + 1):
        lines += [f"var Q{i} in (-inf,inf)", f"var P{i} in (-inf,inf)", f"block X{i} = (Q{i}, P{i})"]
    for i in range(1, D + 1):
        right = f"(L - Q{i} - l{i})" if i == D else f"(Q{i + 1} - Q{i} - l{i})"
        left = f"(Q{i} - l{i - 1})" if i == 1 else f"(Q{i} - Q{i - 1} - l{i - 1})"
        lines.append(f"dyn Q{i} = P{i} / m{i}")
        lines.append(f"dyn P{i} = k{i} * {right} - k{i - 1} * {left} - b{i} / m{i} * P{i}")
    for i in range(1, D + 1):
        lines += [f"init Q{i} = {q0[i - 1]!r}", f"init P{i} = {p0[i - 1]!r}"]
    return parse_model("\n".join(lines), name=f"mass-spring-{D}")


def mass_spring_positions(spec: ModelSpec) -> List[str]:
    """Position coordinates (first member of every block) of a mass-spring model"""
    return [block.coords[0] for block in spec.blocks]
