"""Boolean constraint DSL over position-token indicator variables.

A constraint is a formula over indicators "position i holds token j".
Sequences assign exactly one token per position, so the indicators of a
position form an exactly-one group; that semantics lives in the data model
(token-indexed sequences), not in extra clauses.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "VarGrid", "Expr", "Var", "Not", "And", "Or", "Implies",
    "TrueExpr", "FalseExpr", "TRUE", "FALSE",
    "var", "and_all", "or_all",
    "forbid_substrings", "all_different", "exactly_k", "valid_path",
    "RIGHT", "DOWN", "PATH_PAD",
    "evaluate", "evaluate_many", "free_positions",
    "to_text", "from_text", "ConstraintParseError",
]

_UNSET = -1


@dataclass(frozen=True)
class VarGrid:
    """Index space for fixed-length sequences: n positions, k tokens each.

    pad_token marks the vocabulary entry used for right-padding; it defaults
    to the last token index and is only meaningful to builders that deal
    with variable-length content.
    """

    n: int
    k: int
    pad_token: int = _UNSET

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"need at least one position, got n={self.n}")
        if self.k < 2:
            raise ValueError(f"need at least two tokens, got k={self.k}")
        if self.pad_token == _UNSET:
            object.__setattr__(self, "pad_token", self.k - 1)
        if not 0 <= self.pad_token < self.k:
            raise ValueError(f"pad_token {self.pad_token} out of range [0, {self.k})")

    def check_position(self, i: int) -> None:
        if not 0 <= i < self.n:
            raise IndexError(f"position {i} out of range [0, {self.n})")

    def check_token(self, j: int) -> None:
        if not 0 <= j < self.k:
            raise IndexError(f"token {j} out of range [0, {self.k})")


class Expr:
    """Base class for constraint formulas. Instances are immutable."""

    def __and__(self, other: "Expr") -> "Expr":
        return And((self, other))

    def __or__(self, other: "Expr") -> "Expr":
        return Or((self, other))

    def __invert__(self) -> "Expr":
        return Not(self)

    def implies(self, other: "Expr") -> "Expr":
        return Implies(self, other)


@dataclass(frozen=True)
class Var(Expr):
    """Indicator literal: position i holds token j."""

    i: int
    j: int


@dataclass(frozen=True)
class Not(Expr):
    child: Expr


@dataclass(frozen=True)
class And(Expr):
    children: tuple


@dataclass(frozen=True)
class Or(Expr):
    children: tuple


@dataclass(frozen=True)
class Implies(Expr):
    lhs: Expr
    rhs: Expr


@dataclass(frozen=True)
class TrueExpr(Expr):
    pass


@dataclass(frozen=True)
class FalseExpr(Expr):
    pass


TRUE = TrueExpr()
FALSE = FalseExpr()


def var(grid: VarGrid, i: int, j: int) -> Var:
    """Indicator literal for token j at position i, range-checked."""
    grid.check_position(i)
    grid.check_token(j)
    return Var(i, j)


def and_all(exprs: Iterable[Expr]) -> Expr:
    """Conjunction; empty input gives TRUE, single input is returned as-is."""
    children = tuple(exprs)
    if not children:
        return TRUE
    if len(children) == 1:
        return children[0]
    return And(children)


def or_all(exprs: Iterable[Expr]) -> Expr:
    """Disjunction; empty input gives FALSE, single input is returned as-is."""
    children = tuple(exprs)
    if not children:
        return FALSE
    if len(children) == 1:
        return children[0]
    return Or(children)


# ---------------------------------------------------------------------------
# Builders


def forbid_substrings(grid: VarGrid, banned: Sequence[Sequence[int]]) -> Expr:
    """Ban every listed token window from appearing anywhere in the sequence.

    For each banned word w and each start position s in 0..n-len(w), adds the
    clause "not (w matches at s)". An empty banned list yields TRUE (nothing
    is forbidden), which is documented behaviour rather than an error.
    """
    clauses = []
    for word in banned:
        word = list(word)
        if not word:
            raise ValueError("banned word must be nonempty")
        if len(word) > grid.n:
            raise ValueError(f"banned word of length {len(word)} exceeds n={grid.n}")
        for tok in word:
            grid.check_token(tok)
        for start in range(grid.n - len(word) + 1):
            window = and_all(Var(start + t, tok) for t, tok in enumerate(word))
            clauses.append(Not(window))
    return and_all(clauses)


def all_different(grid: VarGrid, groups: Sequence[Iterable[int]]) -> Expr:
    """Within each position group, no token value may repeat.

    Together with the exactly-one data model, a group of size k forces a
    permutation of the vocabulary over that group.
    """
    clauses = []
    for group in groups:
        positions = sorted(set(group))
        for p in positions:
            grid.check_position(p)
        if len(positions) > grid.k:
            warnings.warn(
                f"group of {len(positions)} positions over {grid.k} tokens is "
                "unsatisfiable by construction", stacklevel=2)
        for j in range(grid.k):
            for p, q in combinations(positions, 2):
                clauses.append(Not(And((Var(p, j), Var(q, j)))))
    return and_all(clauses)


def exactly_k(grid: VarGrid, vars_: Sequence[tuple[int, int]], count: int) -> Expr:
    """Exactly `count` of the listed (position, token) indicators are true.

    Expands to a disjunction over the binomial(len(vars_), count) selections,
    so it is meant for small indicator lists.
    """
    if not 0 <= count <= len(vars_):
        raise ValueError(f"count {count} out of range [0, {len(vars_)}]")
    lits = []
    for i, j in vars_:
        grid.check_position(i)
        grid.check_token(j)
        lits.append(Var(i, j))
    terms = []
    for chosen in combinations(range(len(lits)), count):
        chosen = set(chosen)
        parts = [lits[t] if t in chosen else Not(lits[t]) for t in range(len(lits))]
        terms.append(and_all(parts))
    return or_all(terms)


RIGHT, DOWN, PATH_PAD = 0, 1, 2


def valid_path(width: int, height: int, slack: int = 0) -> tuple[VarGrid, Expr]:
    """Grid and constraint for monotone corner-to-corner paths.

    Each sequence position holds one move token (right, down, or pad). A
    model is a string of width-1 rights and height-1 downs, in any order,
    followed by pad tokens for the optional `slack` tail positions. Width 2
    with height 1 is the smallest accepted shape (a single right move).
    """
    moves = (width - 1) + (height - 1)
    if width < 1 or height < 1 or moves < 1:
        raise ValueError(f"no moves in a {width}x{height} grid")
    if slack < 0:
        raise ValueError("slack must be nonnegative")
    n = moves + slack
    grid = VarGrid(n, 3, pad_token=PATH_PAD)
    clauses = [exactly_k(grid, [(i, RIGHT) for i in range(moves)], width - 1)]
    for i in range(moves):
        clauses.append(Or((Var(i, RIGHT), Var(i, DOWN))))
    for i in range(moves, n):
        clauses.append(Var(i, PATH_PAD))
    return grid, and_all(clauses)


# ---------------------------------------------------------------------------
# Evaluation


def evaluate(expr: Expr, y: Sequence[int]) -> bool:
    """Evaluate the formula on a full assignment (one token per position)."""
    if isinstance(expr, Var):
        return y[expr.i] == expr.j
    if isinstance(expr, Not):
        return not evaluate(expr.child, y)
    if isinstance(expr, And):
        return all(evaluate(c, y) for c in expr.children)
    if isinstance(expr, Or):
        return any(evaluate(c, y) for c in expr.children)
    if isinstance(expr, Implies):
        return (not evaluate(expr.lhs, y)) or evaluate(expr.rhs, y)
    if isinstance(expr, TrueExpr):
        return True
    if isinstance(expr, FalseExpr):
        return False
    raise TypeError(f"not a constraint expression: {expr!r}")


def evaluate_many(expr: Expr, ys: np.ndarray) -> np.ndarray:
    """Vectorized `evaluate` over a (B, n) batch of sequences."""
    ys = np.asarray(ys)
    if isinstance(expr, Var):
        return ys[:, expr.i] == expr.j
    if isinstance(expr, Not):
        return ~evaluate_many(expr.child, ys)
    if isinstance(expr, And):
        out = np.ones(len(ys), dtype=bool)
        for c in expr.children:
            out &= evaluate_many(c, ys)
        return out
    if isinstance(expr, Or):
        out = np.zeros(len(ys), dtype=bool)
        for c in expr.children:
            out |= evaluate_many(c, ys)
        return out
    if isinstance(expr, Implies):
        return ~evaluate_many(expr.lhs, ys) | evaluate_many(expr.rhs, ys)
    if isinstance(expr, TrueExpr):
        return np.ones(len(ys), dtype=bool)
    if isinstance(expr, FalseExpr):
        return np.zeros(len(ys), dtype=bool)
    raise TypeError(f"not a constraint expression: {expr!r}")


def free_positions(expr: Expr) -> frozenset[int]:
    """Positions whose indicators appear in the formula."""
    out: set[int] = set()

    def walk(e: Expr) -> None:
        if isinstance(e, Var):
            out.add(e.i)
        elif isinstance(e, Not):
            walk(e.child)
        elif isinstance(e, (And, Or)):
            for c in e.children:
                walk(c)
        elif isinstance(e, Implies):
            walk(e.lhs)
            walk(e.rhs)

    walk(expr)
    return frozenset(out)


def check_in_grid(expr: Expr, grid: VarGrid) -> None:
    """Raise if any indicator in the formula falls outside the grid."""

    def walk(e: Expr) -> None:
        if isinstance(e, Var):
            grid.check_position(e.i)
            grid.check_token(e.j)
        elif isinstance(e, Not):
            walk(e.child)
        elif isinstance(e, (And, Or)):
            for c in e.children:
                walk(c)
        elif isinstance(e, Implies):
            walk(e.lhs)
            walk(e.rhs)

    walk(expr)


# ---------------------------------------------------------------------------
# Textual serialization (prefix form, one node per line, last line is root)


class ConstraintParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def to_text(expr: Expr) -> str:
    """Serialize to the line format: VAR i j / NOT ref / AND ref ref /
    OR ref ref / TRUE / FALSE. Refs are 1-based earlier line numbers and the
    last line is the root. N-ary connectives are folded into binary chains,
    and implications are rewritten as OR(NOT lhs, rhs).
    """
    lines: list[str] = []
    memo: dict[Expr, int] = {}

    def emit_line(text: str) -> int:
        lines.append(text)
        return len(lines)

    def emit(e: Expr) -> int:
        if e in memo:
            return memo[e]
        if isinstance(e, Var):
            ref = emit_line(f"VAR {e.i} {e.j}")
        elif isinstance(e, Not):
            ref = emit_line(f"NOT {emit(e.child)}")
        elif isinstance(e, (And, Or)):
            word = "AND" if isinstance(e, And) else "OR"
            kids = e.children
            if not kids:
                ref = emit(TRUE if isinstance(e, And) else FALSE)
            else:
                acc = emit(kids[0])
                for child in kids[1:]:
                    acc = emit_line(f"{word} {acc} {emit(child)}")
                ref = acc
        elif isinstance(e, Implies):
            ref = emit(Or((Not(e.lhs), e.rhs)))
        elif isinstance(e, TrueExpr):
            ref = emit_line("TRUE")
        elif isinstance(e, FalseExpr):
            ref = emit_line("FALSE")
        else:
            raise TypeError(f"not a constraint expression: {e!r}")
        memo[e] = ref
        return ref

    root = emit(expr)
    if root != len(lines):
        # Root was shared with an earlier line; restate it so the root is last.
        lines.append(f"AND {root} {root}")
    return "\n".join(lines) + "\n"


def from_text(text: str) -> Expr:
    """Parse the line format produced by `to_text`."""
    nodes: list[Expr] = []

    def ref(tok: str, lineno: int) -> Expr:
        try:
            r = int(tok)
        except ValueError:
            raise ConstraintParseError(f"bad reference {tok!r}", lineno) from None
        if not 1 <= r < lineno:
            raise ConstraintParseError(f"reference {r} must point to an earlier line", lineno)
        return nodes[r - 1]

    lineno = 0
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        lineno += 1
        parts = line.split()
        op, args = parts[0].upper(), parts[1:]
        if op == "VAR" and len(args) == 2:
            try:
                nodes.append(Var(int(args[0]), int(args[1])))
            except ValueError:
                raise ConstraintParseError(f"bad indices in {line!r}", lineno) from None
        elif op == "NOT" and len(args) == 1:
            nodes.append(Not(ref(args[0], lineno)))
        elif op == "AND" and len(args) == 2:
            nodes.append(And((ref(args[0], lineno), ref(args[1], lineno))))
        elif op == "OR" and len(args) == 2:
            nodes.append(Or((ref(args[0], lineno), ref(args[1], lineno))))
        elif op == "TRUE" and not args:
            nodes.append(TRUE)
        elif op == "FALSE" and not args:
            nodes.append(FALSE)
        else:
            raise ConstraintParseError(f"unrecognized node {line!r}", lineno)
    if not nodes:
        raise ConstraintParseError("empty constraint file", 1)
    return nodes[-1]
