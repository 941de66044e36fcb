"""Compile constraint formulas into smooth, decomposable, deterministic
circuits.

The construction walks positions in a fixed order. At each position it
branches a k-way OR over the token choices (a multi-valued decision), each
branch an AND of the token literal and the recursively compiled residual
formula. Identical residuals are detected by hashing a canonical normal
form (negation-normal, flattened, sorted, constant-folded, with
exactly-one-aware literal simplification) and share a single node.
Unsatisfiable branches are pruned; an unsatisfiable root compiles to the
bare False leaf.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations, product
from typing import Optional, Sequence

import numpy as np

from . import constraints as C
from .circuit import (AND, FALSE_LEAF, LIT, OR, TRUE_LEAF, Circuit,
                      CircuitBuilder)

__all__ = [
    "CompileOptions", "CompilationBlowupError", "PropertyReport",
    "compile_constraint", "validate",
]

DEFAULT_NODE_LIMIT = 5_000_000


@dataclass(frozen=True)
class CompileOptions:
    """variable_order permutes the positions visited top-down (default is
    position order); node_limit aborts runaway compilations."""

    variable_order: Optional[tuple[int, ...]] = None
    cache_enabled: bool = True
    node_limit: int = DEFAULT_NODE_LIMIT


class CompilationBlowupError(RuntimeError):
    """Node budget exceeded; carries the partial statistics."""

    def __init__(self, nodes_built: int, node_limit: int):
        super().__init__(
            f"compilation exceeded node limit ({nodes_built} >= {node_limit})")
        self.nodes_built = nodes_built
        self.node_limit = node_limit


# ---------------------------------------------------------------------------
# Canonical normal form over hashable keys.
#
# Keys: ("T",) / ("F",) constants, ("L", i, j) positive literal,
# ("N", i, j) negated literal, ("A", child...) / ("O", child...) with
# children flattened, deduplicated and sorted.

_T = ("T",)
_F = ("F",)


def _make_and(parts, k: int):
    forced: dict[int, int] = {}    # position -> required token
    banned: dict[int, set] = {}    # position -> excluded tokens
    rest: set = set()
    stack = list(parts)
    while stack:
        key = stack.pop()
        tag = key[0]
        if tag == "F":
            return _F
        if tag == "T":
            continue
        if tag == "A":
            stack.extend(key[1:])
        elif tag == "L":
            i, j = key[1], key[2]
            if forced.setdefault(i, j) != j:
                return _F
        elif tag == "N":
            banned.setdefault(key[1], set()).add(key[2])
        else:
            rest.add(key)
    lits = []
    for i, j in forced.items():
        if j in banned.pop(i, ()):  # also drops bans implied by the literal
            return _F
        lits.append(("L", i, j))
    for i, toks in banned.items():
        if len(toks) >= k:
            return _F
        if len(toks) == k - 1:  # all but one token excluded: a positive literal
            (j,) = set(range(k)) - toks
            lits.append(("L", i, j))
        else:
            lits.extend(("N", i, j) for j in toks)
    out = sorted(set(lits)) + sorted(rest)
    if not out:
        return _T
    if len(out) == 1:
        return out[0]
    return ("A", *out)


def _make_or(parts, k: int):
    allowed_extra: dict[int, set] = {}  # position -> tokens asserted positively
    neg: dict[int, int] = {}            # position -> token of a lone negation
    rest: set = set()
    stack = list(parts)
    while stack:
        key = stack.pop()
        tag = key[0]
        if tag == "T":
            return _T
        if tag == "F":
            continue
        if tag == "O":
            stack.extend(key[1:])
        elif tag == "L":
            allowed_extra.setdefault(key[1], set()).add(key[2])
        elif tag == "N":
            i, j = key[1], key[2]
            if i in neg and neg[i] != j:
                return _T  # token differs from one of two distinct values
            neg[i] = j
        else:
            rest.add(key)
    lits = []
    for i, j in neg.items():
        toks = allowed_extra.pop(i, set())
        if j in toks:
            return _T  # L(i,j) or N(i,j)
        # other positive literals at i are subsumed by the negation
        lits.append(("N", i, j))
    for i, toks in allowed_extra.items():
        if len(toks) >= k:
            return _T
        if len(toks) == k - 1:  # all but one token allowed: a negation
            (j,) = set(range(k)) - toks
            lits.append(("N", i, j))
        else:
            lits.extend(("L", i, j) for j in toks)
    out = sorted(set(lits)) + sorted(rest)
    if not out:
        return _F
    if len(out) == 1:
        return out[0]
    return ("O", *out)


def canonical_key(expr: C.Expr, k: int, negate: bool = False):
    """Canonical hashable form of a formula (NNF, flattened, sorted)."""
    if isinstance(expr, C.Var):
        return ("N" if negate else "L", expr.i, expr.j)
    if isinstance(expr, C.Not):
        return canonical_key(expr.child, k, not negate)
    if isinstance(expr, C.TrueExpr):
        return _F if negate else _T
    if isinstance(expr, C.FalseExpr):
        return _T if negate else _F
    if isinstance(expr, C.Implies):
        return canonical_key(C.Or((C.Not(expr.lhs), expr.rhs)), k, negate)
    if isinstance(expr, C.And):
        parts = [canonical_key(c, k, negate) for c in expr.children]
        return _make_or(parts, k) if negate else _make_and(parts, k)
    if isinstance(expr, C.Or):
        parts = [canonical_key(c, k, negate) for c in expr.children]
        return _make_and(parts, k) if negate else _make_or(parts, k)
    raise TypeError(f"not a constraint expression: {expr!r}")


def condition_key(key, pos: int, tok: int, k: int):
    """Substitute "position pos holds token tok" into a canonical key."""
    tag = key[0]
    if tag in ("T", "F"):
        return key
    if tag == "L":
        if key[1] != pos:
            return key
        return _T if key[2] == tok else _F
    if tag == "N":
        if key[1] != pos:
            return key
        return _F if key[2] == tok else _T
    parts = [condition_key(c, pos, tok, k) for c in key[1:]]
    return _make_and(parts, k) if tag == "A" else _make_or(parts, k)


def key_mentions(key, pos: int) -> bool:
    tag = key[0]
    if tag in ("L", "N"):
        return key[1] == pos
    if tag in ("A", "O"):
        return any(key_mentions(c, pos) for c in key[1:])
    return False


# ---------------------------------------------------------------------------
# Compilation


def compile_constraint(expr: C.Expr, grid: C.VarGrid,
                       opts: Optional[CompileOptions] = None) -> Circuit:
    """Compile a formula into a circuit with the same models.

    Deterministic given (expr, opts): repeated runs produce identical
    serialized circuits.
    """
    opts = opts or CompileOptions()
    C.check_in_grid(expr, grid)
    if opts.variable_order is None:
        order = tuple(range(grid.n))
    else:
        order = tuple(opts.variable_order)
        if sorted(order) != list(range(grid.n)):
            raise ValueError(f"variable_order {order} is not a permutation of "
                             f"0..{grid.n - 1}")
    builder = CircuitBuilder(grid, node_limit=opts.node_limit)
    cache: dict[tuple, int] = {}
    k = grid.k

    root_key = canonical_key(expr, k)

    def build(key, depth: int) -> int:
        if key == _F:
            return builder.false_leaf()
        if depth == grid.n:
            if key != _T:
                raise AssertionError(f"residual {key!r} survived full assignment")
            return builder.true_leaf()
        cache_key = (key, depth)
        if opts.cache_enabled:
            hit = cache.get(cache_key)
            if hit is not None:
                return hit
        pos = order[depth]
        kids = []
        for j in range(k):
            sub = build(condition_key(key, pos, j, k), depth + 1)
            if builder.is_false(sub):
                continue
            lit = builder.literal(pos, j)
            kids.append(lit if builder.is_true(sub) else builder.and_node((lit, sub)))
        if not kids:
            nid = builder.false_leaf()
        elif len(kids) == 1:
            nid = kids[0]
        else:
            nid = builder.or_node(kids)
        if opts.cache_enabled:
            cache[cache_key] = nid
        return nid

    root = build(root_key, 0)
    return builder.finish(root)


# ---------------------------------------------------------------------------
# Structural validation


@dataclass(frozen=True)
class PropertyReport:
    decomposable: bool
    smooth: bool
    deterministic: bool
    node_count: int
    edge_count: int
    depth: int

    @property
    def all_ok(self) -> bool:
        return self.decomposable and self.smooth and self.deterministic


_PAIR_ENUM_CAP = 1 << 20


def _pinned_tokens(circuit: Circuit, nid: int) -> dict[int, int]:
    """Tokens forced by literals reachable through AND nodes only."""
    pins: dict[int, int] = {}
    stack = [nid]
    while stack:
        cur = stack.pop()
        kind = circuit.kinds[cur]
        if kind == LIT:
            pins[int(circuit.lit_pos[cur])] = int(circuit.lit_tok[cur])
        elif kind == AND:
            stack.extend(circuit.children[cur])
    return pins


def _node_satisfies(circuit: Circuit, nid: int, assignment: dict[int, int]) -> bool:
    kind = circuit.kinds[nid]
    if kind == LIT:
        return assignment[int(circuit.lit_pos[nid])] == int(circuit.lit_tok[nid])
    if kind == TRUE_LEAF:
        return True
    if kind == FALSE_LEAF:
        return False
    if kind == AND:
        return all(_node_satisfies(circuit, c, assignment) for c in circuit.children[nid])
    return any(_node_satisfies(circuit, c, assignment) for c in circuit.children[nid])


def _pair_overlaps(circuit: Circuit, a: int, b: int) -> bool:
    """Exact check whether two OR children can be satisfied together."""
    pins_a = _pinned_tokens(circuit, a)
    pins_b = _pinned_tokens(circuit, b)
    for pos, tok in pins_a.items():
        if pos in pins_b and pins_b[pos] != tok:
            return False
    scopes = circuit.scopes()
    union = sorted(scopes[a] | scopes[b])
    if circuit.grid.k ** len(union) > _PAIR_ENUM_CAP:
        raise ValueError(
            "determinism check needs enumeration over too many assignments; "
            f"shared scope of {len(union)} positions exceeds the cap")
    for combo in product(range(circuit.grid.k), repeat=len(union)):
        assignment = dict(zip(union, combo))
        if (_node_satisfies(circuit, a, assignment)
                and _node_satisfies(circuit, b, assignment)):
            return True
    return False


def validate(circuit: Circuit) -> PropertyReport:
    """Check decomposability, smoothness and determinism exactly.

    Decomposable: AND children have disjoint scopes. Smooth: OR children
    share one scope. Deterministic: no full assignment satisfies two
    children of an OR, established by pairwise child-conjunction
    satisfiability (with a structural shortcut for decision-style children
    that pin different tokens at a shared position).
    """
    scopes = circuit.scopes()
    decomposable = True
    smooth = True
    deterministic = True
    for nid in range(len(circuit)):
        kind = circuit.kinds[nid]
        kids = circuit.children[nid]
        if kind == AND:
            seen: set[int] = set()
            for c in kids:
                if scopes[c] & seen:
                    decomposable = False
                seen |= scopes[c]
        elif kind == OR:
            if len({scopes[c] for c in kids}) > 1:
                smooth = False
            if deterministic:
                for a, b in combinations(kids, 2):
                    if _pair_overlaps(circuit, a, b):
                        deterministic = False
                        break
    return PropertyReport(
        decomposable=decomposable,
        smooth=smooth,
        deterministic=deterministic,
        node_count=len(circuit),
        edge_count=circuit.num_edges,
        depth=circuit.depth(),
    )
