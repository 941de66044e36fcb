"""Constraint circuits: smooth, decomposable, deterministic AND/OR DAGs.

Nodes live in a flat array in topological order (children before parents).
Literal leaves are position-token indicators; evaluation feeds per-literal
log-weights upward, taking log-sum-exp at OR gates and sums at AND gates,
which yields the weighted model count in a single pass. Top-down traversal
of the same cached values draws exact samples from the induced distribution.

All arithmetic is in natural-log space and must stay NaN-free for inputs
containing -inf.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .constraints import VarGrid

__all__ = [
    "Circuit", "CircuitBuilder", "CircuitParseError", "UnsatisfiableSampleError",
    "LIT", "AND", "OR", "TRUE_LEAF", "FALSE_LEAF",
    "wmc", "node_values", "node_values_many",
    "satisfies", "satisfies_many",
    "sample", "sample_with_values",
    "conditional_logprob", "conditional_logprob_many",
    "marginals", "feasible_tokens", "model_count",
    "indicator_weights", "boolean_weights",
    "write_circuit", "read_circuit", "load_weights_csv", "save_weights_csv",
]

LIT, AND, OR, TRUE_LEAF, FALSE_LEAF = 0, 1, 2, 3, 4

NEG_INF = float("-inf")


class CircuitParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UnsatisfiableSampleError(RuntimeError):
    """Raised when sampling is requested from a zero-mass circuit."""


@dataclass
class Circuit:
    """Flat-array circuit over a VarGrid.

    kinds[i] is one of LIT/AND/OR/TRUE_LEAF/FALSE_LEAF; literal payloads sit
    in lit_pos/lit_tok; children holds child-id tuples whose ids precede the
    parent. The structure is immutable once built.
    """

    grid: VarGrid
    kinds: np.ndarray
    lit_pos: np.ndarray
    lit_tok: np.ndarray
    children: list[tuple[int, ...]]
    root: int

    def __post_init__(self):
        for nid, kids in enumerate(self.children):
            for c in kids:
                if not 0 <= c < nid:
                    raise ValueError(
                        f"node {nid} references child {c}; children must be earlier nodes")
        if not 0 <= self.root < len(self.kinds):
            raise ValueError(f"root {self.root} out of range")
        self._scopes: Optional[list[frozenset[int]]] = None

    def __len__(self) -> int:
        return len(self.kinds)

    @property
    def num_edges(self) -> int:
        return sum(len(kids) for kids in self.children)

    def scopes(self) -> list[frozenset[int]]:
        """Per-node sets of positions the node's sub-function depends on."""
        if self._scopes is None:
            scopes: list[frozenset[int]] = []
            for nid in range(len(self.kinds)):
                kind = self.kinds[nid]
                if kind == LIT:
                    scopes.append(frozenset((int(self.lit_pos[nid]),)))
                elif kind in (TRUE_LEAF, FALSE_LEAF):
                    scopes.append(frozenset())
                else:
                    acc: frozenset[int] = frozenset()
                    for c in self.children[nid]:
                        acc = acc | scopes[c]
                    scopes.append(acc)
            self._scopes = scopes
        return self._scopes

    def depth(self) -> int:
        """Longest root-to-leaf edge count."""
        depths = np.zeros(len(self.kinds), dtype=np.int64)
        for nid in range(len(self.kinds)):
            kids = self.children[nid]
            if kids:
                depths[nid] = 1 + max(depths[c] for c in kids)
        return int(depths[self.root])

    def __repr__(self) -> str:
        return (f"Circuit(n={self.grid.n}, k={self.grid.k}, nodes={len(self)}, "
                f"edges={self.num_edges}, root={self.root})")


class CircuitBuilder:
    """Incremental builder with interning of identical nodes."""

    def __init__(self, grid: VarGrid, node_limit: Optional[int] = None):
        self.grid = grid
        self.node_limit = node_limit
        self.kinds: list[int] = []
        self.lit_pos: list[int] = []
        self.lit_tok: list[int] = []
        self.children: list[tuple[int, ...]] = []
        self._intern: dict[tuple, int] = {}

    def __len__(self) -> int:
        return len(self.kinds)

    def _add(self, key: tuple, kind: int, pos: int, tok: int,
             kids: tuple[int, ...]) -> int:
        nid = self._intern.get(key)
        if nid is not None:
            return nid
        if self.node_limit is not None and len(self.kinds) >= self.node_limit:
            from .compiler import CompilationBlowupError
            raise CompilationBlowupError(len(self.kinds), self.node_limit)
        nid = len(self.kinds)
        self.kinds.append(kind)
        self.lit_pos.append(pos)
        self.lit_tok.append(tok)
        self.children.append(kids)
        self._intern[key] = nid
        return nid

    def literal(self, i: int, j: int) -> int:
        self.grid.check_position(i)
        self.grid.check_token(j)
        return self._add(("L", i, j), LIT, i, j, ())

    def true_leaf(self) -> int:
        return self._add(("T",), TRUE_LEAF, -1, -1, ())

    def false_leaf(self) -> int:
        return self._add(("F",), FALSE_LEAF, -1, -1, ())

    def and_node(self, kids: Sequence[int]) -> int:
        kids = tuple(kids)
        return self._add(("A", kids), AND, -1, -1, kids)

    def or_node(self, kids: Sequence[int]) -> int:
        kids = tuple(kids)
        return self._add(("O", kids), OR, -1, -1, kids)

    def is_true(self, nid: int) -> bool:
        return self.kinds[nid] == TRUE_LEAF

    def is_false(self, nid: int) -> bool:
        return self.kinds[nid] == FALSE_LEAF

    def finish(self, root: int) -> Circuit:
        return Circuit(
            grid=self.grid,
            kinds=np.asarray(self.kinds, dtype=np.int8),
            lit_pos=np.asarray(self.lit_pos, dtype=np.int32),
            lit_tok=np.asarray(self.lit_tok, dtype=np.int32),
            children=list(self.children),
            root=root,
        )


# ---------------------------------------------------------------------------
# Weights


def _check_weights(circuit: Circuit, logw: np.ndarray) -> np.ndarray:
    logw = np.asarray(logw, dtype=np.float64)
    if logw.shape != (circuit.grid.n, circuit.grid.k):
        raise ValueError(
            f"weights shape {logw.shape} does not match grid "
            f"({circuit.grid.n}, {circuit.grid.k})")
    return logw


def indicator_weights(grid: VarGrid, y: Sequence[int]) -> np.ndarray:
    """One-hot log-weights selecting exactly the sequence y."""
    logw = np.full((grid.n, grid.k), NEG_INF)
    for i, tok in enumerate(y):
        grid.check_token(int(tok))
        logw[i, int(tok)] = 0.0
    return logw


def boolean_weights(grid: VarGrid) -> np.ndarray:
    """All-ones log-weights; wmc then counts models."""
    return np.zeros((grid.n, grid.k))


def _logsumexp_rows(mat: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp over the last axis, NaN-free for -inf rows."""
    mx = np.max(mat, axis=-1)
    out = np.full(mx.shape, NEG_INF)
    finite = mx > NEG_INF
    if np.any(finite):
        sub = mat[finite] - mx[finite][..., None]
        out[finite] = mx[finite] + np.log(np.sum(np.exp(sub), axis=-1))
    return out


# ---------------------------------------------------------------------------
# Bottom-up evaluation


def node_values(circuit: Circuit, logw: np.ndarray) -> np.ndarray:
    """Log value of every node under the given leaf log-weights."""
    return node_values_many(circuit, _check_weights(circuit, logw)[None])[0]


def node_values_many(circuit: Circuit, logw_batch: np.ndarray) -> np.ndarray:
    """Batched bottom-up pass: logw_batch is (U, n, k), result (U, nodes)."""
    logw_batch = np.asarray(logw_batch, dtype=np.float64)
    if logw_batch.ndim != 3 or logw_batch.shape[1:] != (circuit.grid.n, circuit.grid.k):
        raise ValueError(f"expected (U, {circuit.grid.n}, {circuit.grid.k}) weights, "
                         f"got {logw_batch.shape}")
    u = logw_batch.shape[0]
    vals = np.empty((u, len(circuit)), dtype=np.float64)
    kinds, children = circuit.kinds, circuit.children
    for nid in range(len(circuit)):
        kind = kinds[nid]
        if kind == LIT:
            vals[:, nid] = logw_batch[:, circuit.lit_pos[nid], circuit.lit_tok[nid]]
        elif kind == TRUE_LEAF:
            vals[:, nid] = 0.0
        elif kind == FALSE_LEAF:
            vals[:, nid] = NEG_INF
        elif kind == AND:
            acc = vals[:, children[nid][0]].copy()
            for c in children[nid][1:]:
                acc += vals[:, c]
            vals[:, nid] = acc
        else:  # OR
            vals[:, nid] = _logsumexp_rows(vals[:, list(children[nid])])
    return vals


def wmc(circuit: Circuit, logw: np.ndarray) -> float:
    """Log weighted model count: log sum over models of the product of
    per-position leaf weights."""
    return float(node_values(circuit, logw)[circuit.root])


def model_count(circuit: Circuit) -> int:
    """Number of satisfying sequences."""
    v = wmc(circuit, boolean_weights(circuit.grid))
    return 0 if v == NEG_INF else int(round(np.exp(v)))


# ---------------------------------------------------------------------------
# Boolean satisfaction


def satisfies(circuit: Circuit, y: Sequence[int]) -> bool:
    """Does the sequence satisfy the circuit's constraint?"""
    return bool(satisfies_many(circuit, np.asarray(y)[None])[0])


def satisfies_many(circuit: Circuit, ys: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """Vectorized satisfaction over a (B, n) batch."""
    ys = np.asarray(ys)
    if ys.ndim != 2 or ys.shape[1] != circuit.grid.n:
        raise ValueError(f"expected (B, {circuit.grid.n}) sequences, got {ys.shape}")
    out = np.empty(len(ys), dtype=bool)
    kinds, children = circuit.kinds, circuit.children
    for lo in range(0, len(ys), chunk):
        block = ys[lo:lo + chunk]
        vals = np.empty((len(block), len(circuit)), dtype=bool)
        for nid in range(len(circuit)):
            kind = kinds[nid]
            if kind == LIT:
                vals[:, nid] = block[:, circuit.lit_pos[nid]] == circuit.lit_tok[nid]
            elif kind == TRUE_LEAF:
                vals[:, nid] = True
            elif kind == FALSE_LEAF:
                vals[:, nid] = False
            elif kind == AND:
                acc = vals[:, children[nid][0]].copy()
                for c in children[nid][1:]:
                    acc &= vals[:, c]
                vals[:, nid] = acc
            else:  # OR
                acc = vals[:, children[nid][0]].copy()
                for c in children[nid][1:]:
                    acc |= vals[:, c]
                vals[:, nid] = acc
        out[lo:lo + chunk] = vals[:, circuit.root]
    return out


# ---------------------------------------------------------------------------
# Sampling


def sample(circuit: Circuit, logw: np.ndarray, rng: np.random.Generator,
           size: Optional[int] = None):
    """Draw from the distribution proportional to leaf-weight products over
    satisfying sequences.

    Returns a single tuple when size is None, else a (size, n) array. Raises
    UnsatisfiableSampleError when the circuit carries no mass under logw.
    """
    logw = _check_weights(circuit, logw)
    vals = node_values(circuit, logw)
    if vals[circuit.root] == NEG_INF:
        raise UnsatisfiableSampleError(
            "circuit has zero mass under the given weights")
    b = 1 if size is None else int(size)
    ys = sample_with_values(circuit, vals[None], np.zeros(b, dtype=np.int64), rng)
    if size is None:
        return tuple(int(t) for t in ys[0])
    return ys


def sample_with_values(circuit: Circuit, values: np.ndarray, ctx: np.ndarray,
                       rng: np.random.Generator) -> np.ndarray:
    """Top-down sampling reusing cached bottom-up values.

    values is (U, nodes) from node_values_many; ctx maps each of the B
    requested samples to its row in values. Every ctx row must have finite
    root mass. Returns a (B, n) array of sequences.
    """
    b = len(ctx)
    n = circuit.grid.n
    ys = np.full((b, n), -1, dtype=np.int64)
    if np.any(values[ctx, circuit.root] == NEG_INF):
        raise UnsatisfiableSampleError("zero-mass context in batch")
    pending: dict[int, list[np.ndarray]] = {circuit.root: [np.arange(b)]}
    kinds, children = circuit.kinds, circuit.children
    for nid in range(len(circuit) - 1, -1, -1):
        parts = pending.pop(nid, None)
        if not parts:
            continue
        idx = parts[0] if len(parts) == 1 else np.concatenate(parts)
        kind = kinds[nid]
        if kind == LIT:
            ys[idx, circuit.lit_pos[nid]] = circuit.lit_tok[nid]
        elif kind == AND:
            for c in children[nid]:
                pending.setdefault(c, []).append(idx)
        elif kind == OR:
            kids = list(children[nid])
            mat = values[ctx[idx]][:, kids]
            total = values[ctx[idx], nid]
            probs = np.exp(mat - total[:, None])  # -inf children become 0
            cum = np.cumsum(probs, axis=1)
            u = rng.random(len(idx))
            choice = np.sum(u[:, None] >= cum, axis=1)
            choice = np.minimum(choice, len(kids) - 1)
            # Guard against landing on a zero-probability trailing child
            # through rounding: step back to the nearest positive one.
            bad = probs[np.arange(len(idx)), choice] <= 0.0
            while np.any(bad):
                choice[bad] -= 1
                bad = probs[np.arange(len(idx)), choice] <= 0.0
            for pos_in_kids, c in enumerate(kids):
                sel = idx[choice == pos_in_kids]
                if len(sel):
                    pending.setdefault(c, []).append(sel)
        # True leaves contribute nothing; False leaves are never reached
        # from a finite-mass parent.
    if np.any(ys < 0):
        raise AssertionError("top-down pass left positions unassigned; "
                             "circuit is not smooth over all positions")
    return ys


# ---------------------------------------------------------------------------
# Conditionals and marginals


def conditional_logprob(circuit: Circuit, logw: np.ndarray, y: Sequence[int]) -> float:
    """log of Prod_i w(i, y_i) / WMC for a satisfying y; -inf if y violates
    the circuit (documented return, not an error)."""
    logw = _check_weights(circuit, logw)
    return float(conditional_logprob_many(circuit, logw, np.asarray(y)[None])[0])


def conditional_logprob_many(circuit: Circuit, logw: np.ndarray,
                             ys: np.ndarray) -> np.ndarray:
    logw = _check_weights(circuit, logw)
    ys = np.asarray(ys)
    total = wmc(circuit, logw)
    out = np.full(len(ys), NEG_INF)
    if total == NEG_INF:
        return out  # zero-mass circuit: conditional carries no support
    ok = satisfies_many(circuit, ys)
    if np.any(ok):
        picked = logw[np.arange(circuit.grid.n)[None, :], ys[ok]]
        out[ok] = picked.sum(axis=1) - total
    return out


def _backward_flows(circuit: Circuit, vals: np.ndarray) -> np.ndarray:
    """Log flow reaching each node from the root (derivative-style pass)."""
    flows = np.full(len(circuit), NEG_INF)
    flows[circuit.root] = 0.0
    kinds, children = circuit.kinds, circuit.children
    for nid in range(len(circuit) - 1, -1, -1):
        f = flows[nid]
        if f == NEG_INF:
            continue
        kind = kinds[nid]
        if kind == OR:
            for c in children[nid]:
                flows[c] = np.logaddexp(flows[c], f)
        elif kind == AND:
            kids = children[nid]
            for c in kids:
                sib = 0.0
                for c2 in kids:
                    if c2 != c:
                        sib += vals[c2]
                if sib == NEG_INF:
                    continue
                flows[c] = np.logaddexp(flows[c], f + sib)
    return flows


def marginals(circuit: Circuit, logw: np.ndarray) -> np.ndarray:
    """(n, k) grid of log Pr(y_i = j | constraint) under the factorized
    weight distribution. One bottom-up and one top-down pass."""
    logw = _check_weights(circuit, logw)
    vals = node_values(circuit, logw)
    total = vals[circuit.root]
    if total == NEG_INF:
        raise UnsatisfiableSampleError("zero-mass circuit has no marginals")
    flows = _backward_flows(circuit, vals)
    out = np.full((circuit.grid.n, circuit.grid.k), NEG_INF)
    for nid in range(len(circuit)):
        if circuit.kinds[nid] == LIT and flows[nid] > NEG_INF:
            i, j = int(circuit.lit_pos[nid]), int(circuit.lit_tok[nid])
            contrib = flows[nid] + logw[i, j]
            out[i, j] = np.logaddexp(out[i, j], contrib)
    return out - total


def feasible_tokens(circuit: Circuit, prefix: Sequence[int]) -> np.ndarray:
    """Boolean mask of tokens at position len(prefix) that extend the prefix
    to at least one satisfying sequence."""
    grid = circuit.grid
    i = len(prefix)
    if i >= grid.n:
        raise ValueError(f"prefix of length {i} leaves no open position (n={grid.n})")
    logw = np.zeros((grid.n, grid.k))
    for p, tok in enumerate(prefix):
        grid.check_token(int(tok))
        logw[p, :] = NEG_INF
        logw[p, int(tok)] = 0.0
    vals = node_values(circuit, logw)
    if vals[circuit.root] == NEG_INF:
        return np.zeros(grid.k, dtype=bool)
    flows = _backward_flows(circuit, vals)
    mask = np.zeros(grid.k, dtype=bool)
    for nid in range(len(circuit)):
        if (circuit.kinds[nid] == LIT and circuit.lit_pos[nid] == i
                and flows[nid] > NEG_INF):
            mask[circuit.lit_tok[nid]] = True
    return mask


# ---------------------------------------------------------------------------
# File formats


def write_circuit(circuit: Circuit, path: str) -> None:
    """Line format: header `circuit n k`, node lines (`L i j`, `T`, `F`,
    `A c1 c2`, `O c1 ... cm`), final line `root id`. Node ids are 0-based
    ordinals over the node lines. Round-trips bit-exactly."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(circuit_to_text(circuit))


def circuit_to_text(circuit: Circuit) -> str:
    lines = [f"circuit {circuit.grid.n} {circuit.grid.k}"]
    for nid in range(len(circuit)):
        kind = circuit.kinds[nid]
        if kind == LIT:
            lines.append(f"L {circuit.lit_pos[nid]} {circuit.lit_tok[nid]}")
        elif kind == TRUE_LEAF:
            lines.append("T")
        elif kind == FALSE_LEAF:
            lines.append("F")
        elif kind == AND:
            lines.append("A " + " ".join(str(c) for c in circuit.children[nid]))
        else:
            lines.append("O " + " ".join(str(c) for c in circuit.children[nid]))
    lines.append(f"root {circuit.root}")
    return "\n".join(lines) + "\n"


def read_circuit(path: str) -> Circuit:
    with open(path, "r", encoding="ascii") as fh:
        return circuit_from_text(fh.read())


def circuit_from_text(text: str) -> Circuit:
    lines = text.splitlines()
    if not lines:
        raise CircuitParseError("empty circuit file", 1)
    head = lines[0].split()
    if len(head) != 3 or head[0] != "circuit":
        raise CircuitParseError(f"bad header {lines[0]!r}", 1)
    try:
        n, k = int(head[1]), int(head[2])
    except ValueError:
        raise CircuitParseError(f"bad header {lines[0]!r}", 1) from None
    grid = VarGrid(n, k)
    kinds: list[int] = []
    lit_pos: list[int] = []
    lit_tok: list[int] = []
    children: list[tuple[int, ...]] = []
    root: Optional[int] = None

    def refs(parts: list[str], lineno: int, exact: Optional[int] = None) -> tuple[int, ...]:
        if exact is not None and len(parts) != exact:
            raise CircuitParseError(f"expected {exact} children", lineno)
        out = []
        for p in parts:
            try:
                c = int(p)
            except ValueError:
                raise CircuitParseError(f"bad child id {p!r}", lineno) from None
            if not 0 <= c < len(kinds):
                raise CircuitParseError(f"child {c} must reference an earlier node", lineno)
            out.append(c)
        return tuple(out)

    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "root":
            if len(parts) != 2:
                raise CircuitParseError("bad root line", lineno)
            root = int(parts[1])
            break
        if tag == "L":
            if len(parts) != 3:
                raise CircuitParseError("literal needs position and token", lineno)
            i, j = int(parts[1]), int(parts[2])
            grid.check_position(i)
            grid.check_token(j)
            kinds.append(LIT)
            lit_pos.append(i)
            lit_tok.append(j)
            children.append(())
        elif tag == "T":
            kinds.append(TRUE_LEAF); lit_pos.append(-1); lit_tok.append(-1); children.append(())
        elif tag == "F":
            kinds.append(FALSE_LEAF); lit_pos.append(-1); lit_tok.append(-1); children.append(())
        elif tag == "A":
            kids = refs(parts[1:], lineno, exact=2)
            kinds.append(AND); lit_pos.append(-1); lit_tok.append(-1); children.append(kids)
        elif tag == "O":
            if len(parts) < 2:
                raise CircuitParseError("OR needs at least one child", lineno)
            kids = refs(parts[1:], lineno)
            kinds.append(OR); lit_pos.append(-1); lit_tok.append(-1); children.append(kids)
        else:
            raise CircuitParseError(f"unrecognized node {line!r}", lineno)
    if root is None:
        raise CircuitParseError("missing root line", len(lines))
    if not 0 <= root < len(kinds):
        raise CircuitParseError(f"root {root} out of range", len(lines))
    return Circuit(
        grid=grid,
        kinds=np.asarray(kinds, dtype=np.int8),
        lit_pos=np.asarray(lit_pos, dtype=np.int32),
        lit_tok=np.asarray(lit_tok, dtype=np.int32),
        children=children,
        root=root,
    )


def load_weights_csv(path: str) -> np.ndarray:
    """Read an n-row, k-column CSV of probabilities as log-weights."""
    probs = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.log(probs)


def save_weights_csv(logw: np.ndarray, path: str) -> None:
    np.savetxt(path, np.exp(np.asarray(logw)), delimiter=",", fmt="%.17g")
