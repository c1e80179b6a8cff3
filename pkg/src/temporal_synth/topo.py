"""Causal dependence between automaton states, meta-modes and level sets.

Level 0 holds the modes whose values are known up front (accepting, sink,
and dead-end modes). Level ``i`` holds the modes whose causal successors all
sit in lower levels, at least one of them in level ``i - 1``. Solving the
levels in increasing order needs a single convergence pass per level.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .mdp import LabeledMdp
from .product import AlphabetMismatch, ProductMdp, consistent_pairs
from .scltl import Dfa

MetaMode = frozenset


class Unlevelable(ValueError):
    def __init__(self, modes):
        super().__init__(f"meta-modes cannot be placed in any level: {[sorted(m) for m in modes]}")
        self.modes = modes


@dataclass(frozen=True)
class CausalGraph:
    n: int
    edges: frozenset  # (q, q') with q != q'
    self_loops: frozenset = frozenset()

    def successors(self, q: int) -> list[int]:
        return sorted(b for a, b in self.edges if a == q)

    def adjacency(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.n)]
        for a, b in sorted(self.edges):
            adj[a].append(b)
        return adj


def causal_graph(d: Dfa, m: LabeledMdp | None = None, *, letters: Iterable[int] | None = None,
                 reachable_only: bool = False) -> CausalGraph:
    """Causal dependence graph over automaton states.

    With an MDP the edge ``q -> q'`` exists iff the guard set from ``q`` to
    ``q'`` is nonempty. Without one, any DFA transition counts (optionally
    only over the given letter indices); this over-approximates the guard
    based graph.
    """
    edges, loops = set(), set()
    if m is None:
        cols = np.arange(d.n_symbols) if letters is None else np.fromiter(letters, dtype=np.int64)
        for q in d.states:
            for q2 in np.unique(d.delta[q, cols]):
                (loops.add(q) if q2 == q else edges.add((q, int(q2))))
    else:
        if tuple(sorted(m.ap)) != tuple(d.ap):
            raise AlphabetMismatch("MDP and DFA propositions differ")
        step = m.P.any(axis=1)  # (S, S')
        qnext = d.delta[:, m.label_masks()]  # (Q, S')
        present = consistent_pairs(m, d) if reachable_only else np.ones((m.n_states, d.n_states), dtype=bool)
        for q in d.states:
            rows = step[present[:, q]]
            if not rows.size:
                continue
            for q2 in np.unique(qnext[q, rows.any(axis=0)]):
                (loops.add(q) if q2 == q else edges.add((q, int(q2))))
    return CausalGraph(d.n_states, frozenset(edges), frozenset(loops))


def meta_modes(g: CausalGraph) -> list:
    """Strongly connected components (Kosaraju), sorted by smallest member."""
    adj = g.adjacency()
    radj: list[list[int]] = [[] for _ in range(g.n)]
    for a, b in g.edges:
        radj[b].append(a)
    seen = [False] * g.n
    order: list[int] = []
    for root in range(g.n):
        if seen[root]:
            continue
        seen[root] = True
        stack = [(root, iter(adj[root]))]
        while stack:
            v, it = stack[-1]
            for w in it:
                if not seen[w]:
                    seen[w] = True
                    stack.append((w, iter(adj[w])))
                    break
            else:
                stack.pop()
                order.append(v)
    comp = [-1] * g.n
    modes = []
    for root in reversed(order):
        if comp[root] >= 0:
            continue
        members = []
        comp[root] = len(modes)
        stack = [root]
        while stack:
            v = stack.pop()
            members.append(v)
            for w in radj[v]:
                if comp[w] < 0:
                    comp[w] = comp[root]
                    stack.append(w)
        modes.append(MetaMode(members))
    return sorted(modes, key=min)


def quotient_edges(modes: Sequence, g: CausalGraph) -> set:
    mode_of = {q: i for i, X in enumerate(modes) for q in X}
    return {(mode_of[a], mode_of[b]) for a, b in g.edges if mode_of[a] != mode_of[b]}


@dataclass
class LevelPartition:
    levels: list  # list[list[MetaMode]]
    repaired: set = field(default_factory=set)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def states(self, i: int) -> list[int]:
        return sorted(q for X in self.levels[i] for q in X)

    def level_of(self) -> dict:
        return {q: i for i, lvl in enumerate(self.levels) for X in lvl for q in X}

    def to_json(self) -> list:
        return [
            {
                "level": i,
                "modes": [sorted(X) for X in lvl],
                "repaired": [sorted(X) for X in lvl if X in self.repaired],
            }
            for i, lvl in enumerate(self.levels)
        ]

    @classmethod
    def from_json(cls, doc: list) -> "LevelPartition":
        levels, repaired = [], set()
        for entry in sorted(doc, key=lambda e: e["level"]):
            levels.append([MetaMode(X) for X in entry["modes"]])
            repaired |= {MetaMode(X) for X in entry.get("repaired", [])}
        return cls(levels, repaired)

    def to_dot(self, g: CausalGraph | None = None) -> str:
        names = {}
        lines = ["digraph levels {", "  rankdir=TB;"]
        for i, lvl in enumerate(self.levels):
            lines.append(f"  subgraph cluster_L{i} {{")
            lines.append(f'    label="L{i}"; style=dashed;')
            for X in lvl:
                name = "X_" + "_".join(str(q) for q in sorted(X))
                names[X] = name
                label = "{" + ",".join(f"q{q}" for q in sorted(X)) + "}"
                extra = ", style=dotted" if X in self.repaired else ""
                lines.append(f'    {name} [label="{label}"{extra}];')
            lines.append("  }")
        if g is not None:
            modes = [X for lvl in self.levels for X in lvl]
            for a, b in sorted(quotient_edges(modes, g)):
                lines.append(f"  {names[modes[a]]} -> {names[modes[b]]};")
        lines.append("}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)


def level_sets(modes: Sequence, g: CausalGraph, d: Dfa) -> LevelPartition:
    """Assign meta-modes to levels over the quotient DAG.

    Level 0 holds modes with accepting or sink states plus terminal modes
    (no outgoing edges), which are recorded as ``repaired``. Level i holds
    the modes whose successors all sit below i, at least one in level i-1.
    """
    modes = list(modes)
    qe = quotient_edges(modes, g)
    out: list[set[int]] = [set() for _ in modes]
    for a, b in qe:
        out[a].add(b)
    stop = set(d.accepting)
    if d.sink is not None:
        stop.add(d.sink)
    level_of: dict[int, int] = {}
    repaired = set()
    for i, X in enumerate(modes):
        if X & stop:
            level_of[i] = 0
        elif not out[i]:
            level_of[i] = 0
            repaired.add(X)
    levels = [[modes[i] for i in sorted(level_of)]]
    while len(level_of) < len(modes):
        prev = {i for i, lv in level_of.items() if lv == len(levels) - 1}
        fresh = [i for i in range(len(modes))
                 if i not in level_of and out[i] <= level_of.keys() and out[i] & prev]
        if not fresh:
            raise Unlevelable([modes[i] for i in range(len(modes)) if i not in level_of])
        for i in fresh:
            assert i not in level_of
            level_of[i] = len(levels)
        levels.append([modes[i] for i in fresh])
    return LevelPartition(levels, repaired)


def decompose(d: Dfa, m: LabeledMdp | None = None, **kwargs) -> tuple[CausalGraph, list, LevelPartition]:
    g = causal_graph(d, m, **kwargs)
    modes = meta_modes(g)
    return g, modes, level_sets(modes, g, d)


def check_partition(part: LevelPartition, g: CausalGraph) -> None:
    """Assert the level invariant: edges point strictly downward, one into the next level."""
    level = part.level_of()
    for i, lvl in enumerate(part.levels[1:], start=1):
        for X in lvl:
            targets = {level[b] for a, b in g.edges if a in X and b not in X}
            if not targets or max(targets) != i - 1:
                raise AssertionError(f"mode {sorted(X)} at level {i} has successor levels {sorted(targets)}")


# ---------------------------------------------------------------------------
# level-by-level solving on tabular products
# ---------------------------------------------------------------------------

def zero_set(product: ProductMdp, part: LevelPartition) -> np.ndarray:
    """Product states whose value is fixed at 0: accepting, sink and level-0 modes.

    Repaired level-0 modes are left out. They never reach acceptance, but the
    soft backup still pays ``tau * log|A|`` per step there, so they get solved.
    """
    q_of = product.q_of()
    l0 = np.zeros(product.n_q, dtype=bool)
    l0[part.states(0)] = True
    for X in part.repaired:
        l0[sorted(X)] = False
    return product.final | product.sink | l0[q_of]


def level_masks(product: ProductMdp, part: LevelPartition) -> list[np.ndarray]:
    """Per level, the product states solved there (level 0: repaired modes only)."""
    q_of = product.q_of()
    zero = zero_set(product, part)
    masks = []
    for i in range(part.n_levels):
        inq = np.zeros(product.n_q, dtype=bool)
        inq[part.states(i)] = True
        masks.append(inq[q_of] & ~zero)
    return masks


def solve_by_levels(product: ProductMdp, part: LevelPartition, solver: Callable) -> np.ndarray:
    """Solve levels 0..n in order; ``solver(product, values, active)`` returns
    the full value vector with only ``active`` entries changed."""
    values = np.zeros(product.n_states)
    for i, active in enumerate(level_masks(product, part)):
        if not active.any():
            continue
        try:
            values = np.asarray(solver(product, values.copy(), active), dtype=float)
        except Exception as exc:
            exc.level = i
            if hasattr(exc, "add_note"):
                exc.add_note(f"while solving level {i}")
            raise
    return values
