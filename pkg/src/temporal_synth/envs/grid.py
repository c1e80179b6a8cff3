"""Small labeled MDPs for oracle tests: grid worlds and random models."""
from __future__ import annotations

import numpy as np

from ..mdp import LabeledMdp

MOVES = ((0, 1), (0, -1), (-1, 0), (1, 0), (0, 0))  # up, down, left, right, stay
MOVE_NAMES = ("up", "down", "left", "right", "stay")


def grid_mdp(width: int, height: int, labels: dict, ap, *, slip: float = 0.0, start=(0, 0),
             with_stay: bool = False) -> LabeledMdp:
    """Grid world; cell ``(x, y)`` is state ``y * width + x``.

    With probability ``slip`` the move is replaced by a uniformly chosen other
    move. Moves into the wall leave the agent in place. ``labels`` maps cells
    to proposition sets.
    """
    moves = MOVES if with_stay else MOVES[:4]
    n, nA = width * height, len(moves)
    P = np.zeros((n, nA, n))

    def target(x, y, m):
        dx, dy = moves[m]
        return min(max(x + dx, 0), width - 1) + width * min(max(y + dy, 0), height - 1)

    for y in range(height):
        for x in range(width):
            s = y * width + x
            for a in range(nA):
                P[s, a, target(x, y, a)] += 1.0 - slip
                for b in range(nA):
                    if b != a:
                        P[s, a, target(x, y, b)] += slip / (nA - 1)
    labs = [frozenset(labels.get((x, y), ())) for y in range(height) for x in range(width)]
    names = tuple(f"c{x}_{y}" for y in range(height) for x in range(width))
    return LabeledMdp(P, tuple(labs), tuple(ap), start[1] * width + start[0], names,
                      MOVE_NAMES[:nA])


def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int, ap, *, density: float = 0.5,
               label_prob: float = 0.3, deterministic: bool = False) -> LabeledMdp:
    """Random labeled MDP with sparse rows that always sum to one."""
    ap = tuple(sorted(ap))
    P = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            if deterministic:
                P[s, a, rng.integers(n_states)] = 1.0
                continue
            support = rng.random(n_states) < density
            support[rng.integers(n_states)] = True
            w = rng.random(n_states) * support
            P[s, a] = w / w.sum()
    labels = tuple(frozenset(p for p in ap if rng.random() < label_prob) for _ in range(n_states))
    return LabeledMdp(P, labels, ap, 0)
