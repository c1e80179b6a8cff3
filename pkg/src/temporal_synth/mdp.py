"""Labeled MDPs (explicit, tabular) and the sample-only environment interface."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

ROW_SUM_TOL = 1e-9


class SteppedAfterDone(RuntimeError):
    """step() called on an episode that already terminated."""


class GenerativeUnsupported(RuntimeError):
    """The environment cannot be stepped from an arbitrary state."""


# ---------------------------------------------------------------------------
# Tabular model
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class LabeledMdp:
    """Finite MDP with a labeling function.

    ``P[s, a, s']`` is the transition probability and ``labels[s]`` the set of
    propositions true in ``s``.
    """

    P: np.ndarray
    labels: tuple
    ap: tuple
    s0: int = 0
    state_names: tuple = ()
    action_names: tuple = ()

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        if self.P.ndim != 3 or self.P.shape[0] != self.P.shape[2]:
            raise ValueError(f"P must have shape (S, A, S), got {self.P.shape}")
        self.labels = tuple(frozenset(l) for l in self.labels)
        if len(self.labels) != self.P.shape[0]:
            raise ValueError("one label set per state is required")
        self.ap = tuple(sorted(self.ap))
        if not self.state_names:
            self.state_names = tuple(f"s{i}" for i in range(self.n_states))
        if not self.action_names:
            self.action_names = tuple(f"a{i + 1}" for i in range(self.n_actions))

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    def label_masks(self) -> np.ndarray:
        """Letter index (bitmask over sorted ``ap``) of every state's label."""
        out = np.zeros(self.n_states, dtype=np.int64)
        for s, lab in enumerate(self.labels):
            for p in lab:
                if p in self.ap:
                    out[s] |= 1 << self.ap.index(p)
        return out

    # -- JSON ------------------------------------------------------------------
    def to_json(self) -> dict:
        rows = []
        for s in range(self.n_states):
            for a in range(self.n_actions):
                dist = {self.state_names[t]: float(self.P[s, a, t]) for t in np.flatnonzero(self.P[s, a])}
                rows.append({"s": self.state_names[s], "a": self.action_names[a], "dist": dist})
        return {
            "states": list(self.state_names),
            "actions": list(self.action_names),
            "p": rows,
            "s0": self.state_names[self.s0],
            "labels": {self.state_names[s]: sorted(l) for s, l in enumerate(self.labels)},
            "ap": list(self.ap),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "LabeledMdp":
        states = list(doc["states"])
        actions = list(doc["actions"])
        s_idx = {n: i for i, n in enumerate(states)}
        a_idx = {n: i for i, n in enumerate(actions)}
        P = np.zeros((len(states), len(actions), len(states)))
        for row in doc["p"]:
            s, a = s_idx[row["s"]], a_idx[row["a"]]
            dist = row["dist"]
            if isinstance(dist, dict):
                for name, p in dist.items():
                    P[s, a, s_idx[name]] = p
            else:
                P[s, a] = dist
        labels = doc["labels"]
        if isinstance(labels, dict):
            labels = [labels.get(n, []) for n in states]
        s0 = doc.get("s0", states[0])
        s0 = s_idx[s0] if isinstance(s0, str) else int(s0)
        return cls(P, tuple(labels), tuple(doc["ap"]), s0, tuple(states), tuple(actions))


def load_mdp(path) -> LabeledMdp:
    with open(path) as fh:
        return LabeledMdp.from_json(json.load(fh))


def save_mdp(m: LabeledMdp, path) -> None:
    with open(path, "w") as fh:
        json.dump(m.to_json(), fh, indent=1)


@dataclass(frozen=True)
class RowSum:
    s: int
    a: int
    total: float


@dataclass(frozen=True)
class BadEntry:
    s: int
    a: int
    target: int
    value: float


@dataclass(frozen=True)
class BadLabel:
    s: int
    props: frozenset = field(default_factory=frozenset)


def validate_mdp(m: LabeledMdp) -> list:
    """Report every violated invariant; an empty list means the model is valid."""
    out = []
    bad = np.argwhere(~np.isfinite(m.P) | (m.P < 0) | (m.P > 1))
    for s, a, t in bad:
        out.append(BadEntry(int(s), int(a), int(t), float(m.P[s, a, t])))
    totals = m.P.sum(axis=2)
    for s, a in np.argwhere(np.abs(totals - 1.0) > ROW_SUM_TOL):
        out.append(RowSum(int(s), int(a), float(totals[s, a])))
    ap = set(m.ap)
    for s, lab in enumerate(m.labels):
        extra = lab - ap
        if extra:
            out.append(BadLabel(s, frozenset(extra)))
    return out


# ---------------------------------------------------------------------------
# Sample-only interface
# ---------------------------------------------------------------------------

class Environment:
    """Simulator contract used by the actor-critic.

    States are opaque to the learner except through ``observe``. ``step`` is
    a pure function of (state, action, rng), so every environment here can be
    stepped from arbitrary states; ``generative`` advertises that.
    """

    n_actions: int = 0
    state_dimension: int = 0
    observation_dimension: int | None = None  # width of ``observe``; defaults to state_dimension
    ap: tuple = ()
    generative: bool = True

    def reset(self, rng: np.random.Generator):
        raise NotImplementedError

    def step(self, state, action: int, rng: np.random.Generator):
        """Return ``(next_state, label)``."""
        raise NotImplementedError

    def label(self, state) -> frozenset:
        raise NotImplementedError

    def absorbing(self, state) -> bool:
        return False

    def observe(self, state) -> np.ndarray:
        return np.asarray(state, dtype=float)

    def sample_state(self, rng: np.random.Generator):
        """A random state for curriculum resets (defaults to ``reset``)."""
        return self.reset(rng)


class TabularEnvironment(Environment):
    """Sampling view of a LabeledMdp; observations are one-hot vectors."""

    def __init__(self, mdp: LabeledMdp, absorbing_states: Iterable[int] = ()):
        self.mdp = mdp
        self.n_actions = mdp.n_actions
        self.state_dimension = mdp.n_states
        self.ap = mdp.ap
        self._absorbing = frozenset(absorbing_states)
        self._cdf = np.cumsum(mdp.P, axis=2)

    def reset(self, rng):
        return self.mdp.s0

    def step(self, state, action, rng):
        u = rng.random()
        nxt = int(np.searchsorted(self._cdf[state, action], u, side="right"))
        nxt = min(nxt, self.mdp.n_states - 1)
        return nxt, self.mdp.labels[nxt]

    def label(self, state):
        return self.mdp.labels[state]

    def absorbing(self, state):
        return state in self._absorbing

    def observe(self, state):
        x = np.zeros(self.mdp.n_states)
        x[state] = 1.0
        return x

    def sample_state(self, rng):
        return int(rng.integers(self.mdp.n_states))


# ---------------------------------------------------------------------------
# Paths and policies
# ---------------------------------------------------------------------------

@dataclass
class Path:
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    labels: list = field(default_factory=list)

    def __len__(self):
        return len(self.actions)

    def check(self):
        n = len(self.actions)
        if len(self.states) != n + 1 or len(self.labels) != n + 1 or len(self.rewards) != n:
            raise ValueError("inconsistent path lengths")


class Policy:
    n_actions: int = 0

    def probs(self, state) -> np.ndarray:
        raise NotImplementedError

    def prob(self, action: int, state) -> float:
        return float(self.probs(state)[action])

    def sample(self, state, rng: np.random.Generator) -> int:
        p = self.probs(state)
        return int(min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), len(p) - 1))


class UniformPolicy(Policy):
    def __init__(self, n_actions: int):
        self.n_actions = n_actions

    def probs(self, state):
        return np.full(self.n_actions, 1.0 / self.n_actions)


class TabularPolicy(Policy):
    """Row-per-state distribution table; ``key`` maps a state to its row."""

    def __init__(self, table: np.ndarray, key: Callable | None = None):
        self.table = np.asarray(table, dtype=float)
        self.n_actions = self.table.shape[1]
        self.key = key

    def probs(self, state):
        return self.table[state if self.key is None else self.key(state)]


class FunctionPolicy(Policy):
    def __init__(self, fn: Callable, n_actions: int):
        self.fn = fn
        self.n_actions = n_actions

    def probs(self, state):
        return np.asarray(self.fn(state), dtype=float)


def sample_path(env: Environment, pi: Policy, horizon: int, rng: np.random.Generator,
                reward: Callable | None = None) -> Path:
    """Roll out ``pi`` for at most ``horizon`` steps, stopping at absorption.

    ``reward(s, a, s')`` fills the per-step rewards (zeros when omitted).
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    s = env.reset(rng)
    path = Path([s], [], [], [env.label(s)])
    for _ in range(horizon):
        if env.absorbing(s):
            break
        a = pi.sample(s, rng)
        s2, lab = env.step(s, a, rng)
        path.actions.append(a)
        path.rewards.append(0.0 if reward is None else float(reward(s, a, s2)))
        path.states.append(s2)
        path.labels.append(frozenset(lab))
        s = s2
    return path


def label_word(p: Path) -> list:
    return list(p.labels)


def chain_mdp() -> LabeledMdp:
    """The three-state chain used as the running example: s0 -> s1 -> s2."""
    P = np.zeros((3, 1, 3))
    P[0, 0, 0] = P[0, 0, 1] = 0.5
    P[1, 0, 1], P[1, 0, 2] = 0.6, 0.4
    P[2, 0, 2] = 1.0
    return LabeledMdp(P, (set(), set(), {"s2"}), ("s2",), 0)
