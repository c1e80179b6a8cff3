"""Product of a labeled MDP with a task DFA.

Product states are flattened as ``z = s * n_q + q``. Entering an accepting
automaton state pays reward 1 and the product state becomes absorbing.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .mdp import Environment, GenerativeUnsupported, LabeledMdp, SteppedAfterDone
from .scltl import Dfa


class AlphabetMismatch(ValueError):
    pass


@dataclass(eq=False)
class ProductMdp:
    mdp: LabeledMdp
    dfa: Dfa
    gamma: float
    delta: np.ndarray  # (Z, A, Z)
    reward: np.ndarray  # (Z, A)
    final: np.ndarray  # bool (Z,)
    sink: np.ndarray  # bool (Z,)
    z0: int

    @property
    def n_q(self) -> int:
        return self.dfa.n_states

    @property
    def n_states(self) -> int:
        return self.delta.shape[0]

    @property
    def n_actions(self) -> int:
        return self.delta.shape[1]

    def index(self, s: int, q: int) -> int:
        return s * self.n_q + q

    def pair(self, z: int) -> tuple[int, int]:
        return divmod(int(z), self.n_q)

    def q_of(self) -> np.ndarray:
        return np.arange(self.n_states) % self.n_q

    def csr(self):
        """CSR triple of the transition tensor, row ``z * n_actions + a``."""
        try:
            return self._csr
        except AttributeError:
            flat = self.delta.reshape(-1, self.n_states)
            rows, cols = np.nonzero(flat)
            indptr = np.zeros(flat.shape[0] + 1, dtype=np.int64)
            np.cumsum(np.bincount(rows, minlength=flat.shape[0]), out=indptr[1:])
            self._csr = (indptr, cols.astype(np.int64), flat[rows, cols].copy())
            return self._csr

    def reachable(self) -> np.ndarray:
        seen = np.zeros(self.n_states, dtype=bool)
        seen[self.z0] = True
        frontier = [self.z0]
        succ = self.delta.sum(axis=1) > 0
        while frontier:
            z = frontier.pop()
            for z2 in np.flatnonzero(succ[z] & ~seen):
                seen[z2] = True
                frontier.append(int(z2))
        return seen

    def to_json(self) -> dict:
        names = []
        for z in range(self.n_states):
            s, q = self.pair(z)
            names.append(f"({self.mdp.state_names[s]},q{q})")
        rows = []
        for z in range(self.n_states):
            for a in range(self.n_actions):
                dist = {names[t]: float(self.delta[z, a, t]) for t in np.flatnonzero(self.delta[z, a])}
                rows.append({"s": names[z], "a": self.mdp.action_names[a], "dist": dist})
        return {
            "states": names,
            "actions": list(self.mdp.action_names),
            "p": rows,
            "s0": names[self.z0],
            "labels": {names[z]: sorted(self.mdp.labels[self.pair(z)[0]]) for z in range(self.n_states)},
            "ap": list(self.mdp.ap),
            "q": {names[z]: self.pair(z)[1] for z in range(self.n_states)},
            "final": [names[z] for z in np.flatnonzero(self.final)],
            "reward": {names[z]: [float(r) for r in self.reward[z]] for z in range(self.n_states)},
            "gamma": self.gamma,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)


def build_product(m: LabeledMdp, d: Dfa, gamma: float) -> ProductMdp:
    if tuple(sorted(m.ap)) != tuple(d.ap):
        raise AlphabetMismatch(f"MDP propositions {sorted(m.ap)} differ from DFA propositions {list(d.ap)}")
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    nS, nA, nQ = m.n_states, m.n_actions, d.n_states
    letters = m.label_masks()
    qnext = d.delta[:, letters]  # (Q, S'): automaton state after arriving in s'
    Z = nS * nQ
    delta = np.zeros((nS, nQ, nA, nS, nQ))
    s_i, q_i, a_i, t_i = np.meshgrid(np.arange(nS), np.arange(nQ), np.arange(nA), np.arange(nS), indexing="ij")
    delta[s_i, q_i, a_i, t_i, qnext[q_i, t_i]] = m.P[s_i, a_i, t_i]
    delta = delta.reshape(Z, nA, Z)

    acc = d.accepting_mask()
    final = np.tile(acc, nS)
    sink = np.zeros(Z, dtype=bool)
    if d.sink is not None:
        sink[np.arange(nS) * nQ + d.sink] = True
    reward = delta[:, :, final].sum(axis=2)
    # accepting product states are absorbing and pay nothing
    delta[final] = 0.0
    fz = np.flatnonzero(final)
    delta[fz, :, fz] = 1.0
    reward[final] = 0.0
    z0 = m.s0 * nQ + int(d.delta[d.initial, letters[m.s0]])
    return ProductMdp(m, d, float(gamma), delta, reward, final, sink, z0)


def consistent_pairs(m: LabeledMdp, d: Dfa) -> np.ndarray:
    """Boolean (S, Q) mask of product states reachable from the initial one.

    Accepting automaton states are not expanded (they are absorbing in the
    product).
    """
    letters = m.label_masks()
    qnext = d.delta[:, letters]  # (Q, S)
    step = m.P.any(axis=1)  # (S, S)
    acc = d.accepting_mask()
    reach = np.zeros((m.n_states, d.n_states), dtype=bool)
    reach[m.s0, d.delta[d.initial, letters[m.s0]]] = True
    while True:
        live = reach & ~acc[None, :]
        hit = (live.T.astype(np.int64) @ step.astype(np.int64)) > 0  # (Q, S')
        new = reach.copy()
        qi, ti = np.nonzero(hit)
        new[ti, qnext[qi, ti]] = True
        if (new == reach).all():
            return reach
        reach = new


def invariant_set(q: int, m: LabeledMdp, d: Dfa, reachable_only: bool = True) -> set:
    """MDP states from which every successor keeps the automaton in ``q``.

    With ``reachable_only`` the candidates are restricted to states ``s`` for
    which ``(s, q)`` is reachable in the product.
    """
    qnext = d.delta[q, m.label_masks()]  # per successor state
    leaves = (m.P > 0) & (qnext != q)[None, None, :]
    keep = ~leaves.any(axis=(1, 2))
    if reachable_only:
        keep &= consistent_pairs(m, d)[:, q]
    return {int(s) for s in np.flatnonzero(keep)}


def guard_set(q: int, q2: int, m: LabeledMdp, d: Dfa, reachable_only: bool = True) -> set:
    """MDP states with some action reaching ``q2`` from ``q`` with positive probability."""
    qnext = d.delta[q, m.label_masks()]
    hits = ((m.P > 0) & (qnext == q2)[None, None, :]).any(axis=(1, 2))
    if reachable_only:
        hits &= consistent_pairs(m, d)[:, q]
    return {int(s) for s in np.flatnonzero(hits)}


class ProductEnvironment:
    """On-the-fly product of a sample-only environment with a DFA.

    ``step`` returns ``((s', q'), reward, done)`` with the indicator reward of
    first entry into an accepting state. ``truncated`` reports whether the
    last ``done`` came from the step limit (then values should still be
    bootstrapped). ``shaping(s, a, s2, q, q2)`` adds a dense term on top of
    the indicator; ``accept_reward`` scales the indicator.
    """

    def __init__(self, env: Environment, dfa: Dfa, *, max_steps: int | None = None,
                 shaping: Callable | None = None, accept_reward: float = 1.0):
        if tuple(sorted(env.ap)) != tuple(dfa.ap):
            raise AlphabetMismatch(f"environment propositions {sorted(env.ap)} differ from DFA {list(dfa.ap)}")
        self.env = env
        self.dfa = dfa
        self.max_steps = max_steps
        self.shaping = shaping
        self.accept_reward = accept_reward
        self.n_actions = env.n_actions
        self.n_q = dfa.n_states
        self.obs_dim = env.observation_dimension or env.state_dimension
        self.obs_offset = getattr(env, "obs_offset", None)
        self.obs_scale = getattr(env, "obs_scale", None)
        self._stop = dfa.accepting_mask().copy()
        if dfa.sink is not None:
            self._stop[dfa.sink] = True
        self.zero_qs = frozenset(int(q) for q in np.flatnonzero(self._stop))
        self.state = None
        self.done = True
        self.truncated = False
        self.t = 0
        self.last_indicator = 0.0

    def letter(self, s) -> int:
        return self.dfa.symbol_index(self.env.label(s))

    def initial_q(self, s) -> int:
        return int(self.dfa.delta[self.dfa.initial, self.letter(s)])

    def stops(self, s, q) -> bool:
        return bool(self._stop[q]) or self.env.absorbing(s)

    def reset(self, rng: np.random.Generator):
        s = self.env.reset(rng)
        return self.reset_to(s, self.initial_q(s))

    def reset_to(self, s, q):
        self.state = (s, int(q))
        self.t = 0
        self.done = self.stops(s, q)
        self.truncated = False
        return self.state

    def transition(self, z, a: int, rng: np.random.Generator):
        """Generative step from an arbitrary product state (does not touch the episode)."""
        if not self.env.generative:
            raise GenerativeUnsupported(type(self.env).__name__)
        s, q = z
        s2, lab = self.env.step(s, a, rng)
        q2 = int(self.dfa.delta[q, self.dfa.symbol_index(lab)])
        hit = float(q not in self.dfa.accepting and q2 in self.dfa.accepting)
        r = self.accept_reward * hit
        if self.shaping is not None:
            r += self.shaping(s, a, s2, q, q2)
        return (s2, q2), r, hit, self.stops(s2, q2)

    def step(self, a: int, rng: np.random.Generator):
        if self.done:
            raise SteppedAfterDone("episode is over; call reset()")
        z2, r, hit, stop = self.transition(self.state, a, rng)
        self.t += 1
        self.last_indicator = hit
        self.truncated = (not stop) and self.max_steps is not None and self.t >= self.max_steps
        self.done = stop or self.truncated
        self.state = z2
        return z2, r, self.done

    def observe(self, s) -> np.ndarray:
        return self.env.observe(s)

    def sample_state(self, rng: np.random.Generator):
        return self.env.sample_state(rng)


def product_step(pe: ProductEnvironment, a: int, rng: np.random.Generator):
    return pe.step(a, rng)
