"""Cart-pole balancing with the classic benchmark physics (Euler, dt = 0.02)."""
from __future__ import annotations

import math

import numpy as np

from .. import kernels
from ..mdp import Environment, SteppedAfterDone

DT = 0.02
ANGLE_LIMIT = 15 * math.pi / 180
POSITION_LIMIT = 2.4
MAX_STEPS = 500
START_SPREAD = 0.05


def fallen(states: np.ndarray) -> np.ndarray:
    states = np.atleast_2d(states)
    return (np.abs(states[:, 0]) > POSITION_LIMIT) | (np.abs(states[:, 2]) > ANGLE_LIMIT)


class CartPoleEnv(Environment):
    n_actions = 2
    state_dimension = 4
    ap = ()
    obs_offset = np.zeros(4)
    obs_scale = np.array([POSITION_LIMIT, 3.0, ANGLE_LIMIT, 3.0])

    def reset(self, rng):
        return rng.uniform(-START_SPREAD, START_SPREAD, 4)

    def step(self, state, action, rng):
        nxt = kernels.cartpole_dynamics(np.asarray(state, dtype=float)[None], np.array([action], dtype=np.int64), DT)
        return nxt[0], frozenset()

    def label(self, state):
        return frozenset()

    def absorbing(self, state):
        return bool(fallen(state)[0])


def cartpole_step(state, action: int, rng=None):
    """One step: ``(state', reward, done)``; reward 1 when the pole is still up."""
    state = np.asarray(state, dtype=float)
    if fallen(state)[0]:
        raise SteppedAfterDone("the pole has already fallen")
    nxt = kernels.cartpole_dynamics(state[None], np.array([action], dtype=np.int64), DT)[0]
    down = bool(fallen(nxt)[0])
    return nxt, (0.0 if down else 1.0), down


class CartPoleTask:
    """Single-automaton-state task view used by the trainer (q is always 0)."""

    n_q = 1
    zero_qs = frozenset()

    def __init__(self, max_steps: int = MAX_STEPS):
        self.env = CartPoleEnv()
        self.max_steps = max_steps
        self.n_actions = 2
        self.obs_dim = 4
        self.obs_offset = self.env.obs_offset
        self.obs_scale = self.env.obs_scale
        self.state = None
        self.done = True
        self.truncated = False
        self.t = 0

    def observe(self, s):
        return np.asarray(s, dtype=float)

    def reset(self, rng):
        return self.reset_to(self.env.reset(rng), 0)

    def reset_to(self, s, q=0):
        self.state = (np.asarray(s, dtype=float), 0)
        self.t = 0
        self.done = bool(fallen(s)[0])
        self.truncated = False
        return self.state

    def sample_state(self, rng):
        return self.env.reset(rng)

    def initial_q(self, s):
        return 0

    def transition(self, z, a, rng):
        s2, r, down = cartpole_step(z[0], a, rng)
        return (s2, 0), r, 0.0, down

    def step(self, a, rng):
        if self.done:
            raise SteppedAfterDone("episode is over; call reset()")
        (s2, _), r, _, down = self.transition(self.state, a, rng)
        self.t += 1
        self.truncated = not down and self.t >= self.max_steps
        self.done = down or self.truncated
        self.state = (s2, 0)
        return self.state, r, self.done


def run_episodes(policy, n_episodes: int, rng: np.random.Generator, max_steps: int = MAX_STEPS) -> np.ndarray:
    """Batched rollouts; ``policy(obs (n, 4)) -> action probabilities (n, 2)``.

    Returns the episode lengths (number of alive steps, at most ``max_steps``).
    """
    states = rng.uniform(-START_SPREAD, START_SPREAD, (n_episodes, 4))
    alive = np.ones(n_episodes, dtype=bool)
    lengths = np.zeros(n_episodes, dtype=np.int64)
    for _ in range(max_steps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        p = policy(states[idx])
        u = rng.random(idx.size)
        actions = (u >= p[:, 0]).astype(np.int64)
        states[idx] = kernels.cartpole_dynamics(states[idx], actions, DT)
        down = fallen(states[idx])
        lengths[idx[~down]] += 1
        alive[idx[down]] = False
    return lengths


def model_policy(model, q: int = 0, greedy: bool = False):
    """Batched action probabilities from a trained approximator."""
    def policy(obs):
        p = np.exp(model.log_policy(obs, np.full(len(obs), q)))
        if greedy:
            p = np.eye(p.shape[1])[p.argmax(axis=1)]
        return p
    return policy


def evaluate(model, n_episodes: int, rng: np.random.Generator, greedy: bool = False) -> dict:
    lengths = run_episodes(model_policy(model, greedy=greedy), n_episodes, rng)
    return {"mean_length": float(lengths.mean()), "min_length": int(lengths.min())}
