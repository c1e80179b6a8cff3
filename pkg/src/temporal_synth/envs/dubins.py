"""Dubins car in a labeled planar workspace.

State ``(x, y, theta)``, constant speed, three steering rates. Each step adds
Gaussian noise and wraps theta to (-pi, pi].
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .. import kernels
from ..mdp import Environment
from ..product import ProductEnvironment
from ..scltl import Dfa

SEQUENTIAL_VISITING = "!O U ((A & ((!D & !O) U C)) | (D & ((!A & !O) U B)))"


class NoSubgoal(KeyError):
    pass


def _inside(rect, x, y) -> bool:
    x0, x1, y0, y1 = rect
    return x0 <= x <= x1 and y0 <= y <= y1


@dataclass
class WorkspaceConfig:
    """Rectangles are ``(xmin, xmax, ymin, ymax)``."""

    bounds: tuple = (0.0, 5.0, 0.0, 5.0)
    regions: dict = field(default_factory=dict)
    obstacles: list = field(default_factory=list)
    subgoals: dict = field(default_factory=dict)  # region name -> (x, y)
    subgoal_priority: tuple = ("A", "B", "C", "D")
    start: tuple = (3.0, 0.0, math.pi / 2)
    speed: float = 0.3
    dt: float = 1.0
    noise_std: float = 0.01
    controls: tuple = (-2 * math.pi / 15, 0.0, 2 * math.pi / 15)

    @classmethod
    def default(cls) -> "WorkspaceConfig":
        return cls.from_json(json.loads(resources.files("temporal_synth.data").joinpath("dubins_workspace.json")
                                        .read_text()))

    @classmethod
    def from_json(cls, doc: dict) -> "WorkspaceConfig":
        doc = dict(doc)
        cfg = cls(
            bounds=tuple(doc.pop("bounds")),
            regions={k: tuple(v) for k, v in doc.pop("regions").items()},
            obstacles=[tuple(o) for o in doc.pop("obstacles", [])],
            subgoals={k: tuple(v) for k, v in doc.pop("subgoals", {}).items()},
        )
        for key in ("subgoal_priority", "start", "controls"):
            if key in doc:
                setattr(cfg, key, tuple(doc.pop(key)))
        for key in ("speed", "dt", "noise_std"):
            if key in doc:
                setattr(cfg, key, float(doc.pop(key)))
        if doc:
            raise ValueError(f"unknown workspace keys: {sorted(doc)}")
        return cfg

    def to_json(self) -> dict:
        return {
            "bounds": list(self.bounds),
            "regions": {k: list(v) for k, v in self.regions.items()},
            "obstacles": [list(o) for o in self.obstacles],
            "subgoals": {k: list(v) for k, v in self.subgoals.items()},
            "subgoal_priority": list(self.subgoal_priority),
            "start": list(self.start),
            "speed": self.speed,
            "dt": self.dt,
            "noise_std": self.noise_std,
            "controls": list(self.controls),
        }

    @property
    def ap(self) -> tuple:
        return tuple(sorted(set(self.regions) | ({"O"} if self.obstacles else set())))

    def in_bounds(self, x, y) -> bool:
        return _inside(self.bounds, x, y)

    def in_obstacle(self, x, y) -> bool:
        return any(_inside(o, x, y) for o in self.obstacles)

    def label(self, x, y) -> frozenset:
        props = {name for name, rect in self.regions.items() if _inside(rect, x, y)}
        if self.in_obstacle(x, y):
            props.add("O")
        return frozenset(props)

    def center(self, name: str) -> tuple:
        if name in self.subgoals:
            return self.subgoals[name]
        x0, x1, y0, y1 = self.regions[name]
        return ((x0 + x1) / 2, (y0 + y1) / 2)


class DubinsEnv(Environment):
    n_actions = 3
    state_dimension = 3
    observation_dimension = 4  # x, y, cos theta, sin theta

    def __init__(self, workspace: WorkspaceConfig | None = None, noise: bool = True):
        self.ws = workspace or WorkspaceConfig.default()
        self.ap = self.ws.ap
        self.noise = noise
        self._controls = np.asarray(self.ws.controls, dtype=float)
        x0, x1, y0, y1 = self.ws.bounds
        self.obs_offset = np.array([(x0 + x1) / 2, (y0 + y1) / 2, 0.0, 0.0])
        self.obs_scale = np.array([(x1 - x0) / 2, (y1 - y0) / 2, 1.0, 1.0])

    def reset(self, rng):
        return np.array(self.ws.start, dtype=float)

    def step(self, state, action, rng):
        state = np.asarray(state, dtype=float)
        noise = rng.normal(0.0, self.ws.noise_std, (1, 3)) if self.noise else np.zeros((1, 3))
        nxt = kernels.dubins_dynamics(state[None], self._controls[[action]], noise, self.ws.speed, self.ws.dt)[0]
        return nxt, self.label(nxt)

    def label(self, state):
        return self.ws.label(state[0], state[1])

    def absorbing(self, state):
        return not self.ws.in_bounds(state[0], state[1])

    def observe(self, state):
        return np.array([state[0], state[1], math.cos(state[2]), math.sin(state[2])])

    def out_of_bounds(self, state) -> bool:
        return self.absorbing(state)

    def sample_state(self, rng):
        x0, x1, y0, y1 = self.ws.bounds
        while True:
            x, y = rng.uniform(x0, x1), rng.uniform(y0, y1)
            if not self.ws.in_obstacle(x, y):
                return np.array([x, y, rng.uniform(-math.pi, math.pi)])


def dubins_step(z, u_index: int, rng, env: DubinsEnv | None = None):
    env = env or DubinsEnv()
    return env.step(z, u_index, rng)


def subgoal_table(dfa: Dfa, ws: WorkspaceConfig) -> dict:
    """Subgoal for every non-terminal automaton state.

    The target region is the one whose single-letter step brings the
    automaton closest (in letters) to acceptance; ties follow
    ``ws.subgoal_priority``. Explicit ``ws.subgoals`` entries override the
    region centres.
    """
    stop = set(dfa.accepting) | ({dfa.sink} if dfa.sink is not None else set())
    singles = [r for r in ws.subgoal_priority if r in dfa.ap]
    letters = [0] + [dfa.symbol_index([r]) for r in singles]
    dist = {q: 0 for q in dfa.accepting}
    changed = True
    while changed:
        changed = False
        for q in dfa.states:
            best = min((dist[int(dfa.delta[q, l])] + 1 for l in letters if int(dfa.delta[q, l]) in dist), default=None)
            if best is not None and best < dist.get(q, math.inf):
                dist[q] = best
                changed = True
    table = {}
    for q in dfa.states:
        if q in stop:
            continue
        options = [(dist.get(int(dfa.delta[q, dfa.symbol_index([r])]), math.inf), i, r) for i, r in enumerate(singles)
                   if int(dfa.delta[q, dfa.symbol_index([r])]) != q]
        if options:
            d, _, r = min(options)
            if d < math.inf:
                table[q] = ws.center(r)
    return table


def shaped_reward(z, zdot, q: int, subgoals: dict, scale: float = 5.0) -> float:
    """``scale * <planar velocity, unit vector to the subgoal of q>``."""
    if q not in subgoals:
        raise NoSubgoal(q)
    d = np.asarray(subgoals[q], dtype=float) - np.asarray(z[:2], dtype=float)
    norm = float(np.hypot(d[0], d[1]))
    if norm == 0.0:
        return 0.0
    return float(scale * (zdot[0] * d[0] + zdot[1] * d[1]) / norm)


class DubinsTask(ProductEnvironment):
    """Product of the car with the task DFA and the layered rewards:
    +10 on acceptance, -1 on obstacle or leaving the workspace, plus the
    subgoal shaping term."""

    def __init__(self, dfa: Dfa, workspace: WorkspaceConfig | None = None, *, max_steps: int = 150,
                 noise: bool = True, accept_reward: float = 10.0, crash_penalty: float = 1.0,
                 shaping_scale: float = 5.0):
        env = DubinsEnv(workspace, noise)
        self.subgoals = subgoal_table(dfa, env.ws)
        self.crash_penalty = crash_penalty
        self.shaping_scale = shaping_scale
        super().__init__(env, dfa, max_steps=max_steps, shaping=self._shaping, accept_reward=accept_reward)

    def _shaping(self, s, a, s2, q, q2) -> float:
        ws = self.env.ws
        r = 0.0
        if ws.in_obstacle(s2[0], s2[1]) or not ws.in_bounds(s2[0], s2[1]):
            r -= self.crash_penalty
        if q in self.subgoals and self.shaping_scale:
            zdot = (ws.speed * math.cos(s[2]), ws.speed * math.sin(s[2]))
            r += shaped_reward(s, zdot, q, self.subgoals, self.shaping_scale)
        return r

    def sample_state(self, rng):
        return self.env.sample_state(rng)


def rollout(task: DubinsTask, policy, rng: np.random.Generator, *, max_steps: int | None = None):
    """Run one episode from the nominal start; ``policy(obs, q, rng) -> action``.

    Returns ``(accepted, rows)`` with rows ``(t, x, y, theta, q, u, r)``.
    """
    s, q = task.reset(rng)
    rows = []
    limit = max_steps or task.max_steps
    accepted = q in task.dfa.accepting
    t = 0
    while not task.done and t < limit:
        a = policy(task.observe(s), q, rng)
        (s2, q2), r, done = task.step(a, rng)
        rows.append((t, s[0], s[1], s[2], q, task.env.ws.controls[a], r))
        s, q = s2, q2
        t += 1
        accepted = accepted or q in task.dfa.accepting
    rows.append((t, s[0], s[1], s[2], q, float("nan"), 0.0))
    return accepted, rows


def write_trajectory(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y", "theta", "q", "u", "r"])
        for row in rows:
            w.writerow([row[0], *(repr(float(v)) for v in row[1:4]), row[4], repr(float(row[5])), repr(float(row[6]))])
