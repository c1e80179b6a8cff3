"""Sequential augmented-Lagrangian actor-critic.

Policy evaluation minimises ``sum V`` subject to the soft Bellman residual
``g <= 0`` through an augmented Lagrangian with penalty ``h(x) = max(x, 0)^2``;
policy improvement minimises the squared soft consistency error of short
sub-trajectories. The outer loop updates the scalar duals ``lambda`` and
``nu``; levels of the task automaton are trained one after another, lower
levels frozen.
"""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from .approx import ModularApproximator, make_optimizer
from .mdp import GenerativeUnsupported
from .product import ProductMdp
from .topo import LevelPartition

METRIC_COLUMNS = ("step", "level", "outer_m", "V_z0", "critic_loss", "actor_loss", "violation", "episode_length", "eta")


class EmptyBatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration and duals
# ---------------------------------------------------------------------------

@dataclass
class TrainerConfig:
    eta: float = 3e-4
    gamma: float = 0.99
    tau: float = 1.0
    lambda0: float = 1e4
    nu0: float = 1e5
    beta: float = 2.0
    M: int = 4
    N: int = 2500
    epsilon: float = 0.9
    T: int = 10
    K: int = 10
    buffer_size: int = 10_000
    eta_decay: float = 1.0
    decay_steps: int = 1000
    seed: int = 0
    hidden: tuple = (256, 256)
    optimizer: str = "sgd"
    warmup_paths: int = 0
    max_episode_steps: int = 500
    nominal_start_prob: float = 0.5
    eval_every: int = 0
    eval_episodes: int = 10
    expected_actions: bool = True
    actor: str = "window"  # "window" consistency error or "centred" per-action error

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self) -> None:
        if not self.beta > 1:
            raise ValueError("beta must exceed 1")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.T < 2 or self.K < 1:
            raise ValueError("need T >= 2 and K >= 1")
        if self.eta < 0 or self.tau < 0 or not 0 <= self.gamma < 1:
            raise ValueError("eta, tau must be nonnegative and gamma in [0, 1)")
        if self.actor not in ("window", "centred"):
            raise ValueError(f"unknown actor objective {self.actor!r}")
        if self.lambda0 < 0 or self.nu0 <= 0:
            raise ValueError("need lambda0 >= 0 and nu0 > 0")
        if self.M < 0 or self.N < 0 or self.buffer_size < 1:
            raise ValueError("M, N must be nonnegative and buffer_size positive")

    @classmethod
    def cartpole(cls, **overrides) -> "TrainerConfig":
        base = dict(eta=1e-4, tau=1.0, lambda0=1e4, nu0=1e5, beta=2.0, M=4, N=2500, epsilon=0.9, T=10, K=10,
                    buffer_size=10_000, eta_decay=1.0, decay_steps=1000, optimizer="adam",
                    warmup_paths=10, max_episode_steps=500, eval_every=5000, eval_episodes=10)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def dubins(cls, **overrides) -> "TrainerConfig":
        base = dict(tau=0.05, lambda0=1e3, nu0=1e5, beta=2.0, M=3, N=1500, epsilon=0.9, T=10, K=5,
                    buffer_size=10_000, eta_decay=0.5, decay_steps=1000, optimizer="adam",
                    warmup_paths=5, max_episode_steps=150, actor="centred")
        base.update(overrides)
        return cls(**base)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_json(cls, doc: dict) -> "TrainerConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown trainer config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass(frozen=True)
class DualState:
    lam: float
    nu: float


def h(x):
    """Penalty ``max(x, 0)^2``."""
    return np.square(np.maximum(x, 0.0))


def h_prime(x):
    return 2.0 * np.maximum(x, 0.0)


def dual_update(dual: DualState, violation_old: float, violation_new: float, cfg: TrainerConfig) -> DualState:
    """Multiplier step ``lambda += nu * violation``; ``nu`` grows by ``beta``
    when the violation did not shrink below ``epsilon`` times its old value."""
    lam = dual.lam + dual.nu * violation_new
    nu = cfg.beta * dual.nu if violation_new > cfg.epsilon * violation_old else dual.nu
    return DualState(lam, nu)


def learning_rate(cfg: TrainerConfig, inner_steps: int) -> float:
    return cfg.eta * cfg.eta_decay ** (inner_steps // cfg.decay_steps)


# ---------------------------------------------------------------------------
# replay buffer
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    obs: np.ndarray
    q: np.ndarray
    a: np.ndarray
    r: np.ndarray
    obs2: np.ndarray
    q2: np.ndarray
    terminal: np.ndarray
    seg: np.ndarray  # window index of every transition
    t: np.ndarray  # step inside the window
    n_segments: int
    # successors of every action from obs (generative environments only)
    alt_obs2: np.ndarray | None = None
    alt_q2: np.ndarray | None = None
    alt_r: np.ndarray | None = None
    alt_terminal: np.ndarray | None = None

    def __len__(self):
        return len(self.a)


class ReplayBuffer:
    """Ring buffer of transitions stored in insertion order.

    ``end`` marks the last transition of an episode (termination, timeout or
    leaving the trained level); sub-trajectories never cross it.
    """

    def __init__(self, capacity: int, obs_dim: int, n_actions: int = 0):
        self.capacity = int(capacity)
        self.n_actions = n_actions
        if n_actions:
            self.alt_obs2 = np.zeros((capacity, n_actions, obs_dim))
            self.alt_q2 = np.zeros((capacity, n_actions), dtype=np.int64)
            self.alt_r = np.zeros((capacity, n_actions))
            self.alt_terminal = np.zeros((capacity, n_actions), dtype=bool)
        self.obs = np.zeros((capacity, obs_dim))
        self.obs2 = np.zeros((capacity, obs_dim))
        self.q = np.zeros(capacity, dtype=np.int64)
        self.q2 = np.zeros(capacity, dtype=np.int64)
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.end = np.zeros(capacity, dtype=bool)
        self.count = 0

    def __len__(self):
        return min(self.count, self.capacity)

    def add(self, obs, q, a, r, obs2, q2, terminal, end, alt=None) -> None:
        """``alt`` is ``(obs2, q2, r, terminal)`` stacked over all actions."""
        i = self.count % self.capacity
        if self.n_actions:
            self.alt_obs2[i], self.alt_q2[i], self.alt_r[i], self.alt_terminal[i] = alt
        self.obs[i] = obs
        self.q[i] = q
        self.a[i] = a
        self.r[i] = r
        self.obs2[i] = obs2
        self.q2[i] = q2
        self.terminal[i] = terminal
        self.end[i] = end or terminal
        self.count += 1

    def sample(self, K: int, T: int, rng: np.random.Generator) -> Batch:
        """``K`` windows of up to ``T`` consecutive transitions with distinct starts."""
        n = len(self)
        if n == 0:
            raise EmptyBatch("replay buffer is empty")
        k = min(K, n)
        starts = rng.choice(n, size=k, replace=False) + (self.count - n)
        logical = starts[:, None] + np.arange(T)[None, :]
        valid = logical < self.count
        phys = logical % self.capacity
        ends = self.end[phys] & valid
        # keep steps up to and including the first episode end
        before_end = np.cumsum(ends, axis=1) - ends
        valid &= before_end == 0
        seg, t = np.nonzero(valid)
        idx = phys[seg, t]
        alt = ((self.alt_obs2[idx], self.alt_q2[idx], self.alt_r[idx], self.alt_terminal[idx])
               if self.n_actions else (None,) * 4)
        return Batch(self.obs[idx], self.q[idx], self.a[idx], self.r[idx], self.obs2[idx], self.q2[idx],
                     self.terminal[idx], seg, t, k, *alt)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _value_forward(model: ModularApproximator, obs: np.ndarray, qs: np.ndarray):
    out = np.zeros(len(qs))
    groups = []
    for q in np.unique(qs):
        net = model.value_net(q)
        if net is None:
            continue
        idx = np.flatnonzero(qs == q)
        y, cache = net.forward(model.features(obs[idx], q))
        out[idx] = y[:, 0]
        groups.append((int(q), net, idx, cache))
    return out, groups


def _policy_forward(model: ModularApproximator, obs: np.ndarray, qs: np.ndarray):
    logp = np.zeros((len(qs), model.n_actions))
    groups = []
    for q in np.unique(qs):
        net = model.policy_net(q)
        idx = np.flatnonzero(qs == q)
        logits, cache = net.forward(model.features(obs[idx], q))
        z = logits - logits.max(axis=1, keepdims=True)
        logp[idx] = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        groups.append((int(q), net, idx, cache))
    return logp, groups


def _backprop(groups, grad: np.ndarray, trainable) -> dict:
    """Sum per-group tapes by network; only q in ``trainable`` get gradients."""
    tapes: dict[int, tuple] = {}
    for q, net, idx, cache in groups:
        if q not in trainable:
            continue
        g = grad[idx]
        tape = net.backward(cache, g if g.ndim == 2 else g[:, None])
        key = id(net)
        tapes[key] = (net, tapes[key][1] + tape) if key in tapes else (net, tape)
    return tapes


@dataclass
class LossTerms:
    critic_loss: float
    actor_loss: float
    violation: float
    g: np.ndarray
    consistency: np.ndarray
    critic_tapes: dict = field(default_factory=dict)
    actor_tapes: dict = field(default_factory=dict)


def compute_losses(model: ModularApproximator, batch: Batch, dual: DualState, cfg: TrainerConfig,
                   grads: bool = True) -> LossTerms:
    """Critic and actor objectives on a batch of sub-trajectories.

    Critic: mean over windows of ``sum_t V(s_t) + lam h(g_t) + nu/2 h(g_t)^2``
    with ``g_t = sum_a pi(a|s_t) (r_a + gamma V(s'_a) - tau log pi(a|s_t)) - V(s_t)``
    when the batch carries successors of every action, else the single-sample
    ``r_t + gamma V(s_{t+1}) - tau log pi(a_t|s_t) - V(s_t)``; the policy is a
    constant here. Actor: mean of ``C^2 / 2`` with the soft
    consistency error ``C`` of each window, or, with ``actor="centred"`` and
    all successors at hand, ``sum_a (C_a - mean_b C_b)^2 / 2`` over the one-step errors of every
    action. Values are
    constants in the actor.
    """
    n = len(batch)
    if n == 0:
        raise EmptyBatch("no transitions in batch")
    K = batch.n_segments
    rows = np.arange(n)
    expected = batch.alt_obs2 is not None
    logp_full, p_groups = _policy_forward(model, batch.obs, batch.q)
    logp = logp_full[rows, batch.a]
    if expected:
        nA = batch.alt_q2.shape[1]
        obs_all = np.concatenate([batch.obs, batch.alt_obs2.reshape(n * nA, -1)])
        q_all = np.concatenate([batch.q, batch.alt_q2.reshape(-1)])
        v_all, v_groups = _value_forward(model, obs_all, q_all)
        v, v2a = v_all[:n], v_all[n:].reshape(n, nA)
        v2 = v2a[rows, batch.a]
        pi = np.exp(logp_full)
        live = ~batch.alt_terminal
        g = (pi * (batch.alt_r + cfg.gamma * live * v2a - cfg.tau * logp_full)).sum(axis=1) - v
    else:
        obs_all = np.concatenate([batch.obs, batch.obs2])
        q_all = np.concatenate([batch.q, batch.q2])
        v_all, v_groups = _value_forward(model, obs_all, q_all)
        v, v2 = v_all[:n], v_all[n:]
        g = batch.r + cfg.gamma * (~batch.terminal) * v2 - cfg.tau * logp - v
    hg = h(g)
    critic = float((v.sum() + dual.lam * hg.sum() + 0.5 * dual.nu * (hg * hg).sum()) / K)
    violation = float(hg.sum() / K)

    # consistency error per window
    disc = cfg.gamma ** batch.t
    first = batch.t == 0
    last = np.r_[batch.seg[1:] != batch.seg[:-1], True]
    C = np.zeros(K)
    np.add.at(C, batch.seg, disc * (batch.r - cfg.tau * logp))
    C[batch.seg[first]] -= v[first]
    C[batch.seg[last]] += cfg.gamma ** (batch.t[last] + 1) * (~batch.terminal[last]) * v2[last]
    centred = expected and cfg.actor == "centred"
    if centred:
        Ca = batch.alt_r + cfg.gamma * live * v2a - cfg.tau * logp_full
        Ca -= Ca.mean(axis=1, keepdims=True)  # V(s) and any offset in the critic cancel
        actor = float(0.5 * (Ca * Ca).sum() / K)
    else:
        actor = float(0.5 * np.mean(C * C))
    out = LossTerms(critic, actor, violation, g, C)
    if not grads:
        return out

    trainable = set(model.scope)
    w = dual.lam * h_prime(g) + dual.nu * hg * h_prime(g)
    dv = (1.0 - w) / K
    if expected:
        dv2 = (w[:, None] * cfg.gamma * pi * live / K).reshape(-1)
    else:
        dv2 = w * cfg.gamma * (~batch.terminal) / K
    out.critic_tapes = _backprop(v_groups, np.concatenate([dv, dv2]), trainable)

    if centred:
        # centred one-step consistency of every action; the minimiser is
        # softmax(Q / tau) however far the critic is from the soft optimum
        dlogits = -cfg.tau * Ca / K
    else:
        # d(C^2/2)/dlogits = C * disc * (-tau) * (onehot - pi), averaged over windows
        coef = -cfg.tau * C[batch.seg] * disc / K
        onehot = np.zeros_like(logp_full)
        onehot[np.arange(n), batch.a] = 1.0
        dlogits = coef[:, None] * (onehot - np.exp(logp_full))
    out.actor_tapes = _backprop(p_groups, dlogits, trainable)
    return out


def g_tilde(model, batch: Batch, cfg: TrainerConfig) -> np.ndarray:
    """Soft Bellman residual per transition (action-expected when possible)."""
    return compute_losses(model, batch, DualState(0.0, 1.0), cfg, grads=False).g


def g_tilde_generative(model, task, z, cfg: TrainerConfig, rng: np.random.Generator) -> float:
    """Residual with one sampled successor per action, weighted by the policy."""
    if not getattr(task.env, "generative", False):
        raise GenerativeUnsupported(type(task.env).__name__)
    s, q = z
    obs = task.observe(s)
    logp = model.log_policy(obs[None], np.array([q]))[0]
    total = 0.0
    for a in range(len(logp)):
        (s2, q2), r, _, stop = task.transition(z, a, rng)
        v2 = 0.0 if stop and task.env.absorbing(s2) else model.values(task.observe(s2)[None], np.array([q2]))[0]
        total += math.exp(logp[a]) * (r + cfg.gamma * v2 - cfg.tau * logp[a])
    return total - model.values(obs[None], np.array([q]))[0]


def critic_loss(model, batch: Batch, dual: DualState, cfg: TrainerConfig):
    terms = compute_losses(model, batch, dual, cfg)
    return terms.critic_loss, terms.critic_tapes


def actor_loss(model, batch: Batch, cfg: TrainerConfig):
    terms = compute_losses(model, batch, DualState(0.0, 1.0), cfg)
    return terms.actor_loss, terms.actor_tapes


def consistency_error(values: Callable, logpi: Callable, path, rewards, gamma: float, tau: float) -> float:
    """Soft consistency error of a finite path ``s_0 a_0 ... s_T`` (V(s_T) bootstrapped)."""
    states, actions = path
    T = len(actions)
    c = -values(states[0]) + gamma**T * values(states[T])
    for t, (s, a) in enumerate(zip(states[:-1], actions)):
        c += gamma**t * (rewards[t] - tau * logpi(s, a))
    return float(c)


# ---------------------------------------------------------------------------
# training driver
# ---------------------------------------------------------------------------

class _Rollout:
    """Episode bookkeeping for one training stage."""

    def __init__(self, task, model, cfg, scope, curriculum: bool, rng):
        self.task, self.model, self.cfg = task, model, cfg
        self.scope = set(scope)
        self.scope_list = sorted(scope)
        self.curriculum = curriculum
        self.rng = rng
        self.active = False
        self.length = 0
        self.completed: list[int] = []
        self.steps = 0

    def _start(self):
        task, rng = self.task, self.rng
        s, q = task.reset(rng)
        if self.curriculum and not (q in self.scope and rng.random() < self.cfg.nominal_start_prob):
            s = task.sample_state(rng)
            q = self.scope_list[int(rng.integers(len(self.scope_list)))]
            task.reset_to(s, q)
        self.active = not task.done
        self.length = 0

    def _alternatives(self, z, taken: int):
        """Generative successors of the actions not taken (slot ``taken`` is filled by the caller)."""
        task = self.task
        nA = task.n_actions
        obs2 = np.zeros((nA, task.obs_dim))
        q2 = np.zeros(nA, dtype=np.int64)
        r = np.zeros(nA)
        term = np.zeros(nA, dtype=bool)
        for b in range(nA):
            if b != taken:
                (sb, qb), r[b], _, term[b] = task.transition(z, b, self.rng)
                obs2[b], q2[b] = task.observe(sb), qb
        return obs2, q2, r, term

    def segment(self, buffer: ReplayBuffer, T: int) -> int:
        """Extend the current episode by up to ``T`` steps; returns steps taken."""
        task, model, rng = self.task, self.model, self.rng
        tries = 0
        while not self.active:
            self._start()
            tries += 1
            if tries > 1000:
                raise RuntimeError("could not start an episode inside the trained level")
        taken = 0
        for _ in range(T):
            s, q = task.state
            obs = task.observe(s)
            a = model.act(obs, q, rng)
            alt = self._alternatives((s, q), a) if buffer.n_actions else None
            (s2, q2), r, done = task.step(a, rng)
            self.length += 1
            leaves = q2 not in self.scope
            terminal = done and not task.truncated
            end = done or leaves or self.length >= self.cfg.max_episode_steps
            if alt is not None:
                alt[0][a], alt[1][a], alt[2][a], alt[3][a] = task.observe(s2), q2, r, terminal
            buffer.add(obs, q, a, r, task.observe(s2), q2, terminal, end, alt)
            taken += 1
            if end:
                self.active = False
                self.completed.append(self.length)
                break
        self.steps += taken
        return taken


@dataclass
class TrainResult:
    model: ModularApproximator
    metrics: list
    evaluations: list
    duals: list


class MetricsWriter:
    def __init__(self, path=None):
        self.rows: list[dict] = []
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._w = csv.writer(self._fh)
            self._w.writerow(METRIC_COLUMNS)

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self._fh is not None:
            self._w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])

    def close(self) -> None:
        if self._fh is not None:
            self._fh.flush()
            self._fh.close()
            self._fh = None


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


def _stages(task, partition: LevelPartition | None, topo: bool):
    if partition is None:
        qs = [q for q in range(task.n_q) if q not in task.zero_qs]
        return [(1, qs)], set(task.zero_qs)
    zero = set(partition.states(0)) | set(task.zero_qs)
    if topo:
        return [(i, partition.states(i)) for i in range(1, partition.n_levels)], zero
    qs = sorted(q for i in range(1, partition.n_levels) for q in partition.states(i))
    return [(1, qs)], zero


def train(task, cfg: TrainerConfig, partition: LevelPartition | None = None, *, topo: bool = True,
          single_network: bool = False, metrics_path=None, checkpoint_dir=None,
          evaluate: Callable | None = None, budget_scale: float = 1.0) -> TrainResult:
    """Run the constrained actor-critic trainer, level by level.

    ``task`` is a ProductEnvironment-like object. With ``topo`` each level is
    trained with its own nets while lower levels stay frozen, starting
    episodes inside the level; otherwise all non-zero automaton states are
    trained together from the nominal initial state. ``evaluate(model)`` is
    called every ``cfg.eval_every`` environment steps. ``budget_scale``
    multiplies the inner iteration count N.
    """
    rng = np.random.default_rng(cfg.seed)
    expected = cfg.expected_actions and getattr(task.env, "generative", False)
    stages, zero = _stages(task, partition, topo)
    model = ModularApproximator(task.obs_dim, task.n_actions, task.n_q, hidden=cfg.hidden,
                                single_network=single_network, seed=cfg.seed, zero_qs=zero,
                                obs_offset=task.obs_offset, obs_scale=task.obs_scale)
    optimizer = make_optimizer(cfg.optimizer)
    writer = MetricsWriter(metrics_path)
    evaluations, duals = [], []
    n_inner = int(round(cfg.N * budget_scale))
    total_steps = 0
    probe_s, probe_q = task.reset(np.random.default_rng(cfg.seed + 7919))
    probe_obs = task.observe(probe_s)
    try:
        for level, qs in stages:
            model.set_scope(qs, level)
            buffer = ReplayBuffer(cfg.buffer_size, task.obs_dim, task.n_actions if expected else 0)
            rollout = _Rollout(task, model, cfg, qs, curriculum=topo, rng=rng)
            for _ in range(cfg.warmup_paths):
                total_steps += rollout.segment(buffer, cfg.T)
            probe = probe_q if probe_q in set(qs) | set(model.frozen_value) else qs[0]
            dual = DualState(cfg.lambda0, cfg.nu0)
            inner = 0
            next_eval = cfg.eval_every
            for m in range(cfg.M):
                viol_old = _violation(model, buffer, dual, cfg, rng)
                for _ in range(n_inner):
                    total_steps += rollout.segment(buffer, cfg.T)
                    eta = learning_rate(cfg, inner)
                    batch = buffer.sample(cfg.K, cfg.T, rng)
                    terms = compute_losses(model, batch, dual, cfg)
                    for net, tape in terms.critic_tapes.values():
                        optimizer.step(net, tape, eta)
                    for net, tape in terms.actor_tapes.values():
                        optimizer.step(net, tape, eta)
                    inner += 1
                    writer.write({
                        "step": total_steps, "level": level, "outer_m": m,
                        "V_z0": model.value(probe_obs, probe), "critic_loss": terms.critic_loss,
                        "actor_loss": terms.actor_loss, "violation": terms.violation,
                        "episode_length": rollout.completed[-1] if rollout.completed else float("nan"),
                        "eta": eta,
                    })
                    if evaluate is not None and cfg.eval_every and rollout.steps >= next_eval:
                        next_eval += cfg.eval_every
                        evaluations.append({"step": total_steps, "level": level, **evaluate(model)})
                viol_new = _violation(model, buffer, dual, cfg, rng)
                duals.append({"level": level, "outer_m": m, "lambda": dual.lam, "nu": dual.nu,
                              "violation_before": viol_old, "violation_after": viol_new})
                dual = dual_update(dual, viol_old, viol_new, cfg)
            if checkpoint_dir is not None:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                model.save(Path(checkpoint_dir) / f"level{level}.json")
    finally:
        writer.close()
    return TrainResult(model, writer.rows, evaluations, duals)


def _violation(model, buffer: ReplayBuffer, dual: DualState, cfg: TrainerConfig, rng) -> float:
    if len(buffer) == 0:
        return 0.0
    batch = buffer.sample(cfg.K, cfg.T, rng)
    return compute_losses(model, batch, dual, cfg, grads=False).violation


def solve_subproblem(model, task, buffer: ReplayBuffer, dual: DualState, cfg: TrainerConfig, *,
                     rng: np.random.Generator, optimizer=None, scope=None, curriculum: bool = False,
                     rollout: _Rollout | None = None) -> dict:
    """N inner iterations with fixed duals: collect a path segment, then one
    critic step and one actor step on K sampled sub-trajectories."""
    optimizer = optimizer or make_optimizer(cfg.optimizer)
    if rollout is None:
        rollout = _Rollout(task, model, cfg, scope or model.scope, curriculum, rng)
    norms = []
    for n in range(cfg.N):
        rollout.segment(buffer, cfg.T)
        eta = learning_rate(cfg, n)
        batch = buffer.sample(cfg.K, cfg.T, rng)
        terms = compute_losses(model, batch, dual, cfg)
        norms.append(eta * sum(t.norm() for _, t in terms.critic_tapes.values()))
        for net, tape in terms.critic_tapes.values():
            optimizer.step(net, tape, eta)
        for net, tape in terms.actor_tapes.values():
            optimizer.step(net, tape, eta)
    return {"critic_update_norms": norms, "steps": rollout.steps}


# ---------------------------------------------------------------------------
# exact tabular critic (oracle cross-check)
# ---------------------------------------------------------------------------

def expected_residual(values: np.ndarray, policy: np.ndarray, product: ProductMdp, tau: float,
                      gamma: float) -> np.ndarray:
    """``sum_a pi (R + gamma E V' - tau log pi) - V`` at every product state."""
    with np.errstate(divide="ignore"):
        logp = np.where(policy > 0, np.log(policy), 0.0)
    q = product.reward + gamma * product.delta @ values
    return (policy * (q - tau * logp)).sum(axis=1) - values


def tabular_critic(product: ProductMdp, policy: np.ndarray, cfg: TrainerConfig, *, active=None,
                   values=None, weights=None, gtol: float = 1e-14) -> dict:
    """Augmented-Lagrangian policy evaluation with exact expectations.

    Each subproblem ``min c.V + lam sum h(g) + nu/2 sum h(g)^2`` over the
    active entries of V is solved with L-BFGS; duals follow ``dual_update``.
    """
    n = product.n_states
    active = ~(product.final | product.sink) if active is None else np.asarray(active, dtype=bool)
    base = np.zeros(n) if values is None else np.array(values, dtype=float)
    c = np.ones(int(active.sum())) if weights is None else np.asarray(weights, dtype=float)
    P_pi = np.einsum("za,zay->zy", policy, product.delta)
    J = cfg.gamma * P_pi - np.eye(n)
    Ja = J[np.ix_(active, active)]
    with np.errstate(divide="ignore"):
        logp = np.where(policy > 0, np.log(policy), 0.0)
    b_full = (policy * (product.reward - cfg.tau * logp)).sum(axis=1)

    def residual(x):
        v = base.copy()
        v[active] = x
        return (b_full + J @ v)[active]

    def objective(x, lam, nu):
        # scaled by 1 / (lam + nu) so L-BFGS does not stall on the stiff penalty
        s = 1.0 / (1.0 + lam + nu)
        g = residual(x)
        hg = h(g)
        w = lam * h_prime(g) + nu * hg * h_prime(g)
        return s * float(c @ x + lam * hg.sum() + 0.5 * nu * (hg * hg).sum()), s * (c + Ja.T @ w)

    dual = DualState(cfg.lambda0, cfg.nu0)
    x = base[active].copy()
    history = []
    viol_old = float(h(residual(x)).sum())
    for m in range(cfg.M):
        res = minimize(objective, x, args=(dual.lam, dual.nu), jac=True, method="L-BFGS-B",
                       options={"maxiter": 20_000, "gtol": gtol, "ftol": 1e-16, "maxcor": 20})
        x = res.x
        viol_new = float(h(residual(x)).sum())
        history.append({"lambda": dual.lam, "nu": dual.nu, "violation": viol_new,
                        "grad_norm": float(np.linalg.norm(res.jac))})
        dual = dual_update(dual, viol_old, viol_new, cfg)
        viol_old = viol_new
    v = base.copy()
    v[active] = x
    return {"values": v, "history": history, "dual": dual}
