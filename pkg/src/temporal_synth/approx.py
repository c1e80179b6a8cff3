"""Numpy MLPs with hand-written backprop and per-automaton-state routing."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

DEFAULT_HIDDEN = (256, 256)
CHECKPOINT_FORMAT = "temporal-synth-checkpoint/1"


class ShapeMismatch(ValueError):
    pass


class UnknownAutomatonState(KeyError):
    pass


class CheckpointMismatch(ValueError):
    pass


class GradientTape:
    """Per-parameter gradient arrays, aligned with ``Mlp.params``."""

    def __init__(self, grads):
        self.grads = list(grads)

    @classmethod
    def zeros_like(cls, net: "Mlp") -> "GradientTape":
        return cls(np.zeros_like(p) for p in net.params)

    def __add__(self, other: "GradientTape") -> "GradientTape":
        if len(self.grads) != len(other.grads) or any(a.shape != b.shape for a, b in zip(self.grads, other.grads)):
            raise ShapeMismatch("gradient tapes have different shapes")
        return GradientTape(a + b for a, b in zip(self.grads, other.grads))

    def __mul__(self, k: float) -> "GradientTape":
        return GradientTape(g * k for g in self.grads)

    __rmul__ = __mul__

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.grads)))

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads])


class Mlp:
    """Fully connected ReLU network, ``y = W_L relu(... relu(x W_1 + b_1)) + b_L``.

    Hidden layers use fan-in scaled uniform initialisation; the output layer
    starts at zero unless ``zero_output=False``.
    """

    def __init__(self, sizes, rng: np.random.Generator | None = None, *, zero_output: bool = True):
        self.sizes = tuple(int(n) for n in sizes)
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output width")
        rng = np.random.default_rng() if rng is None else rng
        self.params = []
        n_layers = len(self.sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            if i == n_layers - 1 and zero_output:
                W, b = np.zeros((fan_in, fan_out)), np.zeros(fan_out)
            else:
                W = rng.uniform(-bound, bound, (fan_in, fan_out))
                b = rng.uniform(-bound, bound, fan_out)
            self.params += [W, b]

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def forward(self, x: np.ndarray):
        """Return ``(output, cache)``; the cache feeds ``backward``."""
        h = np.atleast_2d(np.asarray(x, dtype=float))
        if h.shape[1] != self.sizes[0]:
            raise ShapeMismatch(f"input width {h.shape[1]} != {self.sizes[0]}")
        cache = []
        for i in range(self.n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            cache.append(h)
            h = h @ W + b
            if i < self.n_layers - 1:
                h = np.maximum(h, 0.0)
        return h, cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out: np.ndarray) -> GradientTape:
        """Reverse-mode gradient given dLoss/dOutput for the cached batch."""
        g = np.atleast_2d(np.asarray(grad_out, dtype=float))
        if g.shape != (cache[0].shape[0], self.sizes[-1]):
            raise ShapeMismatch(f"output gradient shape {g.shape} does not match the forward pass")
        grads = [None] * len(self.params)
        for i in reversed(range(self.n_layers)):
            h = cache[i]
            grads[2 * i] = h.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i:
                g = (g @ self.params[2 * i].T) * (h > 0)
        return GradientTape(grads)

    def copy(self) -> "Mlp":
        out = Mlp.__new__(Mlp)
        out.sizes = self.sizes
        out.params = [p.copy() for p in self.params]
        return out

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_params():
            raise ShapeMismatch(f"expected {self.n_params()} parameters, got {flat.size}")
        k = 0
        for p in self.params:
            p[...] = flat[k:k + p.size].reshape(p.shape)
            k += p.size


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sgd_step(net: Mlp, tape: GradientTape, eta: float) -> Mlp:
    if eta < 0:
        raise ValueError("learning rate must be nonnegative")
    if len(tape.grads) != len(net.params):
        raise ShapeMismatch("tape does not match network")
    for p, g in zip(net.params, tape.grads):
        if p.shape != g.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {p.shape}")
        p -= eta * g
    return net


class Sgd:
    def step(self, net: Mlp, tape: GradientTape, eta: float) -> None:
        sgd_step(net, tape, eta)


class Adam:
    """Adaptive-moment optimiser keyed by network identity."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: dict[int, tuple] = {}

    def step(self, net: Mlp, tape: GradientTape, eta: float) -> None:
        key = id(net)
        if key not in self.state:
            self.state[key] = (0, [np.zeros_like(p) for p in net.params], [np.zeros_like(p) for p in net.params])
        t, m, v = self.state[key]
        t += 1
        b1, b2 = self.beta1, self.beta2
        corr = np.sqrt(1 - b2**t) / (1 - b1**t)
        for p, g, mi, vi in zip(net.params, tape.grads, m, v):
            mi *= b1
            mi += (1 - b1) * g
            vi *= b2
            vi += (1 - b2) * g * g
            p -= eta * corr * mi / (np.sqrt(vi) + self.eps)
        self.state[key] = (t, m, v)


def make_optimizer(name: str):
    if name == "sgd":
        return Sgd()
    if name == "adam":
        return Adam()
    raise ValueError(f"unknown optimizer {name!r}")


class ModularApproximator:
    """One value net and one policy net per automaton state in scope.

    States in ``zero_qs`` (accepting, sink, level 0) have value 0. States of
    already trained levels keep their frozen nets. In single-network mode a
    single shared pair serves every q and the integer q is appended to the
    input, which is the baseline the modular scheme is compared against.
    """

    def __init__(self, obs_dim: int, n_actions: int, n_q: int, *, hidden=DEFAULT_HIDDEN,
                 single_network: bool = False, seed: int = 0, zero_qs=(), obs_offset=None, obs_scale=None):
        self.obs_dim = int(obs_dim)
        self.n_actions = int(n_actions)
        self.n_q = int(n_q)
        self.hidden = tuple(hidden)
        self.single_network = bool(single_network)
        self.zero_qs = set(int(q) for q in zero_qs)
        self.obs_offset = np.zeros(obs_dim) if obs_offset is None else np.asarray(obs_offset, dtype=float)
        self.obs_scale = np.ones(obs_dim) if obs_scale is None else np.asarray(obs_scale, dtype=float)
        self.rng = np.random.default_rng(seed)
        self.scope: tuple = ()
        self.level = 0
        self.value_nets: dict[int, Mlp] = {}
        self.policy_nets: dict[int, Mlp] = {}
        self.frozen_value: dict[int, Mlp] = {}
        self.frozen_policy: dict[int, Mlp] = {}

    @property
    def in_dim(self) -> int:
        return self.obs_dim + (1 if self.single_network else 0)

    def _new_pair(self):
        v = Mlp((self.in_dim, *self.hidden, 1), self.rng)
        p = Mlp((self.in_dim, *self.hidden, self.n_actions), self.rng)
        return v, p

    def set_scope(self, qs, level: int = 1) -> None:
        """Freeze the current scope and start fresh nets for ``qs``."""
        self.frozen_value.update(self.value_nets)
        self.frozen_policy.update(self.policy_nets)
        self.value_nets, self.policy_nets = {}, {}
        self.scope = tuple(sorted(int(q) for q in qs))
        self.level = level
        if self.single_network:
            v, p = self._new_pair()
            for q in self.scope:
                self.value_nets[q], self.policy_nets[q] = v, p
        else:
            for q in self.scope:
                self.value_nets[q], self.policy_nets[q] = self._new_pair()

    def features(self, obs: np.ndarray, q: int) -> np.ndarray:
        x = (np.atleast_2d(obs) - self.obs_offset) / self.obs_scale
        if self.single_network:
            x = np.concatenate([x, np.full((x.shape[0], 1), float(q))], axis=1)
        return x

    def value_net(self, q: int) -> Mlp | None:
        """Network for V(., q); None means the value is identically zero."""
        q = int(q)
        if q in self.zero_qs:
            return None
        net = self.value_nets.get(q) or self.frozen_value.get(q)
        if net is None:
            raise UnknownAutomatonState(q)
        return net

    def policy_net(self, q: int) -> Mlp:
        q = int(q)
        net = self.policy_nets.get(q) or self.frozen_policy.get(q)
        if net is None:
            raise UnknownAutomatonState(q)
        return net

    def value(self, obs, q: int) -> float:
        net = self.value_net(q)
        return 0.0 if net is None else float(net(self.features(obs, q))[0, 0])

    def values(self, obs: np.ndarray, qs: np.ndarray) -> np.ndarray:
        obs = np.atleast_2d(obs)
        qs = np.asarray(qs)
        out = np.zeros(len(qs))
        for q in np.unique(qs):
            net = self.value_net(q)
            if net is not None:
                idx = np.flatnonzero(qs == q)
                out[idx] = net(self.features(obs[idx], q))[:, 0]
        return out

    def policy_dist(self, obs, q: int) -> np.ndarray:
        logits = self.policy_net(q)(self.features(obs, q))
        return np.exp(log_softmax(logits))[0]

    def log_policy(self, obs: np.ndarray, qs: np.ndarray) -> np.ndarray:
        obs = np.atleast_2d(obs)
        qs = np.asarray(qs)
        out = np.zeros((len(qs), self.n_actions))
        for q in np.unique(qs):
            idx = np.flatnonzero(qs == q)
            out[idx] = log_softmax(self.policy_net(q)(self.features(obs[idx], q)))
        return out

    def act(self, obs, q: int, rng: np.random.Generator, greedy: bool = False) -> int:
        p = self.policy_dist(obs, q)
        if greedy:
            return int(np.argmax(p))
        return int(min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), self.n_actions - 1))

    # -- checkpoint ----------------------------------------------------------
    def _entries(self):
        seen: dict[int, int] = {}
        nets: list[Mlp] = []
        entries = []
        for role, table, status in (("value", self.value_nets, "active"), ("policy", self.policy_nets, "active"),
                                    ("value", self.frozen_value, "frozen"), ("policy", self.frozen_policy, "frozen")):
            for q in sorted(table):
                net = table[q]
                if id(net) not in seen:
                    seen[id(net)] = len(nets)
                    nets.append(net)
                entries.append({"role": role, "q": q, "status": status, "net": seen[id(net)]})
        return nets, entries

    def save(self, path) -> tuple[Path, Path]:
        """Write ``path`` (JSON header) and ``path`` with suffix ``.bin`` (float64 LE)."""
        header_path = Path(path)
        blob_path = header_path.with_suffix(".bin")
        nets, entries = self._entries()
        offset = 0
        net_docs = []
        chunks = []
        for net in nets:
            flat = net.get_flat()
            net_docs.append({"sizes": list(net.sizes), "offset": offset, "count": int(flat.size)})
            offset += flat.size
            chunks.append(flat)
        header = {
            "format": CHECKPOINT_FORMAT,
            "obs_dim": self.obs_dim,
            "n_actions": self.n_actions,
            "n_q": self.n_q,
            "hidden": list(self.hidden),
            "single_network": self.single_network,
            "zero_qs": sorted(self.zero_qs),
            "obs_offset": self.obs_offset.tolist(),
            "obs_scale": self.obs_scale.tolist(),
            "scope": list(self.scope),
            "level": self.level,
            "nets": net_docs,
            "entries": entries,
            "blob": blob_path.name,
        }
        blob = np.concatenate(chunks) if chunks else np.zeros(0)
        blob.astype("<f8").tofile(blob_path)
        with open(header_path, "w") as fh:
            json.dump(header, fh, indent=1)
        return header_path, blob_path

    @classmethod
    def load(cls, path) -> "ModularApproximator":
        header_path = Path(path)
        with open(header_path) as fh:
            header = json.load(fh)
        if header.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointMismatch(f"unsupported checkpoint format {header.get('format')!r}")
        blob = np.fromfile(header_path.parent / header["blob"], dtype="<f8")
        total = sum(n["count"] for n in header["nets"])
        if blob.size != total:
            raise CheckpointMismatch(f"parameter blob holds {blob.size} values, header expects {total}")
        m = cls(header["obs_dim"], header["n_actions"], header["n_q"], hidden=header["hidden"],
                single_network=header["single_network"], zero_qs=header["zero_qs"],
                obs_offset=header["obs_offset"], obs_scale=header["obs_scale"])
        nets = []
        for doc in header["nets"]:
            net = Mlp(doc["sizes"], zero_output=True)
            net.set_flat(blob[doc["offset"]:doc["offset"] + doc["count"]])
            nets.append(net)
        tables = {("value", "active"): m.value_nets, ("policy", "active"): m.policy_nets,
                  ("value", "frozen"): m.frozen_value, ("policy", "frozen"): m.frozen_policy}
        for e in header["entries"]:
            tables[(e["role"], e["status"])][int(e["q"])] = nets[e["net"]]
        m.scope = tuple(header["scope"])
        m.level = header["level"]
        return m
