"""Exact mellowmax value iteration on explicit product MDPs."""
from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from . import kernels
from .mdp import TabularPolicy
from .product import ProductMdp


class NoConvergence(RuntimeError):
    def __init__(self, max_iterations: int, last_delta: float):
        super().__init__(f"value iteration did not converge in {max_iterations} sweeps (last change {last_delta:.3e})")
        self.max_iterations = max_iterations
        self.last_delta = last_delta


@dataclass(frozen=True)
class SolverConfig:
    gamma: float = 0.99
    tau: float = 1e-6
    tolerance: float = 1e-10
    max_iterations: int = 100_000

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.tau <= 0 or self.tolerance <= 0 or self.max_iterations < 1:
            raise ValueError("tau, tolerance and max_iterations must be positive")


@dataclass
class ValueTable:
    """Values of product states ``z = s * n_q + q``."""

    values: np.ndarray
    n_q: int

    def __getitem__(self, sq):
        s, q = sq
        return float(self.values[s * self.n_q + q])

    def to_rows(self, state_names=None):
        for z, v in enumerate(self.values):
            s, q = divmod(z, self.n_q)
            yield (state_names[s] if state_names else s, q, float(v))

    def to_csv(self, path, state_names=None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s", "q", "value"])
            for s, q, v in self.to_rows(state_names):
                w.writerow([s, q, repr(v)])

    def to_json(self, state_names=None) -> list:
        return [{"s": s, "q": q, "value": v} for s, q, v in self.to_rows(state_names)]

    def save_json(self, path, state_names=None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(state_names), fh, indent=1)


def mellowmax(q: np.ndarray, tau: float, axis: int = -1) -> np.ndarray:
    """``tau * log(sum(exp(q / tau)))`` in the shifted, overflow-free form."""
    return tau * logsumexp(np.asarray(q, dtype=float) / tau, axis=axis)


def q_values(values: np.ndarray, product: ProductMdp) -> np.ndarray:
    return product.reward + product.gamma * product.delta @ values


def default_active(product: ProductMdp) -> np.ndarray:
    return ~(product.final | product.sink)


def mellowmax_backup(values: np.ndarray, product: ProductMdp, cfg: SolverConfig,
                     active: np.ndarray | None = None) -> np.ndarray:
    """One synchronous sweep at ``cfg.gamma``; entries outside ``active`` are unchanged."""
    if active is None:
        active = default_active(product)
    indptr, indices, probs = product.csr()
    return kernels.mellowmax_sweep(indptr, indices, probs, product.reward, np.asarray(values, dtype=float),
                                   np.asarray(active, dtype=np.bool_), cfg.gamma, cfg.tau, product.n_actions)


def value_iteration(product: ProductMdp, cfg: SolverConfig, values: np.ndarray | None = None,
                    active: np.ndarray | None = None) -> np.ndarray:
    """Iterate ``mellowmax_backup`` to the fixed point.

    ``values`` supplies the frozen entries (and the starting point); only
    ``active`` entries are updated.
    """
    v = np.zeros(product.n_states) if values is None else np.array(values, dtype=float)
    if active is None:
        active = default_active(product)
    active = np.asarray(active, dtype=np.bool_)
    product = at_gamma(product, cfg.gamma)
    delta = np.inf
    for _ in range(cfg.max_iterations):
        new = mellowmax_backup(v, product, cfg, active)
        delta = float(np.max(np.abs(new - v))) if v.size else 0.0
        v = new
        if delta < cfg.tolerance:
            return v
    raise NoConvergence(cfg.max_iterations, delta)


def at_gamma(product: ProductMdp, gamma: float) -> ProductMdp:
    """The same product with another discount (the config's gamma wins)."""
    if product.gamma == gamma:
        return product
    out = dataclasses.replace(product, gamma=float(gamma))
    if hasattr(product, "_csr"):
        out._csr = product._csr
    return out


def solver_for(cfg: SolverConfig):
    """Callback for ``topo.solve_by_levels``."""
    def solve(product, values, active):
        return value_iteration(product, cfg, values, active)
    return solve


def extract_policy(values: np.ndarray, product: ProductMdp, cfg: SolverConfig) -> TabularPolicy:
    """Softmax policy ``exp((Q - V) / tau)`` with V recomputed as mm Q."""
    q = q_values(values, at_gamma(product, cfg.gamma))
    table = softmax(q / cfg.tau, axis=1)
    return TabularPolicy(table)

