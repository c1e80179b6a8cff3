"""Hot inner loops.

Every kernel exists twice: an explicit-loop version compiled with numba and a
vectorised numpy version. The public names are bound to one of the two at
import time (see ``_accel``); ``numba_kernels()`` / ``numpy_kernels()`` hand
out both sets for benchmarking and cross-checking.
"""
import math

import numpy as np

from ._accel import USE_NUMBA

# CartPole constants (classic benchmark values).
GRAVITY = 9.8
MASS_CART = 1.0
MASS_POLE = 0.1
TOTAL_MASS = MASS_CART + MASS_POLE
HALF_LENGTH = 0.5
POLEMASS_LENGTH = MASS_POLE * HALF_LENGTH
FORCE_MAG = 10.0


# -- mellowmax backup over a CSR transition matrix -------------------------
# Row ``z * n_actions + a`` of the CSR triple holds the distribution over z'.

def _mellowmax_sweep_loops(indptr, indices, probs, reward, values, active, gamma, tau, n_actions):
    n_states = values.shape[0]
    out = values.copy()
    q = np.empty(n_actions)
    for z in range(n_states):
        if not active[z]:
            continue
        qmax = -np.inf
        for a in range(n_actions):
            row = z * n_actions + a
            acc = 0.0
            for k in range(indptr[row], indptr[row + 1]):
                acc += probs[k] * values[indices[k]]
            q[a] = reward[z, a] + gamma * acc
            if q[a] > qmax:
                qmax = q[a]
        s = 0.0
        for a in range(n_actions):
            s += math.exp((q[a] - qmax) / tau)
        out[z] = qmax + tau * math.log(s)
    return out


def _mellowmax_sweep_numpy(indptr, indices, probs, reward, values, active, gamma, tau, n_actions):
    n_rows = indptr.shape[0] - 1
    row_of = np.repeat(np.arange(n_rows), np.diff(indptr))
    expected = np.bincount(row_of, weights=probs * values[indices], minlength=n_rows)
    q = reward + gamma * expected.reshape(-1, n_actions)
    qmax = q.max(axis=1)
    mm = qmax + tau * np.log(np.exp((q - qmax[:, None]) / tau).sum(axis=1))
    return np.where(active, mm, values)


# -- batched DFA runs with latching acceptance ------------------------------

def _dfa_run_loops(delta, initial, accepting, words):
    n, length = words.shape
    out = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        q = initial
        hit = accepting[q]
        for t in range(length):
            sym = words[i, t]
            if sym < 0 or hit:
                break
            q = delta[q, sym]
            hit = accepting[q]
        out[i] = hit
    return out


def _dfa_run_numpy(delta, initial, accepting, words):
    n, length = words.shape
    q = np.full(n, initial, dtype=np.int64)
    hit = np.full(n, bool(accepting[initial]))
    ended = np.zeros(n, dtype=bool)  # padding reached
    for t in range(length):
        sym = words[:, t]
        ended |= sym < 0
        live = ~ended & ~hit
        q = np.where(live, delta[q, np.where(sym >= 0, sym, 0)], q)
        hit |= live & accepting[q]
    return hit


# -- CartPole Euler step -----------------------------------------------------

def _cartpole_loops(states, actions, dt):
    n = states.shape[0]
    out = np.empty_like(states)
    for i in range(n):
        x, x_dot, theta, theta_dot = states[i, 0], states[i, 1], states[i, 2], states[i, 3]
        force = FORCE_MAG if actions[i] == 1 else -FORCE_MAG
        c = math.cos(theta)
        s = math.sin(theta)
        temp = (force + POLEMASS_LENGTH * theta_dot * theta_dot * s) / TOTAL_MASS
        theta_acc = (GRAVITY * s - c * temp) / (HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * c * c / TOTAL_MASS))
        x_acc = temp - POLEMASS_LENGTH * theta_acc * c / TOTAL_MASS
        out[i, 0] = x + dt * x_dot
        out[i, 1] = x_dot + dt * x_acc
        out[i, 2] = theta + dt * theta_dot
        out[i, 3] = theta_dot + dt * theta_acc
    return out


def _cartpole_numpy(states, actions, dt):
    x, x_dot, theta, theta_dot = states.T
    force = np.where(actions == 1, FORCE_MAG, -FORCE_MAG)
    c = np.cos(theta)
    s = np.sin(theta)
    temp = (force + POLEMASS_LENGTH * theta_dot**2 * s) / TOTAL_MASS
    theta_acc = (GRAVITY * s - c * temp) / (HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * c**2 / TOTAL_MASS))
    x_acc = temp - POLEMASS_LENGTH * theta_acc * c / TOTAL_MASS
    return np.stack([x + dt * x_dot, x_dot + dt * x_acc, theta + dt * theta_dot, theta_dot + dt * theta_acc], axis=1)


# -- Dubins car step -----------------------------------------------------------

def _dubins_loops(states, controls, noise, speed, dt):
    n = states.shape[0]
    out = np.empty_like(states)
    for i in range(n):
        th = states[i, 2]
        out[i, 0] = states[i, 0] + noise[i, 0] + speed * math.cos(th) * dt
        out[i, 1] = states[i, 1] + noise[i, 1] + speed * math.sin(th) * dt
        t = th + noise[i, 2] + controls[i] * dt
        # wrap to (-pi, pi]
        out[i, 2] = math.pi - ((math.pi - t) % (2.0 * math.pi))
    return out


def _dubins_numpy(states, controls, noise, speed, dt):
    th = states[:, 2]
    x = states[:, 0] + noise[:, 0] + speed * np.cos(th) * dt
    y = states[:, 1] + noise[:, 1] + speed * np.sin(th) * dt
    t = th + noise[:, 2] + controls * dt
    return np.stack([x, y, np.pi - np.mod(np.pi - t, 2.0 * np.pi)], axis=1)


_LOOPS = {
    "mellowmax_sweep": _mellowmax_sweep_loops,
    "dfa_run": _dfa_run_loops,
    "cartpole_dynamics": _cartpole_loops,
    "dubins_dynamics": _dubins_loops,
}
_NUMPY = {
    "mellowmax_sweep": _mellowmax_sweep_numpy,
    "dfa_run": _dfa_run_numpy,
    "cartpole_dynamics": _cartpole_numpy,
    "dubins_dynamics": _dubins_numpy,
}
_JIT_CACHE = {}


def numpy_kernels():
    return dict(_NUMPY)


def numba_kernels():
    """Compiled loop kernels; raises ImportError when numba is unavailable."""
    if not _JIT_CACHE:
        import numba
        for name, fn in _LOOPS.items():
            _JIT_CACHE[name] = numba.njit(cache=True)(fn)
    return dict(_JIT_CACHE)


_ACTIVE = numba_kernels() if USE_NUMBA else numpy_kernels()

mellowmax_sweep = _ACTIVE["mellowmax_sweep"]
dfa_run = _ACTIVE["dfa_run"]
cartpole_dynamics = _ACTIVE["cartpole_dynamics"]
dubins_dynamics = _ACTIVE["dubins_dynamics"]
