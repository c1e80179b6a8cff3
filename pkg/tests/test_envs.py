import math

import numpy as np
import pytest

from temporal_synth import scltl
from temporal_synth.envs import (CartPoleEnv, CartPoleTask, DubinsEnv, DubinsTask, NoSubgoal, WorkspaceConfig,
                                 cartpole_step, dubins_step, shaped_reward)
from temporal_synth.envs.cartpole import ANGLE_LIMIT, run_episodes
from temporal_synth.envs.dubins import SEQUENTIAL_VISITING, rollout, subgoal_table, write_trajectory
from temporal_synth.mdp import SteppedAfterDone

U_LEFT, U_STRAIGHT, U_RIGHT = 2, 1, 0  # controls are (-w, 0, +w)


@pytest.fixture(scope="module")
def ws():
    return WorkspaceConfig.default()


def quiet(ws):
    return DubinsEnv(ws, noise=False)


def test_straight_step(ws):
    z, lab = quiet(ws).step(np.array([3.0, 1.0, math.pi / 2]), U_STRAIGHT, np.random.default_rng(0))
    np.testing.assert_allclose(z, [3.0, 1.3, math.pi / 2], atol=1e-12)
    assert lab == frozenset()


def test_fifteen_turns_make_a_circle(ws):
    env = quiet(ws)
    z = np.array([2.5, 2.5, 0.3])
    total = 0.0
    for _ in range(15):
        z2, _ = env.step(z, U_LEFT, None)
        total += (z2[2] - z[2] + math.pi) % (2 * math.pi) - math.pi
        z = z2
    assert total == pytest.approx(2 * math.pi)
    assert z[2] == pytest.approx(0.3)


def test_theta_wrapped(ws):
    env = quiet(ws)
    z = np.array([2.5, 2.5, math.pi - 0.1])
    for _ in range(40):
        z, _ = env.step(z, U_LEFT, None)
        assert -math.pi < z[2] <= math.pi


def test_dynamics_use_the_heading_before_the_turn(ws):
    z, _ = quiet(ws).step(np.array([2.0, 2.0, 0.0]), U_LEFT, None)
    np.testing.assert_allclose(z, [2.3, 2.0, 2 * math.pi / 15], atol=1e-12)


def test_noise_std(ws):
    env = DubinsEnv(ws)
    rng = np.random.default_rng(1)
    z0 = np.array([2.5, 2.5, 0.0])
    res = np.array([env.step(z0, U_STRAIGHT, rng)[0] - [2.8, 2.5, 0.0] for _ in range(10_000)])
    assert ((0.008 <= res.std(axis=0)) & (res.std(axis=0) <= 0.012)).all()


def test_region_labels_match_independent_check(ws, rng):
    env = quiet(ws)
    rects = {"A": (1.0, 1.5, 1.0, 1.5), "B": (4.0, 4.5, 4.0, 4.5), "C": (4.0, 4.5, 1.0, 1.5), "D": (1.0, 1.5, 4.0, 4.5)}
    obstacles = [(1.0, 2.0, 3.0, 3.5), (3.0, 4.0, 3.0, 3.5)]
    for _ in range(5000):
        x, y = rng.uniform(0, 5, 2)
        ref = {k for k, (x0, x1, y0, y1) in rects.items() if x0 <= x <= x1 and y0 <= y <= y1}
        if any(x0 <= x <= x1 and y0 <= y <= y1 for x0, x1, y0, y1 in obstacles):
            ref.add("O")
        assert env.label(np.array([x, y, 0.0])) == frozenset(ref)
    assert "A" in env.label(np.array([1.25, 1.25, 0.0]))


def test_out_of_bounds_is_absorbing(ws):
    env = quiet(ws)
    assert env.out_of_bounds(np.array([-0.1, 2.0, 0.0])) and not env.out_of_bounds(np.array([0.1, 2.0, 0.0]))


def test_workspace_json_roundtrip(ws):
    assert WorkspaceConfig.from_json(ws.to_json()) == ws
    doc = ws.to_json()
    doc["colour"] = "red"
    with pytest.raises(ValueError):
        WorkspaceConfig.from_json(doc)


def test_subgoals_follow_the_task(ws, seq_dfa, q_names):
    n = q_names
    table = subgoal_table(seq_dfa, ws)
    assert table == {n["q0"]: (1.25, 1.25), n["q2"]: (4.25, 1.25), n["q1"]: (4.25, 4.25)}


def test_shaped_reward_examples():
    goals = {0: (4.0, 0.0)}
    assert shaped_reward((1.0, 0.0, 0.0), (0.3, 0.0), 0, goals) == pytest.approx(1.5)
    assert shaped_reward((1.0, 0.0, 0.0), (0.0, 0.3), 0, goals) == pytest.approx(0.0)
    assert shaped_reward((1.0, 0.0, 0.0), (-0.3, 0.0), 0, goals) == pytest.approx(-1.5)
    with pytest.raises(NoSubgoal):
        shaped_reward((1.0, 0.0, 0.0), (0.3, 0.0), 3, goals)


def test_task_rewards(ws, seq_dfa, q_names):
    n = q_names
    task = DubinsTask(seq_dfa, ws, noise=False)
    rng = np.random.default_rng(0)
    # entering C from the A-branch accepts: +10 on top of the shaping term
    s = np.array([3.8, 1.25, 0.0])
    (s2, q2), r, hit, stop = task.transition((s, n["q2"]), U_STRAIGHT, rng)
    assert q2 == n["q3"] and hit == 1.0 and stop
    assert r == pytest.approx(10.0 + 1.5)
    # driving into an obstacle costs 1 and lands in the sink
    s = np.array([1.5, 2.9, math.pi / 2])
    (s2, q2), r, hit, stop = task.transition((s, n["q0"]), U_STRAIGHT, rng)
    assert q2 == n["q4"] and stop and hit == 0.0
    d = np.array([1.25, 1.25]) - s[:2]
    assert r == pytest.approx(-1.0 + 5 * 0.3 * d[1] / np.hypot(*d))


def test_nominal_start_and_rollout(ws, seq_dfa, tmp_path):
    task = DubinsTask(seq_dfa, ws, max_steps=8)
    accepted, rows = rollout(task, lambda obs, q, rng: U_STRAIGHT, np.random.default_rng(0))
    assert not accepted and rows[0][1:4] == (3.0, 0.0, math.pi / 2)
    assert len(rows) == 9
    write_trajectory(rows, tmp_path / "traj.csv")
    lines = (tmp_path / "traj.csv").read_text().splitlines()
    assert lines[0] == "t,x,y,theta,q,u,r" and len(lines) == 10


def test_ap_matches_task_formula(ws):
    d = scltl.compile_text(SEQUENTIAL_VISITING)
    assert tuple(d.ap) == ws.ap == ("A", "B", "C", "D", "O")


def test_dubins_step_helper_is_deterministic(ws):
    z = np.array([3.0, 0.0, math.pi / 2])
    a = dubins_step(z, 1, np.random.default_rng(5))[0]
    b = dubins_step(z, 1, np.random.default_rng(5))[0]
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# cart-pole
# ---------------------------------------------------------------------------

def reference_cartpole(s, a):
    """Classic cart-pole equations written out independently."""
    g, mc, mp, l, f, dt = 9.8, 1.0, 0.1, 0.5, 10.0, 0.02
    x, xd, th, thd = s
    force = f if a == 1 else -f
    tmp = (force + mp * l * thd**2 * math.sin(th)) / (mc + mp)
    thacc = (g * math.sin(th) - math.cos(th) * tmp) / (l * (4 / 3 - mp * math.cos(th) ** 2 / (mc + mp)))
    xacc = tmp - mp * l * thacc * math.cos(th) / (mc + mp)
    return np.array([x + dt * xd, xd + dt * xacc, th + dt * thd, thd + dt * thacc])


def test_cartpole_matches_reference(rng):
    for _ in range(200):
        s = rng.uniform(-0.2, 0.2, 4)
        a = int(rng.integers(2))
        np.testing.assert_allclose(cartpole_step(s, a)[0], reference_cartpole(s, a), atol=1e-12)


def test_cartpole_single_step_from_rest():
    for a in (0, 1):
        _, r, done = cartpole_step(np.zeros(4), a)
        assert r == 1.0 and not done


def test_cartpole_fall_and_after():
    s = np.array([0.0, 0.0, ANGLE_LIMIT - 1e-4, 2.0])
    s2, r, done = cartpole_step(s, 1)
    assert done and r == 0.0
    with pytest.raises(SteppedAfterDone):
        cartpole_step(s2, 0)
    for bad in ([2.41, 0, 0, 0], [-2.41, 0, 0, 0], [0, 0, 0.27, 0]):
        with pytest.raises(SteppedAfterDone):
            cartpole_step(np.array(bad, dtype=float), 0)


def test_cartpole_500_steps_with_controller():
    task = CartPoleTask()
    rng = np.random.default_rng(0)
    task.reset(rng)
    total = 0.0
    while not task.done:
        s = task.state[0]
        _, r, _ = task.step(int(s[2] + 0.5 * s[3] + 0.05 * s[0] + 0.2 * s[1] > 0), rng)
        total += r
    assert total == 500.0 and task.t == 500 and task.truncated
    with pytest.raises(SteppedAfterDone):
        task.step(0, rng)


def test_cartpole_batched_rollouts_match_single_steps():
    def controller(obs):
        right = obs[:, 2] + 0.5 * obs[:, 3] > 0
        return np.stack([~right, right], axis=1).astype(float)

    lengths = run_episodes(controller, 4, np.random.default_rng(2), max_steps=300)
    rng = np.random.default_rng(2)
    starts = rng.uniform(-0.05, 0.05, (4, 4))
    for start, n in zip(starts, lengths):
        s, t = start, 0
        while t < 300:
            s, r, done = cartpole_step(s, int(s[2] + 0.5 * s[3] > 0))
            if done:
                break
            t += 1
        assert t == n


def test_random_policy_falls_quickly():
    lengths = run_episodes(lambda obs: np.full((len(obs), 2), 0.5), 200, np.random.default_rng(0))
    assert 10 < lengths.mean() < 60


def test_cartpole_env_contract(rng):
    env = CartPoleEnv()
    s = env.reset(rng)
    assert s.shape == (4,) and np.abs(s).max() <= 0.05 and not env.absorbing(s)
