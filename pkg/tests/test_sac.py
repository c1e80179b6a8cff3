import numpy as np
import pytest

from conftest import CORPUS
from temporal_synth import scltl
from temporal_synth.approx import ModularApproximator
from temporal_synth.envs.grid import random_mdp
from temporal_synth.mdp import GenerativeUnsupported, TabularEnvironment
from temporal_synth.product import ProductEnvironment, build_product
from temporal_synth.sac import (Batch, DualState, EmptyBatch, ReplayBuffer, TrainerConfig, compute_losses,
                                consistency_error, dual_update, expected_residual, g_tilde, g_tilde_generative, h,
                                learning_rate, solve_subproblem, tabular_critic, train)
from temporal_synth.tabular import SolverConfig, extract_policy, q_values, value_iteration


def test_h_examples():
    assert h(-5.0) == 0.0 and h(0.0) == 0.0 and h(2.0) == 4.0


@pytest.mark.parametrize("old,new,grows", [(10.0, 9.5, True), (10.0, 8.0, False), (10.0, 9.0, False),
                                           (0.0, 0.0, False), (0.0, 1e-9, True), (1.0, 3.0, True)])
def test_dual_update_table(old, new, grows):
    cfg = TrainerConfig(beta=2.0, epsilon=0.9)
    d = dual_update(DualState(5.0, 100.0), old, new, cfg)
    assert d.nu == (200.0 if grows else 100.0)
    assert d.lam == 5.0 + 100.0 * new


def test_duals_never_decrease(rng):
    cfg = TrainerConfig(beta=1.5, epsilon=0.5)
    d = DualState(0.0, 1.0)
    old = 1.0
    for _ in range(50):
        new = float(rng.exponential())
        nd = dual_update(d, old, new, cfg)
        assert nd.lam >= d.lam and nd.nu >= d.nu
        d, old = nd, new
    assert dual_update(DualState(3.0, 7.0), 1.0, 0.0, cfg).lam == 3.0


@pytest.mark.parametrize("bad", [dict(beta=1.0), dict(epsilon=1.0), dict(epsilon=0.0), dict(T=1), dict(K=0),
                                 dict(actor="greedy"), dict(gamma=1.0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainerConfig(**bad)


def test_config_json_roundtrip():
    cfg = TrainerConfig.dubins(seed=4)
    assert TrainerConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ValueError):
        TrainerConfig.from_json({"bogus": 1})


def test_learning_rate_decay():
    cfg = TrainerConfig(eta=1.0, eta_decay=0.5, decay_steps=10)
    assert [learning_rate(cfg, n) for n in (0, 9, 10, 25)] == [1.0, 1.0, 0.5, 0.25]


# ---------------------------------------------------------------------------
# losses on hand-built batches
# ---------------------------------------------------------------------------

def _linear_model(n_actions=1):
    """V(x, 0) = x with no hidden layer; q = 1 is the zero-valued final state."""
    m = ModularApproximator(1, n_actions, 2, hidden=(), zero_qs=(1,))
    m.set_scope([0])
    m.value_nets[0].params[0][...] = 1.0
    return m


def _batch(obs, obs2, r, a=None, seg=None, terminal=None, **alt):
    n = len(obs)
    seg = np.zeros(n, dtype=np.int64) if seg is None else np.asarray(seg)
    t = np.concatenate([np.arange(c) for c in np.bincount(seg)])
    return Batch(np.asarray(obs, float).reshape(n, -1), np.zeros(n, dtype=np.int64),
                 np.zeros(n, dtype=np.int64) if a is None else np.asarray(a), np.asarray(r, float),
                 np.asarray(obs2, float).reshape(n, -1), np.zeros(n, dtype=np.int64),
                 np.zeros(n, bool) if terminal is None else np.asarray(terminal), seg, t, int(seg.max()) + 1, **alt)


def test_critic_loss_hand_two_step():
    m = _linear_model()
    b = _batch([0.5, 0.8], [0.8, 0.2], [0.1, 0.3])
    cfg = TrainerConfig(gamma=0.9, tau=0.7)
    terms = compute_losses(m, b, DualState(1.0, 2.0), cfg)
    # g = (0.1 + 0.72 - 0.5, 0.3 + 0.18 - 0.8) = (0.32, -0.32)
    np.testing.assert_allclose(terms.g, [0.32, -0.32], atol=1e-12)
    assert terms.critic_loss == pytest.approx(1.3 + 0.32**2 + 0.32**4)
    assert terms.violation == pytest.approx(0.32**2)
    assert compute_losses(m, b, DualState(0.0, 0.0), cfg).critic_loss == pytest.approx(1.3)


def test_satisfied_constraints_leave_state_relevance_only():
    m = _linear_model()
    b = _batch([0.5, 0.8, 0.3], [0.1, 0.2, 0.0], [0.0, 0.0, 0.0], seg=[0, 0, 1])
    terms = compute_losses(m, b, DualState(1e4, 1e5), TrainerConfig(gamma=0.9))
    assert (terms.g <= 0).all()
    assert terms.critic_loss == pytest.approx((0.5 + 0.8 + 0.3) / 2)


def test_consistency_error_examples():
    m = _linear_model()
    zero = ModularApproximator(1, 1, 2, hidden=(), zero_qs=(1,))
    zero.set_scope([0])
    b = _batch([0.0], [0.0], [1.0])
    terms = compute_losses(zero, b, DualState(0.0, 1.0), TrainerConfig(tau=1e-9))
    assert terms.consistency[0] == pytest.approx(1.0) and terms.actor_loss == pytest.approx(0.5)
    # doubling rewards and V doubles C when tau = 0
    cfg = TrainerConfig(gamma=0.9, tau=0.0)
    b1 = _batch([0.5, 0.8], [0.8, 0.2], [0.1, 0.3])
    c1 = compute_losses(m, b1, DualState(0.0, 1.0), cfg).consistency[0]
    m.value_nets[0].params[0][...] = 2.0
    b2 = _batch([0.5, 0.8], [0.8, 0.2], [0.2, 0.6])
    assert compute_losses(m, b2, DualState(0.0, 1.0), cfg).consistency[0] == pytest.approx(2 * c1)
    assert c1 == pytest.approx(-0.5 + 0.1 + 0.9 * 0.3 + 0.81 * 0.2)


def test_terminal_transition_has_no_bootstrap():
    m = _linear_model()
    b = _batch([0.5], [9.0], [1.0], terminal=[True])
    assert g_tilde(m, b, TrainerConfig(gamma=0.9))[0] == pytest.approx(1.0 - 0.5)


def test_empty_batch():
    m = _linear_model()
    b = Batch(*(np.zeros((0, 1)),) * 1, np.zeros(0, int), np.zeros(0, int), np.zeros(0), np.zeros((0, 1)),
              np.zeros(0, int), np.zeros(0, bool), np.zeros(0, int), np.zeros(0, int), 0)
    with pytest.raises(EmptyBatch):
        compute_losses(m, b, DualState(0.0, 1.0), TrainerConfig())
    with pytest.raises(EmptyBatch):
        ReplayBuffer(4, 1).sample(2, 2, np.random.default_rng(0))


def _random_setup(rng, expected, actor="window"):
    nA, n = 3, 7
    m = ModularApproximator(2, nA, 3, hidden=(6,), seed=1, zero_qs=(2,))
    m.set_scope([0, 1])
    for net in list(m.value_nets.values()) + list(m.policy_nets.values()):
        net.set_flat(rng.normal(size=net.n_params()) * 0.5)
    seg = np.array([0, 0, 0, 1, 1, 2, 2])
    b = _batch(rng.normal(size=(n, 2)), rng.normal(size=(n, 2)), rng.normal(size=n), a=rng.integers(nA, size=n),
               seg=seg, terminal=rng.random(n) < 0.2)
    b.q = rng.integers(2, size=n)
    b.q2 = rng.integers(3, size=n)
    if expected:
        b.alt_obs2 = rng.normal(size=(n, nA, 2))
        b.alt_q2 = rng.integers(3, size=(n, nA))
        b.alt_r = rng.normal(size=(n, nA))
        b.alt_terminal = rng.random((n, nA)) < 0.2
    return m, b, TrainerConfig(gamma=0.9, tau=0.3, actor=actor)


def _fd(m, b, dual, cfg, which, h_=1e-6):
    worst = 0.0
    terms = compute_losses(m, b, dual, cfg)
    tapes = terms.critic_tapes if which == "critic" else terms.actor_tapes
    nets = m.value_nets if which == "critic" else m.policy_nets
    for q, net in nets.items():
        flat = net.get_flat()
        num = np.zeros_like(flat)
        for i in range(flat.size):
            for sgn in (1, -1):
                f = flat.copy()
                f[i] += sgn * h_
                net.set_flat(f)
                val = compute_losses(m, b, dual, cfg, grads=False)
                num[i] += sgn * getattr(val, f"{which}_loss") / (2 * h_)
        net.set_flat(flat)
        ana = tapes[id(net)][1].flat() if id(net) in tapes else np.zeros_like(flat)
        worst = max(worst, np.abs(ana - num).max() / max(1.0, np.abs(num).max()))
    return worst


@pytest.mark.parametrize("expected,actor", [(False, "window"), (True, "window"), (True, "centred")])
def test_loss_gradients_match_finite_differences(rng, expected, actor):
    m, b, cfg = _random_setup(rng, expected, actor)
    dual = DualState(0.7, 1.3)
    assert _fd(m, b, dual, cfg, "critic") < 1e-5
    assert _fd(m, b, dual, cfg, "actor") < 1e-5


def test_frozen_nets_get_no_gradient(rng):
    m, b, cfg = _random_setup(rng, True)
    m.set_scope([1], level=2)  # q = 0 is now frozen
    terms = compute_losses(m, b, DualState(1.0, 1.0), cfg)
    frozen = {id(m.frozen_value[0]), id(m.frozen_policy[0])}
    assert not frozen & set(terms.critic_tapes) and not frozen & set(terms.actor_tapes)


# ---------------------------------------------------------------------------
# replay buffer
# ---------------------------------------------------------------------------

def _fill(buf, n, end_every=0):
    for i in range(n):
        buf.add([float(i)], 0, 0, float(i), [float(i + 1)], 0, False, bool(end_every and i % end_every == end_every - 1))


def test_buffer_fifo_eviction():
    buf = ReplayBuffer(5, 1)
    _fill(buf, 8)
    assert len(buf) == 5
    assert sorted(buf.r) == [3.0, 4.0, 5.0, 6.0, 7.0]


def test_buffer_windows_are_contiguous_and_distinct(rng):
    buf = ReplayBuffer(50, 1)
    _fill(buf, 40, end_every=7)
    b = buf.sample(10, 4, rng)
    assert b.n_segments == 10
    starts = b.r[b.t == 0]
    assert len(set(starts)) == 10
    for k in range(10):
        r = b.r[b.seg == k]
        assert (np.diff(r) == 1).all() and len(r) <= 4
        # windows never run past an episode end
        assert not any(x % 7 == 6 for x in r[:-1])


def test_buffer_with_wraparound_keeps_order(rng):
    buf = ReplayBuffer(6, 1)
    _fill(buf, 9)
    for _ in range(20):
        b = buf.sample(3, 3, rng)
        for k in range(3):
            assert (np.diff(b.r[b.seg == k]) == 1).all()
        assert b.r.min() >= 3.0


# ---------------------------------------------------------------------------
# exact tabular critic and consistency
# ---------------------------------------------------------------------------

def test_tabular_critic_matches_oracle_on_chain(chain, eventually_dfa):
    p = build_product(chain, eventually_dfa, 0.9)
    cfg = TrainerConfig(gamma=0.9, tau=0.0, M=4)  # default duals lambda0 = 1e4, nu0 = 1e5
    out = tabular_critic(p, np.ones((p.n_states, 1)), cfg)
    v_star = value_iteration(p, SolverConfig(gamma=0.9, tau=1e-8))
    assert np.abs(out["values"] - v_star).max() < 1e-3
    assert np.abs(expected_residual(out["values"], np.ones((p.n_states, 1)), p, 0.0, 0.9)).max() < 1e-3


def test_tabular_critic_evaluates_soft_optimal_policy(rng):
    from conftest import random_product
    for _ in range(5):
        _, _, p = random_product(rng, gamma=0.9)
        scfg = SolverConfig(gamma=0.9, tau=0.2)
        v_star = value_iteration(p, scfg)
        pi = extract_policy(v_star, p, scfg).table
        out = tabular_critic(p, pi, TrainerConfig(gamma=0.9, tau=0.2, M=4))
        live = ~(p.final | p.sink)
        assert np.abs(out["values"] - v_star)[live].max() < 1e-3
        assert all(h2["lambda"] <= h3["lambda"] for h2, h3 in zip(out["history"], out["history"][1:]))


def _deterministic_product(rng, tau):
    d = scltl.compile_text(CORPUS[int(rng.integers(len(CORPUS)))])
    m = random_mdp(rng, 6, 3, d.ap, label_prob=0.4, deterministic=True)
    p = build_product(m, d, 0.9)
    cfg = SolverConfig(gamma=0.9, tau=tau)
    v = value_iteration(p, cfg)
    return p, v, extract_policy(v, p, cfg).table


def test_oracle_consistency_vanishes_on_paths(rng):
    tau = 0.3
    checked = 0
    while checked < 100:
        p, v, pi = _deterministic_product(rng, tau)
        live = ~(p.final | p.sink)
        z = p.z0
        if not live[z]:
            continue
        states, actions, rewards = [z], [], []
        for _ in range(int(rng.integers(2, 11))):
            a = int(rng.choice(p.n_actions, p=pi[z]))
            rewards.append(p.reward[z, a])
            z = int(np.argmax(p.delta[z, a]))
            states.append(z)
            actions.append(a)
            if not live[z]:
                break
        vals = np.where(live, v, 0.0)
        c = consistency_error(lambda s: vals[s], lambda s, a: np.log(pi[s, a]), (states, actions), rewards, 0.9, tau)
        assert abs(c) < 1e-6
        checked += 1


def test_oracle_residual_has_zero_mean(rng):
    """Generative residual at V*, pi* averages to zero."""
    p, v, pi = _deterministic_product(rng, 0.3)
    q = q_values(v, p)
    live = ~(p.final | p.sink)
    # exact expectation is zero everywhere; the sampled estimate below matches it
    res = expected_residual(v, pi, p, 0.3, 0.9)
    assert np.abs(res[live]).max() < 1e-8
    assert np.isfinite(q).all()


def _chain_task(chain, eventually_dfa, max_steps=20):
    return ProductEnvironment(TabularEnvironment(chain), eventually_dfa, max_steps=max_steps)


def test_g_tilde_generative_sample_mean(chain, eventually_dfa):
    """Sampled residual with the converged tabular values has mean close to zero."""
    task = _chain_task(chain, eventually_dfa)
    p = build_product(chain, eventually_dfa, 0.9)
    v = value_iteration(p, SolverConfig(gamma=0.9, tau=1e-8))
    q0 = eventually_dfa.initial
    m = ModularApproximator(3, 1, p.n_q, hidden=(), zero_qs=task.zero_qs)
    m.set_scope([q0])
    m.value_nets[q0].params[0][:, 0] = [v[p.index(s, q0)] for s in range(3)]
    rng = np.random.default_rng(3)
    cfg = TrainerConfig(gamma=0.9, tau=0.0)
    samples = [g_tilde_generative(m, task, (1, q0), cfg, rng) for _ in range(10_000)]
    assert np.mean(samples) == pytest.approx(0.0, abs=0.01)


def test_g_tilde_generative_requires_generative_env(chain, eventually_dfa):
    task = _chain_task(chain, eventually_dfa)
    task.env.generative = False
    m = ModularApproximator(3, 1, 2, hidden=(), zero_qs=task.zero_qs)
    m.set_scope([eventually_dfa.initial])
    with pytest.raises(GenerativeUnsupported):
        g_tilde_generative(m, task, (0, eventually_dfa.initial), TrainerConfig(), np.random.default_rng(0))


# ---------------------------------------------------------------------------
# subproblem and driver
# ---------------------------------------------------------------------------

def _chain_model(task, eventually_dfa):
    m = ModularApproximator(3, 1, task.n_q, hidden=(8,), seed=0, zero_qs=task.zero_qs)
    m.set_scope([eventually_dfa.initial])
    return m


def test_subproblem_zero_iterations_is_noop(chain, eventually_dfa):
    task = _chain_task(chain, eventually_dfa)
    m = _chain_model(task, eventually_dfa)
    before = m.value_nets[eventually_dfa.initial].get_flat().copy()
    buf = ReplayBuffer(100, 3)
    out = solve_subproblem(m, task, buf, DualState(1.0, 1.0), TrainerConfig(N=0), rng=np.random.default_rng(0))
    np.testing.assert_array_equal(m.value_nets[eventually_dfa.initial].get_flat(), before)
    assert len(buf) == 0 and out["steps"] == 0


def test_subproblem_buffer_bookkeeping(chain, eventually_dfa):
    task = _chain_task(chain, eventually_dfa)
    m = _chain_model(task, eventually_dfa)
    buf = ReplayBuffer(10_000, 3)
    out = solve_subproblem(m, task, buf, DualState(1.0, 1.0), TrainerConfig(N=25, T=4, K=3),
                           rng=np.random.default_rng(0))
    assert len(buf) == buf.count == out["steps"]
    small = ReplayBuffer(5, 3)
    solve_subproblem(m, task, small, DualState(1.0, 1.0), TrainerConfig(N=25, T=4, K=3),
                     rng=np.random.default_rng(0))
    assert len(small) == 5 and small.count > 5


def test_critic_updates_vanish_at_constrained_optimum(eventually_dfa):
    """Linear critic started at V* on a deterministic chain: with large duals it stays put."""
    from temporal_synth.mdp import LabeledMdp
    P = np.zeros((3, 1, 3))
    P[0, 0, 1] = P[1, 0, 2] = P[2, 0, 2] = 1.0
    chain = LabeledMdp(P, (frozenset(), frozenset(), frozenset({"s2"})), ("s2",), 0)
    task = _chain_task(chain, eventually_dfa)
    p = build_product(chain, eventually_dfa, 0.9)
    v = value_iteration(p, SolverConfig(gamma=0.9, tau=1e-8))
    q0 = eventually_dfa.initial
    m = ModularApproximator(3, 1, p.n_q, hidden=(), zero_qs=task.zero_qs)
    m.set_scope([q0])
    m.value_nets[q0].params[0][:, 0] = [v[p.index(s, q0)] for s in range(3)]
    cfg = TrainerConfig(gamma=0.9, tau=0.0, N=300, T=4, K=5, eta=1e-5)
    out = solve_subproblem(m, task, ReplayBuffer(1000, 3, 1), DualState(1e3, 1e5), cfg,
                           rng=np.random.default_rng(0))
    assert np.mean(out["critic_update_norms"][-50:]) < 1e-4
    np.testing.assert_allclose(m.values(np.eye(3)[:2], [q0, q0]), [0.9, 1.0], atol=2e-3)


def _grid_task():
    from temporal_synth.envs.grid import grid_mdp
    m = grid_mdp(3, 3, {(2, 2): {"g"}}, ("g",), slip=0.1)
    return ProductEnvironment(TabularEnvironment(m), scltl.compile_text("F g"), max_steps=20)


def test_train_is_deterministic_and_writes_metrics(tmp_path):
    cfg = TrainerConfig(gamma=0.9, tau=0.05, M=2, N=30, T=4, K=3, hidden=(8,), warmup_paths=2, optimizer="adam")
    a = train(_grid_task(), cfg, metrics_path=tmp_path / "a.csv")
    b = train(_grid_task(), cfg, metrics_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "step,level,outer_m,V_z0,critic_loss,actor_loss,violation,episode_length,eta"
    assert len(a.metrics) == 60 and len(a.duals) == 2
    assert all(d2["nu"] >= d1["nu"] and d2["lambda"] >= d1["lambda"] for d1, d2 in zip(a.duals, a.duals[1:]))
    assert b.duals == a.duals


def test_train_grid_learns_values():
    cfg = TrainerConfig(gamma=0.9, tau=0.01, lambda0=1e3, nu0=1e5, M=2, N=400, T=5, K=5, hidden=(16,),
                        warmup_paths=5, optimizer="adam", eta=3e-3)
    res = train(_grid_task(), cfg)
    task = _grid_task()
    s, q = task.reset(np.random.default_rng(0))
    v = res.model.value(task.observe(s), q)
    p = build_product(task.env.mdp, task.dfa, 0.9)
    v_star = value_iteration(p, SolverConfig(gamma=0.9, tau=0.01))[p.z0]
    assert v == pytest.approx(v_star, abs=0.15)
