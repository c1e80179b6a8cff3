import numpy as np
import pytest

from temporal_synth import scltl
from temporal_synth.envs.grid import random_mdp
from temporal_synth.mdp import SteppedAfterDone, TabularEnvironment
from temporal_synth.product import (AlphabetMismatch, ProductEnvironment, build_product, guard_set, invariant_set,
                                    product_step)


@pytest.fixture
def fig4(chain, eventually_dfa):
    d = eventually_dfa
    q0 = d.initial
    q1 = next(iter(d.accepting))
    return build_product(chain, d, 0.9), q0, q1


def test_fig4_product_shape(fig4):
    p, q0, q1 = fig4
    assert p.n_states == 6
    assert p.z0 == p.index(0, q0)
    reach = set(np.flatnonzero(p.reachable()))
    assert reach == {p.index(0, q0), p.index(1, q0), p.index(2, q1)}


def test_fig4_rewards(fig4):
    p, q0, q1 = fig4
    assert p.reward[p.index(1, q0), 0] == pytest.approx(0.4)
    assert p.reward[p.index(0, q0), 0] == 0.0
    assert p.reward[p.index(2, q1), 0] == 0.0


def test_rows_stochastic_and_finals_absorb(rng):
    for _ in range(20):
        m = random_mdp(rng, 5, 2, ("a", "b"))
        d = scltl.compile_text("a U b")
        p = build_product(m, d, 0.95)
        np.testing.assert_allclose(p.delta.sum(axis=2), 1.0, atol=1e-9)
        for z in np.flatnonzero(p.final):
            assert (p.delta[z, :, z] == 1.0).all()
            assert (p.reward[z] == 0).all()


def test_reward_is_probability_of_entering_final(rng):
    m = random_mdp(rng, 6, 3, ("a", "b"))
    d = scltl.compile_text("F (a & X b)")
    p = build_product(m, d, 0.9)
    live = ~p.final
    expected = p.delta[:, :, p.final].sum(axis=2)
    np.testing.assert_allclose(p.reward[live], expected[live], atol=0)


def test_alphabet_mismatch(chain):
    with pytest.raises(AlphabetMismatch):
        build_product(chain, scltl.compile_text("F a"), 0.9)


def test_sampled_reward_matches_expectation(chain, eventually_dfa):
    pe = ProductEnvironment(TabularEnvironment(chain), eventually_dfa)
    rng = np.random.default_rng(0)
    q0 = eventually_dfa.initial
    total = 0.0
    n = 100_000
    for _ in range(n):
        pe.reset_to(1, q0)
        _, r, _ = product_step(pe, 0, rng)
        total += r
    assert total / n == pytest.approx(0.4, abs=0.01)


def test_step_after_acceptance_raises(chain, eventually_dfa):
    pe = ProductEnvironment(TabularEnvironment(chain), eventually_dfa)
    pe.reset_to(2, next(iter(eventually_dfa.accepting)))
    with pytest.raises(SteppedAfterDone):
        product_step(pe, 0, np.random.default_rng(0))


def test_initial_state_uses_first_label(chain, eventually_dfa):
    pe = ProductEnvironment(TabularEnvironment(chain), eventually_dfa)
    assert pe.reset(np.random.default_rng(0)) == (0, eventually_dfa.initial)


def test_inv_and_guard_worked_example(chain, eventually_dfa):
    d = eventually_dfa
    q0, q1 = d.initial, next(iter(d.accepting))
    assert invariant_set(q1, chain, d) == {2}
    assert invariant_set(q0, chain, d) == {0}
    assert guard_set(q0, q1, chain, d) == {1}
    assert guard_set(q1, q0, chain, d) == set()


def test_invariant_of_absorbing_state_is_everything(chain, eventually_dfa):
    q1 = next(iter(eventually_dfa.accepting))
    assert invariant_set(q1, chain, eventually_dfa, reachable_only=False) == {0, 1, 2}
