import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from temporal_synth import scltl  # noqa: E402
from temporal_synth.mdp import chain_mdp  # noqa: E402

SEQUENTIAL = "!O U ((A & ((!D & !O) U C)) | (D & ((!A & !O) U B)))"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def seq_dfa():
    return scltl.compile_text(SEQUENTIAL)


@pytest.fixture(scope="session")
def q_names(seq_dfa):
    """Map the running-example state names onto our indices."""
    d = seq_dfa
    q0 = d.initial
    return {
        "q0": q0,
        "q1": d.step(q0, {"D"}),
        "q2": d.step(q0, {"A"}),
        "q3": next(iter(d.accepting)),
        "q4": d.sink,
    }


@pytest.fixture(scope="session")
def eventually_dfa():
    return scltl.compile_text("F s2")


@pytest.fixture(scope="session")
def chain():
    return chain_mdp()

# PNF corpus over at most three propositions; every DFA has at most 5 states
CORPUS = (
    "F a", "a U b", "F (a & F b)", "!b U a", "X a", "F a & F b", "(a | b) U c", "F (a & X b)",
    "!c U (a & F b)", "a U (b U c)", "X (a U b)", "F a | F b", "(!a U b) & F c", "F (a & F (b & F c))",
    "!a U (b | c)", "X X a", "(a U b) | (c U b)", "F (a | (b & X c))", "a & X (b U c)", "!(a | !F b)",
    "F (b & !X a)", "(a & !b) U (b & c)", "F c & (!c U a)",
)


def random_product(rng, gamma=None):
    """Random labeled MDP (|S| <= 8, |A| <= 3) composed with a corpus DFA."""
    from temporal_synth.envs.grid import random_mdp
    from temporal_synth.product import build_product
    d = scltl.compile_text(CORPUS[rng.integers(len(CORPUS))])
    m = random_mdp(rng, int(rng.integers(2, 9)), int(rng.integers(1, 4)), d.ap, density=0.4)
    g = float(rng.uniform(0.5, 0.95)) if gamma is None else gamma
    return m, d, build_product(m, d, g)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
