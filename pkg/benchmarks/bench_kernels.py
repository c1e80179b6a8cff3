"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from temporal_synth import kernels, scltl
from temporal_synth.envs.grid import random_mdp
from temporal_synth.product import build_product


def cases(rng):
    d = scltl.compile_text("!O U ((A & ((!D & !O) U C)) | (D & ((!A & !O) U B)))")
    m = random_mdp(rng, 400, 4, d.ap, density=0.02, label_prob=0.1)
    p = build_product(m, d, 0.95)
    indptr, indices, probs = p.csr()
    v = rng.normal(size=p.n_states)
    active = np.ones(p.n_states, dtype=bool)
    words = rng.integers(-1, d.delta.shape[1], size=(20_000, 12))
    n = 10_000
    return {
        "mellowmax_sweep": (indptr, indices, probs, p.reward, v, active, 0.95, 0.1, p.n_actions),
        "dfa_run": (d.delta, d.initial, d.accepting_mask(), words),
        "cartpole_dynamics": (rng.uniform(-0.1, 0.1, (n, 4)), rng.integers(2, size=n), 0.02),
        "dubins_dynamics": (rng.uniform(0, 5, (n, 3)), rng.choice([-0.42, 0.0, 0.42], n),
                            rng.normal(0, 0.01, (n, 3)), 0.3, 1.0),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    np_k = kernels.numpy_kernels()
    nb_k = kernels.numba_kernels()
    print(f"{'kernel':<18} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  max|diff|")
    for name, a in cases(np.random.default_rng(0)).items():
        ref, out = np_k[name](*a), nb_k[name](*a)  # also triggers compilation
        diff = float(np.max(np.abs(np.asarray(ref, float) - np.asarray(out, float))))
        t_np = min(timeit.repeat(lambda: np_k[name](*a), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: nb_k[name](*a), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<18} {t_np:>10.3f} {t_nb:>10.3f} {t_np / t_nb:>7.1f}x  {diff:.1e}")


if __name__ == "__main__":
    main()
