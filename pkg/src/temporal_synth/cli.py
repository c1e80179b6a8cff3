"""Command-line front end: ``temporal-synth {compile,decompose,solve,train,evaluate}``.

Exit codes: 0 success, 2 input error, 3 numerical or training error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, scltl, topo
from ._accel import backend
from .approx import CheckpointMismatch, ModularApproximator
from .mdp import TabularEnvironment, load_mdp
from .product import AlphabetMismatch, ProductEnvironment, build_product
from .sac import TrainerConfig, train
from .tabular import NoConvergence, SolverConfig, ValueTable, extract_policy, solver_for, value_iteration

log = logging.getLogger("temporal_synth")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
EVAL_CHUNK = 10

GRID_LAYOUT = {
    "size": [5, 5],
    "slip": 0.1,
    "start": [0, 0],
    "labels": {"A": [[4, 0]], "B": [[4, 4]], "C": [[0, 4]], "O": [[2, 1], [2, 2], [2, 3]]},
}
GRID_FORMULA = "!O U (A & F B)"


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _read_formula(arg: str) -> str:
    p = Path(arg)
    if p.is_file():
        lines = [ln.split("#", 1)[0].strip() for ln in p.read_text().splitlines()]
        return " ".join(ln for ln in lines if ln)
    return arg


def _seed(args, config: dict) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    env = os.environ.get("TEMPORAL_SYNTH_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise InputError(f"TEMPORAL_SYNTH_SEED must be an integer, got {env!r}") from None
    return int(config.get("seed", 0))


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise InputError("config must be a JSON object")
    return doc


def _hash_inputs(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        if p is not None and Path(p).is_file():
            h.update(Path(p).read_bytes())
        else:
            h.update(str(p).encode())
        h.update(b"\0")
    return h.hexdigest()


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, args, config: dict, seed, inputs, started: float) -> None:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "seed": seed,
        "input_hash": _hash_inputs(inputs),
        "out_dir": str(out),
        "version": __version__,
        "backend": backend(),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)


def _compile(formula_text: str, ap=None) -> scltl.Dfa:
    f = scltl.to_pnf(scltl.parse_formula(formula_text, ap))
    return scltl.compile_dfa(f, ap)


def _exclusive_letters(d: scltl.Dfa) -> list[int]:
    return [0] + [1 << i for i in range(len(d.ap))]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_compile(args) -> int:
    text = _read_formula(args.formula)
    ap = [p.strip() for p in args.ap.split(",") if p.strip()] if args.ap else None
    d = _compile(text, ap)
    out = _out_dir(args)
    scltl.save_dfa(d, out / "dfa.json")
    (out / "dfa.dot").write_text(d.to_dot())
    sink = "none" if d.sink is None else f"q{d.sink}"
    print(f"states={d.n_states} accepting={len(d.accepting)} sink={sink} ap={','.join(d.ap)}")
    return EXIT_OK


def cmd_decompose(args) -> int:
    d = scltl.load_dfa(args.dfa)
    m = load_mdp(args.mdp) if args.mdp else None
    mode = args.mode or ("tabular" if m is not None else "structural")
    if mode == "tabular" and m is None:
        raise InputError("tabular mode needs --mdp")
    letters = _exclusive_letters(d) if args.exclusive else None
    g = topo.causal_graph(d, m if mode == "tabular" else None, letters=None if mode == "tabular" else letters)
    modes = topo.meta_modes(g)
    part = topo.level_sets(modes, g, d)
    out = _out_dir(args)
    part.save(out / "levels.json")
    (out / "levels.dot").write_text(part.to_dot(g))
    for i, lvl in enumerate(part.levels):
        members = ", ".join("{" + ",".join(f"q{q}" for q in sorted(X)) + "}" + (" (repaired)" if X in part.repaired else "")
                            for X in lvl)
        print(f"L{i}: {members}")
    return EXIT_OK


def cmd_solve(args) -> int:
    config = _load_config(args.config)
    solver_cfg = SolverConfig(**config.get("solver", {k: v for k, v in config.items() if k in
                                                      ("gamma", "tau", "tolerance", "max_iterations")}))
    m = load_mdp(args.mdp)
    d = scltl.load_dfa(args.dfa)
    product = build_product(m, d, solver_cfg.gamma)
    g = topo.causal_graph(d, m)
    part = topo.level_sets(topo.meta_modes(g), g, d)
    v_topo = topo.solve_by_levels(product, part, solver_for(solver_cfg))
    frozen = topo.zero_set(product, part)
    v_flat = value_iteration(product, solver_cfg, np.zeros(product.n_states), ~frozen)
    gap = float(np.max(np.abs(v_topo - v_flat)))
    out = _out_dir(args)
    table = ValueTable(v_topo, product.n_q)
    table.to_csv(out / "values.csv", m.state_names)
    pi = extract_policy(v_topo, product, solver_cfg)
    with open(out / "policy.json", "w") as fh:
        json.dump([{"s": m.state_names[z // product.n_q], "q": z % product.n_q,
                    "probs": {a: float(p) for a, p in zip(m.action_names, pi.table[z])}}
                   for z in range(product.n_states)], fh, indent=1)
    s0, q0 = product.pair(product.z0)
    print(f"levels={part.n_levels} V({m.state_names[s0]},q{q0})={v_topo[product.z0]:.6f}")
    print(f"gap topological-vs-flat sup-norm={gap:.3e} (tolerance {solver_cfg.tolerance:.1e})")
    return EXIT_OK


def _grid_task(formula_text: str, layout: dict, max_steps: int):
    from .envs.grid import grid_mdp
    d = _compile(formula_text)
    props = set(d.ap)
    labels: dict = {}
    for name, cells in layout["labels"].items():
        if name in props:
            for c in cells:
                labels.setdefault(tuple(c), set()).add(name)
    w, h = layout["size"]
    m = grid_mdp(w, h, labels, d.ap, slip=layout.get("slip", 0.0), start=tuple(layout.get("start", (0, 0))))
    task = ProductEnvironment(TabularEnvironment(m), d, max_steps=max_steps)
    return task, d


def _make_task(env_name: str, formula_text: str | None, config: dict, max_steps: int):
    """Returns ``(task, partition or None)``."""
    if env_name == "cartpole":
        from .envs.cartpole import CartPoleTask
        return CartPoleTask(max_steps), None
    if env_name == "dubins":
        from .envs.dubins import SEQUENTIAL_VISITING, DubinsTask, WorkspaceConfig
        ws = config.get("workspace")
        if isinstance(ws, str):
            ws = WorkspaceConfig.from_json(_load_config(ws))
        elif isinstance(ws, dict):
            ws = WorkspaceConfig.from_json(ws)
        else:
            ws = WorkspaceConfig.default()
        d = _compile(formula_text or SEQUENTIAL_VISITING, list(ws.ap))
        task = DubinsTask(d, ws, max_steps=max_steps)
        # regions are disjoint, so only the empty letter and singletons occur
        g = topo.causal_graph(d, letters=_exclusive_letters(d))
        return task, topo.level_sets(topo.meta_modes(g), g, d)
    if env_name == "grid":
        task, d = _grid_task(formula_text or GRID_FORMULA, config.get("grid", GRID_LAYOUT), max_steps)
        g = topo.causal_graph(d, task.env.mdp)
        return task, topo.level_sets(topo.meta_modes(g), g, d)
    raise InputError(f"unknown environment {env_name!r} (choose cartpole, dubins or grid)")


def _trainer_config(env_name: str, config: dict, seed: int) -> TrainerConfig:
    overrides = dict(config.get("trainer", {}))
    overrides["seed"] = seed
    if env_name == "cartpole":
        return TrainerConfig.cartpole(**overrides)
    if env_name == "dubins":
        return TrainerConfig.dubins(**overrides)
    base = dict(tau=0.01, lambda0=1e3, nu0=1e5, M=3, N=1500, K=5, T=10, optimizer="adam",
                warmup_paths=5, max_episode_steps=50, hidden=(64, 64))
    base.update(overrides)
    return TrainerConfig(**base)


def cmd_train(args) -> int:
    started = time.time()
    config = _load_config(args.config)
    seed = _seed(args, config)
    formula_text = _read_formula(args.formula) if args.formula else None
    try:
        cfg = _trainer_config(args.env, config, seed)
        task, part = _make_task(args.env, formula_text, config, cfg.max_episode_steps)
    except (TypeError, ValueError) as exc:
        raise RuntimeError(f"bad training configuration: {exc}") from exc
    out = _out_dir(args)
    res = train(task, cfg, part, topo=not args.no_topo, single_network=args.single_network,
                metrics_path=out / "metrics.csv", checkpoint_dir=out / "checkpoints")
    with open(out / "duals.json", "w") as fh:
        json.dump(res.duals, fh, indent=1)
    if part is not None:
        part.save(out / "levels.json")
    run = {"env": args.env, "formula": formula_text, "topo": not args.no_topo,
           "single_network": args.single_network, "trainer": cfg.to_json(),
           "workspace": config.get("workspace"), "grid": config.get("grid")}
    _write_manifest(out, "train", args, run, seed, [args.formula, args.config], started)
    last = res.metrics[-1] if res.metrics else {}
    print(f"trained levels={sorted({r['level'] for r in res.metrics})} steps={last.get('step', 0)} "
          f"V_z0={last.get('V_z0', float('nan')):.4f}")
    return EXIT_OK


def _eval_chunk(job) -> tuple[int, int, int]:
    """Run one chunk of episodes; returns (episodes, successes, total length)."""
    ckpt, env_name, formula_text, config, seed_seq, n, max_steps, greedy = job
    model = ModularApproximator.load(ckpt)
    task, _ = _make_task(env_name, formula_text, config, max_steps)
    if (model.obs_dim, model.n_actions, model.n_q) != (task.obs_dim, task.n_actions, task.n_q):
        raise CheckpointMismatch(
            f"checkpoint expects obs_dim={model.obs_dim}, actions={model.n_actions}, n_q={model.n_q}; "
            f"environment has {task.obs_dim}, {task.n_actions}, {task.n_q}")
    rng = np.random.default_rng(seed_seq)
    successes = total = 0
    for _ in range(n):
        s, q = task.reset(rng)
        accepted = env_name != "cartpole" and q in task.zero_qs and q in getattr(task.dfa, "accepting", ())
        steps = 0
        while not task.done:
            a = model.act(task.observe(s), q, rng, greedy=greedy)
            (s, q), _, _ = task.step(a, rng)
            steps += 1
            if env_name != "cartpole" and q in task.dfa.accepting:
                accepted = True
        if env_name == "cartpole":
            accepted = steps >= max_steps
        successes += int(accepted)
        total += steps
    return n, successes, total


def evaluate_checkpoint(ckpt, env_name: str, formula_text, config: dict, episodes: int, seed: int,
                        workers: int = 1, max_steps: int = 150, greedy: bool = False) -> dict:
    """Success-rate report; episodes run in fixed seeded chunks so the result
    does not depend on the number of workers."""
    if episodes < 1:
        raise InputError("--episodes must be at least 1")
    n_chunks = -(-episodes // EVAL_CHUNK)
    seqs = np.random.SeedSequence(seed).spawn(n_chunks)
    jobs = [(str(ckpt), env_name, formula_text, config, seqs[i],
             min(EVAL_CHUNK, episodes - i * EVAL_CHUNK), max_steps, greedy) for i in range(n_chunks)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_eval_chunk, jobs))
    else:
        results = [_eval_chunk(j) for j in jobs]
    n = sum(r[0] for r in results)
    succ = sum(r[1] for r in results)
    total = sum(r[2] for r in results)
    return {"episodes": n, "successes": succ, "rate": succ / n, "mean_length": total / n}


def cmd_evaluate(args) -> int:
    started = time.time()
    config = _load_config(args.config)
    seed = _seed(args, config)
    formula_text = _read_formula(args.formula) if args.formula else None
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise InputError(f"checkpoint {ckpt} not found")
    max_steps = args.max_steps or (500 if args.env == "cartpole" else 150)
    report = evaluate_checkpoint(ckpt, args.env, formula_text, config, args.episodes, seed,
                                 workers=args.workers, max_steps=max_steps, greedy=args.greedy)
    out = _out_dir(args)
    with open(out / "evaluation.json", "w") as fh:
        json.dump(report, fh, indent=1)
    _write_manifest(out, "evaluate", args, {"env": args.env, "episodes": args.episodes}, seed,
                    [args.checkpoint, args.formula, args.config], started)
    print(json.dumps(report))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="temporal-synth", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile", help="compile an scLTL formula to a DFA (JSON + DOT)")
    p.add_argument("formula", help="formula file (or the formula text itself)")
    p.add_argument("--ap", help="comma-separated atomic propositions (default: those in the formula)")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("decompose", help="meta-modes and level sets of a DFA")
    p.add_argument("dfa", help="DFA JSON from `compile`")
    p.add_argument("--mdp", help="labeled MDP JSON (enables tabular mode)")
    p.add_argument("--mode", choices=("structural", "tabular"))
    p.add_argument("--exclusive", action="store_true",
                   help="propositions are mutually exclusive: only the empty letter and singletons occur")
    p.add_argument("--out")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("solve", help="topological mellowmax value iteration on a tabular product")
    p.add_argument("mdp")
    p.add_argument("dfa")
    p.add_argument("--config", help="JSON with gamma, tau, tolerance, max_iterations")
    p.add_argument("--out")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("train", help="run the sequential actor-critic")
    p.add_argument("env", choices=("cartpole", "dubins", "grid"))
    p.add_argument("formula", nargs="?", help="task formula file or text (ignored for cartpole)")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--single-network", action="store_true", help="one shared net pair with q as an input")
    p.add_argument("--no-topo", action="store_true", help="train all automaton states together")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="success rate of a trained checkpoint")
    p.add_argument("checkpoint", help="checkpoint header (.json)")
    p.add_argument("--env", choices=("cartpole", "dubins", "grid"), required=True)
    p.add_argument("--formula")
    p.add_argument("--config")
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except scltl.FormulaSyntaxError as exc:
        print(f"error: syntax: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (scltl.UnknownProposition, scltl.NotCoSafe, scltl.StateBudgetExceeded, AlphabetMismatch,
            topo.Unlevelable, CheckpointMismatch, InputError, FileNotFoundError, json.JSONDecodeError,
            KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NoConvergence, FloatingPointError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
