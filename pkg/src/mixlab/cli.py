"""Command-line entry point: ``mixlab <command> ...``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .datastore import generate_dataset
from .envs import BEHAVIOR_KINDS, ENV_REGISTRY, make_env
from .errors import ConfigError, DatasetError, DivergenceError
from .policy import evaluate
from .runner import finetune_online, load_config, load_learner, train
from .stability import LINEAR_PRESETS, LinearTdSystem, analyze
from .sweep import load_grid, sweep

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def _cmd_gen_data(args) -> int:
    header = generate_dataset(args.env, args.behavior, args.episodes, args.seed, args.out, args.exhaustive)
    print(f"wrote {header.num_records} transitions ({header.num_episodes} episodes) to {args.out}; "
          f"returns min/mean/max {header.return_min:.3f}/{header.return_mean:.3f}/{header.return_max:.3f}")
    return EXIT_OK


def _overrides(args) -> dict:
    return {"seed": args.seed}


def _cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    out = Path(args.out or f"runs/{Path(args.config).stem}_seed{cfg.seed}")
    result = train(cfg, out)
    return _finish(result)


def _cmd_finetune(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    out = Path(args.out or f"runs/{Path(args.config).stem}_online_seed{cfg.seed}")
    return _finish(finetune_online(cfg, args.checkpoint, out))


def _finish(result) -> int:
    s = result.summary
    if result.halted:
        print(f"halted at step {s['halt_step']}: {s['halt_reason']} ({result.run_dir})")
        return EXIT_DIVERGED
    print(f"done: final return {s.get('final_eval_return')} normalized {s.get('final_normalized')} "
          f"({result.run_dir})")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    rows = sweep(load_grid(args.grid), args.out, args.workers)
    failed = sum(1 for r in rows if r["status"] != "ok")
    print(f"{len(rows)} runs, {failed} failed; table in {Path(args.out) / 'sweep.csv'}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    learner, cfg = load_learner(args.checkpoint)
    mean, std, returns = evaluate(learner.policies, make_env(cfg.env), args.episodes, args.seed)
    print(json.dumps({"mean": mean, "std": std, "returns": returns}))
    return EXIT_OK


def _load_matrix(spec: str) -> tuple[np.ndarray, dict]:
    if spec in LINEAR_PRESETS:
        preset = LINEAR_PRESETS[spec]
        return np.asarray(preset["j"], dtype=float), preset
    try:
        payload = json.loads(Path(spec).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"--j-matrix must be a preset {sorted(LINEAR_PRESETS)} or a JSON file: {exc}") from exc
    if isinstance(payload, dict):
        return np.asarray(payload["j"], dtype=float), payload
    return np.asarray(payload, dtype=float), {}


def _cmd_dynamics(args) -> int:
    j, preset = _load_matrix(args.j_matrix)
    gamma = args.gamma if args.gamma is not None else preset.get("gamma", 0.9)
    alpha_q = args.alpha_q if args.alpha_q is not None else preset.get("alpha_q", 0.1)
    n = np.atleast_2d(j).shape[0]
    system = LinearTdSystem(j, gamma, alpha_q, np.ones(n), np.zeros(n))
    report = analyze(system, args.steps, args.actor_sensitivity, args.sigma)
    payload = report.to_dict()
    payload.update(gamma=gamma, alpha_q=alpha_q, j=np.atleast_2d(j).tolist())
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(f"rho={report.spectral_radius:.6g} regime={report.regime} op_norm={report.op_norm:.6g} "
          f"rate={report.rate:.6g}")
    return EXIT_OK


def _cmd_report(args) -> int:
    # matplotlib is only loaded when plotting
    from .report import report

    for path in report(args.dir):
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixlab", description="offline multi-agent actor-critic experiments")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="roll out a scripted behavior into a dataset file")
    g.add_argument("--env", required=True, choices=sorted(ENV_REGISTRY))
    g.add_argument("--behavior", required=True, choices=BEHAVIOR_KINDS)
    g.add_argument("--episodes", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--exhaustive", action="store_true", help="cycle all two_step joint patterns")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen_data)

    t = sub.add_parser("train", help="offline training from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(func=_cmd_train)

    f = sub.add_parser("finetune", help="online fine-tuning from an offline checkpoint")
    f.add_argument("--config", required=True)
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--seed", type=int)
    f.add_argument("--out")
    f.set_defaults(func=_cmd_finetune)

    s = sub.add_parser("sweep", help="run a Cartesian grid of configs")
    s.add_argument("--grid", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", default="sweep")
    s.set_defaults(func=_cmd_sweep)

    e = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=_cmd_eval)

    d = sub.add_parser("dynamics", help="linearized TD dynamics report")
    d.add_argument("--j-matrix", required=True, help=f"JSON file or preset {sorted(LINEAR_PRESETS)}")
    d.add_argument("--gamma", type=float)
    d.add_argument("--alpha-q", type=float)
    d.add_argument("--steps", type=int, default=100)
    d.add_argument("--actor-sensitivity", type=float, default=1.0)
    d.add_argument("--sigma", type=float, help="sigma_Q for the normalized loop gain")
    d.add_argument("--out")
    d.set_defaults(func=_cmd_dynamics)

    r = sub.add_parser("report", help="plots and summary for a run or sweep directory")
    r.add_argument("dir")
    r.set_defaults(func=_cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
