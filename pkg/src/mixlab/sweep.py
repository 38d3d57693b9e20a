"""Cartesian-product sweeps over run configurations."""
from __future__ import annotations

import csv
import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .runner import RunConfig, train

KEY_COLUMNS = ("decomp", "value_learning", "extraction", "alpha", "seed")
RESULT_COLUMNS = ("status", "halted", "final_return", "best_return", "final_normalized", "best_normalized",
                  "run_dir")
CELL_COLUMNS = ("decomp", "value_learning", "extraction", "best_alpha", "best_normalized_mean", "n_seeds")


def load_grid(path) -> dict:
    try:
        grid = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read grid {path}: {exc}") from exc
    validate_grid(grid)
    return grid


def validate_grid(grid: dict) -> None:
    unknown = sorted(set(grid) - {"base", "axes", "seeds"})
    if unknown:
        raise ConfigError(f"unknown grid keys: {unknown}")
    if "base" not in grid or "axes" not in grid:
        raise ConfigError("a grid needs 'base' and 'axes'")
    known = {f.name for f in fields(RunConfig)}
    for axis, values in grid["axes"].items():
        if axis not in known or axis == "seed":
            raise ConfigError(f"cannot sweep over {axis!r}")
        if not isinstance(values, list) or not values:
            raise ConfigError(f"axis {axis!r} needs a non-empty list of values")


def expand_grid(grid: dict) -> list[dict]:
    """Every axis combination times every seed, as full config dicts."""
    validate_grid(grid)
    axes = sorted(grid["axes"])
    seeds = grid.get("seeds", [grid["base"].get("seed", 0)])
    out = []
    for combo in itertools.product(*(grid["axes"][a] for a in axes)):
        for seed in seeds:
            cfg = dict(grid["base"])
            cfg.update(zip(axes, combo))
            cfg["seed"] = seed
            out.append(cfg)
    return out


def run_name(cfg: dict, axes) -> str:
    parts = [f"{a}={cfg[a]}" for a in sorted(axes)] + [f"seed={cfg['seed']}"]
    return "_".join(parts).replace("/", "-").replace(" ", "")


def _run_one(job: tuple[dict, str]) -> dict:
    cfg_dict, run_dir = job
    row = {k: cfg_dict.get(k) for k in KEY_COLUMNS}
    try:
        cfg = RunConfig.from_dict(cfg_dict)
        row.update({k: getattr(cfg, k) for k in KEY_COLUMNS})
        summary = train(cfg, run_dir).summary
        row.update(status="ok", halted=summary["halted"], final_return=summary.get("final_eval_return"),
                   best_return=summary.get("best_eval_return"), final_normalized=summary.get("final_normalized"),
                   best_normalized=summary.get("best_normalized"))
    except Exception as exc:  # a failed run must not stop its siblings
        row.update(status=f"error: {type(exc).__name__}: {exc}")
    row["run_dir"] = Path(run_dir).name
    return row


def _sort_key(row: dict):
    return tuple(str(row[k]) for k in KEY_COLUMNS[:-1]) + (int(row["seed"]),)


def sweep(grid: dict, out_dir, workers: int = 1) -> list[dict]:
    """Run the grid into ``out_dir/runs/<name>`` and write ``sweep.csv`` and ``cells.csv``."""
    out = Path(out_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    configs = expand_grid(grid)
    jobs = [(c, str(out / "runs" / run_name(c, grid["axes"]))) for c in configs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_one, jobs))
    else:
        rows = [_run_one(j) for j in jobs]
    rows.sort(key=_sort_key)
    write_table(out / "sweep.csv", rows, KEY_COLUMNS + RESULT_COLUMNS)
    write_table(out / "cells.csv", best_over_alpha(rows), CELL_COLUMNS)
    return rows


def best_over_alpha(rows: list[dict]) -> list[dict]:
    """Per (decomp, value_learning, extraction): the alpha whose seed-mean best score is highest."""
    groups: dict[tuple, dict[float, list[float]]] = {}
    for r in rows:
        if r.get("status") != "ok" or r.get("best_normalized") in (None, ""):
            continue
        cell = (r["decomp"], r["value_learning"], r["extraction"])
        groups.setdefault(cell, {}).setdefault(float(r["alpha"]), []).append(float(r["best_normalized"]))
    cells = []
    for cell in sorted(groups):
        by_alpha = groups[cell]
        alpha = max(sorted(by_alpha), key=lambda a: float(np.mean(by_alpha[a])))
        cells.append(dict(zip(CELL_COLUMNS[:3], cell), best_alpha=alpha,
                          best_normalized_mean=float(np.mean(by_alpha[alpha])), n_seeds=len(by_alpha[alpha])))
    return cells


def write_table(path, rows: list[dict], columns) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in columns])


def read_table(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
