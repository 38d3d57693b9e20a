"""Plots and plain-text summaries for run and sweep directories."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import ConfigError  # noqa: E402
from .runner import read_metrics  # noqa: E402
from .sweep import best_over_alpha, read_table  # noqa: E402

plt.rcParams["svg.hashsalt"] = "mixlab"
RUN_PLOTS = {
    "q_abs_mean": ("q_abs_mean", "mean |Q| (unnormalized)", True),
    "td_loss": ("td_loss", "TD loss", True),
    "grad_norm": ("grad_norm_total", "total gradient norm", True),
    "eval_return": ("eval_return_mean", "evaluation return", False),
}


def _series(rows: list[dict], column: str) -> tuple[np.ndarray, np.ndarray]:
    pts = [(float(r["step"]), float(r[column])) for r in rows if r.get(column) not in (None, "")]
    if not pts:
        return np.zeros(0), np.zeros(0)
    arr = np.asarray(pts)
    return arr[:, 0], arr[:, 1]


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def report_run(run_dir) -> list[Path]:
    run_dir = Path(run_dir)
    rows = read_metrics(run_dir / "metrics.csv")
    with (run_dir / "metrics.csv").open(encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    missing = [c for c in ["step"] + [col for col, _, _ in RUN_PLOTS.values()] if c not in header]
    if missing:
        raise ConfigError(f"{run_dir / 'metrics.csv'}: missing columns {missing}")
    summary_path = run_dir / "summary.json"
    summary = json.loads(summary_path.read_text(encoding="utf-8")) if summary_path.exists() else {}
    halt_step = summary.get("halt_step")
    written = []
    for name, (column, label, log_scale) in RUN_PLOTS.items():
        steps, values = _series(rows, column)
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(steps, np.abs(values) if log_scale else values, lw=1.2)
        if log_scale and len(values) and np.all(np.abs(values) > 0):
            ax.set_yscale("log")
        if halt_step is not None:
            ax.axvline(halt_step, color="tab:red", ls="--", lw=1)
            ax.annotate(f"halted: {summary.get('halt_reason')}", (halt_step, 0.95), xycoords=("data", "axes fraction"),
                        ha="right", va="top", color="tab:red", fontsize=8)
        ax.set_xlabel("gradient step")
        ax.set_ylabel(label)
        fig.tight_layout()
        path = run_dir / f"{name}.svg"
        _save(fig, path)
        written.append(path)
    lines = [f"run: {run_dir.name}", f"rows: {len(rows)}"]
    for key in ("env", "decomp", "value_learning", "extraction", "alpha", "seed", "svn", "actor_norm",
                "steps_completed", "final_eval_return", "best_eval_return", "final_normalized",
                "max_q_abs_mean", "halted", "halt_reason", "halt_step"):
        if key in summary:
            lines.append(f"{key}: {summary[key]}")
    path = run_dir / "summary.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(path)
    return written


def report_sweep(sweep_dir) -> list[Path]:
    sweep_dir = Path(sweep_dir)
    cells = best_over_alpha(read_table(sweep_dir / "sweep.csv"))
    written = []
    methods = sorted({c["value_learning"] for c in cells})
    for method in methods:
        sub = [c for c in cells if c["value_learning"] == method]
        decomps = sorted({c["decomp"] for c in sub})
        extractions = sorted({c["extraction"] for c in sub})
        width = 0.8 / max(len(extractions), 1)
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for i, ext in enumerate(extractions):
            heights = [next((c["best_normalized_mean"] for c in sub if c["decomp"] == d and c["extraction"] == ext),
                            np.nan) for d in decomps]
            ax.bar(np.arange(len(decomps)) + i * width, heights, width, label=ext)
        ax.set_xticks(np.arange(len(decomps)) + 0.4 - width / 2)
        ax.set_xticklabels(decomps)
        ax.set_ylabel("best normalized return")
        ax.set_title(method)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = sweep_dir / f"sweep_{method}.svg"
        _save(fig, path)
        written.append(path)
    lines = ["decomp value_learning extraction best_alpha best_normalized_mean n_seeds"]
    lines += [f"{c['decomp']} {c['value_learning']} {c['extraction']} {c['best_alpha']} "
              f"{c['best_normalized_mean']:.4f} {c['n_seeds']}" for c in cells]
    path = sweep_dir / "summary.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(path)
    return written


def report(path) -> list[Path]:
    path = Path(path)
    if (path / "sweep.csv").exists():
        return report_sweep(path)
    if (path / "metrics.csv").exists():
        return report_run(path)
    raise ConfigError(f"{path}: neither metrics.csv nor sweep.csv found")
