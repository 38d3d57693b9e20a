import csv
import json

import numpy as np
import pytest

from mixlab.cli import main
from mixlab.datastore import generate_dataset
from mixlab.envs import make_env
from mixlab.errors import ConfigError, DatasetError
from mixlab.policy import evaluate
from mixlab.report import report
from mixlab.runner import (METRIC_COLUMNS, RunConfig, finetune_online, joint_value, load_config, load_learner,
                           read_metrics, train)
from mixlab.sweep import best_over_alpha, expand_grid, load_grid, read_table, sweep, validate_grid

SMALL = dict(hidden=[16], mixer_embed=4, mixer_hyper=8, batch_size=16, total_steps=40, log_interval=10,
             eval_every=20, eval_episodes=2, lr_critic=1e-3, lr_actor=1e-3)


@pytest.fixture(scope="module")
def datasets(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    generate_dataset("two_step", "uniform", 64, 0, root / "two_step.jsonl", exhaustive=True)
    generate_dataset("coop_bandit", "mixture", 200, 0, root / "bandit.jsonl")
    generate_dataset("spread_lite", "medium", 4, 0, root / "spread.jsonl")
    return root


def _cfg(datasets, **kw):
    d = dict(SMALL, env="two_step", dataset=str(datasets / "two_step.jsonl"))
    d.update(kw)
    return RunConfig.from_dict(d)


def _write_config(path, datasets, **kw):
    d = dict(SMALL, env="two_step", dataset=str(datasets / "two_step.jsonl"))
    d.update(kw)
    path.write_text(json.dumps(d))
    return path


def test_config_defaults_and_validation(datasets):
    cfg = RunConfig(env="two_step", dataset="x")
    assert cfg.svn == "on" and cfg.gamma == 0.99 and cfg.batch_size == 64 and cfg.online_steps == cfg.total_steps
    assert RunConfig(env="two_step", dataset="x", decomp="vdn").svn == "off"
    for bad in ({"decomp": "qmix"}, {"value_learning": "cql"}, {"extraction": "td3"}, {"svn": "yes"},
                {"total_steps": 10, "eval_every": 100}, {"batch_size": 0}, {"alpha": -1.0},
                {"iql_tau": 1.0}, {"hidden": "huge"}, {"env": "walker"}):
        with pytest.raises(ConfigError):
            RunConfig(**{"env": "two_step", "dataset": "x", **bad})
    with pytest.raises(ConfigError, match="unknown config keys"):
        RunConfig.from_dict({"env": "two_step", "dataset": "x", "learning_rate": 1.0})
    with pytest.raises(ConfigError, match="missing"):
        RunConfig.from_dict({"env": "two_step"})


def test_load_config_resolves_dataset_and_overrides(tmp_path, datasets):
    (tmp_path / "d.jsonl").write_bytes((datasets / "two_step.jsonl").read_bytes())
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"env": "two_step", "dataset": "d.jsonl", "seed": 1}))
    cfg = load_config(path, {"seed": 5})
    assert cfg.seed == 5 and cfg.dataset == str(tmp_path / "d.jsonl")
    assert load_config(path, {"seed": None}).seed == 1
    path.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_train_outputs_and_row_count(tmp_path, datasets):
    result = train(_cfg(datasets), tmp_path / "run")
    for name in ("config.json", "metrics.csv", "checkpoint.json", "summary.json"):
        assert (tmp_path / "run" / name).exists()
    with (tmp_path / "run" / "metrics.csv").open() as fh:
        assert tuple(next(csv.reader(fh))) == METRIC_COLUMNS
    rows = read_metrics(tmp_path / "run" / "metrics.csv")
    assert [int(r["step"]) for r in rows] == [10, 20, 30, 40]
    assert [r["eval_return_mean"] != "" for r in rows] == [False, True, False, True]
    s = result.summary
    assert s["seed"] == 0 and s["steps_completed"] == 40 and not result.halted
    assert s["final_eval_return"] in (0.0, 1.0, 7.0, 8.0)
    assert s["final_normalized"] == pytest.approx(s["final_eval_return"] / 8.0)


def test_training_is_deterministic(tmp_path, datasets):
    for name in ("a", "b"):
        train(_cfg(datasets, seed=3), tmp_path / name)
    for f in ("metrics.csv", "checkpoint.json", "summary.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    train(_cfg(datasets, seed=4), tmp_path / "c")
    assert (tmp_path / "a" / "checkpoint.json").read_bytes() != (tmp_path / "c" / "checkpoint.json").read_bytes()


def test_logged_q_is_unnormalized(tmp_path, datasets):
    # with svn on, q columns still track the raw critic output
    cfg = _cfg(datasets, total_steps=20, eval_every=20)
    train(cfg, tmp_path / "run")
    learner, _ = load_learner(tmp_path / "run" / "checkpoint.json")
    env = make_env("two_step")
    state, obs = env.reset(seed=0)
    q = joint_value(learner, state, obs, [1, 1])
    assert isinstance(q, float) and np.isfinite(q)
    rows = read_metrics(tmp_path / "run" / "metrics.csv")
    assert float(rows[-1]["q_abs_mean"]) >= abs(float(rows[-1]["q_mean"]))


def test_halted_run_keeps_partial_outputs(tmp_path, datasets):
    result = train(_cfg(datasets, drift_multiple=1e-9), tmp_path / "run")
    s = result.summary
    assert result.halted and s["halt_reason"] == "value_scale_drift" and s["halt_step"] == 1
    rows = read_metrics(tmp_path / "run" / "metrics.csv")
    assert rows[-1]["flags"] == "value_scale_drift"
    assert (tmp_path / "run" / "checkpoint.json").exists()


def test_dataset_env_mismatch(tmp_path, datasets):
    with pytest.raises(ConfigError):
        train(_cfg(datasets, env="coop_bandit"), tmp_path / "run")
    with pytest.raises(ConfigError):
        train(_cfg(datasets, batch_size=10_000), tmp_path / "run")
    with pytest.raises(DatasetError):
        train(_cfg(datasets, dataset=str(tmp_path / "none.jsonl")), tmp_path / "run")


@pytest.mark.parametrize("decomp,method,extraction", [
    ("dec", "iql", "awr"), ("cen", "sarsa", "brac"), ("vdn", "td", "brac"), ("mix", "iql", "brac")])
def test_method_combinations_run(tmp_path, datasets, decomp, method, extraction):
    env = "spread_lite" if decomp == "cen" else "coop_bandit"
    data = "spread.jsonl" if env == "spread_lite" else "bandit.jsonl"
    cfg = _cfg(datasets, env=env, dataset=str(datasets / data), decomp=decomp, value_learning=method,
               extraction=extraction, total_steps=20, eval_every=20)
    result = train(cfg, tmp_path / "run")
    assert not result.halted and np.isfinite(result.summary["final_eval_return"])


def test_finetune_zero_steps_matches_checkpoint_eval(tmp_path, datasets):
    cfg = _cfg(datasets, seed=2)
    train(cfg, tmp_path / "off")
    ckpt = tmp_path / "off" / "checkpoint.json"
    cfg0 = _cfg(datasets, seed=2, online_steps=0, eval_episodes=5)
    result = finetune_online(cfg0, ckpt, tmp_path / "on")
    learner, _ = load_learner(ckpt)
    mean, _, _ = evaluate(learner.policies, make_env("two_step"), 5, 2 * 1_000_003)
    assert result.summary["final_eval_return"] == mean
    assert result.summary["steps_completed"] == 0


def test_finetune_uses_online_data_only(tmp_path, datasets):
    cfg = _cfg(datasets, env="coop_bandit", dataset=str(datasets / "bandit.jsonl"))
    train(cfg, tmp_path / "off")
    on_cfg = _cfg(datasets, env="coop_bandit", dataset=str(datasets / "bandit.jsonl"), online_steps=40)
    result = finetune_online(on_cfg, tmp_path / "off" / "checkpoint.json", tmp_path / "on")
    assert result.summary["buffer_sources"] == ["online"]
    assert result.summary["online_episodes"] >= 40 and result.summary["mode"] == "online"
    assert len(read_metrics(tmp_path / "on" / "metrics.csv")) == 4


def _grid(datasets, **axes):
    base = dict(SMALL, env="two_step", dataset=str(datasets / "two_step.jsonl"), total_steps=20, eval_every=20)
    return {"base": base, "axes": axes or {"decomp": ["vdn", "mix"], "alpha": [0.1, 1.0]}, "seeds": [0, 1]}


def test_sweep_table_is_complete_and_reproducible(tmp_path, datasets):
    grid = _grid(datasets)
    rows = sweep(grid, tmp_path / "a")
    assert len(rows) == 8 and all(r["status"] == "ok" for r in rows)
    assert len(read_table(tmp_path / "a" / "sweep.csv")) == 8
    sweep(grid, tmp_path / "b")
    for f in ("sweep.csv", "cells.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    # recompute the best-over-alpha cells by hand
    table = read_table(tmp_path / "a" / "sweep.csv")
    for cell in read_table(tmp_path / "a" / "cells.csv"):
        by_alpha = {}
        for r in table:
            if r["decomp"] == cell["decomp"]:
                by_alpha.setdefault(float(r["alpha"]), []).append(float(r["best_normalized"]))
        means = {a: np.mean(v) for a, v in by_alpha.items()}
        assert float(cell["best_normalized_mean"]) == pytest.approx(max(means.values()), rel=1e-12)
        assert means[float(cell["best_alpha"])] == max(means.values())


def test_best_over_alpha_prefers_first_alpha_on_ties():
    rows = [dict(decomp="mix", value_learning="td", extraction="awr", alpha=a, seed=s, status="ok",
                 best_normalized=v) for a, s, v in ((0.1, 0, 0.5), (0.1, 1, 0.7), (1.0, 0, 0.6), (1.0, 1, 0.6))]
    cells = best_over_alpha(rows)
    assert cells[0]["best_alpha"] == 0.1 and cells[0]["best_normalized_mean"] == pytest.approx(0.6)
    rows.append(dict(rows[0], alpha=3.0, status="error: x", best_normalized=None))
    assert best_over_alpha(rows) == cells


def test_sweep_isolates_failed_runs(tmp_path, datasets):
    grid = _grid(datasets, batch_size=[16, 100_000])
    rows = sweep(grid, tmp_path / "s")
    assert len(rows) == 4
    failed = [r for r in rows if r["status"] != "ok"]
    assert len(failed) == 2 and all("ConfigError" in r["status"] for r in failed)
    assert all(r["final_return"] is not None for r in rows if r["status"] == "ok")


def test_grid_validation(tmp_path, datasets):
    with pytest.raises(ConfigError):
        validate_grid({"base": {}, "axes": {"seed": [1, 2]}})
    with pytest.raises(ConfigError):
        validate_grid({"base": {}, "axes": {"decomp": []}})
    with pytest.raises(ConfigError):
        validate_grid({"base": {}, "axes": {}, "extra": 1})
    assert len(expand_grid(_grid(datasets))) == 8
    path = tmp_path / "g.json"
    path.write_text(json.dumps(_grid(datasets)))
    assert load_grid(path)["seeds"] == [0, 1]


def test_report_run_and_sweep(tmp_path, datasets):
    train(_cfg(datasets), tmp_path / "run")
    written = report(tmp_path / "run")
    names = sorted(p.name for p in written)
    assert names == ["eval_return.svg", "grad_norm.svg", "q_abs_mean.svg", "summary.txt", "td_loss.svg"]
    assert "steps_completed: 40" in (tmp_path / "run" / "summary.txt").read_text()
    sweep(_grid(datasets, value_learning=["td", "iql"]), tmp_path / "sw")
    names = sorted(p.name for p in report(tmp_path / "sw"))
    assert names == ["summary.txt", "sweep_iql.svg", "sweep_td.svg"]
    with pytest.raises(ConfigError):
        report(tmp_path / "empty")
    metrics = tmp_path / "run" / "metrics.csv"
    metrics.write_text(metrics.read_text().replace("td_loss", "loss", 1))
    with pytest.raises(ConfigError, match="td_loss"):
        report(tmp_path / "run")


def test_report_marks_halt(tmp_path, datasets):
    train(_cfg(datasets, drift_multiple=1e-9), tmp_path / "run")
    report(tmp_path / "run")
    assert "halted: value_scale_drift" in (tmp_path / "run" / "q_abs_mean.svg").read_text()


def test_cli_exit_codes(tmp_path, datasets, capsys):
    data = tmp_path / "d.jsonl"
    assert main(["gen-data", "--env", "two_step", "--behavior", "uniform", "--episodes", "16", "--exhaustive",
                 "--out", str(data)]) == 0
    good = _write_config(tmp_path / "good.json", datasets, dataset=str(data))
    assert main(["train", "--config", str(good), "--out", str(tmp_path / "run")]) == 0
    bad = _write_config(tmp_path / "bad.json", datasets, decomp="qmix")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    halt = _write_config(tmp_path / "halt.json", datasets, drift_multiple=1e-9)
    assert main(["train", "--config", str(halt), "--out", str(tmp_path / "h")]) == 3
    assert main(["gen-data", "--env", "coop_bandit", "--behavior", "uniform", "--exhaustive",
                 "--out", str(tmp_path / "e.jsonl")]) == 2
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(tmp_path / "run" / "checkpoint.json"), "--episodes", "3"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert len(out["returns"]) == 3 and out["mean"] == pytest.approx(np.mean(out["returns"]))
    assert main(["finetune", "--config", str(good), "--checkpoint", str(tmp_path / "run" / "checkpoint.json"),
                 "--out", str(tmp_path / "ft")]) == 0
    assert main(["report", str(tmp_path / "run")]) == 0


def test_cli_dynamics(tmp_path, capsys):
    out = tmp_path / "dyn.json"
    assert main(["dynamics", "--j-matrix", "expansive", "--steps", "20", "--sigma", "4", "--out", str(out)]) == 0
    assert "regime=expansive" in capsys.readouterr().out
    payload = json.loads(out.read_text())
    assert payload["spectral_radius"] == pytest.approx(1.16) and len(payload["ratios"]) == 20
    matrix = tmp_path / "j.json"
    matrix.write_text(json.dumps([[0.5, 0.0], [0.0, 0.2]]))
    assert main(["dynamics", "--j-matrix", str(matrix), "--gamma", "0.9", "--alpha-q", "0.1"]) == 0
    assert "regime=contractive" in capsys.readouterr().out
    assert main(["dynamics", "--j-matrix", "nope"]) == 2
