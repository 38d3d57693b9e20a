"""Run configuration, offline training loop and online fine-tuning."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .datastore import Batch, ReplayBuffer, load_dataset, push_rollout, run_episode, sample_batch
from .decomp import (DECOMPS, CriticStack, agent_major, agent_utilities, encode_actions, init_critic,
                     min_ensemble_q_tot)
from .envs import ENV_REGISTRY, EnvSpec, make_env
from .errors import ConfigError, DatasetError, DivergenceError
from .nn import AdamState, adam_init, assign_params, read_params, resolve_hidden, save_params
from .policy import (ADVANTAGE_MODES, EXTRACTIONS, ExtractionConfig, PolicySet, actor_update, evaluate,
                     init_policies, sample_actions)
from .stability import DivergenceMonitor, batch_mixer_opnorm, load_score_scales
from .value import VALUE_METHODS, ValueLearnConfig, ValueNets, critic_update, init_value_nets

METRIC_COLUMNS = (
    "step", "td_loss", "q_mean", "q_abs_mean", "actor_loss", "grad_norm_total", "jacobian_opnorm",
    "loop_gain_svn", "eval_return_mean", "eval_return_std", "normalized_score", "flags",
)
DEFAULT_TOTAL_STEPS = {"two_step": 20_000, "coop_bandit": 20_000, "spread_lite": 100_000}
DEFAULT_BATCH_SIZE = {"two_step": 64}
ON_OFF = ("on", "off")
JACOBIAN_ROWS = 32


@dataclass
class RunConfig:
    env: str
    dataset: str
    decomp: str = "mix"
    value_learning: str = "td"
    extraction: str = "awr"
    alpha: float = 1.0
    iql_tau: float = 0.7
    gamma: float | None = None
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    polyak_tau: float = 0.005
    batch_size: int | None = None
    total_steps: int | None = None
    eval_every: int = 1000
    eval_episodes: int = 10
    seed: int = 0
    svn: str | None = None  # defaults to "on" for mix, "off" otherwise
    svn_epsilon: float = 1e-6
    actor_norm: str = "on"
    hidden: str | list = "desk"
    mixer_embed: int = 32
    mixer_hyper: int = 128
    awr_clip: float = 100.0
    awr_advantage: str = "global"
    listing1_strict: bool = False
    log_interval: int = 100
    drift_multiple: float = 50.0
    online_steps: int | None = None  # defaults to total_steps
    online_buffer_capacity: int = 100_000
    exploration_std: float = 0.1

    def __post_init__(self):
        _choice("env", self.env, tuple(ENV_REGISTRY))
        _choice("decomp", self.decomp, DECOMPS)
        _choice("value_learning", self.value_learning, VALUE_METHODS)
        _choice("extraction", self.extraction, EXTRACTIONS)
        _choice("awr_advantage", self.awr_advantage, ADVANTAGE_MODES)
        if self.svn is None:
            self.svn = "on" if self.decomp == "mix" else "off"
        _choice("svn", self.svn, ON_OFF)
        _choice("actor_norm", self.actor_norm, ON_OFF)
        if self.gamma is None:
            self.gamma = make_env(self.env).spec.gamma
        if self.batch_size is None:
            self.batch_size = DEFAULT_BATCH_SIZE.get(self.env, 128)
        if self.total_steps is None:
            self.total_steps = DEFAULT_TOTAL_STEPS[self.env]
        if self.online_steps is None:
            self.online_steps = self.total_steps
        self.hidden = resolve_hidden(self.hidden) if not isinstance(self.hidden, str) else self.hidden
        resolve_hidden(self.hidden)
        for name in ("batch_size", "total_steps", "eval_every", "eval_episodes", "log_interval",
                     "mixer_embed", "mixer_hyper", "online_buffer_capacity"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.online_steps < 0:
            raise ConfigError("online_steps must be >= 0")
        if self.total_steps < self.eval_every:
            raise ConfigError(f"total_steps ({self.total_steps}) must be >= eval_every ({self.eval_every})")
        if self.lr_actor <= 0 or self.lr_critic <= 0:
            raise ConfigError("learning rates must be positive")
        if self.exploration_std < 0:
            raise ConfigError("exploration_std must be >= 0")
        if self.drift_multiple <= 0:
            raise ConfigError("drift_multiple must be positive")
        # the component configs carry their own range checks
        self.value_config()
        self.extraction_config()

    def value_config(self) -> ValueLearnConfig:
        return ValueLearnConfig(self.value_learning, self.gamma, self.iql_tau, self.svn == "on",
                                self.svn_epsilon, self.polyak_tau, self.listing1_strict)

    def extraction_config(self) -> ExtractionConfig:
        return ExtractionConfig(self.extraction, self.alpha, self.actor_norm == "on", self.awr_clip,
                                self.awr_advantage)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        missing = [k for k in ("env", "dataset") if k not in d]
        if missing:
            raise ConfigError(f"missing required config keys: {missing}")
        return cls(**d)


def _choice(name: str, value, options) -> None:
    if value not in options:
        raise ConfigError(f"{name}={value!r} is not one of {list(options)}")


def load_config(path, overrides: dict | None = None) -> RunConfig:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    payload.update({k: v for k, v in (overrides or {}).items() if v is not None})
    base = Path(path).parent
    if "dataset" in payload and not Path(payload["dataset"]).is_absolute():
        candidate = base / payload["dataset"]
        if candidate.exists():
            payload["dataset"] = str(candidate)
    return RunConfig.from_dict(payload)


# --- learner --------------------------------------------------------------------

@dataclass
class Learner:
    spec: EnvSpec
    critic: CriticStack
    policies: PolicySet
    vnets: ValueNets
    critic_opt: AdamState
    actor_opt: AdamState
    v_opt: AdamState | None
    value_cfg: ValueLearnConfig
    extraction_cfg: ExtractionConfig

    def named_parameters(self) -> dict:
        out = {}
        out.update(self.critic.named_parameters())
        out.update({f"target.{k}": v for k, v in self.critic.named_target_parameters().items()})
        out.update(self.policies.named_parameters())
        out.update(self.vnets.named_parameters())
        return out


def build_learner(cfg: RunConfig, spec: EnvSpec, rng: np.random.Generator) -> Learner:
    hidden = resolve_hidden(cfg.hidden)
    critic = init_critic(spec, cfg.decomp, hidden, rng, cfg.mixer_embed, cfg.mixer_hyper)
    policies = init_policies(spec, hidden, rng)
    vnets = init_value_nets(spec, cfg.decomp, cfg.value_learning, cfg.extraction, cfg.awr_advantage, hidden, rng)
    v_params = vnets.parameters()
    return Learner(
        spec, critic, policies, vnets,
        adam_init(critic.parameters(), lr=cfg.lr_critic),
        adam_init(policies.parameters(), lr=cfg.lr_actor),
        adam_init(v_params, lr=cfg.lr_critic) if v_params else None,
        cfg.value_config(), cfg.extraction_config(),
    )


def train_step(learner: Learner, batch: Batch, rng: np.random.Generator) -> dict:
    """One critic update followed by one actor update."""
    m = critic_update(learner.critic, learner.vnets, batch, learner.policies, learner.value_cfg,
                      learner.critic_opt, rng, learner.v_opt)
    m.update(actor_update(learner.policies, learner.critic, learner.vnets, batch, learner.extraction_cfg,
                          learner.actor_opt, rng))
    sq = m["critic_grad_norm"] ** 2 + m["actor_grad_norm"] ** 2 + m.get("v_grad_norm", 0.0) ** 2
    m["grad_norm_total"] = math.sqrt(sq)
    return m


def jacobian_diagnostic(learner: Learner, batch: Batch) -> float | None:
    """Mean ||dQ_tot/dQ||_op over the first rows of a batch; None without a mixer."""
    a = learner.spec.num_agents
    if learner.critic.decomp == "vdn":
        return math.sqrt(a)  # the sum's Jacobian is the all-ones row
    if learner.critic.decomp != "mix":
        return None
    rows = batch.take(slice(0, JACOBIAN_ROWS))
    with ad.no_grad():
        u = agent_utilities(learner.critic, agent_major(rows.obs), encode_actions(learner.spec, rows.actions)).value
    return batch_mixer_opnorm(learner.critic, rows.state, u[0].T)


# --- metrics --------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class MetricsWriter:
    def __init__(self, path: Path):
        self.fh = path.open("w", newline="", encoding="utf-8")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.writer.writerow(METRIC_COLUMNS)

    def write(self, row: dict) -> None:
        self.writer.writerow([_fmt(row.get(c)) for c in METRIC_COLUMNS])
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def read_metrics(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in METRIC_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ConfigError(f"{path}: metrics file lacks columns {missing}")
        return list(reader)


def _score(env: str, value: float) -> float | None:
    scales = load_score_scales()
    return scales[env].normalize(value) if env in scales else None


# --- loops ----------------------------------------------------------------------

@dataclass
class RunResult:
    run_dir: Path
    summary: dict

    @property
    def halted(self) -> bool:
        return bool(self.summary.get("halted"))


def _seed_streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _loop(cfg: RunConfig, learner: Learner, out: Path, steps: int, next_batch, monitor: DivergenceMonitor,
          before_step=None) -> dict:
    """Shared optimisation loop: logging, evaluation cadence, divergence halting."""
    env = make_env(cfg.env)
    writer = MetricsWriter(out / "metrics.csv")
    stats = {"halted": False, "halt_reason": None, "halt_step": None, "steps_completed": 0,
             "max_q_abs_mean": 0.0, "evals": []}
    _, _, step_rng = _seed_streams(cfg.seed, 3)
    last = {}
    try:
        for step in range(1, steps + 1):
            if before_step is not None:
                before_step(step)
            batch = next_batch()
            row = {"step": step}
            flags, failed = [], False
            try:
                last = train_step(learner, batch, step_rng)
            except DivergenceError as exc:
                flags, failed, last = ["non_finite"], True, {}
                stats["halt_reason"] = f"non_finite: {exc}"
            if not failed:
                stats["max_q_abs_mean"] = max(stats["max_q_abs_mean"], last["q_abs_mean"])
                flags = monitor.check(last["q_abs_mean"], last["grad_norm_total"])
                if flags:
                    stats["halt_reason"] = ",".join(flags)
            log_now = step % cfg.log_interval == 0 or bool(flags)
            eval_now = (step % cfg.eval_every == 0 or step == steps) and not flags
            if log_now or eval_now:
                if not failed:
                    row.update({k: last.get(k) for k in ("td_loss", "q_mean", "q_abs_mean", "actor_loss",
                                                         "grad_norm_total")})
                if not flags:
                    opnorm = jacobian_diagnostic(learner, batch)
                    row["jacobian_opnorm"] = opnorm
                    if opnorm is not None:
                        row["loop_gain_svn"] = cfg.gamma * opnorm / last["sigma_q"]
            if eval_now:
                mean, std, _ = evaluate(learner.policies, env, cfg.eval_episodes, cfg.seed * 1_000_003 + step)
                row.update(eval_return_mean=mean, eval_return_std=std, normalized_score=_score(cfg.env, mean))
                stats["evals"].append((step, mean, std))
            row["flags"] = "|".join(flags)
            if log_now or eval_now:
                writer.write(row)
            if flags:
                stats.update(halted=True, halt_step=step)
                break
            stats["steps_completed"] = step
    finally:
        writer.close()
    stats["final_q_abs_mean"] = last.get("q_abs_mean")
    stats["final_q_mean"] = last.get("q_mean")
    return stats


def _summarize(cfg: RunConfig, stats: dict, extra: dict) -> dict:
    evals = stats.pop("evals")
    summary = {"env": cfg.env, "seed": cfg.seed, "decomp": cfg.decomp, "value_learning": cfg.value_learning,
               "extraction": cfg.extraction, "alpha": cfg.alpha, "svn": cfg.svn, "actor_norm": cfg.actor_norm}
    summary.update(stats)
    if evals:
        best = max(evals, key=lambda e: e[1])
        summary.update(final_eval_return=evals[-1][1], final_eval_std=evals[-1][2], best_eval_return=best[1],
                       final_normalized=_score(cfg.env, evals[-1][1]), best_normalized=_score(cfg.env, best[1]))
    summary.update(extra)
    return summary


def _write_outputs(out: Path, cfg: RunConfig, learner: Learner, summary: dict) -> None:
    meta = {"config": cfg.to_dict(), "env_spec": learner.spec.to_dict()}
    save_params(out / "checkpoint.json", learner.named_parameters(), meta)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def train(cfg: RunConfig, out_dir) -> RunResult:
    """Offline training from a dataset file into ``out_dir``."""
    header, records = load_dataset(cfg.dataset)
    if header.env != cfg.env:
        raise ConfigError(f"dataset was generated for {header.env!r}, config asks for {cfg.env!r}")
    spec = make_env(cfg.env).spec
    if header.env_spec != spec:
        raise DatasetError("dataset environment spec does not match the current environment")
    data = Batch.from_records(records, spec)
    if cfg.batch_size > len(data):
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds dataset size {len(data)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    init_rng, batch_rng, _ = _seed_streams(cfg.seed, 3)
    learner = build_learner(cfg, spec, init_rng)
    monitor = DivergenceMonitor(header.max_abs_return, cfg.gamma, cfg.drift_multiple)
    stats = _loop(cfg, learner, out, cfg.total_steps, lambda: sample_batch(data, cfg.batch_size, batch_rng), monitor)
    summary = _summarize(cfg, stats, {"mode": "offline", "dataset_max_abs_return": header.max_abs_return})
    _write_outputs(out, cfg, learner, summary)
    return RunResult(out, summary)


def load_learner(checkpoint, cfg: RunConfig | None = None) -> tuple[Learner, RunConfig]:
    arrays, meta = read_params(checkpoint)
    if cfg is None:
        if "config" not in meta:
            raise ConfigError(f"{checkpoint}: checkpoint carries no run config")
        cfg = RunConfig.from_dict(meta["config"])
    spec = make_env(cfg.env).spec
    learner = build_learner(cfg, spec, np.random.default_rng(0))
    assign_params(learner.named_parameters(), arrays)
    return learner, cfg


def finetune_online(cfg: RunConfig, checkpoint, out_dir) -> RunResult:
    """Continue training from a checkpoint on freshly collected rollouts only.

    Each cycle rolls one exploratory episode into the online buffer and then
    takes as many gradient steps as the episode had transitions. Before the
    first step, episodes are collected until the buffer holds one batch.
    """
    learner, _ = load_learner(checkpoint, cfg)
    env = make_env(cfg.env)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    buffer = ReplayBuffer(cfg.online_buffer_capacity, learner.spec)
    _, batch_rng, _ = _seed_streams(cfg.seed, 3)
    explore_rng, reset_rng = _seed_streams(cfg.seed + 7_919, 2)
    std = None if learner.spec.discrete else cfg.exploration_std
    pending = {"steps": 0, "episodes": 0}

    def collect(step: int) -> None:
        if pending["steps"] > 0:
            return
        choose = lambda s, o, t: sample_actions(learner.policies, o[None], explore_rng, std=std)[0]  # noqa: E731
        # warm-up: the first batch needs at least batch_size distinct transitions
        while True:
            records = run_episode(env, pending["episodes"], int(reset_rng.integers(2**31)), choose)
            push_rollout(buffer, records)
            pending["episodes"] += 1
            pending["steps"] += len(records)
            if len(buffer) >= min(cfg.batch_size, cfg.online_buffer_capacity):
                break

    def next_batch() -> Batch:
        pending["steps"] -= 1
        return buffer.sample(cfg.batch_size, batch_rng)

    if cfg.online_steps == 0:
        mean, std_r, _ = evaluate(learner.policies, env, cfg.eval_episodes, cfg.seed * 1_000_003)
        MetricsWriter(out / "metrics.csv").close()
        stats = {"halted": False, "halt_reason": None, "halt_step": None, "steps_completed": 0,
                 "max_q_abs_mean": None, "evals": [(0, mean, std_r)]}
    else:
        monitor = DivergenceMonitor(_online_return_scale(env), cfg.gamma, cfg.drift_multiple)
        stats = _loop(cfg, learner, out, cfg.online_steps, next_batch, monitor, before_step=collect)
    sources = sorted({tr.source for tr in buffer.items})
    summary = _summarize(cfg, stats, {"mode": "online", "checkpoint": str(checkpoint),
                                      "online_episodes": pending["episodes"], "buffer_sources": sources})
    _write_outputs(out, cfg, learner, summary)
    return RunResult(out, summary)


def _online_return_scale(env) -> float:
    # without a dataset the monitor is scaled by the per-episode reward bound
    name = env.spec.name
    if name == "two_step":
        return 8.0
    if name == "coop_bandit":
        return float(env.heights.max())
    return float(env.spec.horizon * math.sqrt(2.0))


def joint_value(learner: Learner, state, obs, actions) -> float | np.ndarray:
    """Min-ensemble critic value of one (state, obs, joint action) point.

    Returns the per-agent vector under ``dec``.
    """
    state = np.asarray(state, dtype=np.float64)[None]
    obs = np.asarray(obs, dtype=np.float64)[None]
    act = encode_actions(learner.spec, np.asarray(actions)[None])
    with ad.no_grad():
        q = min_ensemble_q_tot(learner.critic, state, agent_major(obs), act).value
    return float(q[0]) if q.ndim == 1 else q[:, 0]
