"""Offline transition datasets, minibatch sampling and the online replay buffer.

File layout (``format_version`` 1): line 1 is a JSON header, every further
line one JSON transition with the keys ``episode_id, t, state, obs, actions,
reward, next_state, next_obs, next_actions, done``. ``next_actions`` is absent
on terminal steps.
"""
from __future__ import annotations

import itertools
import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import Env, EnvSpec, TwoStepGame, make_env, scripted_behavior
from .errors import ConfigError, DatasetError

FORMAT = "mixlab.dataset"
FORMAT_VERSION = 1


@dataclass
class TransitionRecord:
    episode_id: int
    t: int
    state: np.ndarray
    obs: np.ndarray
    actions: np.ndarray
    reward: float
    next_state: np.ndarray
    next_obs: np.ndarray
    next_actions: np.ndarray | None
    done: bool
    source: str = field(default="offline", compare=False)

    def to_json(self) -> dict:
        d = {
            "episode_id": self.episode_id,
            "t": self.t,
            "state": self.state.tolist(),
            "obs": self.obs.tolist(),
            "actions": self.actions.tolist(),
            "reward": self.reward,
            "next_state": self.next_state.tolist(),
            "next_obs": self.next_obs.tolist(),
            "done": self.done,
        }
        if self.next_actions is not None:
            d["next_actions"] = self.next_actions.tolist()
        return d

    def __eq__(self, other) -> bool:
        if not isinstance(other, TransitionRecord):
            return NotImplemented
        return self.to_json() == other.to_json()


@dataclass
class DatasetHeader:
    env: str
    env_spec: EnvSpec
    behavior: str
    num_episodes: int
    num_records: int
    seed: int
    return_min: float
    return_mean: float
    return_max: float
    format_version: int = FORMAT_VERSION

    @property
    def max_abs_return(self) -> float:
        return max(abs(self.return_min), abs(self.return_max))

    def to_json(self) -> dict:
        return {
            "format": FORMAT,
            "format_version": self.format_version,
            "env": self.env,
            "env_spec": self.env_spec.to_dict(),
            "behavior": self.behavior,
            "num_episodes": self.num_episodes,
            "num_records": self.num_records,
            "seed": self.seed,
            "return_stats": {"min": self.return_min, "mean": self.return_mean, "max": self.return_max},
        }


def _action_array(spec: EnvSpec, actions) -> np.ndarray:
    if spec.discrete:
        return np.asarray(actions, dtype=np.int64).reshape(spec.num_agents)
    return np.asarray(actions, dtype=np.float64).reshape(spec.num_agents, spec.action_dim)


def episode_returns(records: list[TransitionRecord]) -> dict[int, float]:
    totals: dict[int, float] = {}
    for r in records:
        totals[r.episode_id] = totals.get(r.episode_id, 0.0) + r.reward
    return totals


def _return_stats(records) -> tuple[float, float, float]:
    values = list(episode_returns(records).values())
    return float(min(values)), float(math.fsum(values) / len(values)), float(max(values))


# --- generation -------------------------------------------------------------

def two_step_patterns() -> list[tuple[int, int, int]]:
    """The 8 (agent-A first choice, second-step A, second-step B) patterns."""
    return list(itertools.product((0, 1), (0, 1), (0, 1)))


def run_episode(env: Env, episode_id: int, reset_seed: int, choose) -> list[TransitionRecord]:
    """Roll one episode with ``choose(state, obs, t)``, stitching next actions."""
    spec = env.spec
    state, obs = env.reset(reset_seed)
    out: list[TransitionRecord] = []
    done, t = False, 0
    actions = _action_array(spec, choose(state, obs, t))
    while not done:
        res = env.step(actions)
        done = res.done
        next_actions = None if done else _action_array(spec, choose(res.next_state, res.next_obs, t + 1))
        out.append(TransitionRecord(
            episode_id, t, np.asarray(state, float), np.asarray(obs, float), actions, float(res.team_reward),
            np.asarray(res.next_state, float), np.asarray(res.next_obs, float), next_actions, bool(done),
        ))
        state, obs, actions = res.next_state, res.next_obs, next_actions
        t += 1
    return out


def generate_records(env: Env, kind: str, num_episodes: int, seed: int,
                     exhaustive: bool = False) -> list[TransitionRecord]:
    if num_episodes <= 0:
        raise ConfigError("num_episodes must be positive")
    rng = np.random.default_rng(seed)
    behavior = scripted_behavior(env, kind, int(rng.integers(2**31)))
    records: list[TransitionRecord] = []
    if exhaustive:
        if not isinstance(env, TwoStepGame) or kind != "uniform":
            raise ConfigError("exhaustive mode enumerates two_step uniform patterns only")
        patterns = two_step_patterns()
        for ep in range(num_episodes):
            first, a2, b2 = patterns[ep % len(patterns)]
            inert = int(behavior.rng.integers(0, 2))

            def choose(state, obs, t, first=first, a2=a2, b2=b2, inert=inert):
                return [first, inert] if t == 0 else [a2, b2]

            records.extend(run_episode(env, ep, 0, choose))
        return records
    for ep in range(num_episodes):
        behavior.start_episode()
        reset_seed = int(rng.integers(2**31))
        records.extend(run_episode(env, ep, reset_seed, lambda s, o, t: behavior.act(s, o)))
    return records


def build_header(env: Env, kind: str, num_episodes: int, seed: int, records) -> DatasetHeader:
    lo, mean, hi = _return_stats(records)
    return DatasetHeader(env.spec.name, env.spec, kind, num_episodes, len(records), seed, lo, mean, hi)


def generate_dataset(env: Env | str, kind: str, num_episodes: int, seed: int, path,
                     exhaustive: bool = False) -> DatasetHeader:
    """Roll out a scripted behavior and write the dataset file; returns its header."""
    if isinstance(env, str):
        env = make_env(env)
    records = generate_records(env, kind, num_episodes, seed, exhaustive)
    header = build_header(env, kind, num_episodes, seed, records)
    write_dataset(path, header, records)
    return header


def write_dataset(path, header: DatasetHeader, records) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            fh.write(json.dumps(header.to_json(), sort_keys=True) + "\n")
            for r in records:
                fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    except OSError as exc:
        raise DatasetError(f"cannot write dataset to {path}: {exc}") from exc


# --- loading ----------------------------------------------------------------

_RECORD_KEYS = {"episode_id", "t", "state", "obs", "actions", "reward", "next_state", "next_obs", "done"}


def _parse_header(line: str, path) -> DatasetHeader:
    try:
        h = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: line 1: unreadable header ({exc})") from exc
    if h.get("format") != FORMAT:
        raise DatasetError(f"{path}: not a {FORMAT} file")
    if h.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported format_version {h.get('format_version')} (want {FORMAT_VERSION})")
    spec = EnvSpec.from_dict(h["env_spec"])
    if spec.name != h["env"]:
        raise DatasetError(f"{path}: header env {h['env']!r} disagrees with env_spec {spec.name!r}")
    st = h["return_stats"]
    return DatasetHeader(h["env"], spec, h["behavior"], h["num_episodes"], h["num_records"], h["seed"],
                         st["min"], st["mean"], st["max"], h["format_version"])


def _parse_record(d: dict, spec: EnvSpec) -> TransitionRecord:
    missing = _RECORD_KEYS - set(d)
    if missing:
        raise ValueError(f"missing fields {sorted(missing)}")
    state = np.asarray(d["state"], dtype=np.float64)
    next_state = np.asarray(d["next_state"], dtype=np.float64)
    obs = np.asarray(d["obs"], dtype=np.float64)
    next_obs = np.asarray(d["next_obs"], dtype=np.float64)
    for name, arr, shape in (("state", state, (spec.state_dim,)), ("next_state", next_state, (spec.state_dim,)),
                             ("obs", obs, (spec.num_agents, spec.obs_dim)),
                             ("next_obs", next_obs, (spec.num_agents, spec.obs_dim))):
        if arr.shape != shape:
            raise ValueError(f"{name} has shape {arr.shape}, header expects {shape}")
    act_shape = (spec.num_agents,) if spec.discrete else (spec.num_agents, spec.action_dim)
    actions = np.asarray(d["actions"])
    if actions.shape != act_shape:
        raise ValueError(f"actions have shape {actions.shape}, header expects {act_shape}")
    next_actions = None
    if "next_actions" in d:
        next_actions = np.asarray(d["next_actions"])
        if next_actions.shape != act_shape:
            raise ValueError(f"next_actions have shape {next_actions.shape}, header expects {act_shape}")
        next_actions = _action_array(spec, next_actions)
    elif not d["done"]:
        raise ValueError("non-terminal record lacks next_actions")
    reward = float(d["reward"])
    for name, arr in (("state", state), ("obs", obs), ("next_state", next_state), ("next_obs", next_obs),
                      ("actions", actions.astype(float)), ("reward", np.asarray(reward))):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite value in {name}")
    return TransitionRecord(int(d["episode_id"]), int(d["t"]), state, obs, _action_array(spec, actions), reward,
                            next_state, next_obs, next_actions, bool(d["done"]))


def load_dataset(path) -> tuple[DatasetHeader, list[TransitionRecord]]:
    """Read and validate a dataset file.

    Raises :class:`DatasetError` naming the offending line (and the last
    record that parsed) on version, shape, finiteness or count problems.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: no such dataset")
    lines = path.read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetError(f"{path}: empty file")
    header = _parse_header(lines[0], path)
    records: list[TransitionRecord] = []

    def last_valid() -> str:
        if not records:
            return "none"
        r = records[-1]
        return f"record {len(records)} (episode {r.episode_id}, t={r.t})"

    for lineno, line in enumerate(lines[1:], start=2):
        try:
            records.append(_parse_record(json.loads(line), header.env_spec))
        except (json.JSONDecodeError, ValueError, TypeError, KeyError) as exc:
            raise DatasetError(f"{path}: line {lineno}: {exc}; last valid: {last_valid()}") from exc
    if len(records) != header.num_records:
        raise DatasetError(
            f"{path}: header promises {header.num_records} records, found {len(records)}"
            f" (truncated?); last valid: {last_valid()}"
        )
    if len(episode_returns(records)) != header.num_episodes:
        raise DatasetError(f"{path}: header promises {header.num_episodes} episodes; last valid: {last_valid()}")
    lo, mean, hi = _return_stats(records)
    for name, stored, actual in (("min", header.return_min, lo), ("mean", header.return_mean, mean),
                                 ("max", header.return_max, hi)):
        if abs(stored - actual) > 1e-9 * max(1.0, abs(actual)):
            raise DatasetError(f"{path}: header return {name} {stored} != recomputed {actual}")
    return header, records


# --- batches ----------------------------------------------------------------

@dataclass
class Batch:
    """Column-stacked transitions. Observations are ``(B, A, obs_dim)``."""

    state: np.ndarray
    obs: np.ndarray
    actions: np.ndarray
    reward: np.ndarray
    next_state: np.ndarray
    next_obs: np.ndarray
    next_actions: np.ndarray
    has_next_actions: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return len(self.reward)

    def take(self, idx) -> "Batch":
        return Batch(*(getattr(self, f)[idx] for f in _BATCH_FIELDS))

    @classmethod
    def from_records(cls, records, spec: EnvSpec) -> "Batch":
        if not records:
            raise DatasetError("cannot build a batch from zero records")
        act_dtype = np.int64 if spec.discrete else np.float64
        blank = np.zeros_like(records[0].actions, dtype=act_dtype)
        return cls(
            state=np.stack([r.state for r in records]),
            obs=np.stack([r.obs for r in records]),
            actions=np.stack([r.actions for r in records]).astype(act_dtype),
            reward=np.array([r.reward for r in records], dtype=np.float64),
            next_state=np.stack([r.next_state for r in records]),
            next_obs=np.stack([r.next_obs for r in records]),
            next_actions=np.stack([blank if r.next_actions is None else r.next_actions for r in records]).astype(act_dtype),
            has_next_actions=np.array([r.next_actions is not None for r in records]),
            done=np.array([float(r.done) for r in records]),
        )


_BATCH_FIELDS = ("state", "obs", "actions", "reward", "next_state", "next_obs", "next_actions",
                 "has_next_actions", "done")


def sample_batch(data: Batch, batch_size: int, rng: np.random.Generator) -> Batch:
    """Uniform sampling with replacement."""
    n = len(data)
    if n == 0:
        raise DatasetError("cannot sample from an empty dataset")
    if batch_size > n:
        raise ConfigError(f"batch size {batch_size} exceeds dataset size {n}")
    return data.take(rng.integers(0, n, size=batch_size))


class ReplayBuffer:
    """FIFO ring of online transitions; uniform sampling over current contents."""

    def __init__(self, capacity: int, spec: EnvSpec):
        if capacity <= 0:
            raise ConfigError("buffer capacity must be positive")
        self.capacity = capacity
        self.spec = spec
        self.items: deque[TransitionRecord] = deque(maxlen=capacity)
        self.inserted = 0

    def __len__(self) -> int:
        return len(self.items)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if not self.items:
            raise DatasetError("replay buffer is empty")
        idx = rng.integers(0, len(self.items), size=batch_size)
        return Batch.from_records([self.items[i] for i in idx], self.spec)


def push_rollout(buffer: ReplayBuffer, transitions) -> None:
    for tr in transitions:
        if not tr.done and tr.next_actions is None:
            raise DatasetError("online transition without next_actions on a non-terminal step")
        if not np.isfinite(tr.reward):
            raise DatasetError("online transition with non-finite reward")
        tr.source = "online"
        buffer.items.append(tr)
        buffer.inserted += 1
