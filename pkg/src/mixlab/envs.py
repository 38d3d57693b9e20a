"""Cooperative multi-agent environments and scripted behavior policies.

All environments share one interface: ``reset(seed) -> (state, obs)`` and
``step(joint_action) -> StepResult``. ``obs`` is an ``(A, obs_dim)`` array;
discrete joint actions are ``(A,)`` integer arrays, continuous ones
``(A, action_dim)`` float arrays.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable

import numpy as np

from .errors import ConfigError


def _load_params() -> dict:
    text = resources.files("mixlab").joinpath("data/env_params.json").read_text(encoding="utf-8")
    return json.loads(text)


ENV_PARAMS = _load_params()


@dataclass(frozen=True)
class EnvSpec:
    name: str
    num_agents: int
    state_dim: int
    obs_dim: int
    action_kind: str  # "discrete" | "continuous"
    action_dim: int  # K for discrete, vector size for continuous
    horizon: int
    gamma: float
    action_low: float = -1.0
    action_high: float = 1.0

    def __post_init__(self):
        if self.num_agents < 2:
            raise ConfigError("a cooperative task needs at least two agents")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.action_kind not in ("discrete", "continuous"):
            raise ConfigError(f"unknown action kind {self.action_kind!r}")
        if not (np.isfinite(self.action_low) and np.isfinite(self.action_high)):
            raise ConfigError("continuous bounds must be finite")

    @property
    def discrete(self) -> bool:
        return self.action_kind == "discrete"

    @property
    def action_input_dim(self) -> int:
        """Width of one agent's action as fed to a critic (one-hot if discrete)."""
        return self.action_dim

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "num_agents": self.num_agents,
            "state_dim": self.state_dim,
            "obs_dim": self.obs_dim,
            "action_kind": self.action_kind,
            "action_dim": self.action_dim,
            "horizon": self.horizon,
            "gamma": self.gamma,
            "action_low": self.action_low,
            "action_high": self.action_high,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        return cls(**d)


@dataclass
class StepResult:
    next_state: np.ndarray
    next_obs: np.ndarray
    team_reward: float
    done: bool
    agent_rewards: np.ndarray | None = None


class Env:
    spec: EnvSpec

    def __init__(self):
        self.clip_count = 0
        self._t = 0
        self._done = True

    def reset(self, seed: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def step(self, joint_action) -> StepResult:
        raise NotImplementedError

    def _check_running(self):
        if self._done:
            raise RuntimeError(f"{self.spec.name}: step() called on a finished episode; call reset()")

    def _discrete_actions(self, joint_action) -> np.ndarray:
        acts = np.asarray(joint_action)
        if acts.shape != (self.spec.num_agents,):
            raise ValueError(f"expected {self.spec.num_agents} discrete actions, got shape {acts.shape}")
        if not np.all(np.equal(np.mod(acts, 1), 0)) or acts.min() < 0 or acts.max() >= self.spec.action_dim:
            raise ValueError(f"invalid discrete action {joint_action!r}")
        return acts.astype(int)

    def _continuous_actions(self, joint_action) -> np.ndarray:
        acts = np.asarray(joint_action, dtype=np.float64).reshape(self.spec.num_agents, self.spec.action_dim)
        clipped = np.clip(acts, self.spec.action_low, self.spec.action_high)
        if np.any(clipped != acts):
            self.clip_count += 1
        return clipped


class TwoStepGame(Env):
    """Two agents, two steps. Agent 0 ("A") picks the second-step state."""

    S1, SAFE, RISKY, TERMINAL = range(4)

    def __init__(self, gamma: float | None = None):
        super().__init__()
        p = ENV_PARAMS["two_step"]
        self.payoffs = {
            self.SAFE: np.asarray(p["payoff_safe"], dtype=float),
            self.RISKY: np.asarray(p["payoff_risky"], dtype=float),
        }
        self.spec = EnvSpec("two_step", 2, 4, 6, "discrete", 2, 2, p["gamma"] if gamma is None else gamma)
        self._state = self.S1

    def _state_vec(self) -> np.ndarray:
        return np.eye(4)[self._state]

    def _obs(self) -> np.ndarray:
        s = self._state_vec()
        return np.stack([np.concatenate([s, np.eye(2)[a]]) for a in range(2)])

    def reset(self, seed=None):
        self._state = self.S1
        self._t = 0
        self._done = False
        return self._state_vec(), self._obs()

    def step(self, joint_action) -> StepResult:
        self._check_running()
        acts = self._discrete_actions(joint_action)
        if self._state == self.S1:
            # agent B's first action is recorded but inert
            self._state = self.SAFE if acts[0] == 0 else self.RISKY
            reward = 0.0
        else:
            reward = float(self.payoffs[self._state][acts[0], acts[1]])
            self._state = self.TERMINAL
        self._t += 1
        self._done = self._state == self.TERMINAL
        return StepResult(self._state_vec(), self._obs(), reward, self._done, np.full(2, reward))


class CoopBandit(Env):
    """One-step bandit whose team reward is two Gaussian bumps over the joint action."""

    def __init__(self, gamma: float | None = None):
        super().__init__()
        p = ENV_PARAMS["coop_bandit"]
        self.peaks = np.asarray(p["peaks"], dtype=float)
        self.heights = np.asarray(p["heights"], dtype=float)
        self.width = float(p["width"])
        self.spec = EnvSpec("coop_bandit", 2, 1, 2, "continuous", 1, 1, p["gamma"] if gamma is None else gamma)

    def reward(self, joint_action) -> float:
        u = np.asarray(joint_action, dtype=float).reshape(-1)
        sq = ((u[None, :] - self.peaks) ** 2).sum(axis=1)
        return float(np.sum(self.heights * np.exp(-sq / (2.0 * self.width**2))))

    def reset(self, seed=None):
        self._t = 0
        self._done = False
        return np.ones(1), np.eye(2)

    def step(self, joint_action) -> StepResult:
        self._check_running()
        acts = self._continuous_actions(joint_action)
        r = self.reward(acts[:, 0])
        self._t = 1
        self._done = True
        return StepResult(np.ones(1), np.eye(2), r, True, np.full(2, r))


class SpreadLite(Env):
    """Agents steer towards landmarks on the plane; team reward is minus mean coverage distance."""

    def __init__(self, num_agents: int | None = None, gamma: float | None = None):
        super().__init__()
        p = ENV_PARAMS["spread_lite"]
        n = int(p["num_agents"] if num_agents is None else num_agents)
        self.dt = float(p["dt"])
        self.spec = EnvSpec(
            "spread_lite", n, 4 * n, 2 + 2 * n, "continuous", 2, int(p["horizon"]),
            p["gamma"] if gamma is None else gamma,
        )
        self.agents = np.zeros((n, 2))
        self.landmarks = np.zeros((n, 2))

    def _state_vec(self) -> np.ndarray:
        return np.concatenate([self.agents.ravel(), self.landmarks.ravel()])

    def _obs(self) -> np.ndarray:
        offsets = self.landmarks[None, :, :] - self.agents[:, None, :]
        return np.concatenate([self.agents, offsets.reshape(self.spec.num_agents, -1)], axis=1)

    def coverage(self) -> float:
        d = np.linalg.norm(self.agents[:, None, :] - self.landmarks[None, :, :], axis=2)
        return float(d.min(axis=0).sum())

    def reset(self, seed=None):
        rng = np.random.default_rng(seed)
        n = self.spec.num_agents
        self.agents = rng.uniform(0.0, 1.0, (n, 2))
        self.landmarks = rng.uniform(0.0, 1.0, (n, 2))
        self._t = 0
        self._done = False
        return self._state_vec(), self._obs()

    def step(self, joint_action) -> StepResult:
        self._check_running()
        acts = self._continuous_actions(joint_action)
        self.agents = self.agents + self.dt * acts
        n = self.spec.num_agents
        # every agent is credited the shared team reward
        r = -self.coverage() / n
        self._t += 1
        self._done = self._t >= self.spec.horizon
        return StepResult(self._state_vec(), self._obs(), r, self._done, np.full(n, r))


ENV_REGISTRY: dict[str, Callable[..., Env]] = {
    "two_step": TwoStepGame,
    "coop_bandit": CoopBandit,
    "spread_lite": SpreadLite,
}


def make_env(name: str, **kwargs) -> Env:
    if name not in ENV_REGISTRY:
        raise ConfigError(f"unknown environment {name!r}; registered: {sorted(ENV_REGISTRY)}")
    return ENV_REGISTRY[name](**kwargs)


# --- scripted behavior ------------------------------------------------------

BEHAVIOR_KINDS = ("uniform", "expert", "medium", "mixture")


@dataclass
class ScriptedBehavior:
    """Stateful sampler: call ``start_episode`` then ``act`` once per step."""

    env: Env
    kind: str
    rng: np.random.Generator
    _mode: str = field(default="", init=False)

    def start_episode(self) -> None:
        self._mode = self.kind
        # the bandit mixes modes per action draw; the others per episode
        if self.kind == "mixture" and not isinstance(self.env, CoopBandit):
            fallback = "uniform" if isinstance(self.env, TwoStepGame) else "medium"
            self._mode = "expert" if self.rng.random() < 0.5 else fallback

    def act(self, state: np.ndarray, obs: np.ndarray) -> np.ndarray:
        env = self.env
        if isinstance(env, TwoStepGame):
            return self._two_step(state)
        if isinstance(env, CoopBandit):
            return self._bandit()
        return self._spread()

    def _two_step(self, state) -> np.ndarray:
        at_start = state[TwoStepGame.S1] == 1.0
        if self._mode == "uniform":
            return self.rng.integers(0, 2, size=2)
        if self._mode == "expert":
            return np.array([1, self.rng.integers(0, 2)]) if at_start else np.array([1, 1])
        # medium: safe branch, arbitrary second step
        return np.array([0, self.rng.integers(0, 2)]) if at_start else self.rng.integers(0, 2, size=2)

    def _bandit(self) -> np.ndarray:
        env = self.env
        noise = ENV_PARAMS["coop_bandit"]["behavior_noise"]
        if self._mode == "uniform":
            return self.rng.uniform(-1.0, 1.0, (2, 1))
        if self._mode == "expert":
            peak = env.peaks[1]
        elif self._mode == "medium":
            peak = env.peaks[0]
        else:
            peak = env.peaks[self.rng.integers(0, 2)]
        u = peak + noise * self.rng.standard_normal(2)
        return np.clip(u, -1.0, 1.0).reshape(2, 1)

    def _spread(self) -> np.ndarray:
        env: SpreadLite = self.env
        n = env.spec.num_agents
        if self._mode == "uniform":
            return self.rng.uniform(-1.0, 1.0, (n, 2))
        p = ENV_PARAMS["spread_lite"]
        sigma = p["expert_noise"] if self._mode == "expert" else p["medium_noise"]
        targets = env.landmarks[greedy_assignment(env.agents, env.landmarks)]
        u = np.clip((targets - env.agents) / env.dt, -1.0, 1.0)
        return np.clip(u + sigma * self.rng.standard_normal((n, 2)), -1.0, 1.0)


def greedy_assignment(agents: np.ndarray, landmarks: np.ndarray) -> np.ndarray:
    """Repeatedly pair the closest free (agent, landmark); returns landmark index per agent."""
    d = np.linalg.norm(agents[:, None, :] - landmarks[None, :, :], axis=2)
    out = np.full(len(agents), -1)
    for _ in range(len(agents)):
        i, j = np.unravel_index(np.argmin(d), d.shape)
        out[i] = j
        d[i, :] = np.inf
        d[:, j] = np.inf
    return out


def scripted_behavior(env: Env, kind: str, seed: int | None = None) -> ScriptedBehavior:
    if kind not in BEHAVIOR_KINDS:
        raise ConfigError(f"unknown behavior kind {kind!r}; choose from {BEHAVIOR_KINDS}")
    return ScriptedBehavior(env, kind, np.random.default_rng(seed))


def rollout_return(env: Env, policy: Callable[[np.ndarray, np.ndarray], np.ndarray], seed: int) -> float:
    """Undiscounted return of one episode under ``policy(state, obs)``."""
    state, obs = env.reset(seed)
    total, done = 0.0, False
    while not done:
        res = env.step(policy(state, obs))
        total += res.team_reward
        state, obs, done = res.next_state, res.next_obs, res.done
    return total
