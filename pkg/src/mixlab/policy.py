"""Decentralized stochastic actors and the BRAC / AWR extraction objectives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .decomp import CriticStack, agent_major, critic_values, encode_actions, frozen, min_ensemble
from .envs import Env, EnvSpec, rollout_return
from .errors import ConfigError, DivergenceError
from .nn import AdamState, Mlp, adam_step, forward_mlp, init_mlp, zero_grad

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
EXTRACTIONS = ("brac", "awr")
ADVANTAGE_MODES = ("global", "per_agent")
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class ExtractionConfig:
    method: str = "awr"
    alpha: float = 1.0
    actor_norm: bool = True
    awr_clip: float = 100.0
    awr_advantage: str = "global"
    # guard for the batch magnitude when every Q in the batch is exactly zero
    norm_floor: float = 1e-12

    def __post_init__(self):
        if self.method not in EXTRACTIONS:
            raise ConfigError(f"unknown extraction {self.method!r}; choose from {EXTRACTIONS}")
        if not self.alpha >= 0.0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")
        if not self.awr_clip >= 1.0:
            raise ConfigError(f"awr_clip must be >= 1, got {self.awr_clip}")
        if self.awr_advantage not in ADVANTAGE_MODES:
            raise ConfigError(f"awr_advantage must be one of {ADVANTAGE_MODES}")


@dataclass
class PolicySet:
    """One actor per agent, stored as a network stack with a leading agent axis.

    Continuous actors output a tanh-squashed mean mapped onto the action box and
    share a state-independent log-std per agent. Discrete actors output logits.
    """

    spec: EnvSpec
    net: Mlp  # groups (A,): obs -> action_dim
    log_std: Node | None = None  # (A, 1, d)

    def named_parameters(self) -> dict[str, Node]:
        out = self.net.named_parameters("actor.")
        if self.log_std is not None:
            out["actor.log_std"] = self.log_std
        return out

    def parameters(self) -> list[Node]:
        return list(self.named_parameters().values())

    def agent_parameters(self, agent: int) -> list[np.ndarray]:
        """Gradient slices belonging to one agent (for per-agent norms)."""
        return [p.grad[agent] for p in self.parameters() if p.grad is not None]


def init_policies(spec: EnvSpec, hidden: list[int], rng: np.random.Generator,
                  init_log_std: float = 0.0) -> PolicySet:
    a = spec.num_agents
    net = init_mlp([spec.obs_dim, *hidden, spec.action_dim], rng, final_scale=0.1, groups=(a,))
    log_std = None
    if not spec.discrete:
        log_std = ad.parameter(np.full((a, 1, spec.action_dim), float(init_log_std)))
    return PolicySet(spec, net, log_std)


def policy_head(policies: PolicySet, obs_ab) -> Node:
    """Mean actions (continuous) or logits (discrete), shape ``(A, B, d)``."""
    out = forward_mlp(policies.net, obs_ab)
    if policies.spec.discrete:
        return out
    lo, hi = policies.spec.action_low, policies.spec.action_high
    return ad.tanh(out) * (0.5 * (hi - lo)) + 0.5 * (hi + lo)


def clamped_log_std(policies: PolicySet) -> Node:
    return ad.clip(policies.log_std, LOG_STD_MIN, LOG_STD_MAX)


def log_prob(policies: PolicySet, obs_ab, act_ab) -> Node:
    """Per-agent log-likelihood ``(A, B)`` of agent-major actions.

    Discrete actions are passed one-hot, as produced by ``encode_actions``.
    """
    head = policy_head(policies, obs_ab)
    act_ab = np.asarray(act_ab, dtype=np.float64)
    if policies.spec.discrete:
        return ad.sum_(ad.log_softmax(head, axis=-1) * act_ab, axis=-1)
    log_std = clamped_log_std(policies)
    z = (act_ab - head) * ad.exp(ad.neg(log_std))
    per_dim = ad.square(z) * -0.5 - log_std - _HALF_LOG_2PI
    return ad.sum_(per_dim, axis=-1)


def gaussian_params(policies: PolicySet, obs_ab) -> tuple[np.ndarray, np.ndarray]:
    """Numeric mean ``(A, B, d)`` and std ``(A, 1, d)`` of continuous actors."""
    if policies.spec.discrete:
        raise ConfigError("gaussian_params is only defined for continuous actors")
    with ad.no_grad():
        mean = policy_head(policies, obs_ab).value
        std = np.exp(np.clip(policies.log_std.value, LOG_STD_MIN, LOG_STD_MAX))
    return mean, std


def rsample(policies: PolicySet, obs_ab, rng: np.random.Generator, temperature: float = 1.0) -> Node:
    """Reparameterized joint action in critic-input layout ``(A, B, act_in)``.

    Continuous: mean + std * noise. Discrete: straight-through Gumbel-softmax,
    a one-hot value whose gradient is that of the relaxed sample.
    """
    head = policy_head(policies, obs_ab)
    if policies.spec.discrete:
        gumbel = -np.log(-np.log(rng.uniform(1e-12, 1.0, head.shape)))
        soft = ad.softmax((head + gumbel) * (1.0 / temperature), axis=-1)
        hard = np.eye(head.shape[-1])[np.argmax(soft.value, axis=-1)]
        return soft + ad.stop_gradient(hard - soft.value)
    noise = rng.standard_normal(head.shape)
    return head + ad.exp(clamped_log_std(policies)) * noise


def _to_dataset_layout(policies: PolicySet, act_ab: np.ndarray) -> np.ndarray:
    if policies.spec.discrete:
        return np.ascontiguousarray(act_ab.T)  # (A, B) -> (B, A)
    return np.ascontiguousarray(act_ab.transpose(1, 0, 2))


def sample_actions(policies: PolicySet, obs: np.ndarray, rng: np.random.Generator,
                   std: float | None = None) -> np.ndarray:
    """Stochastic actions in dataset layout ``(B, A[, d])`` from ``obs (B, A, O)``.

    ``std`` overrides the learned spread with fixed Gaussian noise on the mean
    (online exploration). Continuous samples are clipped to the action box.
    """
    obs_ab = agent_major(obs)
    with ad.no_grad():
        head = policy_head(policies, obs_ab).value
    spec = policies.spec
    if spec.discrete:
        logits = head - head.max(axis=-1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=-1, keepdims=True)
        u = rng.uniform(size=probs.shape[:-1] + (1,))
        act = np.minimum((np.cumsum(probs, axis=-1) < u).sum(axis=-1), spec.action_dim - 1)
        return _to_dataset_layout(policies, act)
    scale = np.exp(np.clip(policies.log_std.value, LOG_STD_MIN, LOG_STD_MAX)) if std is None else std
    act = np.clip(head + scale * rng.standard_normal(head.shape), spec.action_low, spec.action_high)
    return _to_dataset_layout(policies, act)


def deterministic_actions(policies: PolicySet, obs: np.ndarray) -> np.ndarray:
    """Greedy evaluation actions: Gaussian mean or argmax of logits."""
    with ad.no_grad():
        head = policy_head(policies, agent_major(obs)).value
    if policies.spec.discrete:
        return _to_dataset_layout(policies, np.argmax(head, axis=-1))
    return _to_dataset_layout(policies, head)


# --- objectives ---------------------------------------------------------------

def bc_loss(policies: PolicySet, batch) -> Node:
    """Negative dataset log-likelihood, averaged over rows and summed over agents."""
    obs_ab = agent_major(batch.obs)
    lp = log_prob(policies, obs_ab, encode_actions(policies.spec, batch.actions))
    return ad.neg(ad.sum_(ad.mean(lp, axis=-1)))


def normalized_q_term(q: Node, floor: float = 1e-12) -> Node:
    """-E[Q - sg(mean Q)] / sg(mean |Q|) along the batch axis, summed over leading axes."""
    mu = q.value.mean(axis=-1, keepdims=True)
    mag = np.maximum(np.abs(q.value).mean(axis=-1, keepdims=True), floor)
    centered = (q - ad.stop_gradient(mu)) * ad.stop_gradient(1.0 / mag)
    return ad.neg(ad.sum_(ad.mean(centered, axis=-1)))


def brac_loss(policies: PolicySet, stack: CriticStack, batch, config: ExtractionConfig,
              rng: np.random.Generator, q_scale: float = 1.0) -> tuple[Node, dict]:
    """Q maximization through the (frozen) critic plus an alpha-weighted BC term.

    ``q_scale`` multiplies the critic output; it exists for scale tests.
    """
    obs_ab = agent_major(batch.obs)
    joint = rsample(policies, obs_ab, rng)
    with frozen(stack.parameters()):
        q = min_ensemble(critic_values(stack, batch.state, obs_ab, joint))  # (B,) or (A, B)
    if q_scale != 1.0:
        q = q * q_scale
    if config.actor_norm:
        q_term = normalized_q_term(q, config.norm_floor)
    else:
        q_term = ad.neg(ad.sum_(ad.mean(q, axis=-1)))
    bc = bc_loss(policies, batch)
    loss = q_term + bc * config.alpha
    return loss, {"q_term": float(q_term.value), "bc": float(bc.value)}


def awr_weights(advantage, alpha: float, clip: float = 100.0) -> np.ndarray:
    """min(exp(alpha * adv), clip); computed without gradient tracking."""
    adv = np.asarray(advantage, dtype=np.float64)
    with np.errstate(over="ignore"):
        return np.minimum(np.exp(alpha * adv), clip)


def awr_loss(policies: PolicySet, stack: CriticStack, vnets, batch, config: ExtractionConfig) -> tuple[Node, dict]:
    """Advantage-weighted log-likelihood of dataset actions.

    Advantages are global ``Q_tot - V_tot`` shared by every agent, or per agent
    ``Q^a - V_a(o^a)`` (always under ``dec``).
    """
    from .value import advantages  # local import: value imports this module

    obs_ab = agent_major(batch.obs)
    act_ab = encode_actions(policies.spec, batch.actions)
    if config.alpha == 0.0:
        w = np.ones((policies.spec.num_agents, len(batch.reward)))
    else:
        adv = advantages(stack, vnets, batch, per_agent=config.awr_advantage == "per_agent")
        w = awr_weights(adv, config.alpha, config.awr_clip)
        w = np.broadcast_to(w, (policies.spec.num_agents, len(batch.reward)))
    lp = log_prob(policies, obs_ab, act_ab)
    loss = ad.neg(ad.sum_(ad.mean(lp * w, axis=-1)))
    return loss, {"weight_mean": float(w.mean()), "weight_max": float(w.max())}


def actor_update(policies: PolicySet, stack: CriticStack, vnets, batch, config: ExtractionConfig,
                 optimizer: AdamState, rng: np.random.Generator) -> dict:
    """One joint Adam step on all actors; the critic is left untouched."""
    params = policies.parameters()
    zero_grad(params)
    frozen_params = stack.parameters() + (vnets.parameters() if vnets is not None else [])
    with frozen(frozen_params):
        if config.method == "brac":
            loss, info = brac_loss(policies, stack, batch, config, rng)
        else:
            loss, info = awr_loss(policies, stack, vnets, batch, config)
        if not np.isfinite(loss.value):
            raise DivergenceError("non-finite actor loss")
        ad.backward(loss)
    metrics = {"actor_loss": float(loss.value), "actor_grad_norm": ad.grad_norm(params)}
    for a in range(policies.spec.num_agents):
        parts = policies.agent_parameters(a)
        metrics[f"actor_grad_norm_{a}"] = float(np.sqrt(sum(float(np.sum(g * g)) for g in parts)))
    metrics.update(info)
    adam_step(optimizer, params)
    return metrics


def evaluate(policies: PolicySet, env: Env, episodes: int, seed: int) -> tuple[float, float, list[float]]:
    """Greedy rollouts; returns (mean, std, per-episode returns)."""
    if episodes < 1:
        raise ConfigError("evaluate needs at least one episode")
    seeds = np.random.SeedSequence(seed).generate_state(episodes)
    act = lambda state, obs: deterministic_actions(policies, obs[None])[0]  # noqa: E731
    returns = [rollout_return(env, act, int(s)) for s in seeds]
    arr = np.asarray(returns)
    return float(arr.mean()), float(arr.std()), returns
