"""Critic objectives: TD, SARSA and IQL targets, scale-invariant normalization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .decomp import CriticStack, agent_major, agent_utilities, critic_values, encode_actions, min_ensemble
from .envs import EnvSpec
from .errors import ConfigError, DatasetError, DivergenceError
from .nn import AdamState, Mlp, adam_step, forward_mlp, init_mlp, polyak_update, zero_grad

VALUE_METHODS = ("td", "sarsa", "iql")
SVN_EPSILON = 1e-6


@dataclass
class ValueLearnConfig:
    method: str = "td"
    gamma: float = 0.99
    iql_tau: float = 0.7
    svn: bool = False
    svn_epsilon: float = SVN_EPSILON
    polyak_tau: float = 0.005
    # regress only the elementwise-min ensemble value instead of both members
    listing1_strict: bool = False

    def __post_init__(self):
        if self.method not in VALUE_METHODS:
            raise ConfigError(f"unknown value_learning {self.method!r}; choose from {VALUE_METHODS}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 < self.iql_tau < 1.0:
            raise ConfigError(f"iql_tau must lie in (0, 1), got {self.iql_tau}")
        if not self.svn_epsilon > 0.0:
            raise ConfigError("svn_epsilon must be positive")


@dataclass(frozen=True)
class NormStats:
    """Detached location and spread of the current joint values.

    Scalars for a single value column; arrays of shape ``(A, 1)`` for
    per-agent critics so each agent is normalized by its own batch.
    """

    mu_q: float | np.ndarray
    sigma_q: float | np.ndarray


def svn_stats(q, epsilon: float = SVN_EPSILON) -> NormStats:
    """Batch mean and mean-absolute deviation (+ epsilon) along the last axis."""
    q = np.asarray(q.value if isinstance(q, Node) else q, dtype=np.float64)
    if q.shape[-1] == 0:
        raise ConfigError("svn_stats needs a non-empty batch")
    mu = q.mean(axis=-1, keepdims=True)
    sigma = np.abs(q - mu).mean(axis=-1, keepdims=True) + epsilon
    if q.ndim == 1:
        return NormStats(float(mu[0]), float(sigma[0]))
    return NormStats(mu, sigma)


def svn_td_loss(q: Node, y, stats: NormStats) -> Node:
    """Mean squared gap between the normalized prediction and normalized target.

    Rows are averaged along the last axis; leading axes (ensemble members,
    agents) are summed.
    """
    inv = 1.0 / np.asarray(stats.sigma_q, dtype=np.float64)
    # (q - mu)/sigma - (y - mu)/sigma, formed as (q - y)/sigma to avoid cancellation
    return ad.sum_(ad.mean(ad.square((q - np.asarray(y, dtype=np.float64)) * inv), axis=-1))


def mse_loss(q: Node, y) -> Node:
    """Plain squared TD loss with the same reduction as :func:`svn_td_loss`."""
    return ad.sum_(ad.mean(ad.square(q - np.asarray(y, dtype=np.float64)), axis=-1))


def expectile_loss(u, tau: float) -> Node:
    """Elementwise |tau - 1{u<0}| * u^2."""
    if not 0.0 < tau < 1.0:
        raise ConfigError(f"expectile tau must lie in (0, 1), got {tau}")
    u = ad.as_node(u)
    weight = np.where(u.value < 0.0, 1.0 - tau, tau)
    return ad.square(u) * weight


# --- state-value networks -----------------------------------------------------

@dataclass
class ValueNets:
    """Global V_tot(s) and/or per-agent V_a(o^a), whichever the recipe needs."""

    global_v: Mlp | None = None
    agent_v: Mlp | None = None  # groups (A,)

    def named_parameters(self) -> dict[str, Node]:
        out = {}
        if self.global_v is not None:
            out.update(self.global_v.named_parameters("v_global."))
        if self.agent_v is not None:
            out.update(self.agent_v.named_parameters("v_agent."))
        return out

    def parameters(self) -> list[Node]:
        return list(self.named_parameters().values())


def needs_value_nets(decomp: str, method: str, extraction: str, awr_advantage: str) -> tuple[bool, bool]:
    """Which of (global, per-agent) V networks a recipe trains."""
    per_agent_adv = extraction == "awr" and (decomp == "dec" or awr_advantage == "per_agent")
    global_adv = extraction == "awr" and not per_agent_adv
    want_global = (method == "iql" and decomp != "dec") or global_adv
    want_agent = (method == "iql" and decomp == "dec") or per_agent_adv
    return want_global, want_agent


def init_value_nets(spec: EnvSpec, decomp: str, method: str, extraction: str, awr_advantage: str,
                    hidden: list[int], rng: np.random.Generator) -> ValueNets:
    want_global, want_agent = needs_value_nets(decomp, method, extraction, awr_advantage)
    g = init_mlp([spec.state_dim, *hidden, 1], rng, use_layer_norm=True) if want_global else None
    a = None
    if want_agent:
        a = init_mlp([spec.obs_dim, *hidden, 1], rng, use_layer_norm=True, groups=(spec.num_agents,))
    return ValueNets(g, a)


def global_value(vnets: ValueNets, state) -> Node:
    out = forward_mlp(vnets.global_v, state)
    return ad.reshape(out, out.shape[:-1])  # (B,)


def agent_values(vnets: ValueNets, obs_ab) -> Node:
    out = forward_mlp(vnets.agent_v, obs_ab)
    return ad.reshape(out, out.shape[:-1])  # (A, B)


def _behavior_q(stack: CriticStack, batch, per_agent: bool) -> np.ndarray:
    """Detached min-ensemble target values of the dataset actions."""
    obs_ab = agent_major(batch.obs)
    act_ab = encode_actions(stack.spec, batch.actions)
    with ad.no_grad():
        if per_agent:
            if stack.decomp == "cen":
                raise ConfigError("per-agent advantages need per-agent utilities; cen has none")
            return min_ensemble(agent_utilities(stack, obs_ab, act_ab, target=True)).value
        return min_ensemble(critic_values(stack, batch.state, obs_ab, act_ab, target=True)).value


def advantages(stack: CriticStack, vnets: ValueNets, batch, per_agent: bool = False) -> np.ndarray:
    """Detached advantages: ``(B,)`` global or ``(A, B)`` per agent."""
    per_agent = per_agent or stack.decomp == "dec"
    q = _behavior_q(stack, batch, per_agent)
    with ad.no_grad():
        if per_agent:
            v = agent_values(vnets, agent_major(batch.obs)).value
        else:
            v = global_value(vnets, batch.state).value
    return q - v


def value_loss(stack: CriticStack, vnets: ValueNets, batch, tau: float) -> Node:
    """Expectile regression of every present V network onto detached target-critic values."""
    terms = []
    if vnets.global_v is not None:
        q = _behavior_q(stack, batch, per_agent=stack.decomp == "dec")
        if q.ndim == 2:
            q = q.sum(axis=0)
        terms.append(ad.mean(expectile_loss(q - global_value(vnets, batch.state), tau)))
    if vnets.agent_v is not None:
        q = _behavior_q(stack, batch, per_agent=True)
        resid = q - agent_values(vnets, agent_major(batch.obs))
        terms.append(ad.sum_(ad.mean(expectile_loss(resid, tau), axis=-1)))
    if not terms:
        raise ConfigError("no value networks to train")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


# --- targets ------------------------------------------------------------------

def _check_finite(y: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(y)):
        raise DivergenceError(f"non-finite {what} target")
    return y


def _mask(batch, gamma: float) -> np.ndarray:
    return gamma * (1.0 - np.asarray(batch.done, dtype=np.float64))


def bootstrap_values(stack: CriticStack, batch, next_actions: np.ndarray) -> np.ndarray:
    """Min-ensemble target values at ``(s', u')``; ``(B,)`` or ``(A, B)`` under dec."""
    act_ab = encode_actions(stack.spec, next_actions)
    with ad.no_grad():
        values = critic_values(stack, batch.next_state, agent_major(batch.next_obs), act_ab, target=True)
        return min_ensemble(values).value


def td_target(stack: CriticStack, batch, policies, gamma: float, rng: np.random.Generator) -> np.ndarray:
    """r + gamma (1 - done) min_k Qbar_k(s', u'), with u' drawn from the current actors."""
    from .policy import sample_actions  # local import: policy imports this module

    if gamma == 0.0:
        return _check_finite(np.asarray(batch.reward, dtype=np.float64).copy(), "TD")
    u_next = sample_actions(policies, batch.next_obs, rng)
    y = batch.reward + _mask(batch, gamma) * bootstrap_values(stack, batch, u_next)
    return _check_finite(y, "TD")


def sarsa_target(stack: CriticStack, batch, gamma: float) -> np.ndarray:
    """Like :func:`td_target` but the next joint action comes from the dataset."""
    missing = ~np.asarray(batch.has_next_actions, dtype=bool) & (np.asarray(batch.done) == 0)
    if np.any(missing):
        rows = np.flatnonzero(missing)[:5].tolist()
        raise DatasetError(f"next_actions missing on non-terminal rows {rows}; SARSA cannot bootstrap")
    if gamma == 0.0:
        return _check_finite(np.asarray(batch.reward, dtype=np.float64).copy(), "SARSA")
    y = batch.reward + _mask(batch, gamma) * bootstrap_values(stack, batch, batch.next_actions)
    return _check_finite(y, "SARSA")


def iql_target(vnets: ValueNets, batch, gamma: float, per_agent: bool) -> np.ndarray:
    """r + gamma (1 - done) V(s'); per-agent V_a(o'^a) under dec."""
    if gamma == 0.0:
        return _check_finite(np.asarray(batch.reward, dtype=np.float64).copy(), "IQL")
    with ad.no_grad():
        if per_agent:
            v = agent_values(vnets, agent_major(batch.next_obs)).value
        else:
            v = global_value(vnets, batch.next_state).value
    return _check_finite(batch.reward + _mask(batch, gamma) * v, "IQL")


def compute_target(stack: CriticStack, vnets: ValueNets | None, batch, policies,
                   config: ValueLearnConfig, rng: np.random.Generator) -> np.ndarray:
    if config.method == "td":
        return td_target(stack, batch, policies, config.gamma, rng)
    if config.method == "sarsa":
        return sarsa_target(stack, batch, config.gamma)
    return iql_target(vnets, batch, config.gamma, per_agent=stack.decomp == "dec")


# --- update -------------------------------------------------------------------

def critic_loss(stack: CriticStack, batch, y: np.ndarray, config: ValueLearnConfig,
                stats: NormStats | None = None) -> tuple[Node, Node, NormStats]:
    """Loss on the current critic, its ensemble values, and the stats used.

    Without SVN the stats are the identity pair (0, 1) so the normalized form
    reduces to the plain squared error.
    """
    obs_ab = agent_major(batch.obs)
    act_ab = encode_actions(stack.spec, batch.actions)
    values = critic_values(stack, batch.state, obs_ab, act_ab)  # (2, B) or (2, A, B)
    q_min = min_ensemble(values)
    if stats is None:
        stats = svn_stats(q_min, config.svn_epsilon) if config.svn else NormStats(0.0, 1.0)
    regressed = q_min if config.listing1_strict else values
    return svn_td_loss(regressed, y, stats), values, stats


def critic_update(stack: CriticStack, vnets: ValueNets | None, batch, policies, config: ValueLearnConfig,
                  optimizer: AdamState, rng: np.random.Generator, v_optimizer: AdamState | None = None,
                  v_tau: float | None = None) -> dict:
    """One critic step (plus one V step where present), then Polyak averaging.

    Reported ``td_loss``, ``q_mean`` and ``q_abs_mean`` are unnormalized.
    """
    y = compute_target(stack, vnets, batch, policies, config, rng)
    params = stack.parameters()
    zero_grad(params)
    loss, values, stats = critic_loss(stack, batch, y, config)
    if not np.isfinite(loss.value):
        raise DivergenceError("non-finite critic loss")
    ad.backward(loss)
    q = np.minimum(values.value[0], values.value[1])
    resid = (q if config.listing1_strict else values.value) - y
    metrics = {
        "td_loss": float(np.mean(resid**2)),
        "q_mean": float(q.mean()),
        "q_abs_mean": float(np.abs(q).mean()),
        # the spread is reported even when SVN is off, for the loop-gain diagnostic
        "sigma_q": float(np.mean((stats if config.svn else svn_stats(q, config.svn_epsilon)).sigma_q)),
        "critic_grad_norm": ad.grad_norm(params),
    }
    adam_step(optimizer, params)

    if vnets is not None and vnets.parameters():
        tau = v_tau if v_tau is not None else (config.iql_tau if config.method == "iql" else 0.5)
        v_params = vnets.parameters()
        zero_grad(v_params)
        v_loss = value_loss(stack, vnets, batch, tau)
        if not np.isfinite(v_loss.value):
            raise DivergenceError("non-finite value-network loss")
        ad.backward(v_loss)
        metrics["v_loss"] = float(v_loss.value)
        metrics["v_grad_norm"] = ad.grad_norm(v_params)
        adam_step(v_optimizer, v_params)

    polyak_update(stack.target_parameters(), params, config.polyak_tau)
    return metrics

