"""Value decomposition: per-agent utilities combined into a joint value.

Strategies: ``dec`` (independent per-agent critics), ``vdn`` (sum), ``mix``
(state-conditioned monotonic mixer) and ``cen`` (one joint critic over the
global state and all actions). Every critic is a two-member ensemble; the
members are stored as a leading axis of size 2 on each network.

Shape conventions: utilities are ``(2, A, B)``; joint values ``(2, B)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .envs import EnvSpec
from .errors import ConfigError
from .nn import Mlp, copy_mlp, forward_mlp, init_mlp

DECOMPS = ("dec", "vdn", "mix", "cen")
N_MEMBERS = 2


@dataclass
class MixerNet:
    """Hypernetwork-generated two-layer monotonic mixer.

    Weights come out of ``abs`` so every partial of the output with respect
    to a utility is non-negative.
    """

    hyper_w1: Mlp  # state -> A * embed
    hyper_b1: Mlp  # state -> embed
    hyper_w2: Mlp  # state -> embed
    hyper_b2: Mlp  # state -> 1
    num_agents: int
    embed_dim: int

    def nets(self) -> dict[str, Mlp]:
        return {"w1": self.hyper_w1, "b1": self.hyper_b1, "w2": self.hyper_w2, "b2": self.hyper_b2}

    def named_parameters(self, prefix: str = "") -> dict[str, Node]:
        out = {}
        for key, net in self.nets().items():
            out.update(net.named_parameters(f"{prefix}{key}."))
        return out

    def copy(self) -> "MixerNet":
        return MixerNet(copy_mlp(self.hyper_w1), copy_mlp(self.hyper_b1), copy_mlp(self.hyper_w2),
                        copy_mlp(self.hyper_b2), self.num_agents, self.embed_dim)


def init_mixer(state_dim: int, num_agents: int, rng, embed_dim: int = 32, hyper_dim: int = 128,
               members: int = N_MEMBERS) -> MixerNet:
    g = (members,)
    return MixerNet(
        init_mlp([state_dim, hyper_dim, num_agents * embed_dim], rng, groups=g),
        init_mlp([state_dim, embed_dim], rng, groups=g),
        init_mlp([state_dim, hyper_dim, embed_dim], rng, groups=g),
        init_mlp([state_dim, embed_dim, 1], rng, groups=g),
        num_agents,
        embed_dim,
    )


def mixer_forward(mixer: MixerNet, state, utils) -> Node:
    """``utils`` (M, A, B) with state (B, S) -> joint values (M, B)."""
    utils = ad.as_node(utils)
    members, agents, batch = utils.shape
    w1 = ad.abs_(forward_mlp(mixer.hyper_w1, state))  # (M, B, A*E)
    w1 = ad.reshape(w1, (members, batch, agents, mixer.embed_dim))
    b1 = forward_mlp(mixer.hyper_b1, state)  # (M, B, E)
    q = ad.reshape(ad.transpose(utils, (0, 2, 1)), (members, batch, agents, 1))
    hidden = ad.elu(ad.sum_(q * w1, axis=2) + b1)  # (M, B, E)
    w2 = ad.abs_(forward_mlp(mixer.hyper_w2, state))  # (M, B, E)
    b2 = forward_mlp(mixer.hyper_b2, state)  # (M, B, 1)
    return ad.sum_(hidden * w2, axis=2) + ad.reshape(b2, (members, batch))


@dataclass
class CriticStack:
    spec: EnvSpec
    decomp: str
    utility: Mlp | None  # groups (2, A): [obs + act] -> 1
    mixer: MixerNet | None
    joint: Mlp | None  # groups (2,): [state + A * act] -> 1
    target_utility: Mlp | None = None
    target_mixer: MixerNet | None = None
    target_joint: Mlp | None = None

    def __post_init__(self):
        if self.decomp not in DECOMPS:
            raise ConfigError(f"unknown decomposition {self.decomp!r}; choose from {DECOMPS}")
        if self.target_utility is None and self.utility is not None:
            self.target_utility = copy_mlp(self.utility)
        if self.target_mixer is None and self.mixer is not None:
            self.target_mixer = self.mixer.copy()
        if self.target_joint is None and self.joint is not None:
            self.target_joint = copy_mlp(self.joint)

    def _named(self, utility, mixer, joint) -> dict[str, Node]:
        out = {}
        if utility is not None:
            out.update(utility.named_parameters("utility."))
        if mixer is not None:
            out.update(mixer.named_parameters("mixer."))
        if joint is not None:
            out.update(joint.named_parameters("joint."))
        return out

    def named_parameters(self) -> dict[str, Node]:
        return self._named(self.utility, self.mixer, self.joint)

    def named_target_parameters(self) -> dict[str, Node]:
        return self._named(self.target_utility, self.target_mixer, self.target_joint)

    def parameters(self) -> list[Node]:
        return list(self.named_parameters().values())

    def target_parameters(self) -> list[Node]:
        return list(self.named_target_parameters().values())

    @property
    def per_agent(self) -> bool:
        return self.decomp == "dec"


def init_critic(spec: EnvSpec, decomp: str, hidden: list[int], rng: np.random.Generator,
                embed_dim: int = 32, hyper_dim: int = 128) -> CriticStack:
    a, act = spec.num_agents, spec.action_input_dim
    utility = mixer = joint = None
    if decomp == "cen":
        joint = init_mlp([spec.state_dim + a * act, *hidden, 1], rng, use_layer_norm=True, groups=(N_MEMBERS,))
    else:
        utility = init_mlp([spec.obs_dim + act, *hidden, 1], rng, use_layer_norm=True, groups=(N_MEMBERS, a))
        if decomp == "mix":
            mixer = init_mixer(spec.state_dim, a, rng, embed_dim, hyper_dim)
    return CriticStack(spec, decomp, utility, mixer, joint)


def encode_actions(spec: EnvSpec, actions: np.ndarray) -> np.ndarray:
    """Dataset actions ``(B, A[, d])`` -> critic input ``(A, B, act_in)``."""
    if spec.discrete:
        enc = np.eye(spec.action_dim)[actions]  # (B, A, K)
    else:
        enc = np.asarray(actions, dtype=np.float64).reshape(len(actions), spec.num_agents, spec.action_dim)
    return np.ascontiguousarray(enc.transpose(1, 0, 2))


def agent_major(obs: np.ndarray) -> np.ndarray:
    """``(B, A, d)`` -> ``(A, B, d)``."""
    return np.ascontiguousarray(np.asarray(obs).transpose(1, 0, 2))


def agent_utilities(stack: CriticStack, obs_ab, act_ab, target: bool = False) -> Node:
    """Per-agent utilities ``(2, A, B)`` from agent-major obs and actions."""
    net = stack.target_utility if target else stack.utility
    if net is None:
        raise ConfigError("the centralized critic has no per-agent utilities")
    x = ad.concat([ad.as_node(obs_ab), ad.as_node(act_ab)], axis=-1)
    out = forward_mlp(net, x)  # (2, A, B, 1)
    return ad.reshape(out, out.shape[:-1])


def combine(stack: CriticStack, state, utils, target: bool = False) -> Node:
    """Joint value ``(2, B)`` from utilities ``(2, A, B)``."""
    if stack.decomp == "vdn":
        return ad.sum_(utils, axis=1)
    if stack.decomp == "mix":
        return mixer_forward(stack.target_mixer if target else stack.mixer, state, utils)
    raise ConfigError(f"decomposition {stack.decomp!r} does not combine utilities")


def critic_values(stack: CriticStack, state, obs_ab, act_ab, target: bool = False) -> Node:
    """Ensemble values: ``(2, B)`` for joint decompositions, ``(2, A, B)`` for dec."""
    if stack.decomp == "cen":
        net = stack.target_joint if target else stack.joint
        act = ad.as_node(act_ab)
        a, b, d = act.shape
        flat_act = ad.reshape(ad.transpose(act, (1, 0, 2)), (b, a * d))
        out = forward_mlp(net, ad.concat([ad.as_node(state), flat_act], axis=-1))  # (2, B, 1)
        return ad.reshape(out, out.shape[:-1])
    utils = agent_utilities(stack, obs_ab, act_ab, target)
    if stack.decomp == "dec":
        return utils
    return combine(stack, state, utils, target)


def q_tot(stack: CriticStack, state, obs_ab, act_ab, member: int | None = None,
          scalar: bool = False, target: bool = False) -> Node:
    """Value of one ensemble member (or both when ``member`` is None).

    Under ``dec`` this is the per-agent vector; asking for ``scalar=True``
    there is a usage error because no joint value exists.
    """
    if scalar and stack.decomp == "dec":
        raise ConfigError("dec has no joint Q_tot; request per-agent values instead")
    values = critic_values(stack, state, obs_ab, act_ab, target)
    return values if member is None else values[member]


def min_ensemble(values: Node) -> Node:
    """Elementwise minimum over the leading ensemble axis."""
    return ad.minimum(values[0], values[1])


def min_ensemble_q_tot(stack: CriticStack, state, obs_ab, act_ab, target: bool = False) -> Node:
    return min_ensemble(critic_values(stack, state, obs_ab, act_ab, target))


def mixer_jacobian(stack: CriticStack, state, utilities, member: int = 0) -> np.ndarray:
    """d f_mix / d Q^a per row via reverse mode: ``utilities`` (B, A) -> (B, A)."""
    if stack.decomp != "mix":
        raise ConfigError("mixer_jacobian needs decomp='mix'")
    u = np.asarray(utilities, dtype=np.float64)
    if u.ndim == 1:
        u = u[None, :]
    state = np.asarray(state, dtype=np.float64).reshape(len(u), -1)
    node = ad.parameter(u.T[None, :, :].copy())
    with _detached(stack.mixer.named_parameters().values()):
        joint = mixer_forward(_single_member(stack.mixer, member), state, node)
        ad.backward(ad.sum_(joint))
    return node.grad[0].T.copy()


class _detached:
    """Temporarily exclude parameters from gradient tracking."""

    def __init__(self, params):
        self.params = list(params)

    def __enter__(self):
        self.saved = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad = False
        return self

    def __exit__(self, *exc):
        for p, flag in zip(self.params, self.saved):
            p.requires_grad = flag


frozen = _detached


def _member_mlp(net: Mlp, member: int) -> Mlp:
    pick = lambda nodes: [ad.Node(n.value[member:member + 1]) for n in nodes]  # noqa: E731
    return Mlp(list(net.layer_sizes), pick(net.weights), pick(net.biases), net.activation, net.use_layer_norm,
               pick(net.ln_gains), pick(net.ln_biases), (1,))


def _single_member(mixer: MixerNet, member: int) -> MixerNet:
    return MixerNet(*(_member_mlp(n, member) for n in mixer.nets().values()), mixer.num_agents, mixer.embed_dim)


def set_identity_mixer(mixer: MixerNet) -> None:
    """Degenerate mixer: first layer routes agent a to unit a, second layer sums.

    Hypernet weights are zeroed and output biases fixed, so for every state
    the generated mixing weights are identity/ones and the mixing biases zero.
    Because the hidden ELU is the identity on positive inputs, the mixer then
    equals the VDN sum whenever all utilities are non-negative.
    """
    a, e = mixer.num_agents, mixer.embed_dim
    if e < a:
        raise ConfigError("identity mixer needs embed_dim >= num_agents")
    for net in mixer.nets().values():
        for p in net.weights + net.biases:
            p.value[...] = 0.0
    w1 = np.zeros((a, e))
    w1[np.arange(a), np.arange(a)] = 1.0
    mixer.hyper_w1.biases[-1].value[...] = w1.ravel()
    w2 = np.zeros(e)
    w2[:a] = 1.0
    mixer.hyper_w2.biases[-1].value[...] = w2


def zero_parameters(params) -> None:
    for p in params:
        p.value[...] = 0.0
