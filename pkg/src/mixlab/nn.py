"""Feed-forward networks, Adam, Polyak averaging and parameter checkpoints."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import ConfigError, DivergenceError

HIDDEN_PRESETS = {
    "desk": [64, 64],
    "paper": [512, 512, 512, 512],
    "tiny": [32, 32],
}

_ACTIVATIONS = {"relu": ad.relu, "elu": ad.elu, "tanh": ad.tanh}


def resolve_hidden(hidden) -> list[int]:
    if isinstance(hidden, str):
        if hidden not in HIDDEN_PRESETS:
            raise ConfigError(f"unknown hidden preset {hidden!r}; choose from {sorted(HIDDEN_PRESETS)}")
        return list(HIDDEN_PRESETS[hidden])
    sizes = [int(h) for h in hidden]
    if any(h <= 0 for h in sizes):
        raise ConfigError(f"hidden sizes must be positive, got {sizes}")
    return sizes


@dataclass
class Mlp:
    """Dense network, optionally a stack of independent networks.

    With ``groups=(G1, G2, ...)`` every parameter carries those leading axes and
    an input of shape ``(..., B, in)`` broadcasts against them, so e.g. two
    ensemble members times A agents run as one batched matmul per layer.
    """

    layer_sizes: list[int]
    weights: list[Node]
    biases: list[Node]
    activation: str = "relu"
    use_layer_norm: bool = False
    ln_gains: list[Node] = field(default_factory=list)
    ln_biases: list[Node] = field(default_factory=list)
    groups: tuple[int, ...] = ()

    def __post_init__(self):
        self.groups = tuple(self.groups)
        if len(self.weights) != len(self.layer_sizes) - 1:
            raise ConfigError("one weight matrix per consecutive layer pair")
        for i, w in enumerate(self.weights):
            if w.shape != self.groups + (self.layer_sizes[i], self.layer_sizes[i + 1]):
                raise ConfigError(f"layer {i} weight shape {w.shape} disagrees with {self.layer_sizes}")
        n_hidden = len(self.layer_sizes) - 2
        expected = n_hidden if self.use_layer_norm else 0
        if len(self.ln_gains) != expected or len(self.ln_biases) != expected:
            raise ConfigError("layer-norm parameters present iff use_layer_norm")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def named_parameters(self, prefix: str = "") -> dict[str, Node]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}l{i}.w"] = w
            out[f"{prefix}l{i}.b"] = b
        for i, (g, b) in enumerate(zip(self.ln_gains, self.ln_biases)):
            out[f"{prefix}ln{i}.g"] = g
            out[f"{prefix}ln{i}.b"] = b
        return out

    def parameters(self) -> list[Node]:
        return list(self.named_parameters().values())


def init_mlp(
    layer_sizes: Sequence[int],
    rng: np.random.Generator,
    activation: str = "relu",
    use_layer_norm: bool = False,
    final_scale: float = 1.0,
    groups: Sequence[int] = (),
) -> Mlp:
    """Uniform fan-in initialization; ``final_scale`` shrinks the output layer."""
    sizes = [int(s) for s in layer_sizes]
    groups = tuple(int(g) for g in groups)
    if len(sizes) < 2:
        raise ConfigError("an Mlp needs at least input and output sizes")
    weights, biases = [], []
    for i in range(len(sizes) - 1):
        bound = 1.0 / np.sqrt(sizes[i])
        if i == len(sizes) - 2:
            bound *= final_scale
        weights.append(ad.parameter(rng.uniform(-bound, bound, groups + (sizes[i], sizes[i + 1]))))
        biases.append(ad.parameter(rng.uniform(-bound, bound, _bias_shape(groups, sizes[i + 1]))))
    gains, ln_biases = [], []
    if use_layer_norm:
        for size in sizes[1:-1]:
            gains.append(ad.parameter(np.ones(_bias_shape(groups, size))))
            ln_biases.append(ad.parameter(np.zeros(_bias_shape(groups, size))))
    return Mlp(sizes, weights, biases, activation, use_layer_norm, gains, ln_biases, groups)


def _bias_shape(groups: tuple, size: int) -> tuple:
    return groups + (1, size) if groups else (size,)


def forward_mlp(net: Mlp, x) -> Node:
    x = ad.as_node(x)
    if x.shape[-1] != net.in_dim:
        raise ConfigError(f"input last dim {x.shape[-1]} != network input {net.in_dim}")
    act = _ACTIVATIONS[net.activation]
    last = len(net.weights) - 1
    h = x
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i < last:
            if net.use_layer_norm:
                h = ad.layer_norm(h) * net.ln_gains[i] + net.ln_biases[i]
            h = act(h)
    return h


def copy_mlp(net: Mlp) -> Mlp:
    clone = lambda nodes: [ad.parameter(n.value.copy()) for n in nodes]  # noqa: E731
    return Mlp(
        list(net.layer_sizes),
        clone(net.weights),
        clone(net.biases),
        net.activation,
        net.use_layer_norm,
        clone(net.ln_gains),
        clone(net.ln_biases),
        net.groups,
    )


# --- optimizer --------------------------------------------------------------

@dataclass
class AdamState:
    """Moments live in flat buffers aligned with the packed parameters."""

    m: np.ndarray
    v: np.ndarray
    flat: np.ndarray
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def pack_parameters(params: Sequence[Node]) -> np.ndarray:
    """Move parameter storage into one contiguous buffer; values become views."""
    flat = np.concatenate([p.value.ravel() for p in params]) if params else np.zeros(0)
    offset = 0
    for p in params:
        size = p.value.size
        p.value = flat[offset:offset + size].reshape(p.value.shape)
        offset += size
    return flat


def adam_init(params: Sequence[Node], lr: float = 3e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    flat = pack_parameters(params)
    return AdamState(np.zeros_like(flat), np.zeros_like(flat), flat,
                     lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, params: Sequence[Node], grads: Sequence[np.ndarray] | None = None) -> None:
    """One bias-corrected Adam update, in place on ``params``.

    ``params`` must be the list handed to :func:`adam_init`. ``grads`` defaults
    to each parameter's accumulated ``.grad``. A non-finite gradient raises
    :class:`DivergenceError` before anything is modified.
    """
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in params]
    if len(grads) != len(params):
        raise ConfigError("params and grads disagree in length")
    for p, g in zip(params, grads):
        if g.shape != p.value.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.value.shape}")
    g = np.concatenate([np.ravel(x) for x in grads]) if grads else np.zeros(0)
    if g.shape != state.flat.shape:
        raise ConfigError("gradients do not match the optimizer's packed parameters")
    if not np.all(np.isfinite(g)):
        bad = next(i for i, x in enumerate(grads) if not np.all(np.isfinite(x)))
        raise DivergenceError(f"non-finite gradient in parameter {params[bad].name or bad}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * g
    g *= g
    state.v *= b2
    state.v += (1.0 - b2) * g
    # bias corrections folded into the step size and the denominator
    denom = np.sqrt(state.v, out=g)
    denom *= 1.0 / np.sqrt(1.0 - b2**state.step)
    denom += state.eps
    step_size = state.lr / (1.0 - b1**state.step)
    state.flat -= step_size * state.m / denom


def zero_grad(params: Iterable[Node]) -> None:
    for p in params:
        p.zero_grad()


def polyak_update(target_params: Sequence[Node], online_params: Sequence[Node], tau: float) -> None:
    """target <- (1 - tau) * target + tau * online, in place."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"polyak tau must lie in [0, 1], got {tau}")
    if len(target_params) != len(online_params):
        raise ConfigError("target and online parameter lists differ in length")
    for t, o in zip(target_params, online_params):
        if t.value.shape != o.value.shape:
            raise ConfigError(f"shape mismatch {t.value.shape} vs {o.value.shape}")
        if tau == 1.0:
            t.value[...] = o.value
        elif tau > 0.0:
            t.value *= 1.0 - tau
            t.value += tau * o.value


# --- checkpoints ------------------------------------------------------------

CHECKPOINT_FORMAT = "mixlab.params"
CHECKPOINT_VERSION = 1


def params_to_dict(named: dict[str, Node], meta: dict | None = None) -> dict:
    """JSON container: ``{format, version, meta, params: {name: {shape, data}}}``.

    ``data`` is the row-major flattening; floats are written with round-trip
    precision so a save/load cycle is bitwise exact.
    """
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {
            name: {"shape": list(node.value.shape), "data": node.value.ravel().tolist()}
            for name, node in sorted(named.items())
        },
    }


def save_params(path, named: dict[str, Node], meta: dict | None = None) -> None:
    Path(path).write_text(json.dumps(params_to_dict(named, meta)), encoding="utf-8")


def read_params(path) -> tuple[dict[str, np.ndarray], dict]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not a parameter checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    arrays = {}
    for name, entry in payload["params"].items():
        shape = tuple(entry["shape"])
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.size != int(np.prod(shape)):
            raise ConfigError(f"{path}: parameter {name} has {data.size} values for shape {shape}")
        arrays[name] = data.reshape(shape)
    return arrays, payload.get("meta", {})


def assign_params(named: dict[str, Node], arrays: dict[str, np.ndarray]) -> None:
    missing = sorted(set(named) - set(arrays))
    if missing:
        raise ConfigError(f"checkpoint lacks parameters: {missing[:5]}")
    for name, node in named.items():
        if arrays[name].shape != node.value.shape:
            raise ConfigError(f"parameter {name}: checkpoint shape {arrays[name].shape} != {node.value.shape}")
        node.value[...] = arrays[name]
