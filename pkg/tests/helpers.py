"""Shared oracles and fixtures for the test suite."""
from __future__ import annotations

import numpy as np

from mixlab import autodiff as ad
from mixlab.datastore import Batch, generate_records
from mixlab.decomp import init_mixer, mixer_forward
from mixlab.envs import make_env
from mixlab.nn import forward_mlp, init_mlp


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def max_rel_elementwise(a, b, floor: float = 1e-300) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    diff = np.abs(a - b)
    # exact zeros on both sides count as agreement
    return float(np.max(np.where(diff == 0, 0.0, diff / scale)))


def gradcheck(build, params: list[ad.Node], h: float = 1e-6) -> float:
    """Worst relative error between autodiff and central differences over ``params``."""
    for p in params:
        p.zero_grad()
    ad.backward(build())
    worst = 0.0
    for p in params:
        def value():
            with ad.no_grad():
                return float(build().value)
        worst = max(worst, rel_err(p.grad, numeric_grad(value, p.value, h)))
    return worst


# --- composite operations for the gradient-check suite -----------------------------

def _case_mlp_layernorm(rng):
    net = init_mlp([3, 5, 4, 2], rng, use_layer_norm=True)
    for g in net.ln_gains:
        g.value[...] = rng.uniform(0.5, 1.5, g.value.shape)
    x = ad.parameter(rng.standard_normal((4, 3)))
    return lambda: ad.mean(ad.square(forward_mlp(net, x))), [x] + net.parameters()


def _case_grouped_mlp(rng):
    net = init_mlp([3, 4, 1], rng, use_layer_norm=True, groups=(2, 3), activation="elu")
    x = ad.parameter(rng.standard_normal((3, 5, 3)))
    return lambda: ad.sum_(ad.tanh(forward_mlp(net, x))), [x] + net.parameters()


def _case_min_abs_mean(rng):
    a = ad.parameter(rng.standard_normal(6))
    # keep the two arguments well separated so the min never switches under perturbation
    b = ad.parameter(a.value + rng.choice([-1.0, 1.0], 6) * rng.uniform(0.1, 1.0, 6))
    return lambda: ad.mean(ad.abs_(ad.minimum(a, b)) * ad.minimum(a, b)), [a, b]


def _case_exp_log(rng):
    x = ad.parameter(rng.uniform(0.2, 2.0, (3, 2)))
    return lambda: ad.sum_(ad.log(ad.exp(x * 0.5) + x) / ad.sqrt(x + 1.0)), [x]


def _case_gaussian_log_prob(rng):
    mean = ad.parameter(rng.standard_normal((2, 4, 3)))
    log_std = ad.parameter(rng.uniform(-1.0, 0.5, (2, 1, 3)))
    act = rng.standard_normal((2, 4, 3))

    def build():
        z = (act - mean) * ad.exp(ad.neg(log_std))
        return ad.mean(ad.sum_(ad.square(z) * -0.5 - log_std, axis=-1))

    return build, [mean, log_std]


def _case_softmax(rng):
    logits = ad.parameter(rng.standard_normal((3, 4)))
    w = rng.standard_normal((3, 4))
    return lambda: ad.sum_(ad.log_softmax(logits) * w) + ad.sum_(ad.softmax(logits) * w), [logits]


def _case_mixer(rng):
    mixer = init_mixer(3, 2, rng, embed_dim=4, hyper_dim=5)
    state = rng.standard_normal((6, 3))
    utils = ad.parameter(rng.standard_normal((2, 2, 6)))
    params = [utils] + list(mixer.named_parameters().values())
    return lambda: ad.mean(ad.square(mixer_forward(mixer, state, utils))), params


def _case_shapes(rng):
    a = ad.parameter(rng.standard_normal((2, 3, 4)))
    b = ad.parameter(rng.standard_normal((4, 2)))

    def build():
        t = ad.transpose(a, (1, 0, 2))
        r = ad.reshape(t, (6, 4)) @ b
        c = ad.concat([r, a[0, :, :2]], axis=0)
        return ad.sum_(ad.power(ad.abs_(c) + 1.0, 1.5)) + ad.sum_(a[:, [0, 2], 1] * 3.0)

    return build, [a, b]


def _case_relu_clip_div(rng):
    # magnitudes avoid the kinks at 0 and at the clip bounds +-1
    mag = np.where(rng.uniform(size=6) < 0.5, rng.uniform(0.1, 0.9, 6), rng.uniform(1.1, 2.0, 6))
    x = ad.parameter(mag * rng.choice([-1.0, 1.0], 6))
    y = ad.parameter(rng.uniform(1.0, 2.0, 6))
    return lambda: ad.sum_(ad.relu(x) / y + ad.clip(x, -1.0, 1.0) * ad.elu(x - y)), [x, y]


GRADCHECK_CASES = {
    "mlp_layer_norm": _case_mlp_layernorm,
    "grouped_mlp": _case_grouped_mlp,
    "min_abs_mean": _case_min_abs_mean,
    "exp_log_sqrt": _case_exp_log,
    "gaussian_log_prob": _case_gaussian_log_prob,
    "softmax": _case_softmax,
    "mixer": _case_mixer,
    "shape_ops": _case_shapes,
    "relu_clip_div": _case_relu_clip_div,
}


def run_gradcheck_suite(seeds=range(100)) -> dict[str, float]:
    worst = {}
    for name, case in GRADCHECK_CASES.items():
        errs = []
        for seed in seeds:
            build, params = case(np.random.default_rng(seed))
            errs.append(gradcheck(build, params))
        worst[name] = max(errs)
    return worst


# --- batches ----------------------------------------------------------------

def env_batch(env_name: str, kind: str = "uniform", episodes: int = 20, seed: int = 0, size: int | None = None,
              rng=None) -> Batch:
    env = make_env(env_name)
    records = generate_records(env, kind, episodes, seed, exhaustive=env_name == "two_step" and kind == "uniform")
    data = Batch.from_records(records, env.spec)
    if size is None:
        return data
    rng = np.random.default_rng(seed) if rng is None else rng
    return data.take(rng.integers(0, len(data), size=size))


def additive_fit(payoff) -> np.ndarray:
    """Least-squares additive approximation r_ab ~ u_a + v_b via row/column effects."""
    p = np.asarray(payoff, dtype=float)
    grand = p.mean()
    return grand + (p.mean(axis=1, keepdims=True) - grand) + (p.mean(axis=0, keepdims=True) - grand)
