"""Linearized TD dynamics, operator-norm diagnostics, divergence monitor, score scales."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from decimal import Decimal
from importlib import resources

import numpy as np

from .decomp import CriticStack, mixer_jacobian
from .errors import ConfigError

POWER_TOL = 1e-8
POWER_MAX_ITER = 10_000
POWER_RESTARTS = 5

# scalar presets: per-step factor 1 - 2 alpha (1 - gamma J)
LINEAR_PRESETS = {
    "contractive": {"j": [[1.0]], "gamma": 0.9, "alpha_q": 0.1},
    "expansive": {"j": [[2.0]], "gamma": 0.9, "alpha_q": 0.1},
}


@dataclass
class LinearTdSystem:
    j: np.ndarray
    gamma: float
    alpha_q: float
    q0: np.ndarray
    q_bar: np.ndarray

    def __post_init__(self):
        self.j = np.atleast_2d(np.asarray(self.j, dtype=np.float64))
        n = self.j.shape[0]
        if self.j.shape != (n, n):
            raise ConfigError(f"J must be square, got shape {self.j.shape}")
        self.q0 = np.asarray(self.q0, dtype=np.float64).reshape(-1)
        self.q_bar = np.asarray(self.q_bar, dtype=np.float64).reshape(-1)
        if self.q0.shape != (n,) or self.q_bar.shape != (n,):
            raise ConfigError(f"q0 and q_bar must have length {n}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.alpha_q <= 0.0:
            raise ConfigError("alpha_q must be positive")

    @property
    def dim(self) -> int:
        return self.j.shape[0]

    def update_matrix(self) -> np.ndarray:
        """M = I - 2 alpha_q (I - gamma J)."""
        eye = np.eye(self.dim)
        return eye - 2.0 * self.alpha_q * (eye - self.gamma * self.j)


@dataclass
class Trajectory:
    errors: np.ndarray  # ||Q_t - Qbar|| for t = 0..T (possibly truncated)
    ratios: np.ndarray  # errors[t+1] / errors[t]
    rate: float  # geometric rate fitted on the second half of the window
    truncated: bool
    regime: str


def simulate_linear_td(system: LinearTdSystem, steps: int, overflow: float = 1e150,
                       underflow: float = 1e-120) -> Trajectory:
    """Iterate Q <- Q - 2 alpha_q (I - gamma J)(Q - Qbar), tracked as the error Q - Qbar.

    The trajectory stops early when the error leaves [underflow, overflow];
    an overflow marks the run expansive regardless of the fitted rate.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    eye = np.eye(system.dim)
    drive = 2.0 * system.alpha_q * (eye - system.gamma * system.j)
    # iterate the error e = Q - Qbar; stepping Q itself stalls at the resolution of Qbar
    e = system.q0 - system.q_bar
    errors = [float(np.linalg.norm(e))]
    truncated = overflowed = False
    for _ in range(steps):
        e = e - drive @ e
        err = float(np.linalg.norm(e))
        if not math.isfinite(err) or err > overflow:
            truncated = overflowed = True
            break
        errors.append(err)
        if err < underflow:
            truncated = True
            break
    errs = np.asarray(errors)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = errs[1:] / errs[:-1]
    rate = _geometric_rate(errs)
    regime = "expansive" if overflowed or rate > 1.0 else "contractive"
    return Trajectory(errs, ratios, rate, truncated, regime)


def _geometric_rate(errs: np.ndarray) -> float:
    """(e_end / e_mid)^(1 / (end - mid)) over the second half of the window."""
    n = len(errs) - 1
    if n < 1 or errs[0] == 0.0:
        return float("nan") if n < 1 else 0.0
    mid = n // 2
    if errs[mid] == 0.0 or errs[n] == 0.0:
        return 0.0
    return float(np.exp((np.log(errs[n]) - np.log(errs[mid])) / max(n - mid, 1)))


def spectral_radius(m) -> float:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ConfigError(f"spectral_radius needs a square matrix, got shape {m.shape}")
    return float(np.max(np.abs(np.linalg.eigvals(m))))


@dataclass
class OpNormResult:
    value: float
    iterations: int
    converged: bool
    warning: str = ""


def operator_norm(j, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER,
                  restarts: int = POWER_RESTARTS, seed: int = 0) -> OpNormResult:
    """Largest singular value by power iteration on J^T J.

    Stops when the Rayleigh residual ``||G v - lam v|| <= tol * lam``. On
    stagnation a fresh random start is tried, up to ``restarts`` times.
    """
    j = np.atleast_2d(np.asarray(j, dtype=np.float64))
    gram = j.T @ j
    n = gram.shape[0]
    if not np.any(gram):
        return OpNormResult(0.0, 0, True)
    rng = np.random.default_rng(seed)
    best, total = 0.0, 0
    for _ in range(max(restarts, 1)):
        v = rng.standard_normal(n)
        v /= np.linalg.norm(v)
        lam = 0.0
        for it in range(1, max_iter + 1):
            w = gram @ v
            lam = float(v @ w)
            if np.linalg.norm(w - lam * v) <= tol * max(lam, 1e-300):
                return OpNormResult(math.sqrt(max(lam, 0.0)), total + it, True)
            norm = np.linalg.norm(w)
            if norm == 0.0:
                break
            v = w / norm
        total += it
        best = max(best, lam)
    return OpNormResult(math.sqrt(max(best, 0.0)), total, False,
                        f"power iteration did not reach tol {tol} within {max_iter} iterations")


def operator_norm_of_mixer(stack: CriticStack, state, utilities, member: int = 0) -> float:
    """||d f_mix / d Q||_op at one (state, utilities) point.

    The mixer acts on the utility vector row by row, so the Jacobian of the
    joint value with respect to the A utilities is a 1 x A row per state.
    """
    grad = mixer_jacobian(stack, np.atleast_2d(state), np.atleast_2d(utilities), member)[0]
    return operator_norm(grad[None, :]).value


def batch_mixer_opnorm(stack: CriticStack, states, utilities, member: int = 0) -> float:
    """Mean per-row Jacobian norm over a batch (a row's op norm is its 2-norm)."""
    grads = mixer_jacobian(stack, states, utilities, member)
    return float(np.linalg.norm(grads, axis=1).mean())


def loop_gain(op_norm: float, gamma: float, actor_sensitivity: float,
              sigma_q: float | None = None) -> float:
    """gamma * ||J||_op * sensitivity, divided by sigma_Q when supplied."""
    if op_norm < 0 or gamma < 0 or actor_sensitivity < 0:
        raise ConfigError("loop_gain inputs must be non-negative")
    raw = gamma * op_norm * actor_sensitivity
    if sigma_q is None:
        return raw
    if sigma_q <= 0:
        raise ConfigError("sigma_q must be positive")
    return raw / sigma_q


@dataclass
class StabilityReport:
    op_norm: float
    spectral_radius: float
    regime: str
    ratios: list[float]
    rate: float
    loop_gain_raw: float
    loop_gain_svn: float | None
    op_norm_converged: bool = True

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def analyze(system: LinearTdSystem, steps: int, actor_sensitivity: float = 1.0,
            sigma_q: float | None = None) -> StabilityReport:
    traj = simulate_linear_td(system, steps)
    rho = spectral_radius(system.update_matrix())
    op = operator_norm(system.j)
    raw = loop_gain(op.value, system.gamma, actor_sensitivity)
    svn = loop_gain(op.value, system.gamma, actor_sensitivity, sigma_q) if sigma_q else None
    return StabilityReport(op.value, rho, "expansive" if rho > 1.0 else "contractive",
                           [float(r) for r in traj.ratios], traj.rate, raw, svn, op.converged)


# --- score normalization ---------------------------------------------------------

@dataclass(frozen=True)
class ScoreScale:
    scale_min: float
    scale_max: float

    def __post_init__(self):
        if not self.scale_max > self.scale_min:
            raise ConfigError("score scale needs scale_max > scale_min")

    def normalize(self, value: float) -> float:
        # decimal arithmetic on the shortest reprs keeps decimal anchors exact (the midpoint maps to 0.5)
        v, lo, hi = (Decimal(repr(float(x))) for x in (value, self.scale_min, self.scale_max))
        return float((v - lo) / (hi - lo))


def load_score_scales() -> dict[str, ScoreScale]:
    text = resources.files("mixlab").joinpath("data/score_scales.json").read_text(encoding="utf-8")
    payload = json.loads(text)
    return {k: ScoreScale(*v) for k, v in payload["scales"].items()}


def normalized_score(env_key: str, value: float, scales: dict[str, ScoreScale] | None = None) -> float:
    scales = load_score_scales() if scales is None else scales
    if env_key not in scales:
        raise ConfigError(f"no score scale registered for {env_key!r}; known: {sorted(scales)}")
    return scales[env_key].normalize(value)


# --- divergence monitor -----------------------------------------------------------

@dataclass
class DivergenceMonitor:
    """Flags runaway value scale, exploding gradients and non-finite metrics."""

    max_abs_return: float
    gamma: float
    drift_multiple: float = 50.0
    grad_limit: float = 1e6
    fired: list[str] = field(default_factory=list)

    @property
    def value_threshold(self) -> float:
        return self.drift_multiple * self.max_abs_return / (1.0 - self.gamma)

    def check(self, q_abs_mean: float, grad_norm: float | None = None) -> list[str]:
        flags = []
        values = [q_abs_mean] + ([grad_norm] if grad_norm is not None else [])
        if not all(math.isfinite(v) for v in values):
            flags.append("non_finite")
        else:
            if abs(q_abs_mean) > self.value_threshold:
                flags.append("value_scale_drift")
            if grad_norm is not None and grad_norm > self.grad_limit:
                flags.append("grad_blowup")
        for f in flags:
            if f not in self.fired:
                self.fired.append(f)
        return flags

    def scan(self, q_abs_means, grad_norms=None) -> tuple[int | None, list[str]]:
        """First index at which any flag fires over a recorded stream."""
        grad_norms = [None] * len(q_abs_means) if grad_norms is None else grad_norms
        for i, (q, g) in enumerate(zip(q_abs_means, grad_norms)):
            flags = self.check(q, g)
            if flags:
                return i, flags
        return None, []
