"""Untargeted iterative sign-gradient (BIM) attack for multi-output regression.

Starting from ``delta = 0`` the perturbation is pushed along the sign of the
loss gradient and clipped back into the l-infinity ball after every step::

    delta <- clip(delta + eta * sign(grad_delta L(f(x + delta), y)), -eps, eps)

The loss is measured against the ground-truth annotations, so the attack
drives predictions away from the truth rather than towards a target.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .metrics import ConstantInputError, pearson
from .models import ModelParams, ModelSpec, forward, loss_a2m2e

log = logging.getLogger(__name__)

STOP_KINDS = ("none", "mse_above", "avg_corr_below")


class AttackError(RuntimeError):
    """The attack cannot proceed (shape mismatch, non-finite loss)."""


@dataclass(frozen=True)
class StopRule:
    kind: str = "avg_corr_below"
    threshold: float = -1.0

    def __post_init__(self):
        if self.kind not in STOP_KINDS:
            raise ValueError(f"unknown stop rule {self.kind!r}; expected one of {STOP_KINDS}")

    @classmethod
    def none(cls) -> "StopRule":
        return cls("none", 0.0)

    @classmethod
    def mse_above(cls, tau: float) -> "StopRule":
        return cls("mse_above", tau)

    @classmethod
    def avg_corr_below(cls, rho: float) -> "StopRule":
        return cls("avg_corr_below", rho)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.001
    eta: float = 0.002
    max_iterations: int = 1000
    stop_rule: StopRule = field(default_factory=StopRule)
    loss: str = "emotion"          # or "joint" (A2M2E training loss)
    per_sample_stop: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if self.loss not in ("emotion", "joint"):
            raise ValueError(f"unknown attack loss {self.loss!r}")
        if isinstance(self.stop_rule, dict):
            object.__setattr__(self, "stop_rule", StopRule(**self.stop_rule))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Perturbation:
    delta: np.ndarray
    iterations_run: int
    loss_trace: list[float]
    stop_reason: str               # "budget" | "threshold"
    adversarial_pred: np.ndarray | None = None
    correlation_flags: int = 0

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.delta))) if self.delta.size else 0.0


def ball_radius(epsilon: float, dtype) -> np.floating:
    """Largest value of ``dtype`` not exceeding ``epsilon``."""
    r = np.asarray(epsilon, dtype=dtype)[()]
    if float(r) > epsilon:
        r = np.nextafter(r, dtype.type(0))
    return r


def _avg_corr(pred: np.ndarray, y: np.ndarray) -> tuple[float, int]:
    """Mean per-column Pearson correlation; constant columns count as 0."""
    values, flagged = [], 0
    for j in range(y.shape[1]):
        try:
            values.append(pearson(pred[:, j], y[:, j]))
        except ConstantInputError:
            values.append(0.0)
            flagged += 1
    return float(np.mean(values)), flagged


def evaluate_stop(rule: StopRule, pred: np.ndarray, y: np.ndarray) -> bool:
    """Whether the stop rule fires for batch predictions ``pred`` against ``y``."""
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if pred.shape != y.shape:
        raise AttackError(f"stop rule: prediction shape {pred.shape} vs target {y.shape}")
    if rule.kind == "none":
        return False
    if rule.kind == "mse_above":
        return float(np.mean((pred - y) ** 2)) >= rule.threshold
    corr, flagged = _avg_corr(pred, y)
    if flagged:
        log.debug("stop rule: %d constant prediction column(s) counted as zero correlation", flagged)
    return corr <= rule.threshold


def _sample_stops(rule: StopRule, pred: np.ndarray, y: np.ndarray) -> np.ndarray:
    # per-sample variant: each row is judged on its own 8 outputs
    return np.array([evaluate_stop(rule, pred[i:i + 1].T, y[i:i + 1].T) if rule.kind == "avg_corr_below"
                     else evaluate_stop(rule, pred[i:i + 1], y[i:i + 1]) for i in range(len(y))])


def attack_loss(spec: ModelSpec, out, y, y_midlevel, which: str) -> T.Tensor:
    if which == "joint" and spec.variant == "A2M2E":
        return loss_a2m2e(out, y, y_midlevel)
    return T.mse_loss(out.emotions, y)


def bim_attack(params: ModelParams, spec: ModelSpec, x, y, cfg: AttackConfig | None = None,
               y_midlevel=None, check: bool = False,
               on_step: Callable[[int, np.ndarray], None] | None = None) -> Perturbation:
    """Run the iterative sign-gradient attack on a batch.

    ``x`` is (B, 1, F, T) and ``y`` the (B, 8) ground truth.  The attack is
    deterministic.  ``check`` asserts the l-infinity constraint after every
    step; ``on_step(iteration, delta)`` observes each new perturbation.
    """
    cfg = cfg or AttackConfig()
    x = np.asarray(x.data if isinstance(x, T.Tensor) else x)
    dtype = params["head.weight"].dtype
    x = x.astype(dtype, copy=False)
    y = np.asarray(y, dtype=dtype)
    if x.ndim != 4 or y.ndim != 2 or len(x) != len(y):
        raise AttackError(f"attack: input {x.shape} and targets {y.shape} do not form a batch")
    if cfg.loss == "joint" and spec.variant == "A2M2E" and y_midlevel is None:
        raise AttackError("joint attack loss needs mid-level targets")

    radius = ball_radius(cfg.epsilon, dtype)
    step = dtype.type(cfg.eta)
    delta = np.zeros_like(x)
    active = np.ones(len(x), dtype=bool)

    def evaluate(d):
        xt = T.Tensor(x + d, requires_grad=True, dtype=dtype)
        out = forward(params, spec, xt)
        loss = attack_loss(spec, out, y, y_midlevel, cfg.loss)
        value = float(loss.item())
        if not math.isfinite(value):
            raise AttackError(f"non-finite attack loss {value}")
        return xt, out, loss, value

    xt, out, loss, value = evaluate(delta)
    trace = [value]
    reason = "budget"
    iterations = 0
    for it in range(cfg.max_iterations):
        loss.backward()
        move = step * np.sign(xt.grad)
        if cfg.per_sample_stop:
            move *= active[:, None, None, None]
        delta = np.clip(delta + move, -radius, radius)
        if check:
            assert np.max(np.abs(delta)) <= cfg.epsilon, "perturbation left the epsilon ball"
        if on_step is not None:
            on_step(it + 1, delta)
        iterations = it + 1
        xt, out, loss, value = evaluate(delta)
        trace.append(value)
        pred = out.emotions.data
        if cfg.per_sample_stop:
            active &= ~_sample_stops(cfg.stop_rule, pred, y)
            if not active.any():
                reason = "threshold"
                break
        elif evaluate_stop(cfg.stop_rule, pred, y):
            reason = "threshold"
            break
    return Perturbation(delta, iterations, trace, reason, out.emotions.data.copy())


def snr_db(x, delta) -> float:
    """Signal-to-perturbation energy ratio in dB; ``inf`` for a zero perturbation."""
    x = np.asarray(x, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if x.shape != delta.shape:
        raise ValueError(f"snr_db: shape mismatch {x.shape} vs {delta.shape}")
    noise = float(np.sum(delta * delta))
    if noise == 0.0:
        return math.inf
    return 10.0 * math.log10(float(np.sum(x * x)) / noise)
