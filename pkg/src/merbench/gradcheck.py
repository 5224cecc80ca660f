"""Central finite-difference checks of the analytic gradients.

Every check runs in float64.  A scalar objective is built from the op output
by contracting it with a fixed random array, so each output element
contributes with a different weight.  For piecewise-linear ops (ReLU, max
pooling, clamp) a finite difference whose +-h evaluation lands on a
different linear piece than the base point measures the kink rather than
the derivative; such coordinates are detected through
:func:`merbench.tensor.record_decisions`, excluded and counted.
"""

from __future__ import annotations

import time
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .models import ModelParams, ModelSpec, build_model, forward, variant_loss
from .tensor import Tensor

DEFAULT_STEP = 1e-3
DEFAULT_TOL = 1e-4

Objective = Callable[[Mapping[str, Tensor]], Tensor]


@dataclass
class TensorCheck:
    name: str
    rel_error: float
    checked: int
    excluded: int


@dataclass
class CheckResult:
    case: str
    seed: int
    tensors: list[TensorCheck]
    tol: float

    @property
    def max_rel_error(self) -> float:
        return max((t.rel_error for t in self.tensors), default=0.0)

    @property
    def excluded(self) -> int:
        return sum(t.excluded for t in self.tensors)

    @property
    def checked(self) -> int:
        return sum(t.checked for t in self.tensors)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(max|a|, max|n|)``, and 0 when both are zero."""
    if analytic.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric))) / scale


def _same_decisions(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def _evaluate(fn: Objective, arrays: Mapping[str, np.ndarray]) -> tuple[float, list]:
    with T.no_grad(), T.record_decisions() as decisions:
        value = fn({k: Tensor(v, dtype=np.float64) for k, v in arrays.items()}).item()
    return value, decisions


def numerical_gradient(fn: Objective, arrays: Mapping[str, np.ndarray], name: str,
                       h: float = DEFAULT_STEP,
                       base_decisions: list | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of ``fn`` w.r.t. ``arrays[name]``.

    Returns ``(gradient, excluded)`` where ``excluded`` marks coordinates at
    which a piecewise op switched pieces (only if ``base_decisions`` given).
    """
    work = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
    target = work[name]
    flat = target.reshape(-1)
    grad = np.zeros(flat.shape)
    excluded = np.zeros(flat.shape, dtype=bool)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus, d_plus = _evaluate(fn, work)
        flat[i] = orig - h
        f_minus, d_minus = _evaluate(fn, work)
        flat[i] = orig
        if base_decisions is not None and not (_same_decisions(d_plus, base_decisions)
                                               and _same_decisions(d_minus, base_decisions)):
            excluded[i] = True
            continue
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(target.shape), excluded.reshape(target.shape)


def check_gradients(fn: Objective, arrays: Mapping[str, np.ndarray], case: str = "", seed: int = 0,
                    wrt: Sequence[str] | None = None, h: float = DEFAULT_STEP,
                    tol: float = DEFAULT_TOL) -> CheckResult:
    """Compare backpropagated gradients of ``fn`` with central differences.

    ``fn`` maps named tensors to a scalar tensor; ``wrt`` selects which of
    ``arrays`` to differentiate (all by default).
    """
    wrt = list(arrays) if wrt is None else list(wrt)
    with T.use_dtype(np.float64):
        leaves = {k: Tensor(v, requires_grad=k in wrt, dtype=np.float64) for k, v in arrays.items()}
        with T.record_decisions() as base:
            out = fn(leaves)
        if out.size != 1:
            raise ValueError(f"{case}: objective must be scalar, got shape {out.shape}")
        out.backward()
        results = []
        for name in wrt:
            analytic = leaves[name].grad
            if analytic is None:
                analytic = np.zeros_like(leaves[name].data)
            numeric, excluded = numerical_gradient(fn, arrays, name, h, base)
            keep = ~excluded
            results.append(TensorCheck(name, relative_error(analytic[keep], numeric[keep]),
                                       int(keep.sum()), int(excluded.sum())))
    return CheckResult(case, seed, results, tol)


# -- the suite -----------------------------------------------------------------------

def _projected(op: Callable[..., Tensor], weights: np.ndarray | None = None) -> Objective:
    """Objective ``sum(op(...) * R)`` for a fixed random ``R``."""

    def fn(t):
        out = op(t)
        r = weights if weights is not None else np.ones(out.shape)
        return T.sum(T.mul(out, Tensor(r, dtype=np.float64)))

    return fn


def _op_cases(rng: np.random.Generator) -> list[tuple[str, Objective, dict]]:
    def u(*shape):
        return rng.uniform(-1.0, 1.0, size=shape)

    def proj(shape):
        return rng.normal(size=shape)

    cases = [
        ("add", _projected(lambda t: T.add(t["a"], t["b"]), proj((3, 4))), {"a": u(3, 4), "b": u(4)}),
        ("sub", _projected(lambda t: T.sub(t["a"], t["b"]), proj((3, 4))), {"a": u(3, 4), "b": u(3, 1)}),
        ("mul", _projected(lambda t: T.mul(t["a"], t["b"]), proj((3, 4))), {"a": u(3, 4), "b": u(3, 4)}),
        ("mul_scalar", _projected(lambda t: T.mul_scalar(t["a"], -1.7), proj((5,))), {"a": u(5)}),
        ("matmul", _projected(lambda t: T.matmul(t["a"], t["b"]), proj((4, 5))), {"a": u(4, 3), "b": u(3, 5)}),
        ("linear", _projected(lambda t: T.linear(t["x"], t["w"], t["b"]), proj((2, 3))),
         {"x": u(2, 4), "w": u(4, 3), "b": u(3)}),
        ("conv2d", _projected(lambda t: T.conv2d(t["x"], t["k"], t["b"], padding=1), proj((2, 3, 5, 5))),
         {"x": u(2, 2, 5, 5), "k": u(3, 2, 3, 3), "b": u(3)}),
        ("conv2d_valid", _projected(lambda t: T.conv2d(t["x"], t["k"]), proj((3, 3, 4))),
         {"x": u(2, 5, 6), "k": u(3, 2, 3, 3)}),
        ("maxpool2d", _projected(lambda t: T.maxpool2d(t["x"], 2), proj((2, 3, 2, 3))), {"x": u(2, 3, 5, 6)}),
        ("relu", _projected(lambda t: T.relu(t["x"]), proj((4, 5))), {"x": u(4, 5)}),
        ("tanh", _projected(lambda t: T.tanh(t["x"]), proj((4, 5))), {"x": 2 * u(4, 5)}),
        ("clamp", _projected(lambda t: T.clamp(t["x"], -0.5, 0.5), proj((4, 5))), {"x": u(4, 5)}),
        ("sign", _projected(lambda t: T.sign(t["x"]), proj((6,))), {"x": u(6)}),
        ("reshape", _projected(lambda t: T.reshape(t["x"], (6, 2)), proj((6, 2))), {"x": u(3, 4)}),
        ("sum", lambda t: T.mul_scalar(T.sum(T.mul(t["x"], t["x"])), 0.5), {"x": u(3, 4)}),
        ("mean", lambda t: T.mean(T.tanh(t["x"])), {"x": u(3, 4)}),
        ("global_avg_pool", _projected(lambda t: T.global_avg_pool(t["x"]), proj((2, 3))), {"x": u(2, 3, 4, 5)}),
        ("mse_loss", lambda t: T.mse_loss(t["p"], t["y"]), {"p": u(4, 8), "y": u(4, 8)}),
    ]
    return cases


# Small enough for a full sweep over every parameter in well under a second per variant.
SUITE_SPEC = ModelSpec("A2E", conv_blocks=((2, 3, 2), (3, 3, 2)), embedding_dim=4)
SUITE_INPUT = (2, 1, 8, 10)


def model_objective(spec: ModelSpec, y: np.ndarray, y_mid: np.ndarray | None) -> Objective:
    """Training loss of ``spec`` as a function of named parameters plus input ``x``."""
    names = list(spec.param_shapes())

    def fn(t):
        params = ModelParams(OrderedDict((name, t[name]) for name in names))
        out = forward(params, spec, t["x"])
        return variant_loss(spec, out, y, y_mid)

    return fn


def _model_case(spec: ModelSpec, seed: int, input_shape=SUITE_INPUT) -> tuple[Objective, dict]:
    rng = np.random.default_rng(seed)
    params = build_model(spec, seed, dtype=np.float64)
    arrays = {k: v.data.copy() for k, v in params.items()}
    # non-zero biases so ReLU units are not all switched by the same sign pattern
    for k in arrays:
        if k.endswith(".bias"):
            arrays[k] = rng.uniform(-0.1, 0.1, size=arrays[k].shape)
    arrays["x"] = rng.uniform(-1.0, 1.0, size=input_shape)
    n = input_shape[0]
    y = rng.uniform(0.0, 1.0, size=(n, spec.n_emotions))
    y_mid = rng.uniform(0.0, 1.0, size=(n, spec.n_midlevel))
    return model_objective(spec, y, y_mid), arrays


def run_suite(seeds: Sequence[int] = range(10), h: float = DEFAULT_STEP, tol: float = DEFAULT_TOL,
              models: bool = True, spec: ModelSpec = SUITE_SPEC,
              log: Callable[[str], None] | None = None) -> list[CheckResult]:
    """Check every differentiable op and every model variant over ``seeds``."""
    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for case, fn, arrays in _op_cases(rng):
            results.append(check_gradients(fn, arrays, case, seed, h=h, tol=tol))
        if models:
            for variant in ("A2E", "A2B2E", "A2M2E"):
                fn, arrays = _model_case(spec.with_variant(variant), seed)
                results.append(check_gradients(fn, arrays, f"model_{variant}", seed, h=h, tol=tol))
        if log is not None:
            worst = max((r for r in results if r.seed == seed), key=lambda r: r.max_rel_error)
            log(f"seed {seed}: worst {worst.case} rel. err {worst.max_rel_error:.2e}")
    return results


def summarize(results: Sequence[CheckResult]) -> dict[str, dict]:
    """Per case: worst relative error over seeds, coordinates checked/excluded, pass flag."""
    table: dict[str, dict] = {}
    for r in results:
        row = table.setdefault(r.case, {"max_rel_error": 0.0, "checked": 0, "excluded": 0,
                                        "seeds": 0, "passed": True})
        row["max_rel_error"] = max(row["max_rel_error"], r.max_rel_error)
        row["checked"] += r.checked
        row["excluded"] += r.excluded
        row["seeds"] += 1
        row["passed"] = row["passed"] and r.passed
    return table


def timed_suite(**kwargs) -> tuple[list[CheckResult], float]:
    t0 = time.perf_counter()
    results = run_suite(**kwargs)
    return results, time.perf_counter() - t0
