"""Central finite-difference checks for every differentiable operation.

Each check builds a small network output from random float32 inputs, attaches
an ``mse_loss`` head against a fixed random target, and compares the tape's
analytic gradients with central differences of the same objective. The
numerical side re-evaluates the forward pass in inference mode at float64
working precision (same inputs, same parameter values), so the reference is
limited by the O(eps^2) truncation error rather than float32 rounding noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .rng import derive_rng

EPS = 1e-3
TOLERANCE = 1e-3


@dataclass
class GradCheckResult:
    name: str
    instance: int
    param: str
    rel_error: float

    @property
    def passed(self) -> bool:
        return self.rel_error < TOLERANCE


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / (|a| + |n|)``; 0 when both vanish."""
    a = np.asarray(analytic, np.float64).ravel()
    n = np.asarray(numeric, np.float64).ravel()
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def _objective(out: np.ndarray, target: np.ndarray) -> float:
    n = out.shape[0] if out.ndim else 1
    return float(np.sum((out.astype(np.float64) - target) ** 2) / n)


def numerical_grads(build: Callable[[], T.Tensor], target: np.ndarray, params: Sequence[T.Tensor],
                    eps: float = EPS) -> list[np.ndarray]:
    saved = [p.data for p in params]
    out = []
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
        with T.oracle_precision():
            for p in params:
                grad = np.zeros(p.shape, dtype=np.float64)
                flat = p.data.reshape(-1)
                for k in range(flat.size):
                    orig = flat[k]
                    flat[k] = orig + eps
                    f_hi = _objective(build().data, target)
                    flat[k] = orig - eps
                    f_lo = _objective(build().data, target)
                    flat[k] = orig
                    grad.reshape(-1)[k] = (f_hi - f_lo) / (2 * eps)
                out.append(grad)
    finally:
        for p, d in zip(params, saved):
            p.data = d
    return out


def check(name: str, build: Callable[[], T.Tensor], params: Sequence[T.Tensor], seed: int,
          instance: int = 0, eps: float = EPS) -> list[GradCheckResult]:
    """Compare tape gradients of ``mse(build(), target)`` with central differences."""
    out_shape = build().shape
    target = derive_rng(seed, "gradcheck-target", name, instance).normal(size=out_shape).astype(np.float32)
    with T.Tape() as tape:
        loss = T.mse_loss(build(), T.Tensor(target))
    T.backward(loss, tape, params=params)
    numeric = numerical_grads(build, target.astype(np.float64), params, eps)
    return [GradCheckResult(name, instance, p.name or f"arg{i}", rel_error(p.grad, num))
            for i, (p, num) in enumerate(zip(params, numeric))]


def _param(rng, shape, name, scale=1.0):
    return T.Tensor(rng.normal(scale=scale, size=shape), requires_grad=True, name=name)


def _away_from_kink(rng, shape, margin=0.05):
    # keep relu inputs at least `margin` from 0 so eps-steps never cross the kink
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def op_checks(seed: int, instance: int) -> list[GradCheckResult]:
    rng = derive_rng(seed, "gradcheck", instance)
    res: list[GradCheckResult] = []

    x = _param(rng, (3, 5), "x")
    W = _param(rng, (4, 5), "W")
    b = _param(rng, (4,), "b")
    res += check("fully_connected", lambda: T.fully_connected(x, W, b), [x, W, b], seed, instance)

    stride, pad = [(1, 0), (1, 1), (2, 1)][instance % 3]
    xi = _param(rng, (2, 2, 5, 5), "x")
    K = _param(rng, (3, 2, 3, 3), "K", 0.5)
    kb = _param(rng, (3,), "b")
    res += check(f"conv2d(s={stride},p={pad})",
                 lambda: T.flatten(T.conv2d(xi, K, kb, stride, pad)), [xi, K, kb], seed, instance)

    xs = _param(rng, (4, 6), "x", 2.0)
    res += check("sigmoid", lambda: T.sigmoid(xs), [xs], seed, instance)

    xr = T.Tensor(_away_from_kink(rng, (4, 6)), requires_grad=True, name="x")
    res += check("relu", lambda: T.relu(xr), [xr], seed, instance)

    xa = _param(rng, (3, 4), "a")
    xb = _param(rng, (3, 4), "b")
    res += check("add", lambda: T.add(xa, xb), [xa, xb], seed, instance)

    # mse_loss is the head of every check above; this one exercises it alone
    xm = _param(rng, (5, 3), "pred")
    res += check("mse_loss", lambda: xm, [xm], seed, instance)
    return res


def composite_check(seed: int, instance: int) -> list[GradCheckResult]:
    """conv -> relu -> fc -> sigmoid -> mse on a random tiny network."""
    rng = derive_rng(seed, "gradcheck-composite", instance)
    x = _param(rng, (2, 1, 7, 7), "x")
    K = _param(rng, (2, 1, 3, 3), "K", 0.5)
    kb = T.Tensor(rng.normal(size=2) * 0.1, requires_grad=True, name="conv_b")
    W = _param(rng, (3, 2 * 4 * 4), "W", 0.5)
    b = _param(rng, (3,), "b")

    def build():
        h = T.relu(T.conv2d(x, K, kb, stride=2, pad=1))
        return T.sigmoid(T.fully_connected(T.flatten(h), W, b))

    return _relu_safe_check("composite", build, [x, K, kb, W, b], seed, instance)


def _relu_safe_check(name, build, params, seed, instance, tries=8):
    # A random instance may place a pre-activation within eps of the relu kink;
    # nudging the inputs and retrying keeps the oracle well-defined.
    results = check(name, build, params, seed, instance)
    for attempt in range(tries):
        if all(r.passed for r in results):
            break
        nudge = derive_rng(seed, "nudge", name, instance, attempt)
        for p in params:
            p.data += nudge.normal(scale=0.05, size=p.shape).astype(np.float32)
        results = check(name, build, params, seed, instance)
    return results


def scn_check(seed: int, instance: int) -> list[GradCheckResult]:
    """End to end: tiny SCN (D=4, 8x8 patches), all trainable parameters."""
    from .model import EncoderConfig, ScnModel, scn_forward

    cfg = EncoderConfig(conv_layers=[(2, 4, 2, 1)], fc_dims=[6, 4], input_size=8, channels=1)
    model = ScnModel.fresh(cfg, seed=int(derive_rng(seed, "scn-seed", instance).integers(1 << 31)),
                           tune_depth="all-layers")
    rng = derive_rng(seed, "gradcheck-scn", instance)
    ctx = rng.uniform(0, 1, size=(3, 1, 8, 8)).astype(np.float32)
    off = rng.normal(size=(3, 8)).astype(np.float32)
    params = model.trainable_parameters()

    def build():
        return scn_forward(model, ctx, off)

    return _relu_safe_check("scn", build, params, seed, instance)


def run_suite(seed: int = 0, instances: int = 20) -> list[GradCheckResult]:
    results: list[GradCheckResult] = []
    for i in range(instances):
        results += op_checks(seed, i)
        results += composite_check(seed, i)
        results += scn_check(seed, i)
    return results
