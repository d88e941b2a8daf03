"""A small float32 tensor engine with tape-based reverse-mode autodiff and SGD.

Operations record themselves on the active :class:`Tape` whenever one of
their inputs requires a gradient. Without an active tape they run in
inference mode and nothing is recorded.

    with Tape() as tape:
        loss = mse_loss(fully_connected(x, W, b), y)
    backward(loss, tape)
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, asdict
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import derive_rng

DTYPE = np.float32
# Dtype op outputs are cast to. Only the finite-difference oracle widens it.
_compute_dtype = DTYPE


@contextlib.contextmanager
def oracle_precision():
    """Evaluate operations in float64 (for finite-difference reference values)."""
    global _compute_dtype
    prev, _compute_dtype = _compute_dtype, np.float64
    try:
        yield
    finally:
        _compute_dtype = prev


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ConfigurationError(ValueError):
    """Layer hyperparameters produce an invalid geometry."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in tensor data."""


class BackwardError(RuntimeError):
    """Misuse of :func:`backward` (non-scalar loss, reused tape, ...)."""


class Tensor:
    """Dense row-major float32 array with an optional gradient buffer."""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=DTYPE)
        if any(d <= 0 for d in arr.shape):
            raise DimensionError(f"dimensions must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # internal constructor: skips the defensive copy
        t = cls.__new__(cls)
        if not np.isfinite(arr).all():
            raise NonFiniteError("operation produced non-finite values")
        t.data = arr.astype(_compute_dtype, copy=False)
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


_active_tapes: list = []


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as operations execute, so the list is topologically
    sorted by construction. A tape supports exactly one :func:`backward`
    call; :meth:`reset` clears it for reuse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward_fn: Callable) -> None:
        output._tape = self
        self.nodes.append(_Node(tuple(inputs), output, backward_fn))


def _emit(arr: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    tracked = bool(_active_tapes) and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, requires_grad=tracked)
    if tracked:
        _active_tapes[-1].record(inputs, out, backward_fn)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- operations


def fully_connected(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``out[n, j] = b[j] + sum_i W[j, i] * x[n, i]``."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[1]:
        raise DimensionError(f"fully_connected: x{x.shape} incompatible with W{W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise DimensionError(f"fully_connected: bias {b.shape} for {W.shape[0]} outputs")
    out = x.data @ W.data.T
    if b is not None:
        out = out + b.data
    inputs = (x, W) if b is None else (x, W, b)

    def back(g):
        grads = [g @ W.data, g.T @ x.data]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _emit(out, inputs, back)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: {a.shape} vs {b.shape}")
    return _emit(a.data + b.data, (a, b), lambda g: [g, g])


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return _emit(out, (x,), lambda g: [g.reshape(x.shape)])


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(x, (x.shape[0], -1))


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - kernel
    if kernel > size + 2 * pad or span % stride:
        raise ConfigurationError(
            f"kernel {kernel}, stride {stride}, pad {pad} do not tile input size {size}"
        )
    return span // stride + 1


def conv2d(x: Tensor, K: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW batch with FCkk kernels."""
    if x.data.ndim != 4 or K.data.ndim != 4 or x.shape[1] != K.shape[1]:
        raise DimensionError(f"conv2d: x{x.shape} incompatible with K{K.shape}")
    if b.shape != (K.shape[0],):
        raise DimensionError(f"conv2d: bias {b.shape} for {K.shape[0]} filters")
    N, C, H, W = x.shape
    F, _, kh, kw = K.shape
    Ho = conv_output_size(H, kh, stride, pad)
    Wo = conv_output_size(W, kw, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, Ho, Wo, C, kh, kw) -> rows of patches
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw)
    Kmat = K.data.reshape(F, -1)
    out = (cols @ Kmat.T + b.data).reshape(N, Ho, Wo, F).transpose(0, 3, 1, 2)

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, F)
        dK = (gm.T @ cols).reshape(K.shape)
        db = gm.sum(axis=0)
        dcols = (gm @ Kmat).reshape(N, Ho, Wo, C, kh, kw)
        dxp = np.zeros(xp.shape, dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += (
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        dx = dxp[:, :, pad : pad + H, pad : pad + W] if pad else dxp
        return [dx, dK, db]

    return _emit(np.ascontiguousarray(out), (x, K, b), back)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    dt = _compute_dtype
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(dt)
    # keep the open interval (0, 1) even where float rounding saturates
    y = np.clip(y, np.finfo(dt).tiny, np.nextafter(dt(1), dt(0)))
    return _emit(y, (x,), lambda g: [g * y * (1 - y)])


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, DTYPE(0)), (x,), lambda g: [g * mask])


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """``(1/N) * sum_n ||pred_n - target_n||^2`` over the leading axis."""
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: {pred.shape} vs {target.shape}")
    if target.requires_grad:
        raise BackwardError("mse_loss target must not require a gradient")
    n = pred.shape[0] if pred.data.ndim else 1
    diff = pred.data - target.data
    loss = np.asarray(np.sum(diff.astype(np.float64) ** 2) / n, dtype=DTYPE)
    return _emit(loss, (pred, target), lambda g: [g * (2.0 / n) * diff, None])


# ------------------------------------------------------------------ backward


def backward(loss: Tensor, tape: Optional[Tape] = None, params: Iterable[Tensor] = ()) -> None:
    """Populate ``.grad`` of every gradient-requiring leaf on the tape.

    Leaves that do not influence ``loss`` get an exact zero gradient. Extra
    ``params`` that never touched the tape are zero-filled too. Gradients are
    assigned, not accumulated; a second call on the same tape is an error.
    """
    tape = tape or loss._tape
    if loss.data.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        raise BackwardError("loss was not recorded on any tape")
    if tape.consumed:
        raise BackwardError("tape already used for backward; call tape.reset() first")
    tape.consumed = True

    produced = {id(n.output) for n in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=DTYPE).reshape(t.shape)
            k = id(t)
            grads[k] = grads[k] + gi if k in grads else gi
    for t in list(leaves.values()) + [p for p in params if p.requires_grad]:
        g = grads.get(id(t))
        t.grad = g.copy() if g is not None else np.zeros(t.shape, dtype=DTYPE)
        if not np.isfinite(t.grad).all():
            raise NonFiniteError(f"non-finite gradient for {t.name or 'tensor'}")


# ---------------------------------------------------------------------- init


def fans(shape: Sequence[int]) -> tuple[int, int]:
    if len(shape) == 1:
        return shape[0], shape[0]
    receptive = math.prod(shape[2:]) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def init_weights(shape: Sequence[int], scheme: str = "uniform-fan-balanced", seed: int = 0,
                 *purpose, requires_grad: bool = True, name: Optional[str] = None) -> Tensor:
    """Fresh parameter tensor; deterministic in ``(seed, *purpose)``.

    ``uniform-fan-balanced`` draws from U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    """
    shape = tuple(int(s) for s in shape)
    if scheme == "zeros":
        data = np.zeros(shape, dtype=DTYPE)
    elif scheme == "uniform-fan-balanced":
        fan_in, fan_out = fans(shape)
        a = math.sqrt(6.0 / (fan_in + fan_out))
        data = derive_rng(seed, "init", *purpose).uniform(-a, a, size=shape).astype(DTYPE)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Tensor(data, requires_grad=requires_grad, name=name)


# ----------------------------------------------------------------------- SGD


@dataclass
class SgdConfig:
    base_lr: float = 1e-3
    lr_drop_epoch: int = 100
    dropped_lr: float = 1e-4
    weight_decay: float = 5e-4
    momentum: float = 0.0
    batch_size: int = 64
    max_epochs: int = 200
    seed: int = 0
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if self.base_lr < 0 or self.dropped_lr < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.base_lr > 0 and not self.dropped_lr < self.base_lr:
            raise ValueError("dropped_lr must be smaller than base_lr")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1 or self.lr_drop_epoch < 1:
            raise ValueError("batch_size, max_epochs and lr_drop_epoch must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def lr(self, epoch: int) -> float:
        return self.base_lr if epoch < self.lr_drop_epoch else self.dropped_lr

    def to_dict(self) -> dict:
        return asdict(self)


def sgd_step(params: Sequence[Tensor], config: SgdConfig, epoch: int,
             velocity: Optional[dict] = None) -> None:
    """In-place update ``w <- w - lr(epoch) * v`` with ``v = momentum * v + g + wd * w``.

    ``velocity`` maps parameter ids to momentum buffers and is updated in place.
    """
    lr = DTYPE(config.lr(epoch))
    wd = DTYPE(config.weight_decay)
    mom = DTYPE(config.momentum)
    grads = [p.grad if p.grad is not None else np.zeros(p.shape, DTYPE) for p in params]
    if config.clip_norm is not None:
        total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
        if total > config.clip_norm:
            grads = [g * DTYPE(config.clip_norm / total) for g in grads]
    for p, g in zip(params, grads):
        step = g + wd * p.data
        if mom:
            buf = velocity.get(id(p)) if velocity is not None else None
            step = step if buf is None else mom * buf + step
            if velocity is not None:
                velocity[id(p)] = step
        p.data -= lr * step
        if not np.isfinite(p.data).all():
            raise NonFiniteError(f"parameter {p.name or '<unnamed>'} became non-finite")
