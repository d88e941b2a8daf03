"""Two-stream spatial context network.

The top encoder is frozen and defines regression targets; the bottom encoder
starts as a bitwise copy of it and feeds a context module that, given the
corner offset between two patches, predicts the top encoder's features for
the other patch:

    h1 = g(context_patch; W_bottom)
    h2 = sigmoid(V1 h1 + V_loc o + b2)
    h3 = V2 h2 + b3

Training minimizes the batch-mean squared distance between h3 and the
target (top-stream features, or raw target pixels in ``raw-pixel`` mode).
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .rng import derive_rng
from .tensor import DTYPE, SgdConfig, Tensor

log = logging.getLogger(__name__)

MODES = ("feature", "raw-pixel")
TUNE_DEPTHS = ("fc-only", "fc-plus-last-conv", "all-layers")
OFFSET_DIM = 8


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or parameter."""

    def __init__(self, epoch: int, batch: int, report: "TrainingReport"):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.report = report


@dataclass
class EncoderConfig:
    conv_layers: list = field(default_factory=lambda: [(8, 4, 2, 1), (16, 4, 2, 1), (32, 4, 2, 1)])
    fc_dims: list = field(default_factory=lambda: [128, 64])
    input_size: int = 32
    channels: int = 1

    def __post_init__(self):
        self.conv_layers = [tuple(int(v) for v in layer) for layer in self.conv_layers]
        self.fc_dims = [int(d) for d in self.fc_dims]
        if not self.fc_dims:
            raise ValueError("encoder needs at least one fully-connected layer")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if any(v <= 0 for v in self.fc_dims + [self.input_size]):
            raise ValueError("all encoder dimensions must be positive")
        for filters, k, stride, pad in self.conv_layers:
            if filters <= 0 or k <= 0 or stride <= 0 or pad < 0:
                raise ValueError(f"bad conv layer {(filters, k, stride, pad)}")
        self.flat_dim  # validates spatial integrality

    @property
    def feature_dim(self) -> int:
        return self.fc_dims[-1]

    @property
    def flat_dim(self) -> int:
        side, chans = self.input_size, self.channels
        for filters, k, stride, pad in self.conv_layers:
            side = T.conv_output_size(side, k, stride, pad)
            chans = filters
        return side * side * chans

    @property
    def pixel_dim(self) -> int:
        return self.input_size * self.input_size * self.channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_layers"] = [list(c) for c in self.conv_layers]
        return d


class Encoder:
    """conv/relu stack followed by fully-connected layers; the last fc is linear."""

    def __init__(self, config: EncoderConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: EncoderConfig, seed: int, scheme: str = "uniform-fan-balanced") -> "Encoder":
        params: dict[str, Tensor] = {}
        chans = config.channels
        for i, (filters, k, _, _) in enumerate(config.conv_layers):
            params[f"conv{i}.K"] = T.init_weights((filters, chans, k, k), scheme, seed, "conv", i, name=f"conv{i}.K")
            params[f"conv{i}.b"] = T.init_weights((filters,), "zeros", name=f"conv{i}.b")
            chans = filters
        width = config.flat_dim
        for i, d in enumerate(config.fc_dims):
            params[f"fc{i}.W"] = T.init_weights((d, width), scheme, seed, "fc", i, name=f"fc{i}.W")
            params[f"fc{i}.b"] = T.init_weights((d,), "zeros", name=f"fc{i}.b")
            width = d
        return cls(config, params)

    def copy(self, requires_grad: Optional[bool] = None) -> "Encoder":
        params = {}
        for k, p in self.params.items():
            rg = p.requires_grad if requires_grad is None else requires_grad
            params[k] = Tensor(p.data, requires_grad=rg, name=p.name)
        return Encoder(self.config, params)

    def conv_names(self, i: int) -> list[str]:
        return [f"conv{i}.K", f"conv{i}.b"]

    def fc_names(self) -> list[str]:
        return [n for i in range(len(self.config.fc_dims)) for n in (f"fc{i}.W", f"fc{i}.b")]

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for i, (_, _, stride, pad) in enumerate(self.config.conv_layers):
            h = T.relu(T.conv2d(h, self.params[f"conv{i}.K"], self.params[f"conv{i}.b"], stride, pad))
        h = T.flatten(h)
        last = len(self.config.fc_dims) - 1
        for i in range(last + 1):
            h = T.fully_connected(h, self.params[f"fc{i}.W"], self.params[f"fc{i}.b"])
            if i < last:
                h = T.relu(h)
        return h

    def check_patches(self, patches: np.ndarray) -> np.ndarray:
        cfg = self.config
        x = np.asarray(patches, dtype=DTYPE)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != (cfg.channels, cfg.input_size, cfg.input_size):
            raise T.DimensionError(
                f"expected patches of shape (N, {cfg.channels}, {cfg.input_size}, {cfg.input_size}), got {x.shape}"
            )
        return x

    def features(self, patches: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Inference-mode features for a stack of patches."""
        x = self.check_patches(patches)
        out = [self.forward(Tensor._wrap(x[s : s + batch_size], False)).data for s in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)


def pretrain_reference_encoder(config: EncoderConfig, patches: np.ndarray, labels: Sequence[int],
                               sgd: SgdConfig, epochs: Optional[int] = None) -> Encoder:
    """Supervised warm-up producing the frozen reference encoder.

    A temporary linear head maps features to one-hot class targets under a
    squared loss; the head is discarded afterwards.
    """
    labels = np.asarray(labels)
    classes = int(labels.max()) + 1
    enc = Encoder.init(config, sgd.seed)
    for p in enc.params.values():
        p.requires_grad = True
    head_W = T.init_weights((classes, config.feature_dim), "uniform-fan-balanced", sgd.seed, "head", name="head.W")
    head_b = T.init_weights((classes,), "zeros", name="head.b")
    params = list(enc.params.values()) + [head_W, head_b]
    onehot = np.eye(classes, dtype=DTYPE)[labels]
    x = enc.check_patches(patches)
    velocity: dict = {}
    for epoch in range(epochs or sgd.max_epochs):
        order = derive_rng(sgd.seed, "pretrain-shuffle", epoch).permutation(len(x))
        for s in range(0, len(x), sgd.batch_size):
            idx = order[s : s + sgd.batch_size]
            with T.Tape() as tape:
                scores = T.fully_connected(enc.forward(Tensor._wrap(x[idx], False)), head_W, head_b)
                loss = T.mse_loss(scores, Tensor._wrap(onehot[idx], False))
            T.backward(loss, tape, params=params)
            T.sgd_step(params, sgd, epoch, velocity)
    return enc.copy(requires_grad=False)


@dataclass
class TrainingReport:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    test_loss: list = field(default_factory=list)
    initial_train_loss: Optional[float] = None
    initial_test_loss: Optional[float] = None


@dataclass
class PairBatch:
    """Stacked training arrays: context patches, offsets, and targets."""

    context: np.ndarray  # (N, C, S, S)
    offsets: np.ndarray  # (N, 8)
    targets: np.ndarray  # (N, Dtar)

    def __len__(self) -> int:
        return len(self.offsets)

    def take(self, idx) -> "PairBatch":
        return PairBatch(self.context[idx], self.offsets[idx], self.targets[idx])


class ScnModel:
    """Frozen top encoder, trainable bottom encoder and context weights."""

    def __init__(self, top: Encoder, bottom: Encoder, context: dict[str, Tensor], mode: str = "feature",
                 tune_depth: str = "fc-only", ablated: bool = False, offset_scale: float = 1.0):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if tune_depth not in TUNE_DEPTHS:
            raise ValueError(f"tune_depth must be one of {TUNE_DEPTHS}")
        if context["V_loc"].shape[1] != OFFSET_DIM:
            raise T.DimensionError("V_loc must have 8 columns")
        self.top = top
        self.bottom = bottom
        self.context = context
        self.mode = mode
        self.tune_depth = tune_depth
        self.ablated = ablated
        self.offset_scale = float(offset_scale)
        for p in self.top.params.values():
            p.requires_grad = False
        self._apply_trainability()

    # construction -------------------------------------------------------

    @classmethod
    def from_reference(cls, reference: Encoder, mode: str = "feature", tune_depth: str = "fc-only",
                       d2: Optional[int] = None, seed: int = 0, offset_scale: float = 1.0) -> "ScnModel":
        cfg = reference.config
        d = cfg.feature_dim
        d2 = d2 or d
        dtar = d if mode == "feature" else cfg.pixel_dim
        context = {
            "V1": T.init_weights((d2, d), "uniform-fan-balanced", seed, "context", "V1", name="V1"),
            "V_loc": T.init_weights((d2, OFFSET_DIM), "uniform-fan-balanced", seed, "context", "V_loc", name="V_loc"),
            "b2": T.init_weights((d2,), "zeros", name="b2"),
            # a raw-pixel decoder starts at zero so an untrained model paints black
            "V2": T.init_weights((dtar, d2), "zeros" if mode == "raw-pixel" else "uniform-fan-balanced",
                                 seed, "context", "V2", name="V2"),
            "b3": T.init_weights((dtar,), "zeros", name="b3"),
        }
        return cls(reference.copy(False), reference.copy(False), context, mode, tune_depth,
                   offset_scale=offset_scale)

    @classmethod
    def fresh(cls, config: EncoderConfig, seed: int = 0, **kwargs) -> "ScnModel":
        """Model around a randomly initialized reference encoder."""
        return cls.from_reference(Encoder.init(config, seed), seed=seed, **kwargs)

    def copy(self) -> "ScnModel":
        return copy.deepcopy(self)

    # parameters ---------------------------------------------------------

    @property
    def config(self) -> EncoderConfig:
        return self.top.config

    @property
    def d2(self) -> int:
        return self.context["V1"].shape[0]

    @property
    def target_dim(self) -> int:
        return self.context["V2"].shape[0]

    def _bottom_trainable_names(self) -> list[str]:
        names = self.bottom.fc_names()
        n_conv = len(self.config.conv_layers)
        if self.tune_depth == "fc-plus-last-conv" and n_conv:
            names += self.bottom.conv_names(n_conv - 1)
        elif self.tune_depth == "all-layers":
            names += [n for i in range(n_conv) for n in self.bottom.conv_names(i)]
        return names

    def _apply_trainability(self) -> None:
        trainable = set(self._bottom_trainable_names())
        for name, p in self.bottom.params.items():
            p.requires_grad = name in trainable
        for name, p in self.context.items():
            p.requires_grad = not (self.ablated and name == "V_loc")

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.bottom.params.values() if p.requires_grad] + [
            p for p in self.context.values() if p.requires_grad
        ]

    def named_tensors(self) -> dict[str, Tensor]:
        out = {f"top.{k}": v for k, v in self.top.params.items()}
        out.update({f"bottom.{k}": v for k, v in self.bottom.params.items()})
        out.update({f"context.{k}": v for k, v in self.context.items()})
        return out

    # forward ------------------------------------------------------------

    def scaled_offsets(self, offsets) -> np.ndarray:
        o = np.asarray(offsets, dtype=np.float64)
        if o.ndim == 1:
            o = o[None]
        if o.shape[-1] != OFFSET_DIM:
            raise T.DimensionError(f"offsets must have 8 components, got {o.shape}")
        if not np.isfinite(o).all():
            raise ValueError("offset vector contains non-finite values")
        return (o * self.offset_scale).astype(DTYPE)

    def context_module(self, h1: Tensor, offsets: np.ndarray) -> Tensor:
        c = self.context
        pre = T.fully_connected(h1, c["V1"], c["b2"])
        if not self.ablated:
            pre = T.add(pre, T.fully_connected(Tensor._wrap(self.scaled_offsets(offsets), False), c["V_loc"]))
        return T.fully_connected(T.sigmoid(pre), c["V2"], c["b3"])


def scn_forward(model: ScnModel, context_patches: np.ndarray, offsets: np.ndarray) -> Tensor:
    """h3 for a batch of (context patch, offset) inputs; recorded on any active tape."""
    x = model.bottom.check_patches(context_patches)
    h1 = model.bottom.forward(Tensor._wrap(x, False))
    return model.context_module(h1, offsets)


def encode(model: ScnModel, patch: np.ndarray, stream: str = "bottom") -> np.ndarray:
    """Feature vector(s) for one patch (C,S,S) or a stack (N,C,S,S)."""
    if stream not in ("top", "bottom"):
        raise ValueError("stream must be 'top' or 'bottom'")
    enc = model.top if stream == "top" else model.bottom
    feats = enc.features(patch)
    return feats[0] if np.ndim(patch) == 3 else feats


def context_predict(model: ScnModel, h1: np.ndarray, offset: np.ndarray) -> np.ndarray:
    """h3 from bottom-stream features and offset(s); inference only."""
    h = np.asarray(h1, dtype=DTYPE)
    single = h.ndim == 1
    h = h[None] if single else h
    o = np.asarray(offset, dtype=np.float64)
    if o.shape[-1:] != (OFFSET_DIM,):
        raise T.DimensionError(f"offsets must have 8 components, got {o.shape}")
    o = np.broadcast_to(o, (len(h), OFFSET_DIM)) if o.ndim == 1 else o
    out = model.context_module(Tensor._wrap(h, False), o).data
    return out[0] if single else out


def targets_for(model: ScnModel, target_patches: np.ndarray) -> np.ndarray:
    """Regression targets: frozen top features, or flattened pixels in raw-pixel mode."""
    x = model.top.check_patches(target_patches)
    if model.mode == "raw-pixel":
        return x.reshape(len(x), -1).copy()
    return model.top.features(x)


def make_batch(model: ScnModel, pairs: Sequence) -> PairBatch:
    """Stack PairSamples; patch_j is the context (bottom) input, patch_i the target."""
    if not pairs:
        raise ValueError("empty batch")
    context = np.stack([p.patch_j for p in pairs]).astype(DTYPE)
    target = np.stack([p.patch_i for p in pairs]).astype(DTYPE)
    offsets = np.stack([p.offset for p in pairs]).astype(np.float64)
    return PairBatch(context, offsets, targets_for(model, target))


def scn_loss(model: ScnModel, batch) -> Tensor:
    """Batch-mean squared distance between predicted and target representations."""
    if not isinstance(batch, PairBatch):
        batch = make_batch(model, batch)
    if len(batch) == 0:
        raise ValueError("empty batch")
    return T.mse_loss(scn_forward(model, batch.context, batch.offsets), Tensor._wrap(batch.targets, False))


def evaluate_loss(model: ScnModel, batch: PairBatch, chunk: int = 256) -> float:
    total = 0.0
    for s in range(0, len(batch), chunk):
        part = batch.take(slice(s, s + chunk))
        pred = scn_forward(model, part.context, part.offsets).data.astype(np.float64)
        total += float(np.sum((pred - part.targets) ** 2))
    return total / len(batch)


def train(model: ScnModel, train_set, test_set=None, config: Optional[SgdConfig] = None,
          eval_each_epoch: bool = True,
          on_epoch: Optional[Callable[[int, TrainingReport], None]] = None) -> TrainingReport:
    """Mini-batch SGD on the squared feature-regression loss.

    ``on_epoch(0, report)`` fires once the initial losses are known, then
    after every evaluated epoch.

    ``train_set``/``test_set`` are PairSample lists or prebuilt PairBatches.
    Only parameters allowed by ``model.tune_depth`` (and not V_loc when
    ablated) are updated. Losses are re-evaluated over the full train and
    test sets in canonical order after each epoch.
    """
    config = config or SgdConfig()
    train_b = train_set if isinstance(train_set, PairBatch) else make_batch(model, train_set)
    test_b = None
    if test_set is not None and len(test_set):
        test_b = test_set if isinstance(test_set, PairBatch) else make_batch(model, test_set)
    params = model.trainable_parameters()
    velocity: dict = {}
    report = TrainingReport()
    report.initial_train_loss = evaluate_loss(model, train_b)
    report.initial_test_loss = evaluate_loss(model, test_b) if test_b is not None else None
    if on_epoch is not None:
        on_epoch(0, report)

    # non-finite values are caught by the tensor layer; numpy's own warnings would only add noise
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(config.max_epochs):
            _run_epoch(model, train_b, test_b, params, config, epoch, velocity, report,
                       eval_each_epoch or epoch == config.max_epochs - 1)
            if on_epoch is not None and report.epochs and report.epochs[-1] == epoch + 1:
                on_epoch(epoch + 1, report)
    return report


def _run_epoch(model, train_b, test_b, params, config, epoch, velocity, report, evaluate) -> None:
    order = derive_rng(config.seed, "shuffle", epoch).permutation(len(train_b))
    bi = 0
    try:
        for bi, s in enumerate(range(0, len(order), config.batch_size)):
            part = train_b.take(order[s : s + config.batch_size])
            with T.Tape() as tape:
                loss = scn_loss(model, part)
            T.backward(loss, tape, params=params)
            T.sgd_step(params, config, epoch, velocity)
        if evaluate:
            train_loss = evaluate_loss(model, train_b)
            test_loss = evaluate_loss(model, test_b) if test_b is not None else float("nan")
    except T.NonFiniteError as e:
        log.error("divergence at epoch %d batch %d: %s", epoch + 1, bi, e)
        raise DivergenceError(epoch + 1, bi, report) from e
    if evaluate:
        report.epochs.append(epoch + 1)
        report.train_loss.append(train_loss)
        report.test_loss.append(test_loss)
        log.info("epoch %d train %.6f test %.6f", epoch + 1, train_loss, test_loss)


def ablate_offset(model: ScnModel) -> ScnModel:
    """Copy of ``model`` whose context module ignores offsets entirely."""
    out = model.copy()
    out.context["V_loc"].data[...] = 0
    out.ablated = True
    out._apply_trainability()
    return out
