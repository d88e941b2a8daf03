"""Model persistence in the shared binary envelope."""

from __future__ import annotations

import numpy as np

from . import envelope
from .envelope import ChecksumError, EnvelopeError, TruncatedPayloadError, VersionMismatchError
from .model import Encoder, EncoderConfig, ScnModel
from .tensor import Tensor

KIND = "scn-checkpoint"

__all__ = [
    "save_checkpoint", "load_checkpoint", "model_digest",
    "EnvelopeError", "ChecksumError", "TruncatedPayloadError", "VersionMismatchError",
]


def _header(model: ScnModel) -> dict:
    return {
        "kind": KIND,
        "encoder_config": model.config.to_dict(),
        "mode": model.mode,
        "tune_depth": model.tune_depth,
        "D2": model.d2,
        "ablated": model.ablated,
        "offset_scale": model.offset_scale,
    }


def save_checkpoint(model: ScnModel, path) -> None:
    envelope.write(path, _header(model), {k: t.data for k, t in model.named_tensors().items()})


def checkpoint_bytes(model: ScnModel) -> bytes:
    return envelope.pack(_header(model), {k: t.data for k, t in model.named_tensors().items()})


def model_digest(model: ScnModel) -> str:
    """Hex CRC-64 of the serialized model; used as a provenance id."""
    # the envelope already ends in the CRC of everything before it
    return checkpoint_bytes(model)[-8:][::-1].hex()


def load_checkpoint(path) -> ScnModel:
    header, tensors = envelope.read(path, kind=KIND)
    cfg = EncoderConfig(**header["encoder_config"])

    def group(prefix: str) -> dict[str, Tensor]:
        n = len(prefix)
        return {k[n:]: Tensor(np.array(v), name=k[n:]) for k, v in tensors.items() if k.startswith(prefix)}

    model = ScnModel(
        Encoder(cfg, group("top.")),
        Encoder(cfg, group("bottom.")),
        group("context."),
        mode=header["mode"],
        tune_depth=header["tune_depth"],
        ablated=bool(header["ablated"]),
        offset_scale=header["offset_scale"],
    )
    if model.d2 != header["D2"]:
        raise EnvelopeError("D2 in header disagrees with V1 shape")
    return model
