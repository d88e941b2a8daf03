"""Binary PGM (P5) and PPM (P6) images, 8-bit."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _tokens(data: bytes, count: int) -> tuple[list[int], int]:
    # header tokens are whitespace separated; '#' starts a comment running to end of line
    out, pos, n = [], 0, len(data)
    while len(out) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        out.append(data[start:pos])
    return out, pos


def decode(data: bytes) -> np.ndarray:
    """(H, W) uint8 for P5, (H, W, 3) for P6."""
    toks, pos = _tokens(data, 4)
    magic = toks[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in toks[1:])
    except ValueError:
        raise ImageFormatError("non-integer header field") from None
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit images are supported (maxval {maxval})")
    pos += 1  # single whitespace byte before the raster
    chans = 3 if magic == b"P6" else 1
    size = width * height * chans
    raster = data[pos : pos + size]
    if len(raster) != size:
        raise ImageFormatError(f"raster has {len(raster)} bytes, expected {size}")
    arr = np.frombuffer(raster, dtype=np.uint8).copy()
    return arr.reshape(height, width, 3) if chans == 3 else arr.reshape(height, width)


def encode(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise ImageFormatError("images must be uint8")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ImageFormatError(f"cannot store image of shape {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def read_image(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def write_image(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode(image))
