"""Residual linear adapters over frozen embeddings, their flat parameter
layout, and the CADP checkpoint format.

CADP layout (little-endian): magic b"CADP", u32 version (1), u32 dim H,
then float64 blocks in layout order (W_img row-major, b_img, W_txt, b_txt).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import FormatError, NormalizationError, NumericError, ShapeError

CADP_MAGIC = b"CADP"
CADP_VERSION = 1


@dataclass
class AdapterSide:
    weight: np.ndarray  # (H, H)
    bias: np.ndarray  # (H,)


@dataclass(frozen=True)
class ParameterLayout:
    """Block order and offsets of the flat parameter vector."""

    dim: int

    @property
    def blocks(self) -> tuple[tuple[str, tuple[int, ...], int], ...]:
        h = self.dim
        return (("w_img", (h, h), 0),
                ("b_img", (h,), h * h),
                ("w_txt", (h, h), h * h + h),
                ("b_txt", (h,), 2 * h * h + h))

    @property
    def size(self) -> int:
        return 2 * (self.dim * self.dim + self.dim)

    def block(self, values: np.ndarray, name: str) -> np.ndarray:
        for block_name, shape, offset in self.blocks:
            if block_name == name:
                count = int(np.prod(shape))
                return values[offset:offset + count].reshape(shape)
        raise ShapeError(f"unknown parameter block {name!r}")


@dataclass
class Adapter:
    """Learnable residual map per modality: x -> normalize(x + W x + b).

    Zero-initialized parameters reproduce the frozen encoder exactly.
    """

    image: AdapterSide
    text: AdapterSide

    @classmethod
    def zeros(cls, dim: int) -> "Adapter":
        return cls(AdapterSide(np.zeros((dim, dim)), np.zeros(dim)),
                   AdapterSide(np.zeros((dim, dim)), np.zeros(dim)))

    @property
    def dim(self) -> int:
        return self.image.bias.shape[0]

    @property
    def layout(self) -> ParameterLayout:
        return ParameterLayout(self.dim)

    def to_flat(self) -> np.ndarray:
        return np.concatenate([
            self.image.weight.ravel(), self.image.bias,
            self.text.weight.ravel(), self.text.bias,
        ])

    @classmethod
    def from_flat(cls, values: np.ndarray, dim: int) -> "Adapter":
        layout = ParameterLayout(dim)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (layout.size,):
            raise ShapeError(f"expected {layout.size} parameters, got {values.shape}")
        return cls(
            AdapterSide(layout.block(values, "w_img").copy(), layout.block(values, "b_img").copy()),
            AdapterSide(layout.block(values, "w_txt").copy(), layout.block(values, "b_txt").copy()),
        )

    def encode_image(self, base: np.ndarray) -> np.ndarray:
        return encode(self.image, base)

    def encode_text(self, base: np.ndarray) -> np.ndarray:
        return encode(self.text, base)


def encode(side: AdapterSide, base: np.ndarray) -> np.ndarray:
    """normalize(base + W base + b), for one vector or a batch of rows."""
    return encode_with_cache(side, np.atleast_2d(base))[0].reshape(np.shape(base))


def encode_with_cache(side: AdapterSide, base: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch encode returning (unit rows U, pre-normalization norms r).

    The cache is what the backward pass needs: dL/dz = (g - (u.g) u) / r.
    """
    if not (np.all(np.isfinite(side.weight)) and np.all(np.isfinite(side.bias))):
        raise NumericError("adapter parameters are not finite")
    base = np.asarray(base, dtype=np.float64)
    if base.shape[1] != side.bias.shape[0]:
        raise ShapeError(f"embedding dim {base.shape[1]} != adapter dim {side.bias.shape[0]}")
    z = base + base @ side.weight.T + side.bias
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0.0):
        raise NormalizationError("adapter produced a zero vector")
    return z / norms[:, None], norms


# ---------------------------------------------------------------------------
# Checkpoints

_CKPT_HEADER = struct.Struct("<4sII")


def write_checkpoint(adapter: Adapter, path: str | Path) -> None:
    flat = adapter.to_flat()
    if not np.all(np.isfinite(flat)):
        raise NumericError("refusing to checkpoint non-finite parameters")
    payload = _CKPT_HEADER.pack(CADP_MAGIC, CADP_VERSION, adapter.dim)
    Path(path).write_bytes(payload + flat.astype("<f8").tobytes())


def read_checkpoint(path: str | Path) -> Adapter:
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEADER.size:
        raise FormatError(f"truncated checkpoint: {len(data)} bytes")
    magic, version, dim = _CKPT_HEADER.unpack_from(data, 0)
    if magic != CADP_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != CADP_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    expected = _CKPT_HEADER.size + 8 * ParameterLayout(dim).size
    if len(data) != expected:
        raise FormatError(f"checkpoint length {len(data)} != expected {expected} at offset {_CKPT_HEADER.size}")
    values = np.frombuffer(data, dtype="<f8", offset=_CKPT_HEADER.size).astype(np.float64)
    return Adapter.from_flat(values, dim)
