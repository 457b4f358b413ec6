"""Per-token asymmetric integer quantization of latent caches.

Each token row gets one scale and one zero-point:

    s = max(rowmax - rowmin, 1e-8) / (2^bits - 1)
    z = round(-rowmin / s)
    code = clamp(round(x / s) + z, 0, 2^bits - 1)

with round-half-away-from-zero fixed globally. SVD latents concentrate
energy in their leading channels, which stretches row ranges and hurts
low-bit accuracy; fusing a Hadamard rotation into the factor pair
(A, B) -> (A R, R^T B) spreads that energy across channels offline, at
zero decode cost, without changing the reconstructed product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Matrix, hadamard
from .decompose import DecomposedLayer, GroupFactors
from .errors import ValidationError

_RANGE_FLOOR = 1e-8
SUPPORTED_BITS = (2, 3, 4, 8)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0.0, np.floor(x + 0.5), np.ceil(x - 0.5))


@dataclass(frozen=True)
class QuantParams:
    bits: int
    rounding: str = "half-away-from-zero"  # fixed; one mode globally

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ValidationError(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        if self.rounding != "half-away-from-zero":
            raise ValidationError(f"rounding mode is fixed, got {self.rounding!r}")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1


@dataclass(frozen=True)
class QuantizedLatent:
    """Integer codes (n_tokens x r) with per-token scale and zero-point."""

    codes: np.ndarray
    scales: np.ndarray
    zero_points: np.ndarray
    bits: int

    def __post_init__(self):
        qmax = (1 << self.bits) - 1
        if self.codes.ndim != 2:
            raise ValidationError("codes must be 2-D")
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() > qmax):
            raise ValidationError(f"codes out of range [0, {qmax}]")
        if self.scales.shape != (self.codes.shape[0],):
            raise ValidationError("need exactly one scale per token row")
        if self.zero_points.shape != (self.codes.shape[0],):
            raise ValidationError("need exactly one zero-point per token row")
        if self.scales.size and self.scales.min() <= 0.0:
            raise ValidationError("scales must be positive")

    @property
    def n_tokens(self) -> int:
        return self.codes.shape[0]

    @property
    def width(self) -> int:
        return self.codes.shape[1]


def quantize(latent: Matrix, params: QuantParams) -> QuantizedLatent:
    x = latent.data
    return quantize_rows(x, params)


def quantize_rows(x: np.ndarray, params: QuantParams) -> QuantizedLatent:
    """Quantize raw rows (used by the cache, which may hold 0-row buffers)."""
    qmax = params.qmax
    if x.size == 0:
        empty = np.zeros((x.shape[0], x.shape[1]), dtype=np.uint8)
        return QuantizedLatent(empty, np.ones(x.shape[0]), np.zeros(x.shape[0], dtype=np.int64), params.bits)
    lo = x.min(axis=1)
    hi = x.max(axis=1)
    scales = np.maximum(hi - lo, _RANGE_FLOOR) / qmax
    zps = _round_half_away(-lo / scales).astype(np.int64)
    q = _round_half_away(x / scales[:, None]) + zps[:, None]
    codes = np.clip(q, 0, qmax).astype(np.uint8)
    return QuantizedLatent(codes, scales, zps, params.bits)


def dequantize(q: QuantizedLatent) -> Matrix:
    return Matrix.wrap(dequantize_rows(q))


def dequantize_rows(q: QuantizedLatent) -> np.ndarray:
    return (q.codes.astype(np.float64) - q.zero_points[:, None]) * q.scales[:, None]


def outlier_metric(latent: Matrix) -> float:
    """Mean over token rows of (infinity norm / RMS); higher means spikier."""
    x = latent.data
    inf = np.max(np.abs(x), axis=1)
    rms = np.sqrt(np.mean(x * x, axis=1))
    rms = np.maximum(rms, 1e-300)
    return float(np.mean(inf / rms))


@dataclass(frozen=True)
class RotatedLayer:
    """A DecomposedLayer whose factors carry a fused Hadamard rotation."""

    layer: DecomposedLayer
    rotation_dims: tuple[int, ...]


def fuse_hadamard(layer: DecomposedLayer) -> RotatedLayer:
    """Replace each group's (A, B) with (A R, R^T B), R the Hadamard matrix.

    The product A @ B is unchanged up to rounding, so decode algebra and
    caches built from the rotated factors reconstruct the same keys and
    values while their latents quantize far better.
    """
    groups = []
    dims = []
    for g in layer.groups:
        r = hadamard(g.rank).data
        groups.append(
            GroupFactors(
                a=Matrix.wrap(g.a.data @ r),
                b=Matrix.wrap(r.T @ g.b.data),
                rank=g.rank,
            )
        )
        dims.append(g.rank)
    rotated = DecomposedLayer(
        granularity=layer.granularity,
        groups=tuple(groups),
        d_model=layer.d_model,
        head_dim=layer.head_dim,
        n_heads=layer.n_heads,
    )
    return RotatedLayer(layer=rotated, rotation_dims=tuple(dims))


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Bit-pack codes as a little-endian bitstream.

    Code i occupies bits [i*bits, (i+1)*bits) counting from the least
    significant bit of byte 0, so 2/4/8-bit codes are little-endian within
    bytes and 3-bit codes pack 8 codes into every 3 bytes.
    """
    if bits not in SUPPORTED_BITS:
        raise ValidationError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
    flat = np.ascontiguousarray(codes, dtype=np.uint8).reshape(-1)
    if flat.size and flat.max() >= (1 << bits):
        raise ValidationError(f"code exceeds {bits}-bit range")
    bit_cols = (flat[:, None] >> np.arange(bits, dtype=np.uint8)) & 1
    return np.packbits(bit_cols.reshape(-1), bitorder="little").tobytes()


def unpack_codes(data: bytes, count: int, bits: int) -> np.ndarray:
    if bits not in SUPPORTED_BITS:
        raise ValidationError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
    need = math.ceil(count * bits / 8)
    if len(data) < need:
        raise ValidationError(f"packed payload too short: {len(data)} bytes for {count} codes")
    raw = np.frombuffer(data, dtype=np.uint8, count=need)
    stream = np.unpackbits(raw, bitorder="little")[: count * bits]
    weights = (1 << np.arange(bits)).astype(np.uint8)
    return (stream.reshape(count, bits) * weights).sum(axis=1).astype(np.uint8)
