"""Global descriptors from convolutional feature maps.

A feature map is a float array shaped ``(C, H, W)``; MAC, SPoC and GeM also
accept leading batch axes ``(..., C, H, W)``. All reductions flatten the
spatial grid row-major and sum per channel, so results are reproducible
bit-for-bit.
"""

import math
from dataclasses import dataclass

import numpy as np

from .binio import expect_eof, expect_magic, read_f32, read_u32, write_f32, write_u32
from .errors import DegenerateVectorError, ShapeError

KINDS = ("MAC", "SPoC", "GeM", "RMAC", "CroW")
FMAP_MAGIC = b"IRFMAPV1"
CROW_EPS = 1e-6


@dataclass(frozen=True)
class AggregatorConfig:
    kind: str = "GeM"
    gem_p: float = 3.0
    rmac_levels: int = 3
    rmac_overlap: float = 0.4

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError("unknown aggregator %r (expected one of %s)" % (self.kind, ", ".join(KINDS)))
        if not self.gem_p > 0:
            raise ValueError("gem_p must be > 0")
        if self.rmac_levels < 1:
            raise ValueError("rmac_levels must be >= 1")
        if not 0 < self.rmac_overlap < 1:
            raise ValueError("rmac_overlap must lie in (0, 1)")


def check_fmap(fm, batched=False):
    fm = np.asarray(fm, dtype=np.float64)
    if fm.ndim < 3 or (not batched and fm.ndim != 3):
        raise ShapeError("feature map must be C x H x W, got shape %s" % (fm.shape,))
    if min(fm.shape[-3:]) < 1:
        raise ShapeError("feature map dimensions must be >= 1")
    if not np.all(np.isfinite(fm)):
        raise ValueError("feature map contains non-finite values")
    return fm


def _flat(fm):
    return fm.reshape(fm.shape[:-2] + (-1,))


def _spatial_mean(fm):
    flat = _flat(fm)
    return flat.sum(axis=-1) / flat.shape[-1]


def mac(fm):
    fm = check_fmap(fm, batched=True)
    return _flat(fm).max(axis=-1)


def spoc(fm):
    """Plain average pooling (no center prior)."""
    fm = check_fmap(fm, batched=True)
    return _spatial_mean(fm)


def gem(fm, p=3.0):
    """Generalized mean pooling ``(mean x**p) ** (1/p)`` over clamped activations.

    For ``p != 1`` each channel is scaled by its maximum before the power, so
    large exponents neither overflow nor underflow.
    """
    if not p > 0:
        raise ValueError("GeM exponent must be > 0, got %r" % (p,))
    fm = np.maximum(check_fmap(fm, batched=True), 0.0)
    if p == 1:
        return _spatial_mean(fm)
    peak = _flat(fm).max(axis=-1)
    safe = np.where(peak > 0, peak, 1.0)
    scaled = fm / safe[..., None, None]
    return peak * _spatial_mean(scaled**p) ** (1.0 / p)


def _axis_offsets(length, side, overlap):
    if side >= length:
        return [0]
    span = length - side
    max_step = (1.0 - overlap) * side
    n = int(math.ceil(span / max_step - 1e-9)) + 1
    step = span / (n - 1)
    # sub-pixel steps collapse onto the integer grid
    return sorted({int(math.floor(i * step + 0.5)) for i in range(n)})


def rmac_regions(height, width, levels=3, overlap=0.4):
    """Square regions ``(y, x, side)`` for every scale, scale-major then row-major."""
    regions = []
    for level in range(1, levels + 1):
        side = max(1, (2 * min(height, width)) // (level + 1))
        for y in _axis_offsets(height, side, overlap):
            for x in _axis_offsets(width, side, overlap):
                regions.append((y, x, side))
    return regions


def rmac(fm, cfg=None):
    fm = check_fmap(fm)
    cfg = cfg or AggregatorConfig(kind="RMAC")
    C, H, W = fm.shape
    total = np.zeros(C)
    for y, x, side in rmac_regions(H, W, cfg.rmac_levels, cfg.rmac_overlap):
        v = fm[:, y : y + side, x : x + side].reshape(C, -1).max(axis=1)
        norm = np.linalg.norm(v)
        # all-zero regions carry no direction
        if norm > 0:
            total += v / norm
    norm = np.linalg.norm(total)
    if norm == 0:
        raise DegenerateVectorError("R-MAC of an all-zero feature map is undefined")
    return total / norm


def crow_channel_weights(fm):
    """Sparsity-based channel weights ``log((eps + sum Q) / (eps + Q_c))``."""
    fm = np.maximum(check_fmap(fm), 0.0)
    flat = fm.reshape(fm.shape[0], -1)
    Q = (flat > 0).sum(axis=1) / flat.shape[1]
    return np.log((CROW_EPS + Q.sum()) / (CROW_EPS + Q))


def crow_spatial_weights(fm):
    """Square-root normalized channel sum per position, zero for an all-zero map."""
    fm = np.maximum(check_fmap(fm), 0.0)
    S = fm.sum(axis=0)
    denom = math.sqrt(float((S * S).sum()))
    return np.sqrt(S / denom) if denom > 0 else np.zeros_like(S)


def crow(fm):
    """Cross-dimensional weighting with square-root spatial normalization."""
    fm = np.maximum(check_fmap(fm), 0.0)
    flat = fm.reshape(fm.shape[0], -1)
    spatial = crow_spatial_weights(fm).reshape(-1)
    return crow_channel_weights(fm) * (flat * spatial).sum(axis=1)


def aggregate(fm, cfg):
    if cfg.kind == "MAC":
        return mac(fm)
    if cfg.kind == "SPoC":
        return spoc(fm)
    if cfg.kind == "GeM":
        return gem(fm, cfg.gem_p)
    if cfg.kind == "RMAC":
        return rmac(fm, cfg)
    return crow(fm)


def write_fmap(fm, path):
    fm = check_fmap(fm)
    with open(path, "wb") as fh:
        fh.write(FMAP_MAGIC)
        write_u32(fh, *fm.shape)
        write_f32(fh, fm)


def read_fmap(path):
    with open(path, "rb") as fh:
        expect_magic(fh, FMAP_MAGIC)
        C, H, W = read_u32(fh, 3)
        if min(C, H, W) < 1:
            raise ShapeError("feature map dimensions must be >= 1")
        values = read_f32(fh, C * H * W)
        expect_eof(fh)
    return values.reshape(C, H, W)
