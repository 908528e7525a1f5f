"""Volume containers and the resample -> crop/pad -> normalize preprocessing chain.

Arrays are stored as numpy ``(nz, ny, nx)`` so that memory order is x-fastest,
matching the on-disk layout. ``dims`` and ``spacing`` are always reported in
``(x, y, z)`` order.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np


class DegenerateInputWarning(UserWarning):
    """Raised (as a warning) when an input carries no usable intensity range."""


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if data.dtype != np.float32:
            data = data.astype(np.float32)
        object.__setattr__(self, "data", data)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    def check_finite(self) -> "Volume":
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")
        return self

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing)


@dataclass(frozen=True)
class BinaryMask:
    """A {0,1} volume; stored as a boolean array in ``(nz, ny, nx)`` order."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"mask data must be 3D, got shape {data.shape}")
        if data.dtype != np.bool_:
            if not np.all((data == 0) | (data == 1)):
                raise ValueError("mask values must be exactly 0 or 1")
            data = data.astype(bool)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def count(self) -> int:
        return int(self.data.sum())

    def to_volume(self) -> Volume:
        return Volume(self.data.astype(np.float32), self.spacing)

    @classmethod
    def from_volume(cls, v: Volume) -> "BinaryMask":
        return cls(v.data, v.spacing)

    def check_matches(self, v: Volume | "BinaryMask") -> None:
        if self.data.shape != v.data.shape:
            raise ValueError(f"grid mismatch: mask dims {self.dims} vs volume dims {v.dims}")


@dataclass(frozen=True)
class PreprocessConfig:
    target_spacing: tuple[float, float, float] = (0.6, 0.6, 4.5)
    target_dims: tuple[int, int, int] = (256, 256, 32)
    clip_low_pct: float = 1.0
    clip_high_pct: float = 99.0

    def __post_init__(self):
        object.__setattr__(self, "target_spacing", tuple(float(s) for s in self.target_spacing))
        object.__setattr__(self, "target_dims", tuple(int(d) for d in self.target_dims))
        if len(self.target_spacing) != 3 or min(self.target_spacing) <= 0:
            raise ValueError("target_spacing must be three positive numbers")
        if len(self.target_dims) != 3 or min(self.target_dims) <= 0:
            raise ValueError("target_dims must be three positive integers")
        if not (0 <= self.clip_low_pct < 100 and 0 <= self.clip_high_pct <= 100):
            raise ValueError("clip percentiles must lie in [0, 100)")
        if not self.clip_low_pct < self.clip_high_pct:
            raise ValueError("clip_low_pct must be below clip_high_pct")


def _interp_axis(a: np.ndarray, axis: int, n_out: int, ratio: float) -> np.ndarray:
    # Output sample i sits at input index i * ratio; voxel 0 centers coincide.
    n_in = a.shape[axis]
    pos = np.arange(n_out, dtype=np.float64) * ratio
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    w = pos - lo
    shape = [1] * a.ndim
    shape[axis] = n_out
    w = w.reshape(shape)
    a_lo = np.take(a, lo, axis=axis)
    a_hi = np.take(a, hi, axis=axis)
    return a_lo * (1.0 - w) + a_hi * w


def resample_trilinear(v: Volume, target_spacing) -> Volume:
    """Resample ``v`` onto a grid with ``target_spacing`` (mm).

    Output dims are ``round(dim * old / new)`` (at least 1). Samples beyond the
    last input voxel are clamped to the edge value.
    """
    v.check_finite()
    target = tuple(float(s) for s in target_spacing)
    if len(target) != 3 or min(target) <= 0:
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    if target == v.spacing:
        return Volume(v.data.copy(), target)

    out = v.data.astype(np.float64)
    # numpy axis 2 is x, 1 is y, 0 is z
    for axis, old, new in ((2, v.spacing[0], target[0]), (1, v.spacing[1], target[1]), (0, v.spacing[2], target[2])):
        n_in = out.shape[axis]
        n_out = max(1, int(round(n_in * old / new)))
        if n_out == n_in and old == new:
            continue
        out = _interp_axis(out, axis, n_out, new / old)
    return Volume(out.astype(np.float32), target)


def center_crop_pad(v: Volume, target_dims) -> Volume:
    """Center-crop then zero-pad to ``target_dims`` given as (nx, ny, nz).

    Odd remainders go to the high-index side in both cases.
    """
    tx, ty, tz = (int(d) for d in target_dims)
    if min(tx, ty, tz) <= 0:
        raise ValueError("target dims must be positive")
    data = v.data
    target_zyx = (tz, ty, tx)

    slices = []
    for n, t in zip(data.shape, target_zyx):
        if n > t:
            start = (n - t) // 2
            slices.append(slice(start, start + t))
        else:
            slices.append(slice(0, n))
    data = data[tuple(slices)]

    pads = []
    for n, t in zip(data.shape, target_zyx):
        extra = max(0, t - n)
        pads.append((extra // 2, extra - extra // 2))
    if any(p != (0, 0) for p in pads):
        data = np.pad(data, pads, mode="constant", constant_values=0.0)
    return Volume(np.ascontiguousarray(data), v.spacing)


def nearest_rank_percentile(values: np.ndarray, pct: float) -> float:
    """Nearest-rank percentile: the value at 1-based rank ``ceil(pct/100 * N)``."""
    flat = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if flat.size == 0:
        raise ValueError("percentile of empty array")
    rank = max(1, math.ceil(pct / 100.0 * flat.size))
    return float(flat[min(rank, flat.size) - 1])


def clip_normalize(v: Volume, cfg: PreprocessConfig | None = None) -> Volume:
    """Clip to the configured percentiles and map affinely onto [0, 1].

    A constant input (equal clip bounds) yields all zeros and emits a
    :class:`DegenerateInputWarning`.
    """
    cfg = cfg or PreprocessConfig()
    v.check_finite()
    lo = nearest_rank_percentile(v.data, cfg.clip_low_pct)
    hi = nearest_rank_percentile(v.data, cfg.clip_high_pct)
    if hi <= lo:
        warnings.warn(
            f"degenerate intensity range (p{cfg.clip_low_pct:g} == p{cfg.clip_high_pct:g} == {lo:g})",
            DegenerateInputWarning,
            stacklevel=2,
        )
        return Volume(np.zeros_like(v.data), v.spacing)
    clipped = np.clip(v.data.astype(np.float64), lo, hi)
    out = (clipped - lo) / (hi - lo)
    return Volume(out.astype(np.float32), v.spacing)


def preprocess(v: Volume, cfg: PreprocessConfig | None = None) -> Volume:
    """Resample to the target spacing, center crop/pad, then clip-normalize."""
    cfg = cfg or PreprocessConfig()
    out = resample_trilinear(v, cfg.target_spacing)
    out = center_crop_pad(out, cfg.target_dims)
    return clip_normalize(out, cfg)
