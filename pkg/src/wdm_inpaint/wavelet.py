"""Single-level orthonormal 3D Haar transform.

Band names are three letters read as (z, y, x) filters, so ``llh`` is low-pass
in z and y and high-pass in x. Coefficient arrays have shape
``(8, nz/2, ny/2, nx/2)`` with bands in :data:`BAND_NAMES` order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Volume

BAND_NAMES = ("lll", "llh", "lhl", "lhh", "hll", "hlh", "hhl", "hhh")
BAND_INDEX = {name: i for i, name in enumerate(BAND_NAMES)}

_INV_SQRT2 = 1.0 / np.sqrt(2.0)


@dataclass
class WaveletCoeffs:
    bands: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.bands = np.asarray(self.bands)
        if self.bands.ndim != 4 or self.bands.shape[0] != 8:
            raise ValueError(f"expected coefficient array of shape (8, z, y, x), got {self.bands.shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.bands[BAND_INDEX[name]]

    @property
    def band_shape(self) -> tuple[int, int, int]:
        return self.bands.shape[1:]


def _analysis(a: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    even = np.take(a, np.arange(0, a.shape[axis], 2), axis=axis)
    odd = np.take(a, np.arange(1, a.shape[axis], 2), axis=axis)
    return (even + odd) * _INV_SQRT2, (even - odd) * _INV_SQRT2


def _synthesis(low: np.ndarray, high: np.ndarray, axis: int) -> np.ndarray:
    even = (low + high) * _INV_SQRT2
    odd = (low - high) * _INV_SQRT2
    shape = list(low.shape)
    shape[axis] *= 2
    out = np.empty(shape, dtype=np.result_type(low, high))
    idx = [slice(None)] * low.ndim
    idx[axis] = slice(0, None, 2)
    out[tuple(idx)] = even
    idx[axis] = slice(1, None, 2)
    out[tuple(idx)] = odd
    return out


def dwt3_array(a: np.ndarray) -> np.ndarray:
    """Forward transform of the trailing three axes ``(..., z, y, x)``.

    Returns an array with a new band axis inserted before the spatial axes.
    """
    if a.ndim < 3:
        raise ValueError("need at least three spatial axes")
    if any(n % 2 for n in a.shape[-3:]):
        raise ValueError(f"all spatial dims must be even, got {a.shape[-3:]}")
    a = np.asarray(a, dtype=np.float64)
    by_x = _analysis(a, -1)
    by_yx = {(yi, xi): b for xi, xb in enumerate(by_x) for yi, b in enumerate(_analysis(xb, -2))}
    bands = [None] * 8
    for (yi, xi), b in by_yx.items():
        for zi, zb in enumerate(_analysis(b, -3)):
            bands[4 * zi + 2 * yi + xi] = zb
    return np.stack(bands, axis=-4)


def idwt3_array(c: np.ndarray) -> np.ndarray:
    """Inverse of :func:`dwt3_array`; ``c`` has shape ``(..., 8, z, y, x)``."""
    if c.ndim < 4 or c.shape[-4] != 8:
        raise ValueError(f"expected 8 bands on axis -4, got shape {c.shape}")
    c = np.asarray(c, dtype=np.float64)
    band = lambda zi, yi, xi: c[..., 4 * zi + 2 * yi + xi, :, :, :]  # noqa: E731
    xs = []
    for xi in (0, 1):
        ys = [_synthesis(band(0, yi, xi), band(1, yi, xi), -3) for yi in (0, 1)]
        xs.append(_synthesis(ys[0], ys[1], -2))
    return _synthesis(xs[0], xs[1], -1)


def dwt3(v: Volume) -> WaveletCoeffs:
    return WaveletCoeffs(dwt3_array(v.data), v.spacing)


def idwt3(c: WaveletCoeffs) -> Volume:
    shapes = {b.shape for b in c.bands}
    if len(shapes) != 1:
        raise ValueError("inconsistent band shapes")
    return Volume(idwt3_array(c.bands).astype(np.float32), c.spacing)
