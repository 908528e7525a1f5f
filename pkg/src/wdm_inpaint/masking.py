"""Foreground segmentation, patella localisation and the peri-patellar inpainting mask."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import BinaryMask, Volume

log = logging.getLogger(__name__)

# Small slack so that offsets landing exactly on the radius survive float rounding.
_RADIUS_EPS = 1e-9


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class StructuringElement:
    """Anisotropic ball: voxel offset d is a member when sum((d_i*s_i/r_i)^2) <= 1."""

    radius_mm: tuple[float, float, float] = (2.0, 2.0, 2.0)

    def __post_init__(self):
        r = tuple(float(x) for x in self.radius_mm)
        if len(r) != 3 or min(r) < 0:
            raise ValueError("radius_mm must be three non-negative numbers")
        object.__setattr__(self, "radius_mm", r)

    def voxel_radii(self, spacing) -> tuple[int, int, int]:
        return tuple(int(math.floor(r / s + _RADIUS_EPS)) for r, s in zip(self.radius_mm, spacing))

    def footprint(self, spacing) -> np.ndarray:
        """Boolean footprint in ``(z, y, x)`` array order, centred on the origin."""
        rx, ry, rz = self.voxel_radii(spacing)
        z, y, x = np.mgrid[-rz : rz + 1, -ry : ry + 1, -rx : rx + 1]
        acc = np.zeros(z.shape)
        for d, s, r in ((x, spacing[0], self.radius_mm[0]), (y, spacing[1], self.radius_mm[1]), (z, spacing[2], self.radius_mm[2])):
            if r > 0:
                acc += (d * s / r) ** 2
        return acc <= 1.0 + _RADIUS_EPS

    def offsets(self, spacing) -> np.ndarray:
        """Member offsets as an ``(n, 3)`` array of (dx, dy, dz)."""
        fp = self.footprint(spacing)
        rz, ry, rx = (n // 2 for n in fp.shape)
        zz, yy, xx = np.nonzero(fp)
        return np.stack([xx - rx, yy - ry, zz - rz], axis=1)


@dataclass(frozen=True)
class MaskSpec:
    offset_mm: float = 30.0
    fallback_semi_axes_mm: tuple[float, float, float] = (30.0, 30.0, 13.5)
    fallback_center: tuple[float, float, float] = (0.5, 0.25, 0.5)
    patella_volume_cm3: tuple[float, float] = (2.0, 100.0)

    def __post_init__(self):
        if not self.offset_mm > 0:
            raise ValueError("offset_mm must be positive")
        if len(self.fallback_semi_axes_mm) != 3 or min(self.fallback_semi_axes_mm) <= 0:
            raise ValueError("fallback semi-axes must be positive")
        if len(self.fallback_center) != 3 or not all(0 <= c <= 1 for c in self.fallback_center):
            raise ValueError("fallback_center must be fractional coordinates in [0, 1]")
        lo, hi = self.patella_volume_cm3
        if not 0 <= lo <= hi:
            raise ValueError("patella volume range must satisfy 0 <= low <= high")


def otsu_from_histogram(counts, edges) -> tuple[int, float]:
    """Return ``(k, edges[k])`` for the cut maximising between-class variance.

    Cut ``k`` (1..bins-1) separates bins ``[0, k)`` from ``[k, bins)``. Ties go
    to the lowest cut.
    """
    counts = np.asarray(counts, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.float64)
    if counts.size < 2 or edges.size != counts.size + 1:
        raise ValueError("need at least two bins and len(edges) == bins + 1")
    centers = 0.5 * (edges[:-1] + edges[1:])
    total = counts.sum()
    w0 = np.cumsum(counts)[:-1]
    w1 = total - w0
    m0 = np.cumsum(counts * centers)[:-1]
    m1 = (counts * centers).sum() - m0
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = np.where(w0 > 0, m0 / w0, 0.0)
        mu1 = np.where(w1 > 0, m1 / w1, 0.0)
    between = w0 * w1 * (mu0 - mu1) ** 2
    k = int(np.argmax(between)) + 1
    return k, float(edges[k])


def otsu_threshold(v: Volume | np.ndarray, bins: int = 256) -> float:
    """Otsu threshold over a ``bins``-bin histogram spanning the data range.

    Foreground is ``value >= threshold``.
    """
    data = np.asarray(v.data if isinstance(v, Volume) else v, dtype=np.float64).ravel()
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if data.size == 0 or data.min() == data.max():
        raise DegenerateInputError("Otsu threshold undefined for constant input")
    counts, edges = np.histogram(data, bins=bins, range=(data.min(), data.max()))
    return otsu_from_histogram(counts, edges)[1]


def _footprint_for(m: BinaryMask, se: StructuringElement) -> np.ndarray:
    return se.footprint(m.spacing)


def erode(m: BinaryMask, se: StructuringElement) -> BinaryMask:
    out = ndimage.binary_erosion(m.data, structure=_footprint_for(m, se), border_value=0)
    return BinaryMask(out, m.spacing)


def dilate(m: BinaryMask, se: StructuringElement) -> BinaryMask:
    out = ndimage.binary_dilation(m.data, structure=_footprint_for(m, se), border_value=0)
    return BinaryMask(out, m.spacing)


def morph_open(m: BinaryMask, se: StructuringElement) -> BinaryMask:
    return dilate(erode(m, se), se)


def morph_close(m: BinaryMask, se: StructuringElement) -> BinaryMask:
    """Closing over the zero-extended grid.

    Padding by the element radius lets the dilation spill past the border
    before eroding back, so the result always contains ``m``.
    """
    fp = _footprint_for(m, se)
    pad = [(n // 2, n // 2) for n in fp.shape]
    big = np.pad(m.data, pad)
    big = ndimage.binary_dilation(big, structure=fp, border_value=0)
    big = ndimage.binary_erosion(big, structure=fp, border_value=0)
    crop = tuple(slice(p, p + n) for (p, _), n in zip(pad, m.data.shape))
    return BinaryMask(big[crop], m.spacing)


def _connectivity_structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError("connectivity must be 6 or 26")


def label_components(m: BinaryMask | np.ndarray, connectivity: int = 26) -> tuple[np.ndarray, int]:
    data = m.data if isinstance(m, BinaryMask) else np.asarray(m, dtype=bool)
    return ndimage.label(data, structure=_connectivity_structure(connectivity))


def largest_component(m: BinaryMask, connectivity: int = 26) -> BinaryMask:
    """Keep the biggest component; ties go to the one with the smallest linear index."""
    labels, n = label_components(m, connectivity)
    if n == 0:
        raise DegenerateInputError("largest component of an empty mask")
    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=n + 1)[1:]
    ids, first = np.unique(flat, return_index=True)
    first_index = dict(zip(ids.tolist(), first.tolist()))
    best = min(range(1, n + 1), key=lambda i: (-sizes[i - 1], first_index[i]))
    return BinaryMask(labels == best, m.spacing)


def segment_background(
    v: Volume,
    bins: int = 256,
    se: StructuringElement | None = None,
    connectivity: int = 26,
) -> tuple[BinaryMask, Volume]:
    """Otsu, opening, closing and largest component; background voxels are zeroed."""
    se = se or StructuringElement()
    thr = otsu_threshold(v, bins)
    fg = BinaryMask(v.data >= thr, v.spacing)
    fg = morph_close(morph_open(fg, se), se)
    fg = largest_component(fg, connectivity)
    cleaned = Volume(np.where(fg.data, v.data, np.float32(0.0)), v.spacing)
    return fg, cleaned


def localize_patella(
    bone_labels: Volume | BinaryMask,
    volume_range_cm3: tuple[float, float] = (2.0, 100.0),
    connectivity: int = 6,
) -> tuple[bool, BinaryMask]:
    """Pick the most anterior (smallest y centroid) bone component of plausible size.

    Any non-zero label counts as bone.
    """
    bone = np.asarray(bone_labels.data) != 0
    spacing = bone_labels.spacing
    empty = BinaryMask(np.zeros_like(bone), spacing)
    if not bone.any():
        return False, empty
    labels, n = label_components(bone, connectivity)
    voxel_cm3 = spacing[0] * spacing[1] * spacing[2] / 1000.0
    lo, hi = volume_range_cm3
    index = np.arange(1, n + 1)
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index)
    ys = np.arange(bone.shape[1], dtype=np.float64)[None, :, None] * np.ones(bone.shape)
    centroid_y = ndimage.mean(ys, labels, index)

    best = None
    for lab, size, cy in zip(index, sizes, centroid_y):
        vol = size * voxel_cm3
        if not lo <= vol <= hi:
            continue
        if best is None or cy < best[1]:
            best = (lab, cy)
    if best is None:
        log.info("no bone component within %.3g-%.3g cm^3; patella not found", lo, hi)
        return False, empty
    return True, BinaryMask(labels == best[0], spacing)


def bowl_mask(patella: BinaryMask, spec: MaskSpec | None = None) -> BinaryMask:
    """Voxels within ``offset_mm`` (world distance) of the patella, patella excluded."""
    spec = spec or MaskSpec()
    if not patella.data.any():
        raise DegenerateInputError("bowl mask needs a non-empty patella")
    sx, sy, sz = patella.spacing
    dist = ndimage.distance_transform_edt(~patella.data, sampling=(sz, sy, sx))
    within = dist <= spec.offset_mm * (1.0 + _RADIUS_EPS)
    return BinaryMask(within & ~patella.data, patella.spacing)


def ellipsoid_mask(dims, spacing, spec: MaskSpec | None = None) -> BinaryMask:
    """World-space ellipsoid centred at ``fallback_center * (dims - 1)`` (voxel index units)."""
    spec = spec or MaskSpec()
    nx, ny, nz = (int(d) for d in dims)
    sx, sy, sz = (float(s) for s in spacing)
    cx, cy, cz = (f * (n - 1) for f, n in zip(spec.fallback_center, (nx, ny, nz)))
    ax, ay, az = spec.fallback_semi_axes_mm
    z, y, x = np.ogrid[:nz, :ny, :nx]
    inside = ((x - cx) * sx / ax) ** 2 + ((y - cy) * sy / ay) ** 2 + ((z - cz) * sz / az) ** 2 <= 1.0 + _RADIUS_EPS
    if not inside.any():
        raise DegenerateInputError("fallback ellipsoid misses every voxel of the grid")
    return BinaryMask(inside, (sx, sy, sz))


def apply_mask(v: Volume, m: BinaryMask) -> Volume:
    """``v * (1 - m)``: zero the masked region, keep every other voxel bit-for-bit."""
    m.check_matches(v)
    return Volume(np.where(m.data, np.float32(0.0), v.data), v.spacing)


def make_inpainting_mask(
    v: Volume,
    bone_labels: Volume | BinaryMask | None,
    spec: MaskSpec | None = None,
) -> tuple[BinaryMask, bool]:
    """Bowl around the localised patella, or the fallback ellipsoid when none is found.

    Returns the mask and whether the patella was found.
    """
    spec = spec or MaskSpec()
    found = False
    if bone_labels is not None:
        found, patella = localize_patella(bone_labels, spec.patella_volume_cm3)
    if found:
        return bowl_mask(patella, spec), True
    log.warning("patella not localised; using fallback ellipsoid mask")
    return ellipsoid_mask(v.dims, v.spacing, spec), False
