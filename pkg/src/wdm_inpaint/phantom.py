"""Synthetic distal-femur phantoms with a V-shaped trochlear groove, and automated
sulcus angle (SA) / trochlear groove depth (TGD) measurement on axial slices.

World coordinates are millimetres with voxel ``i`` centred at ``i * spacing``.
Anterior is low ``y``; axial slices are fixed ``z``. The "medial" landmark is
the low-``x`` facet peak and "lateral" the high-``x`` one.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .masking import DegenerateInputError, otsu_threshold
from .volume import Volume

FEMUR_LABEL = 1
PATELLA_LABEL = 2


class InconsistentGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    sulcus_angle_deg: float = 145.0
    groove_depth_mm: float = 5.2
    dims: tuple[int, int, int] = (32, 32, 8)
    spacing: tuple[float, float, float] = (2.0, 2.0, 4.5)
    femur_half_width_mm: float = 22.0
    condyle_falloff: float = 1.0
    peak_line_frac: float = 0.45
    femur_depth_mm: float = 26.0
    patella_semi_axes_mm: tuple[float, float, float] = (10.0, 4.0, 7.0)
    patella_gap_mm: float = 3.0
    patella_shift_mm: float = 0.0
    tissue_intensity: float = 0.3
    bone_intensity: float = 0.85
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        # JSON round-trips hand back lists
        for name in ("dims", "spacing", "patella_semi_axes_mm"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @property
    def facet_half_width_mm(self) -> float:
        """Horizontal trough-to-peak distance implied by SA and TGD."""
        return self.groove_depth_mm * math.tan(math.radians(self.sulcus_angle_deg) / 2.0)

    def validate(self) -> None:
        if not 90.0 < self.sulcus_angle_deg < 180.0:
            raise InconsistentGeometryError("sulcus angle must lie in (90, 180) degrees")
        if self.groove_depth_mm < 0:
            raise InconsistentGeometryError("groove depth must be non-negative")
        if min(self.dims) < 2 or min(self.spacing) <= 0:
            raise InconsistentGeometryError("invalid grid")
        w = self.facet_half_width_mm
        if w > self.femur_half_width_mm - 2.0 * max(self.spacing[:2]):
            raise InconsistentGeometryError(
                f"facet half-width {w:.2f} mm (from SA and TGD) does not fit inside the "
                f"femur half-width {self.femur_half_width_mm} mm"
            )
        fov_x = (self.dims[0] - 1) * self.spacing[0]
        if 2 * self.femur_half_width_mm >= fov_x:
            raise InconsistentGeometryError("femur wider than the field of view")
        peak_y = self.peak_line_frac * (self.dims[1] - 1) * self.spacing[1]
        if peak_y - self.patella_gap_mm - 2 * self.patella_semi_axes_mm[1] < self.spacing[1]:
            raise InconsistentGeometryError("patella does not fit anterior to the femur")
        if peak_y + self.femur_depth_mm > (self.dims[1] - 1) * self.spacing[1]:
            raise InconsistentGeometryError("femur extends past the posterior edge")


@dataclass
class GrooveMeasurement:
    sulcus_angle_deg: float
    groove_depth_mm: float
    medial_peak_mm: tuple[float, float] | None = None
    lateral_peak_mm: tuple[float, float] | None = None
    trough_mm: tuple[float, float] | None = None
    slice_index: int | None = None
    measurable: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def _unmeasurable(slice_index) -> GrooveMeasurement:
    return GrooveMeasurement(180.0, 0.0, slice_index=slice_index, measurable=False)


def groove_from_landmarks(p_med, p_lat, trough) -> tuple[float, float]:
    """SA at the trough between the rays to both peaks; TGD as distance to the peak line."""
    a = np.subtract(p_med, trough, dtype=np.float64)
    b = np.subtract(p_lat, trough, dtype=np.float64)
    cosang = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
    angle = math.degrees(math.acos(float(np.clip(cosang, -1.0, 1.0))))
    line = np.subtract(p_lat, p_med, dtype=np.float64)
    depth = abs(line[0] * (-a[1]) - line[1] * (-a[0])) / np.linalg.norm(line)
    return angle, float(depth)


def _ramp(signed_mm, width_mm):
    # partial-volume occupancy: 0.5 on the surface, linear over ``width_mm``
    return np.clip(signed_mm / width_mm + 0.5, 0.0, 1.0)


def _geometry(spec: PhantomSpec):
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    cx = (nx // 2) * sx
    peak_y = spec.peak_line_frac * (ny - 1) * sy
    cz = (nz // 2) * sz
    return cx, peak_y, cz


def anterior_profile(spec: PhantomSpec, x_mm: np.ndarray) -> np.ndarray:
    """y (mm) of the femur's anterior surface as a function of x (mm)."""
    cx, peak_y, _ = _geometry(spec)
    d = spec.groove_depth_mm
    w = spec.facet_half_width_mm
    u = np.abs(np.asarray(x_mm, dtype=np.float64) - cx)
    if w > 0:
        height = np.where(u <= w, d * u / w, d - (u - w) * spec.condyle_falloff)
    else:
        height = -u * spec.condyle_falloff
    return peak_y + d - height


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, Volume, GrooveMeasurement]:
    """Render a phantom; returns (image in [0, 1], label map, analytic ground truth)."""
    spec.validate()
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    cx, peak_y, cz = _geometry(spec)
    z = (np.arange(nz) * sz)[:, None, None]
    y = (np.arange(ny) * sy)[None, :, None]
    x = (np.arange(nx) * sx)[None, None, :]

    surf = anterior_profile(spec, x)
    femur = np.minimum(
        np.minimum(_ramp(y - surf, 2 * sy), _ramp(spec.femur_half_width_mm - np.abs(x - cx), 2 * sx)),
        _ramp(peak_y + spec.femur_depth_mm - y, 2 * sy),
    )
    femur = np.broadcast_to(femur, (nz, ny, nx))

    ax, ay, az = spec.patella_semi_axes_mm
    pcx = cx + spec.patella_shift_mm
    pcy = peak_y - spec.patella_gap_mm - ay
    rho = np.sqrt(((x - pcx) / ax) ** 2 + ((y - pcy) / ay) ** 2 + ((z - cz) / az) ** 2)
    patella = _ramp((1.0 - rho) * min(ax, ay, az), 2 * min(sx, sy, sz))

    body_ax = 0.47 * (nx - 1) * sx
    body_ay = 0.47 * (ny - 1) * sy
    body_cy = 0.5 * (ny - 1) * sy
    rho_b = np.sqrt(((x - cx) / body_ax) ** 2 + ((y - body_cy) / body_ay) ** 2)
    body = np.broadcast_to(_ramp((1.0 - rho_b) * min(body_ax, body_ay), 2 * sx), (nz, ny, nx))

    bone = np.maximum(femur, patella)
    img = body * spec.tissue_intensity + bone * (spec.bone_intensity - spec.tissue_intensity)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape) * (body > 0)
    img = np.clip(img, 0.0, 1.0)

    labels = np.zeros((nz, ny, nx), dtype=np.float32)
    labels[femur >= 0.5] = FEMUR_LABEL
    labels[patella >= 0.5] = PATELLA_LABEL

    w, d = spec.facet_half_width_mm, spec.groove_depth_mm
    med, lat, tr = (cx - w, peak_y), (cx + w, peak_y), (cx, peak_y + d)
    if w > 0 and d > 0:
        sa, tgd = groove_from_landmarks(med, lat, tr)
        gt = GrooveMeasurement(sa, tgd, med, lat, tr, slice_index=nz // 2)
    else:
        gt = _unmeasurable(nz // 2)
    return Volume(img.astype(np.float32), spec.spacing), Volume(labels, spec.spacing), gt


def patella_slice(labels: Volume) -> int:
    """Axial slice with the largest patella cross-section."""
    counts = (labels.data == PATELLA_LABEL).sum(axis=(1, 2))
    return int(np.argmax(counts))


def _surface_profile(sl: np.ndarray, thr: float) -> tuple[np.ndarray, np.ndarray] | None:
    bone = sl >= thr
    labels, n = ndimage.label(bone)
    if n == 0:
        return None
    sizes = np.bincount(labels.ravel())[1:]
    femur = labels == (int(np.argmax(sizes)) + 1)
    cols = np.nonzero(femur.any(axis=0))[0]
    if cols.size < 3:
        return None
    first = np.argmax(femur[:, cols], axis=0)
    ys = first.astype(np.float64)
    for j, (c, r) in enumerate(zip(cols, first)):
        if r > 0:
            lo, hi = float(sl[r - 1, c]), float(sl[r, c])
            if hi > lo:
                # linear sub-voxel crossing between the last dark and first bright voxel
                ys[j] = r - 1 + np.clip((thr - lo) / (hi - lo), 0.0, 1.0)
    return cols.astype(np.float64), ys


def measure_sulcus_angle(v: Volume, slice_index: int, bins: int = 256, min_depth_vox: float = 0.05) -> GrooveMeasurement:
    """Measure SA and TGD on axial slice ``slice_index``.

    The bone threshold is Otsu over the slice's non-zero voxels; the femur is
    the largest bright component and its anterior surface is the first
    above-threshold voxel in each column (refined to sub-voxel precision).
    Peaks are the most anterior surface points in each half of the femur's
    x-extent and the trough is the least anterior point between them.
    """
    if not 0 <= slice_index < v.data.shape[0]:
        raise IndexError(f"slice {slice_index} outside 0..{v.data.shape[0] - 1}")
    sx, sy, _ = v.spacing
    sl = v.data[slice_index].astype(np.float64)
    fg = sl[sl > 0]
    try:
        thr = otsu_threshold(fg, bins)
    except DegenerateInputError:
        return _unmeasurable(slice_index)
    prof = _surface_profile(sl, thr)
    if prof is None:
        return _unmeasurable(slice_index)
    cols, ys = prof
    mid = 0.5 * (cols[0] + cols[-1])
    left = np.nonzero(cols <= mid)[0]
    right = np.nonzero(cols > mid)[0]
    if left.size == 0 or right.size == 0:
        return _unmeasurable(slice_index)
    # most anterior point per half; ties resolved toward the centre
    i_med = left[np.flatnonzero(ys[left] == ys[left].min())[-1]]
    i_lat = right[np.flatnonzero(ys[right] == ys[right].min())[0]]
    between = np.arange(i_med + 1, i_lat)
    if between.size == 0:
        return _unmeasurable(slice_index)
    deepest = ys[between].max()
    cand = between[ys[between] == deepest]
    i_tr = cand[len(cand) // 2]
    if deepest - max(ys[i_med], ys[i_lat]) < min_depth_vox:
        return _unmeasurable(slice_index)

    to_mm = lambda i: (float(cols[i] * sx), float(ys[i] * sy))  # noqa: E731
    med, lat, tr = to_mm(i_med), to_mm(i_lat), to_mm(i_tr)
    sa, tgd = groove_from_landmarks(med, lat, tr)
    return GrooveMeasurement(sa, tgd, med, lat, tr, slice_index=slice_index)


def measure_slices(v: Volume, slices) -> list[GrooveMeasurement]:
    return [measure_sulcus_angle(v, int(z)) for z in slices]


def sample_specs(
    n: int,
    sa_range: tuple[float, float],
    rng: np.random.Generator,
    facet_half_width_range: tuple[float, float] = (14.0, 17.0),
    **overrides,
) -> list[PhantomSpec]:
    """Random phantom specs with SA uniform in ``sa_range``; TGD follows from the facet width."""
    specs = []
    for _ in range(n):
        sa = float(rng.uniform(*sa_range))
        w = float(rng.uniform(*facet_half_width_range))
        tgd = w / math.tan(math.radians(sa) / 2.0)
        kw = dict(
            sulcus_angle_deg=sa,
            groove_depth_mm=tgd,
            patella_shift_mm=float(rng.uniform(-1.5, 1.5)),
            patella_gap_mm=float(rng.uniform(2.5, 3.5)),
            seed=int(rng.integers(2**31)),
        )
        kw.update(overrides)
        specs.append(PhantomSpec(**kw))
    return specs


def save_phantom(out_dir, spec: PhantomSpec, name: str = "phantom") -> dict[str, Path]:
    from .io import save_raw

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    img, labels, gt = generate_phantom(spec)
    paths = {
        "image": save_raw(out_dir / f"{name}.vol", img),
        "labels": save_raw(out_dir / f"{name}_labels.vol", labels, dtype="u8"),
    }
    truth = {"spec": asdict(spec), "ground_truth": gt.to_dict()}
    paths["truth"] = out_dir / f"{name}_truth.json"
    paths["truth"].write_text(json.dumps(truth, indent=2))
    return paths


def spec_from_dict(d: dict) -> PhantomSpec:
    known = {f for f in PhantomSpec.__dataclass_fields__}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown phantom spec keys: {sorted(unknown)}")
    return PhantomSpec(**d)
