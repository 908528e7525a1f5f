"""Masked image-quality metrics and the Wilcoxon signed-rank test."""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import BinaryMask, Volume

DATA_RANGE = 1.0


def _check(a: Volume, b: Volume, m: BinaryMask) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"volume shapes differ: {a.data.shape} vs {b.data.shape}")
    m.check_matches(a)
    if m.count == 0:
        raise ValueError("masked metric over an empty mask")


def masked_mse(a: Volume, b: Volume, m: BinaryMask) -> float:
    _check(a, b, m)
    d = a.data[m.data].astype(np.float64) - b.data[m.data].astype(np.float64)
    return float(np.mean(d * d))


def psnr_from_mse(mse: float, data_range: float = DATA_RANGE) -> float:
    if mse < 0:
        raise ValueError("mse must be non-negative")
    if mse == 0:
        return math.inf
    return -10.0 * math.log10(mse / data_range**2)


def masked_psnr(a: Volume, b: Volume, m: BinaryMask) -> float:
    return psnr_from_mse(masked_mse(a, b, m))


@dataclass(frozen=True)
class SSIMConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = DATA_RANGE

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("SSIM window must be a positive odd integer")
        if self.sigma <= 0:
            raise ValueError("SSIM sigma must be positive")


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    for axis in range(x.ndim):
        x = ndimage.correlate1d(x, w, axis=axis, mode="mirror")
    return x


def ssim_map(a: np.ndarray, b: np.ndarray, cfg: SSIMConfig | None = None) -> np.ndarray:
    """Per-voxel SSIM with a separable Gaussian window (mirror boundary)."""
    cfg = cfg or SSIMConfig()
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if min(a.shape) < cfg.window:
        raise ValueError(f"volume {a.shape} smaller than the {cfg.window}-voxel SSIM window")
    w = gaussian_window(cfg.window, cfg.sigma)
    mu_a, mu_b = _filter(a, w), _filter(b, w)
    var_a = _filter(a * a, w) - mu_a * mu_a
    var_b = _filter(b * b, w) - mu_b * mu_b
    cov = _filter(a * b, w) - mu_a * mu_b
    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def masked_ssim(a: Volume, b: Volume, m: BinaryMask, cfg: SSIMConfig | None = None) -> float:
    """Zero everything outside the mask, then average the full SSIM map over mask voxels."""
    _check(a, b, m)
    za = np.where(m.data, a.data, 0.0)
    zb = np.where(m.data, b.data, 0.0)
    return float(ssim_map(za, zb, cfg)[m.data].mean())


def _ranks(x: np.ndarray) -> np.ndarray:
    """Mid-ranks (1-based) of ``x``."""
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


EXACT_MAX_N = 12


def wilcoxon_signed_rank(before, after, alternative: str = "two-sided") -> tuple[float, float]:
    """Paired Wilcoxon signed-rank test on ``after - before``.

    Returns ``(W+, p)`` where W+ is the rank sum of positive differences.
    ``alternative`` is "two-sided", "greater" (after tends to exceed before)
    or "less". Exact enumeration for up to 12 non-zero differences, normal
    approximation with tie correction beyond.
    """
    b = np.asarray(before, dtype=np.float64)
    a = np.asarray(after, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("before and after must be 1D sequences of equal length")
    if alternative not in ("two-sided", "greater", "less"):
        raise ValueError(f"unknown alternative {alternative!r}")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise ValueError("all paired differences are zero; the test carries no information")
    r = _ranks(np.abs(d))
    w_plus = float(r[d > 0].sum())

    if n <= EXACT_MAX_N:
        # W+ over every sign pattern; ranks are half-integers at worst, so doubled sums are exact
        r2 = np.rint(2 * r).astype(np.int64)
        w2 = np.rint(2 * w_plus).astype(np.int64)
        signs = np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int64)
        dist = signs @ r2
        p_ge = float(np.mean(dist >= w2))
        p_le = float(np.mean(dist <= w2))
    else:
        mean = n * (n + 1) / 4.0
        _, counts = np.unique(np.abs(d), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(counts**3 - counts)) / 48.0
        z = (w_plus - mean) / math.sqrt(var)
        p_ge = 0.5 * math.erfc(z / math.sqrt(2.0))
        p_le = 0.5 * math.erfc(-z / math.sqrt(2.0))

    if alternative == "greater":
        p = p_ge
    elif alternative == "less":
        p = p_le
    else:
        p = min(1.0, 2.0 * min(p_ge, p_le))
    return w_plus, p


@dataclass
class MetricReport:
    name: str
    mse: float
    psnr_db: float
    ssim: float
    mask_voxels: int

    def to_dict(self) -> dict:
        d = asdict(self)
        # JSON has no infinity; keep the sentinel readable
        if math.isinf(self.psnr_db):
            d["psnr_db"] = "inf"
        return d


def evaluate(pred: Volume, ref: Volume, m: BinaryMask, name: str = "", ssim_cfg: SSIMConfig | None = None) -> MetricReport:
    mse = masked_mse(pred, ref, m)
    return MetricReport(name, mse, psnr_from_mse(mse), masked_ssim(pred, ref, m, ssim_cfg), m.count)


def aggregate(reports: list[MetricReport]) -> dict:
    """Mean and (population) standard deviation of each metric across reports."""
    if not reports:
        raise ValueError("no reports to aggregate")
    out = {"n": len(reports)}
    for key in ("mse", "psnr_db", "ssim"):
        vals = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        finite = vals[np.isfinite(vals)]
        if finite.size < vals.size:
            out[key] = {"mean": "inf", "std": None, "n_infinite": int(vals.size - finite.size)}
        else:
            out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def write_jsonl(path, reports: list[MetricReport]) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_dict()) + "\n")
    return path


def write_paired_csv(path, names, before, after, header=("case", "before", "after")) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in zip(names, before, after):
            w.writerow(row)
    return path
