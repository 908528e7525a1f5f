"""Fast built-in oracle checks, run by ``wdm-inpaint selftest``."""

from __future__ import annotations

import itertools
import math

import numpy as np

from .diffusion import NoiseSchedule, inpaint, make_linear_schedule, posterior_params
from .masking import StructuringElement, erode, dilate, otsu_from_histogram
from .metrics import masked_ssim, wilcoxon_signed_rank
from .volume import BinaryMask, Volume
from .wavelet import dwt3_array, idwt3_array


def check_wavelet(rng):
    worst = 0.0
    for _ in range(20):
        v = rng.random((4, 8, 8))
        c = dwt3_array(v)
        worst = max(worst, np.abs(idwt3_array(c) - v).max(), abs((c**2).sum() / (v**2).sum() - 1))
    return worst < 1e-5, f"max error {worst:.2e}"


def check_schedule(rng):
    s = make_linear_schedule()
    ref = math.prod(1.0 - (1e-4 + i / 999 * (0.02 - 1e-4)) for i in range(1000))
    rel = abs(s.alpha_bar[1000] / ref - 1)
    mu, var = posterior_params(rng.normal(size=5), x0 := rng.normal(size=5), 1, s)
    ok = rel < 1e-9 and np.array_equal(mu, x0) and var == 0.0
    return ok, f"alpha_bar_1000={s.alpha_bar[1000]:.5e}"


def check_otsu(rng):
    for _ in range(20):
        counts = rng.integers(0, 50, size=32)
        edges = np.linspace(0, 1, 33)
        k, _ = otsu_from_histogram(counts, edges)
        centers = 0.5 * (edges[:-1] + edges[1:])
        best, best_k = -1.0, None
        for cut in range(1, 32):
            w0, w1 = counts[:cut].sum(), counts[cut:].sum()
            if w0 == 0 or w1 == 0:
                var = 0.0
            else:
                m0 = (counts[:cut] * centers[:cut]).sum() / w0
                m1 = (counts[cut:] * centers[cut:]).sum() / w1
                var = w0 * w1 * (m0 - m1) ** 2
            if var > best + 1e-12 * max(1.0, best):
                best, best_k = var, cut
        if k != best_k:
            return False, f"cut {k} vs brute force {best_k}"
    return True, "20 histograms"


def check_morphology(rng):
    se = StructuringElement((1.0, 1.0, 1.0))
    spacing = (1.0, 1.0, 1.0)
    offs = se.offsets(spacing)
    for _ in range(10):
        m = BinaryMask(rng.random((6, 6, 6)) < 0.6, spacing)
        er, di = erode(m, se).data, dilate(m, se).data
        for z, y, x in itertools.product(range(6), repeat=3):
            vals = []
            for dx, dy, dz in offs:
                zz, yy, xx = z + dz, y + dy, x + dx
                inside = 0 <= zz < 6 and 0 <= yy < 6 and 0 <= xx < 6
                vals.append(bool(m.data[zz, yy, xx]) if inside else False)
            if er[z, y, x] != all(vals) or di[z, y, x] != any(vals):
                return False, f"mismatch at {(x, y, z)}"
    return True, "10 random masks"


def check_wilcoxon(rng):
    _, p = wilcoxon_signed_rank([0] * 5, [1, 2, 3, 4, 5], "greater")
    return p == 1 / 32, f"p={p}"


def check_ssim(rng):
    a = Volume(rng.random((8, 12, 12)), (1, 1, 1))
    m = BinaryMask(rng.random((8, 12, 12)) < 0.3, (1, 1, 1))
    from .metrics import SSIMConfig

    v = masked_ssim(a, a, m, SSIMConfig(window=7))
    return v == 1.0, f"ssim(a, a)={v}"


def check_oracle_inpaint(rng):
    truth = Volume(rng.random((4, 8, 8)), (1, 1, 1))
    mask = BinaryMask(np.zeros((4, 8, 8), bool), (1, 1, 1))
    mask.data[1:3, 2:6, 2:6] = True
    target = dwt3_array(truth.data)
    s = make_linear_schedule(50)
    out = inpaint(truth, mask, lambda X: target, s, np.random.default_rng(0))
    err = float(np.abs(out.data - truth.data)[mask.data].max())
    outside = np.array_equal(out.data[~mask.data], truth.data[~mask.data])
    return err < 1e-4 and outside, f"max error {err:.2e}"


def check_beta_zero(rng):
    s = NoiseSchedule.from_betas([0.1, 0.0, 0.2], strict=False)
    xt = rng.normal(size=4)
    mu, var = posterior_params(xt, rng.normal(size=4), 2, s)
    return np.array_equal(mu, xt) and var == 0.0, "beta=0 step keeps x_t"


CHECKS = [
    ("wavelet round-trip + Parseval", check_wavelet),
    ("schedule and t=1 posterior", check_schedule),
    ("beta=0 posterior identity", check_beta_zero),
    ("otsu vs brute force", check_otsu),
    ("erosion/dilation vs set definition", check_morphology),
    ("wilcoxon exact enumeration", check_wilcoxon),
    ("ssim identity", check_ssim),
    ("oracle-denoiser inpainting", check_oracle_inpaint),
]


def run_all(seed: int = 0) -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS:
        rng = np.random.default_rng(seed)
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # a crash is a failed check, not a crashed selftest
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results
