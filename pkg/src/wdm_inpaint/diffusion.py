"""Noise schedule, closed-form forward noising and the conditional inpainting sampler.

Timesteps are 1-based: ``t`` runs from 1 to ``T`` and ``alpha_bar(0) == 1``.
The denoiser predicts the clean coefficients directly; the sampler draws
``x_{t-1}`` from the Gaussian posterior ``q(x_{t-1} | x_t, x0_hat)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .masking import apply_mask
from .volume import BinaryMask, Volume
from .wavelet import WaveletCoeffs, dwt3_array, idwt3_array

log = logging.getLogger(__name__)

N_BANDS = 8
N_INPUT_CHANNELS = 3 * N_BANDS


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step tables indexed by ``t`` in ``0..T`` (entry 0 is the clean state)."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    one_minus_alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta) - 1

    @classmethod
    def from_betas(cls, betas, strict: bool = True) -> "NoiseSchedule":
        """Build the tables from ``beta_1..beta_T``.

        ``strict=False`` admits ``beta == 0`` steps, which are useful for
        probing algebraic identities but violate the strict monotonicity of
        ``alpha_bar``.
        """
        b = np.asarray(betas, dtype=np.float64).ravel()
        if b.size < 1:
            raise ValueError("schedule needs at least one step")
        lower_ok = b > 0 if strict else b >= 0
        if not np.all(lower_ok & (b < 1)):
            raise ValueError("betas must lie in (0, 1)")
        beta = np.concatenate([[0.0], b])
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        # 1 - abar_t accumulated as (1 - abar_{t-1}) + abar_{t-1} * beta_t so that
        # step 1 gives exactly beta_1 and a zero-beta step leaves it unchanged.
        omab = np.zeros_like(beta)
        for t in range(1, len(beta)):
            omab[t] = omab[t - 1] + alpha_bar[t - 1] * beta[t]
        return cls(beta, alpha, alpha_bar, omab)

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 1..{self.T}")


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if T == 1:
        return NoiseSchedule.from_betas([beta_start])
    t = np.arange(T, dtype=np.float64)
    return NoiseSchedule.from_betas(beta_start + t / (T - 1) * (beta_end - beta_start))


def q_sample(x0, t: int, eps, s: NoiseSchedule):
    """``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; works on arrays or :class:`WaveletCoeffs`."""
    s.check_t(t)
    a = np.sqrt(s.alpha_bar[t])
    b = np.sqrt(s.one_minus_alpha_bar[t])
    if isinstance(x0, WaveletCoeffs):
        e = eps.bands if isinstance(eps, WaveletCoeffs) else eps
        return WaveletCoeffs(a * x0.bands + b * e, x0.spacing)
    return a * np.asarray(x0) + b * np.asarray(eps)


def posterior_coefficients(t: int, s: NoiseSchedule) -> tuple[float, float, float]:
    """Return (coef on x0_hat, coef on x_t, posterior variance) for step ``t``."""
    s.check_t(t)
    denom = s.one_minus_alpha_bar[t]
    c_x0 = np.sqrt(s.alpha_bar[t - 1]) * s.beta[t] / denom
    c_xt = np.sqrt(s.alpha[t]) * s.one_minus_alpha_bar[t - 1] / denom
    var = s.one_minus_alpha_bar[t - 1] / denom * s.beta[t]
    return float(c_x0), float(c_xt), float(var)


def posterior_params(x_t, x0_hat, t: int, s: NoiseSchedule):
    c_x0, c_xt, var = posterior_coefficients(t, s)
    mu = c_x0 * np.asarray(x0_hat) + c_xt * np.asarray(x_t)
    return mu, var


def p_sample_step(x_t, x0_hat, t: int, s: NoiseSchedule, rng: np.random.Generator):
    """One reverse step. The final step (``t == 1``) returns the mean without noise."""
    mu, var = posterior_params(x_t, x0_hat, t, s)
    if t == 1 or var == 0.0:
        return mu
    z = rng.standard_normal(mu.shape)
    return mu + np.sqrt(var) * z


@dataclass
class ConditionedInput:
    x_t: np.ndarray
    cond_m1: np.ndarray
    cond_m2: np.ndarray
    t: int

    def __post_init__(self):
        shapes = {np.shape(self.x_t), np.shape(self.cond_m1), np.shape(self.cond_m2)}
        if len(shapes) != 1:
            raise ValueError(f"conditioning shapes disagree: {shapes}")

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.x_t, self.cond_m1, self.cond_m2], axis=-4)


class Denoiser(Protocol):
    def __call__(self, X: ConditionedInput) -> np.ndarray: ...


def build_condition(v: Volume, m: BinaryMask) -> tuple[Volume, np.ndarray, np.ndarray]:
    m1 = apply_mask(v, m)
    return m1, dwt3_array(m1.data), dwt3_array(m.data.astype(np.float64))


def inpaint(
    pathological: Volume,
    mask: BinaryMask,
    denoiser: Denoiser | Callable[[ConditionedInput], np.ndarray],
    s: NoiseSchedule,
    rng: np.random.Generator,
    *,
    clip_x0: tuple[float, float] | None = None,
    snapshot_every: int = 0,
    snapshot_dir: str | Path | None = None,
) -> Volume:
    """Fill the masked region of ``pathological`` by reverse diffusion in the wavelet domain.

    Voxels outside ``mask`` are returned unchanged. ``clip_x0`` optionally clamps
    each prediction to a coefficient range before it enters the posterior.
    """
    if any(n % 2 for n in pathological.dims):
        raise ValueError(f"volume dims must be even, got {pathological.dims}")
    mask.check_matches(pathological)
    in_ch = getattr(denoiser, "in_channels", N_INPUT_CHANNELS)
    out_ch = getattr(denoiser, "out_channels", N_BANDS)
    if in_ch != N_INPUT_CHANNELS or out_ch != N_BANDS:
        raise ValueError(f"denoiser must map {N_INPUT_CHANNELS} -> {N_BANDS} channels, has {in_ch} -> {out_ch}")

    m1, cond_m1, cond_m2 = build_condition(pathological, mask)
    # band-major, x-fastest draw order
    x = rng.standard_normal(cond_m1.shape)
    for t in range(s.T, 0, -1):
        x0_hat = np.asarray(denoiser(ConditionedInput(x, cond_m1, cond_m2, t)), dtype=np.float64)
        if x0_hat.shape != x.shape:
            raise ValueError(f"denoiser returned shape {x0_hat.shape}, expected {x.shape}")
        if clip_x0 is not None:
            x0_hat = np.clip(x0_hat, *clip_x0)
        x = p_sample_step(x, x0_hat, t, s, rng)
        if snapshot_every and snapshot_dir is not None and (t - 1) % snapshot_every == 0:
            _dump_snapshot(Path(snapshot_dir), t - 1, x, pathological.spacing)

    generated = idwt3_array(x).astype(np.float32)
    return Volume(np.where(mask.data, generated, m1.data), pathological.spacing)


def _dump_snapshot(directory: Path, t: int, x: np.ndarray, spacing) -> None:
    from .io import save_coeffs

    save_coeffs(directory, f"x_{t:04d}", WaveletCoeffs(x, spacing))
    log.debug("snapshot t=%d written to %s", t, directory)
