"""Pipeline configuration: strict JSON, two presets ("desk" and "paper").

Every field carries a ``scale`` annotation in its metadata:

- ``paper``: the default equals the published setting.
- ``desk``: the default is scaled down so the whole pipeline runs on a CPU in
  minutes; the published value is given in ``paper_value``.
- ``invented``: no published value exists; the default is our own choice.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .denoiser import NetConfig, TrainConfig
from .diffusion import make_linear_schedule
from .masking import MaskSpec, StructuringElement
from .metrics import SSIMConfig
from .volume import PreprocessConfig


class ConfigError(ValueError):
    pass


def _f(default, scale: str, paper_value=None):
    meta = {"scale": scale}
    if paper_value is not None:
        meta["paper_value"] = paper_value
    if isinstance(default, (list, dict)):
        return field(default_factory=lambda: type(default)(default), metadata=meta)
    return field(default=default, metadata=meta)


@dataclass
class PreprocessSection:
    target_spacing: tuple = _f((2.0, 2.0, 4.5), "desk", (0.6, 0.6, 4.5))
    target_dims: tuple = _f((32, 32, 8), "desk", (256, 256, 32))
    clip_low_pct: float = _f(1.0, "invented")
    clip_high_pct: float = _f(99.0, "invented")

    def build(self) -> PreprocessConfig:
        return PreprocessConfig(tuple(self.target_spacing), tuple(self.target_dims), self.clip_low_pct, self.clip_high_pct)


@dataclass
class MaskSection:
    offset_mm: float = _f(18.0, "desk", 30.0)
    fallback_semi_axes_mm: tuple = _f((14.0, 10.0, 13.5), "desk", (30.0, 30.0, 13.5))
    fallback_center: tuple = _f((0.5, 0.4, 0.5), "invented")
    patella_volume_cm3: tuple = _f((0.3, 10.0), "desk", (2.0, 100.0))
    se_radius_mm: tuple = _f((2.0, 2.0, 2.0), "invented")
    otsu_bins: int = _f(256, "invented")

    def build(self) -> MaskSpec:
        return MaskSpec(
            self.offset_mm,
            tuple(self.fallback_semi_axes_mm),
            tuple(self.fallback_center),
            tuple(self.patella_volume_cm3),
        )

    def structuring_element(self) -> StructuringElement:
        return StructuringElement(tuple(self.se_radius_mm))


@dataclass
class ModelSection:
    resolution: tuple = _f((32, 32, 8), "desk", (256, 256, 32))
    base_channels: int = _f(8, "desk", 64)
    num_res_blocks: int = _f(1, "desk", 2)
    channel_mult: tuple = _f((1, 2, 2), "desk", (1, 2, 2, 4, 4))
    temb_dim: int = _f(16, "desk", 128)
    activation: str = _f("silu", "invented")

    def build(self) -> NetConfig:
        return NetConfig(
            base_channels=self.base_channels,
            channel_mult=tuple(self.channel_mult),
            num_res_blocks=self.num_res_blocks,
            temb_dim=self.temb_dim,
            activation=self.activation,
        )


@dataclass
class DiffusionSection:
    timesteps: int = _f(1000, "paper")
    schedule: str = _f("linear", "paper")
    beta_start: float = _f(1e-4, "invented")
    beta_end: float = _f(0.02, "invented")
    clip_x0: tuple | None = _f(None, "invented")
    snapshot_every: int = _f(0, "invented")

    def build(self):
        if self.schedule != "linear":
            raise ConfigError(f"unsupported noise schedule {self.schedule!r}")
        return make_linear_schedule(self.timesteps, self.beta_start, self.beta_end)


@dataclass
class TrainSection:
    learning_rate: float = _f(0.05, "desk", 1e-5)
    batch_size: int = _f(4, "desk", 10)
    iterations: int = _f(2000, "desk", 1_000_000)
    momentum: float = _f(0.9, "invented")
    # None: 1 / (coefficients per sample), the balance of a summed squared error
    lambda_reg: float | None = _f(None, "invented")
    grad_clip: float | None = _f(1.0, "invented")
    ellipsoid_prob: float = _f(0.25, "invented")
    seed: int = _f(0, "invented")
    log_every: int = _f(100, "invented")

    def build(self, seed: int | None = None, n_coeffs: int | None = None) -> TrainConfig:
        lam = self.lambda_reg
        if lam is None:
            lam = 1.0 / n_coeffs if n_coeffs else 1.0
        return TrainConfig(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            batch_size=self.batch_size,
            iterations=self.iterations,
            seed=self.seed if seed is None else seed,
            lambda_reg=lam,
            grad_clip=self.grad_clip,
            ellipsoid_prob=self.ellipsoid_prob,
            log_every=self.log_every,
        )


@dataclass
class MetricsSection:
    ssim_window: int = _f(7, "desk", 11)
    ssim_sigma: float = _f(1.5, "invented")
    ssim_k1: float = _f(0.01, "invented")
    ssim_k2: float = _f(0.03, "invented")

    def build(self) -> SSIMConfig:
        return SSIMConfig(self.ssim_window, self.ssim_sigma, self.ssim_k1, self.ssim_k2)


_SECTIONS = {
    "preprocess": PreprocessSection,
    "mask": MaskSection,
    "model": ModelSection,
    "diffusion": DiffusionSection,
    "train": TrainSection,
    "metrics": MetricsSection,
}


@dataclass
class PipelineConfig:
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    mask: MaskSection = field(default_factory=MaskSection)
    model: ModelSection = field(default_factory=ModelSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    train: TrainSection = field(default_factory=TrainSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    def validate(self) -> "PipelineConfig":
        """Build every component once so that invalid values fail before any stage runs."""
        try:
            self.preprocess.build()
            self.mask.build()
            self.mask.structuring_element()
            self.model.build()
            self.diffusion.build()
            self.train.build()
            self.metrics.build()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if tuple(self.model.resolution) != tuple(self.preprocess.target_dims):
            raise ConfigError("model.resolution must equal preprocess.target_dims")
        if any(n % (2 ** len(self.model.channel_mult)) for n in self.model.resolution):
            raise ConfigError("resolution must be divisible by 2 ** len(channel_mult)")
        return self

    def train_config(self, seed: int | None = None) -> TrainConfig:
        n = 1
        for d in self.model.resolution:
            n *= int(d)
        return self.train.build(seed, n_coeffs=n)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def annotations(self) -> dict:
        """``{"section.key": {"scale": ..., "paper_value": ...}}`` for every field."""
        out = {}
        for name, cls in _SECTIONS.items():
            for f in dataclasses.fields(cls):
                out[f"{name}.{f.name}"] = dict(f.metadata)
        return out

    def override(self, dotted: dict) -> "PipelineConfig":
        """Apply ``{"section.key": value}`` overrides (``None`` values are skipped)."""
        d = self.to_dict()
        for key, value in dotted.items():
            if value is None:
                continue
            sec, _, name = key.partition(".")
            if sec not in d or name not in d[sec]:
                raise ConfigError(f"unknown config key {key!r}")
            d[sec][name] = value
        return from_dict(d)


def _coerce(value):
    return tuple(value) if isinstance(value, list) else value


def from_dict(d: dict) -> PipelineConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(d) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    sections = {}
    for name, cls in _SECTIONS.items():
        raw = d.get(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"section {name!r} must be an object")
        known = {f.name for f in dataclasses.fields(cls)}
        bad = set(raw) - known
        if bad:
            raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
        sections[name] = cls(**{k: _coerce(v) for k, v in raw.items()})
    return PipelineConfig(**sections).validate()


def load_config(path) -> PipelineConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(d)


def desk_preset() -> PipelineConfig:
    return PipelineConfig().validate()


def paper_preset() -> PipelineConfig:
    """Published settings wherever one exists."""
    d = desk_preset().to_dict()
    for name, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            if "paper_value" in f.metadata:
                d[name][f.name] = f.metadata["paper_value"]
    return from_dict(d)
