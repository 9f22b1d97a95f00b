"""Pipeline configuration: one JSON document, unknown keys rejected."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .gan import DiscriminatorConfig, GeneratorConfig, LossWeights, OptimizerConfig
from .grid import RoiBounds
from .obis import ObisConfig
from .toyworld import RadarForwardConfig, SceneSpec

DESK_ROI = (0.0, 19.2, -9.6, 9.6, -2.0, 1.2)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Resolutions(_Section):
    lidar: float = 0.05
    radar: float = 0.4


class ObisSection(_Section):
    enabled: bool = True
    edge_interval: float = 0.1
    shells: int = 4
    points_per_shell: int = 64
    shell_radii_fraction: list[float] = [0.25, 0.5, 0.75, 1.0]
    class_channels: list[str] = ["Sedan", "BusTruck"]


class GtAugSection(_Section):
    n_insert: int = Field(2, ge=0)
    min_points: int = Field(5, ge=0)
    ground_z: float = -1.7
    max_attempts: int = Field(20, ge=1)


class GeneratorSection(_Section):
    encoder_stages: int = 4
    decoder_stages: int = 1
    base_channels: int = 8
    kernel: int = 3
    slope: float = 0.2
    decoder: Literal["dense", "sparse"] = "dense"


class DiscriminatorSection(_Section):
    base_channels: int = 8
    scales: int = 3
    kernel: int = 3
    slope: float = 0.2


class LossSection(_Section):
    lambda_fm: float = 10.0
    lambda_l1: float = 100.0
    adversarial: Literal["log_form", "least_squares"] = "log_form"
    lambda_gan: float = 1.0


class OptimizerSection(_Section):
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8


class ToyWorldSection(_Section):
    n_scenes: int = 64
    n_val: int = 48
    object_count: list[int] = [1, 4]
    class_mix: dict[str, float] = {"Sedan": 0.8, "BusTruck": 0.2}
    walls: list[int] = [0, 2]
    ground_z: float = -1.7
    min_range: float = 3.0
    range_noise: float = 0.02
    lidar_azimuth_deg: list[float] = [-90.0, 90.0, 0.25]
    lidar_elevation_deg: list[float] = [-25.0, 5.0, 32]
    range_exponent: float = 2.0
    sigma_range: float = 0.3
    sigma_azimuth_deg: float = 1.2
    sigma_elevation_deg: float = 2.0
    clutter_floor: float = 1e7
    speckle: bool = False
    rcs: dict[str, float] = {"Sedan": 10.0, "BusTruck": 20.0, "ground": 0.05, "wall": 1.0}
    diffuse: float = 0.3
    power_scale: float = 3e15
    supersample: int = 4


class MetricsSection(_Section):
    v_ref: Optional[float] = 1e13
    order: Literal["normalize_then_pool", "pool_then_normalize"] = "normalize_then_pool"
    sparsify_k: float = 7.0
    iou_thresh: float = 0.3


class PipelineConfig(_Section):
    roi: list[float] = list(DESK_ROI)
    resolutions: Resolutions = Resolutions()
    obis: ObisSection = ObisSection()
    gtaug: GtAugSection = GtAugSection()
    generator: GeneratorSection = GeneratorSection()
    discriminator: DiscriminatorSection = DiscriminatorSection()
    loss_weights: LossSection = LossSection()
    optimizer: OptimizerSection = OptimizerSection()
    toyworld: ToyWorldSection = ToyWorldSection()
    metrics: MetricsSection = MetricsSection()
    epochs: int = Field(40, ge=1)
    seed: int = 0
    dataset: Optional[str] = None

    @field_validator("roi")
    @classmethod
    def _roi_six(cls, v):
        if len(v) != 6:
            raise ValueError("roi needs 6 numbers [x_min, x_max, y_min, y_max, z_min, z_max]")
        RoiBounds.from_list(v)
        return v

    # -- typed views -------------------------------------------------------

    def roi_bounds(self) -> RoiBounds:
        return RoiBounds.from_list(self.roi)

    def obis_config(self) -> ObisConfig:
        o = self.obis
        return ObisConfig(o.edge_interval, o.shells, o.points_per_shell,
                          tuple(o.shell_radii_fraction), tuple(o.class_channels))

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(r_in=self.resolutions.lidar, r_out=self.resolutions.radar,
                               **self.generator.model_dump())

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(**self.discriminator.model_dump())

    def loss_weights_config(self) -> LossWeights:
        return LossWeights(**self.loss_weights.model_dump())

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(**self.optimizer.model_dump())

    def radar_forward(self) -> RadarForwardConfig:
        t = self.toyworld
        return RadarForwardConfig(
            range_exponent=t.range_exponent, sigma_range=t.sigma_range,
            sigma_azimuth_deg=t.sigma_azimuth_deg, sigma_elevation_deg=t.sigma_elevation_deg,
            clutter_floor=t.clutter_floor, speckle=t.speckle, rcs=dict(t.rcs),
            diffuse=t.diffuse, power_scale=t.power_scale, supersample=t.supersample)

    def scene_spec(self, seed: int) -> SceneSpec:
        t = self.toyworld
        return SceneSpec(seed=seed, object_count=tuple(t.object_count),
                         class_mix=dict(t.class_mix), roi=self.roi_bounds(),
                         ground_z=t.ground_z, walls=tuple(t.walls), min_range=t.min_range)


class ConfigValidationError(ValueError):
    def __init__(self, path, message):
        self.path = str(path) if path else None
        super().__init__(f"{path}: {message}" if path else message)

    def to_dict(self) -> dict:
        return {"error": "ConfigValidationError", "file": self.path, "message": str(self)}


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigValidationError(path, f"cannot read config: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigValidationError(path, f"invalid JSON at byte {exc.pos}: {exc.msg}") from exc
    data.update(overrides or {})
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigValidationError(path, str(exc)) from exc


def dump_config(cfg: PipelineConfig) -> dict:
    """Fully materialized config, suitable for run logs."""
    return cfg.model_dump(mode="json")
