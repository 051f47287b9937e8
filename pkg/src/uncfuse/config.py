"""Run configuration: nested, validated, hashable settings for every stage.

One RunConfig drives the whole pipeline. A single global seed is expanded
into named streams (world, train_lidar, train_fusion, sampling, robustness)
by the consuming modules, so changing one stage's behavior never shifts the
randomness of another.

Desk-scale defaults keep CPU runtimes in minutes. ``paper_scale()`` swaps in
the larger published constants (range gate, grid resolution, proposal
counts, training schedules, distance bins) for full-size runs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml


class ConfigError(ValueError):
    pass


def _check(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


@dataclass(frozen=True)
class WorldConfig:
    """Scene generator settings: range gate, object placement, sensors, labels."""

    x_min: float = 0.0
    x_max: float = 48.0
    y_min: float = -24.0
    y_max: float = 24.0
    z_min: float = 0.0
    z_max: float = 2.5
    min_objects: int = 2
    max_objects: int = 6
    mean_length: float = 3.2
    mean_width: float = 1.7
    mean_height: float = 1.5
    length_std: float = 0.25
    width_std: float = 0.1
    height_std: float = 0.08
    min_range: float = 6.0
    max_range: float = 40.0
    max_azimuth_deg: float = 42.0
    max_overlap_iou: float = 0.05
    placement_retries: int = 40
    # Surface point budget per object is lidar_budget / distance^2, capped.
    lidar_budget: float = 240000.0
    max_points_per_object: int = 800
    point_noise: float = 0.02
    shadow_drop_prob: float = 0.7
    occlusion_thresholds: tuple = (0.10, 0.35, 0.70)
    clutter_points: int = 150
    clutter_z_std: float = 0.03
    # Unsure probability: sigmoid(a0 + a1*distance + a2*occlusion - a3*ln(1+n_points)).
    unsure_a0: float = -0.3
    unsure_a1: float = 0.045
    unsure_a2: float = 0.65
    unsure_a3: float = 0.35
    # Extra point jitter applied to objects labeled unsure (annotation difficulty
    # shows up as noisier measurements, the effect the analysis stage detects).
    unsure_jitter: float = 0.18
    image_width: int = 160
    image_height: int = 80
    focal: float = 80.0

    def validate(self):
        _check(self.x_max > self.x_min, "world: x_max must exceed x_min")
        _check(self.y_max > self.y_min, "world: y_max must exceed y_min")
        _check(self.z_max > self.z_min, "world: z_max must exceed z_min")
        _check(0 <= self.min_objects <= self.max_objects, "world: need 0 <= min_objects <= max_objects")
        _check(min(self.mean_length, self.mean_width, self.mean_height) > 0, "world: mean dims must be positive")
        _check(min(self.length_std, self.width_std, self.height_std) >= 0, "world: dim stds must be >= 0")
        _check(0 < self.min_range < self.max_range, "world: need 0 < min_range < max_range")
        _check(0 < self.max_azimuth_deg <= 90, "world: max_azimuth_deg in (0, 90]")
        _check(self.lidar_budget > 0, "world: lidar_budget must be positive")
        _check(self.max_points_per_object >= 1, "world: max_points_per_object >= 1")
        _check(self.point_noise >= 0, "world: point_noise >= 0")
        _check(0 <= self.shadow_drop_prob <= 1, "world: shadow_drop_prob in [0, 1]")
        t = self.occlusion_thresholds
        _check(len(t) == 3 and 0 < t[0] < t[1] < t[2] < 1, "world: occlusion_thresholds must be 3 ascending fractions")
        _check(self.clutter_points >= 0, "world: clutter_points >= 0")
        _check(self.unsure_jitter >= 0, "world: unsure_jitter >= 0")
        _check(self.image_width > 0 and self.image_height > 0, "world: image size must be positive")
        _check(self.focal > 0, "world: focal must be positive")


@dataclass(frozen=True)
class FeatureConfig:
    """BEV rasterization and RoI pooling settings."""

    resolution: float = 0.4
    n_slabs: int = 3
    pool_bev: int = 4
    pool_image: int = 4

    def validate(self, world: WorldConfig):
        _check(self.resolution > 0, "features: resolution must be positive")
        _check(self.n_slabs >= 1, "features: n_slabs >= 1")
        _check(self.pool_bev >= 1 and self.pool_image >= 1, "features: pool sizes >= 1")
        for name, span in (("x", world.x_max - world.x_min), ("y", world.y_max - world.y_min)):
            cells = span / self.resolution
            _check(abs(cells - round(cells)) < 1e-9,
                   f"features: {name} gate extent {span} not divisible by resolution {self.resolution}")

    @property
    def n_channels(self) -> int:
        # occupancy per slab + max height + log density
        return self.n_slabs + 2


@dataclass(frozen=True)
class ModelConfig:
    """Network architecture settings for both stages."""

    patch_size: int = 5
    stride: int = 4
    proposal_hidden: tuple = (128, 64)
    proposal_dropout: float = 0.0
    fusion_hidden: tuple = (256, 256, 256)
    fusion_dropout: float = 0.3
    # fresh proposal networks start with the classification bias at
    # log(p/(1-p)) so initial scores match the positive-cell base rate
    cls_prior: float = 0.01

    def validate(self):
        _check(self.patch_size >= 1 and self.patch_size % 2 == 1, "model: patch_size must be odd and >= 1")
        _check(self.stride >= 1, "model: stride >= 1")
        _check(all(h >= 1 for h in self.proposal_hidden), "model: proposal_hidden sizes >= 1")
        _check(all(h >= 1 for h in self.fusion_hidden), "model: fusion_hidden sizes >= 1")
        _check(0 <= self.proposal_dropout < 1, "model: proposal_dropout in [0, 1)")
        _check(0 <= self.fusion_dropout < 1, "model: fusion_dropout in [0, 1)")
        _check(0 < self.cls_prior < 1, "model: cls_prior in (0, 1)")


@dataclass(frozen=True)
class LidarTrainConfig:
    """First-stage training: SGD with step decay on the proposal heads."""

    steps: int = 6000
    lr: float = 0.02
    lr_decay: float = 0.75
    lr_decay_every: int = 30000
    momentum: float = 0.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    probabilistic: bool = True

    def validate(self):
        _check(self.steps >= 1, "train_lidar: steps >= 1")
        _check(self.lr > 0, "train_lidar: lr must be positive")
        _check(0 < self.lr_decay <= 1, "train_lidar: lr_decay in (0, 1]")
        _check(self.lr_decay_every >= 1, "train_lidar: lr_decay_every >= 1")
        _check(0 <= self.momentum < 1, "train_lidar: momentum in [0, 1)")
        _check(self.focal_gamma >= 0, "train_lidar: focal_gamma >= 0")
        _check(0 < self.focal_alpha <= 1, "train_lidar: focal_alpha in (0, 1]")


SAMPLE_DIM_NAMES = ("dx", "dy", "dz", "log_l", "log_w", "log_h", "cos_t", "sin_t")
FUSION_MODES = ("baseline", "no_sampling", "fixed_sigma", "learned_sampling")


@dataclass(frozen=True)
class FusionTrainConfig:
    """Second-stage training: Adam on the fusion head over frozen proposals."""

    steps: int = 3000
    lr: float = 1e-3
    mode: str = "learned_sampling"
    fixed_sigma: float = 0.1
    sample_dims: tuple = ("dx", "dy")
    k_train: int = 64
    k_infer: int = 32
    pre_nms_top: int = 256
    proposal_nms_iou: float = 0.5
    match_iou: float = 0.5

    def validate(self):
        _check(self.steps >= 1, "train_fusion: steps >= 1")
        _check(self.lr > 0, "train_fusion: lr must be positive")
        _check(self.mode in FUSION_MODES, f"train_fusion: mode must be one of {FUSION_MODES}")
        _check(self.fixed_sigma >= 0, "train_fusion: fixed_sigma >= 0")
        _check(len(self.sample_dims) >= 1, "train_fusion: sample_dims must be nonempty")
        for d in self.sample_dims:
            _check(d in SAMPLE_DIM_NAMES, f"train_fusion: unknown sample dim {d!r}")
        _check(self.k_train >= 1 and self.k_infer >= 1, "train_fusion: k_train and k_infer >= 1")
        _check(self.pre_nms_top >= 1, "train_fusion: pre_nms_top >= 1")
        _check(0 < self.proposal_nms_iou < 1, "train_fusion: proposal_nms_iou in (0, 1)")
        _check(0 < self.match_iou < 1, "train_fusion: match_iou in (0, 1)")


@dataclass(frozen=True)
class EvalSettings:
    """Distance-binned AP evaluation settings."""

    # (lo, hi, iou_thresh) per bin, contiguous ascending.
    bins: tuple = ((0.0, 16.0, 0.7), (16.0, 32.0, 0.6), (32.0, 48.0, 0.5))
    score_floor: float = 0.01
    final_nms_iou: float = 0.3
    interpolation: str = "all_point"
    metrics: tuple = ("bev", "3d", "2d")

    def validate(self):
        _check(len(self.bins) >= 1, "evaluation: at least one distance bin")
        prev_hi = None
        for lo, hi, th in self.bins:
            _check(hi > lo >= 0, "evaluation: bins must have hi > lo >= 0")
            _check(0 < th <= 1, "evaluation: IoU thresholds in (0, 1]")
            if prev_hi is not None:
                _check(abs(lo - prev_hi) < 1e-9, "evaluation: bins must be contiguous")
            prev_hi = hi
        _check(0 <= self.score_floor < 1, "evaluation: score_floor in [0, 1)")
        _check(0 < self.final_nms_iou < 1, "evaluation: final_nms_iou in (0, 1)")
        _check(self.interpolation in ("all_point", "forty_point"),
               "evaluation: interpolation must be all_point or forty_point")
        for m in self.metrics:
            _check(m in ("bev", "3d", "2d"), f"evaluation: unknown metric {m!r}")


@dataclass(frozen=True)
class RobustnessConfig:
    """Misalignment sweep settings."""

    sigmas: tuple = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)

    def validate(self):
        _check(len(self.sigmas) >= 1, "robustness: at least one sigma")
        _check(all(s >= 0 for s in self.sigmas), "robustness: sigmas must be non-negative")
        _check(all(b > a for a, b in zip(self.sigmas, self.sigmas[1:])),
               "robustness: sigmas must be strictly ascending")


@dataclass(frozen=True)
class AnalysisConfig:
    """Uncertainty analysis settings."""

    n_bins: int = 30
    log_points: bool = True

    def validate(self):
        _check(self.n_bins >= 2, "analysis: n_bins >= 2")


@dataclass(frozen=True)
class RunConfig:
    """Top-level configuration; one value drives an entire reproducible run."""

    seed: int = 0
    n_train: int = 2000
    n_test: int = 500
    world: WorldConfig = field(default_factory=WorldConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train_lidar: LidarTrainConfig = field(default_factory=LidarTrainConfig)
    train_fusion: FusionTrainConfig = field(default_factory=FusionTrainConfig)
    evaluation: EvalSettings = field(default_factory=EvalSettings)
    robustness: RobustnessConfig = field(default_factory=RobustnessConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def validate(self) -> "RunConfig":
        _check(self.n_train >= 0 and self.n_test >= 0, "run: frame counts must be >= 0")
        self.world.validate()
        self.features.validate(self.world)
        self.model.validate()
        self.train_lidar.validate()
        self.train_fusion.validate()
        self.evaluation.validate()
        self.robustness.validate()
        self.analysis.validate()
        return self

    def to_dict(self) -> dict:
        return _as_plain(dataclasses.asdict(self))

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def replace(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, **kwargs)


def _as_plain(v):
    if isinstance(v, dict):
        return {k: _as_plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_as_plain(x) for x in v]
    return v


_SECTIONS = {
    "world": WorldConfig,
    "features": FeatureConfig,
    "model": ModelConfig,
    "train_lidar": LidarTrainConfig,
    "train_fusion": FusionTrainConfig,
    "evaluation": EvalSettings,
    "robustness": RobustnessConfig,
    "analysis": AnalysisConfig,
}


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _section_from_dict(cls, d: dict, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"config section {path!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown config keys under {path!r}: {unknown}")
    return cls(**{k: _tuplify(v) for k, v in d.items()})


def config_from_dict(d: dict) -> RunConfig:
    """Build and validate a RunConfig from nested plain data; unknown keys rejected."""
    if not isinstance(d, dict):
        raise ConfigError("config root must be a mapping")
    top_scalars = {"seed", "n_train", "n_test"}
    unknown = sorted(set(d) - top_scalars - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {unknown}")
    kwargs = {k: d[k] for k in top_scalars if k in d}
    for name, cls in _SECTIONS.items():
        if name in d:
            kwargs[name] = _section_from_dict(cls, d[name], name)
    return RunConfig(**kwargs).validate()


def load_config(path) -> RunConfig:
    """Load a YAML config file into a validated RunConfig."""
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is None:
        data = {}
    return config_from_dict(data)


def paper_scale(cfg: RunConfig) -> RunConfig:
    """Swap desk-scale constants for the full-scale published settings.

    Range gate [0, 70] x [-40, 40] m, 0.1 m grid resolution, 1024/500
    proposals at train/inference, the long SGD and Adam schedules, distance
    bins 0-30/30-50/50-70 m, and 40-point AP interpolation.
    """
    return cfg.replace(
        world=dataclasses.replace(cfg.world, x_max=70.0, y_min=-40.0, y_max=40.0,
                                  max_range=68.0),
        features=dataclasses.replace(cfg.features, resolution=0.1),
        train_lidar=dataclasses.replace(cfg.train_lidar, steps=140000, lr=0.02),
        train_fusion=dataclasses.replace(cfg.train_fusion, steps=120000, lr=1e-5,
                                         k_train=1024, k_infer=500, pre_nms_top=2048),
        evaluation=dataclasses.replace(
            cfg.evaluation,
            bins=((0.0, 30.0, 0.7), (30.0, 50.0, 0.6), (50.0, 70.0, 0.5)),
            interpolation="forty_point"),
    ).validate()
