"""Flat run configuration: one key per hyperparameter, YAML on disk.

Unknown keys are an error so stale configs fail loudly instead of silently
running defaults.
"""

import dataclasses
from dataclasses import dataclass

import yaml

from .detector import DetectorConfig
from .losses import LossWeights
from .scenes import DomainShiftSpec


@dataclass
class RunConfig:
    # reproducibility
    seed: int = 0

    # detector shape
    image_size: int = 64
    channels: int = 3
    patch_size: int = 8
    embed_dim: int = 32
    heads: int = 2
    encoder_layers: int = 2
    decoder_layers: int = 3
    queries: int = 10
    classes: int = 3

    # data
    n_source_train: int = 2000
    n_source_val: int = 500
    n_target_train: int = 2000
    n_target_val: int = 500
    shift_noise: float = 0.05
    shift_blur: float = 1.0
    shift_fog: float = 0.5

    # optimization
    learning_rate: float = 2e-4
    batch_size: int = 8
    pretrain_epochs: int = 60
    adapt_epochs: int = 40
    eval_every: int = 50
    grad_clip_norm: float = 0.0  # 0 disables clipping
    aux_supervision: bool = False

    # loss shape
    w_cls: float = 1.0
    w_l1: float = 1.0
    w_giou: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    qfl_gamma: float = 2.0

    # teaching
    ema_alpha: float = 0.999
    ema_interval: int = 1
    pseudo_threshold: float = 0.3
    historical_threshold: float = 0.3
    mask_patch_size: int = 8
    mask_ratio: float = 0.5
    meta_window: int = 5
    uncertainty_aggregate: str = "mean"
    uncertainty_probe_images: int = 32

    # evaluation
    eval_score_floor: float = 0.05

    def __post_init__(self):
        if self.batch_size < 1 or self.eval_every < 1 or self.ema_interval < 1:
            raise ValueError("batch_size, eval_every and ema_interval must be positive")
        if self.meta_window < 1:
            raise ValueError("meta_window must be at least 1")
        if not 0 <= self.ema_alpha <= 1:
            raise ValueError("ema_alpha must lie in [0, 1]")
        if not 0 <= self.mask_ratio <= 1:
            raise ValueError("mask_ratio must lie in [0, 1]")

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(
            image_size=self.image_size,
            channels=self.channels,
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            heads=self.heads,
            encoder_layers=self.encoder_layers,
            decoder_layers=self.decoder_layers,
            queries=self.queries,
            classes=self.classes,
        )

    def shift_spec(self) -> DomainShiftSpec:
        return DomainShiftSpec(noise=self.shift_noise, blur=self.shift_blur, fog=self.shift_fog)

    def loss_weights(self) -> LossWeights:
        return LossWeights(w_cls=self.w_cls, w_l1=self.w_l1, w_giou=self.w_giou)

    def replace(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, **kwargs)


def load_config(path) -> RunConfig:
    """Read a YAML key/value document; unknown keys raise ValueError."""
    with open(path) as f:
        raw = yaml.safe_load(f) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"config root must be a mapping, got {type(raw).__name__}")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(**raw)


def save_config(cfg: RunConfig, path):
    with open(path, "w") as f:
        yaml.safe_dump(dataclasses.asdict(cfg), f, sort_keys=True)
