import numpy as np
import pytest
import torch

from sfodlab.config import RunConfig
from sfodlab.detector import DetectorConfig

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# small model for unit tests: full code paths, fraction of the compute
TINY_DETECTOR = DetectorConfig(
    image_size=32,
    patch_size=8,
    embed_dim=16,
    heads=2,
    encoder_layers=1,
    decoder_layers=2,
    queries=4,
    classes=3,
)


def tiny_run_config(**overrides) -> RunConfig:
    base = dict(
        seed=0,
        image_size=32,
        patch_size=8,
        embed_dim=16,
        heads=2,
        encoder_layers=1,
        decoder_layers=2,
        queries=4,
        classes=3,
        n_source_train=48,
        n_source_val=24,
        n_target_train=48,
        n_target_val=24,
        pretrain_epochs=2,
        adapt_epochs=2,
        eval_every=4,
        uncertainty_probe_images=8,
        mask_patch_size=8,
    )
    base.update(overrides)
    return RunConfig(**base)


def random_images(rng, n, config: DetectorConfig):
    return rng.random((n, config.channels, config.image_size, config.image_size)).astype(
        np.float32
    )
