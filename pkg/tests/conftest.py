import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from purifier.models import (
    DiscriminatorConfig,
    FixedFeatureExtractor,
    GeneratorConfig,
    SmallConvNet,
    build_discriminator,
    build_generator,
)


@pytest.fixture
def tiny_generator():
    return build_generator(GeneratorConfig((16, 16), 2, 2, base_channels=8), seed=0)


@pytest.fixture
def tiny_discriminator():
    return build_discriminator(DiscriminatorConfig(scales=1, base_channels=8), seed=0)


@pytest.fixture
def tiny_extractor():
    return FixedFeatureExtractor(seed=0, base_channels=8, stages=2)


@pytest.fixture
def tiny_classifier():
    torch.manual_seed(0)
    return SmallConvNet(num_classes=4, base_channels=8, feature_dim=16)


def rel_err(a, b):
    denom = max(abs(b), 1e-12)
    return abs(a - b) / denom
