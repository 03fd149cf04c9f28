import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from icon_peft.backbone import ViTConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    return ViTConfig(image_size=16, patch_size=4, in_channels=3, embed_dim=16, depth=2, num_heads=2,
                     mlp_ratio=2.0, num_classes=5)
