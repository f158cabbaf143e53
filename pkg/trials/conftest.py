import numpy as np
import pytest

from ic_align.datagen import CosineTexture
from ic_align.imaging import Frame


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def texture():
    return CosineTexture.random(np.random.default_rng(7), periods=(60.0, 120.0))


@pytest.fixture
def textured_frame(texture):
    """128x96 smooth cosine texture, deep enough for a 4-level pyramid"""
    return Frame(texture.render(128, 96))
