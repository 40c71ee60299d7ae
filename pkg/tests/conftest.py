import numpy as np
import pytest
import torch

from detadvprop.config import DetectorConfig
from detadvprop.data.dataset import generate_dataset
from detadvprop.data.scenes import SceneSpec
from detadvprop.detector.model import build_detector
from detadvprop.detector.targets import Annotation
from detadvprop.trainer import batch_targets


def small_config(**overrides):
    values = dict(widths=(8, 8, 16, 16), head_width=8, head_depth=1)
    values.update(overrides)
    return DetectorConfig(**values)


def random_images(n=2, size=64, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand((n, 3, size, size), generator=gen) * 2 - 1


def fixture_annotations():
    return [
        Annotation([(8, 8, 32, 30), (36, 30, 60, 58)], [0, 2]),
        Annotation([(20, 4, 44, 28)], [1]),
    ]


@pytest.fixture
def model_and_batch():
    """A seeded two-branch model, a batch of two images and their anchor targets."""
    state = build_detector(small_config(bn_branches=2), seed=0)
    images = random_images()
    anns = fixture_annotations()
    return state, images, anns, batch_targets(state, images, anns)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "shapes"
    return generate_dataset(SceneSpec(), 24, seed=3, output_path=str(root), val_fraction=0.25)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
