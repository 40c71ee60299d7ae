"""Anchor grid generation.

Boxes everywhere in this package use ``(ymin, xmin, ymax, xmax)`` in pixels.
"""

from dataclasses import dataclass
from typing import Tuple

import torch

from ..config import ConfigError


@dataclass(frozen=True)
class AnchorSet:
    levels: Tuple[torch.Tensor, ...]
    strides: Tuple[int, ...]
    image_size: Tuple[int, int]

    @property
    def boxes(self):
        """All anchors concatenated level by level, shape ``(A, 4)``."""
        return torch.cat(self.levels, dim=0)

    def __len__(self):
        return sum(len(level) for level in self.levels)


def check_image_size(config, image_size):
    height, width = image_size
    for stride in config.strides:
        if height % stride or width % stride:
            raise ConfigError(f"image size {image_size} is not divisible by stride {stride}")
    coarsest = config.stage_strides[-1]
    if height % coarsest or width % coarsest:
        raise ConfigError(f"image size {image_size} is not divisible by backbone stride {coarsest}")


def generate_anchors(config, image_size):
    """Anchors for every level, ordered row, column, scale, ratio.

    The order matches the flattening of the head outputs, so anchor ``i`` is
    the reference box for prediction ``i``.
    """
    check_image_size(config, image_size)
    height, width = image_size
    levels = []
    for stride in config.strides:
        shapes = []
        for scale in config.scales:
            size = config.anchor_scale * stride * scale
            for ratio in config.ratios:
                # ratio is height / width at constant area
                shapes.append((size * ratio ** 0.5, size / ratio ** 0.5))
        shapes = torch.tensor(shapes, dtype=torch.float32)
        cy = (torch.arange(height // stride, dtype=torch.float32) + 0.5) * stride
        cx = (torch.arange(width // stride, dtype=torch.float32) + 0.5) * stride
        cy, cx = torch.meshgrid(cy, cx, indexing="ij")
        centers = torch.stack([cy.reshape(-1), cx.reshape(-1)], dim=1)
        centers = centers[:, None, :].expand(-1, len(shapes), -1)
        half = shapes[None, :, :] / 2
        boxes = torch.cat([centers - half, centers + half], dim=2).reshape(-1, 4)
        levels.append(boxes)
    return AnchorSet(tuple(levels), tuple(config.strides), (int(height), int(width)))
