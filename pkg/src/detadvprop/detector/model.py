"""A small single-stage detector whose batch-norm layers carry several branches.

Each :class:`SplitBatchNorm2d` owns independent statistics and affine
parameters per branch; everything else is shared. Branch 0 is the main
(clean) branch and the only one kept for inference.
"""

import dataclasses
import math
from contextlib import contextmanager

import torch
import torch.nn as nn
import torch.nn.functional as F

from .anchors import generate_anchors

BRANCH_NAMES = ("main", "aux", "aux2")


class InputRangeError(ValueError):
    pass


class SplitBatchNorm2d(nn.Module):
    def __init__(self, num_features, num_branches=1, eps=1e-3, decay=0.99):
        super().__init__()
        # torch momentum is the weight of the new batch: 1 - decay
        self.branches = nn.ModuleList(
            nn.BatchNorm2d(num_features, eps=eps, momentum=1.0 - decay) for _ in range(num_branches)
        )
        self.active = 0
        self.update_statistics = True

    def forward(self, x):
        bn = self.branches[self.active]
        if self.training and not self.update_statistics:
            return F.batch_norm(x, None, None, bn.weight, bn.bias, True, 0.0, bn.eps)
        return bn(x)


def _conv_bn_act(cin, cout, stride, config):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        SplitBatchNorm2d(cout, config.bn_branches, config.bn_eps, config.bn_decay),
        nn.SiLU(),
    )


class TinyDetector(nn.Module):
    """Stride-2 conv stages, a top-down merge of the detection levels and shared heads."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        stages = []
        cin = config.in_channels
        for width in config.widths:
            layers = [_conv_bn_act(cin, width, 2, config)]
            layers += [_conv_bn_act(width, width, 1, config) for _ in range(config.stage_depth - 1)]
            stages.append(nn.Sequential(*layers))
            cin = width
        self.stages = nn.ModuleList(stages)
        stage_strides = config.stage_strides
        self.level_stages = [stage_strides.index(s) for s in config.strides]
        self.laterals = nn.ModuleList(
            nn.Conv2d(config.widths[i], config.head_width, 1) for i in self.level_stages
        )
        self.cls_tower = nn.Sequential(
            *[_conv_bn_act(config.head_width, config.head_width, 1, config) for _ in range(config.head_depth)]
        )
        self.box_tower = nn.Sequential(
            *[_conv_bn_act(config.head_width, config.head_width, 1, config) for _ in range(config.head_depth)]
        )
        n_anchor = config.anchors_per_cell
        self.cls_out = nn.Conv2d(config.head_width, n_anchor * config.num_classes, 3, padding=1)
        self.box_out = nn.Conv2d(config.head_width, n_anchor * 4, 3, padding=1)
        nn.init.constant_(self.cls_out.bias, -math.log((1 - 0.01) / 0.01))
        nn.init.zeros_(self.box_out.bias)
        self._anchor_cache = {}

    @property
    def num_branches(self):
        return self.config.bn_branches

    def split_bn_layers(self):
        return [m for m in self.modules() if isinstance(m, SplitBatchNorm2d)]

    def set_branch(self, branch):
        if not 0 <= branch < self.num_branches:
            raise IndexError(f"branch {branch} out of range for {self.num_branches} batch-norm branches")
        for layer in self.split_bn_layers():
            layer.active = branch

    def anchors(self, image_size):
        key = tuple(image_size)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = generate_anchors(self.config, key)
        return self._anchor_cache[key]

    def forward(self, x, branch=0):
        if x.dim() != 4 or x.shape[1] != self.config.in_channels:
            raise InputRangeError(f"expected B x {self.config.in_channels} x H x W input, got {tuple(x.shape)}")
        if x.numel() and (x.min() < -1 or x.max() > 1):
            raise InputRangeError("input values must lie in [-1, 1]")
        self.anchors(x.shape[-2:])  # validates the image size
        self.set_branch(branch)
        feats = []
        h = x
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        levels = [lat(feats[i]) for lat, i in zip(self.laterals, self.level_stages)]
        for i in range(len(levels) - 2, -1, -1):
            levels[i] = levels[i] + F.interpolate(levels[i + 1], size=levels[i].shape[-2:], mode="nearest")
        batch = x.shape[0]
        logits, boxes = [], []
        for level in levels:
            c = self.cls_out(self.cls_tower(level))
            b = self.box_out(self.box_tower(level))
            logits.append(c.permute(0, 2, 3, 1).reshape(batch, -1, self.config.num_classes))
            boxes.append(b.permute(0, 2, 3, 1).reshape(batch, -1, 4))
        return torch.cat(logits, dim=1), torch.cat(boxes, dim=1)

    @contextmanager
    def frozen_statistics(self, mode="frozen"):
        """Run without touching any running statistics.

        ``frozen`` normalizes with the stored running statistics (eval mode);
        ``batch`` normalizes with the current batch statistics but does not
        record them.
        """
        was_training = self.training
        layers = self.split_bn_layers()
        if mode == "frozen":
            self.eval()
        elif mode == "batch":
            self.train()
            for layer in layers:
                layer.update_statistics = False
        else:
            raise ValueError(f"unknown statistics mode {mode!r}")
        try:
            yield self
        finally:
            for layer in layers:
                layer.update_statistics = True
            self.train(was_training)


def build_detector(config, seed=None):
    """Construct a detector; with ``seed`` the initialization is reproducible."""
    if seed is None:
        return TinyDetector(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return TinyDetector(config)


def forward(batch, branch, state, training):
    """Raw predictions of ``state`` through ``branch`` in training or inference mode."""
    state.train(training)
    return state(batch, branch)


def copy_main_to_branches(state):
    """Overwrite every auxiliary branch with the main branch (statistics and affine)."""
    with torch.no_grad():
        for layer in state.split_bn_layers():
            main = layer.branches[0]
            for other in layer.branches[1:]:
                other.load_state_dict(main.state_dict())
    return state


def strip_auxiliary_branches(state):
    """Return a single-branch copy of ``state`` that keeps only the main batch norm."""
    config = dataclasses.replace(state.config, bn_branches=1)
    stripped = TinyDetector(config)
    kept = {k: v for k, v in state.state_dict().items() if ".branches." not in k or ".branches.0." in k}
    stripped.load_state_dict(kept)
    stripped.train(state.training)
    return stripped


def count_parameters(state):
    """Learnable parameters plus batch-norm running mean and variance."""
    total = sum(p.numel() for p in state.parameters())
    for module in state.modules():
        if isinstance(module, nn.BatchNorm2d):
            total += module.running_mean.numel() + module.running_var.numel()
    return total


def bn_state_snapshot(state, branch):
    """Copies of every tensor owned by ``branch`` of every split batch norm."""
    out = {}
    for name, module in state.named_modules():
        if isinstance(module, SplitBatchNorm2d):
            bn = module.branches[branch]
            for key, value in bn.state_dict().items():
                out[f"{name}.{key}"] = value.detach().clone()
    return out
