"""Label-preserving image corruptions with five severity levels, and the corrupted validation grid."""

import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw

from ..seeding import derive_seed, numpy_rng
from .dataset import DetectionDataset, prepare_output_dir, save_png, write_json, INDEX_NAME

MANIFEST_NAME = "manifest.json"
SEVERITIES = (1, 2, 3, 4, 5)
NOISE_KINDS = ("gaussian_noise", "shot_noise", "impulse_noise")

# one parameter per severity, all in [-1, 1] pixel units unless noted
SEVERITY_TABLES = {
    "gaussian_noise": (0.04, 0.06, 0.09, 0.13, 0.19),  # noise std
    "shot_noise": (60.0, 25.0, 12.0, 5.0, 3.0),  # photon count at full intensity
    "impulse_noise": (0.03, 0.06, 0.09, 0.17, 0.27),  # fraction of flipped values
    "defocus_blur": (1.0, 1.5, 2.0, 2.5, 3.0),  # disk radius in pixels
    "motion_blur": (3, 5, 7, 9, 11),  # kernel length in pixels
    "brightness": (0.2, 0.4, 0.6, 0.8, 1.0),  # additive shift
    "contrast": (0.4, 0.3, 0.2, 0.1, 0.05),  # deviation scale
    "pixelate": (0.6, 0.5, 0.4, 0.3, 0.25),  # downsampling factor
}
# +1 when a larger parameter is a stronger corruption
STRENGTH_DIRECTION = {
    "gaussian_noise": 1, "shot_noise": -1, "impulse_noise": 1, "defocus_blur": 1,
    "motion_blur": 1, "brightness": 1, "contrast": -1, "pixelate": -1,
}
CORRUPTION_KINDS = tuple(SEVERITY_TABLES)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in SEVERITY_TABLES:
            raise ValueError(f"unknown corruption kind {self.kind!r}; available: {CORRUPTION_KINDS}")
        if self.severity not in SEVERITIES:
            raise ValueError(f"severity must be one of {SEVERITIES}, got {self.severity!r}")

    @property
    def parameter(self):
        return SEVERITY_TABLES[self.kind][self.severity - 1]


def _convolve(image, kernel):
    """Same-size per-channel convolution with reflected borders."""
    k = torch.as_tensor(kernel, dtype=torch.float32)
    kh, kw = k.shape
    x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None]
    x = F.pad(x, (kw // 2, kw - 1 - kw // 2, kh // 2, kh - 1 - kh // 2), mode="reflect")
    weight = k.flip(0, 1).expand(x.shape[1], 1, kh, kw).contiguous()
    return F.conv2d(x, weight, groups=x.shape[1])[0].numpy()


def disk_kernel(radius, supersample=8):
    """Normalized disk of the given radius with anti-aliased rim.

    A radius too small to cover any subsample gives the identity kernel.
    """
    if radius < 0:
        raise ValueError("disk radius must be >= 0")
    half = int(math.ceil(radius))
    size = 2 * half + 1
    offsets = (np.arange(size * supersample) + 0.5) / supersample - size / 2
    yy, xx = np.meshgrid(offsets, offsets, indexing="ij")
    inside = (yy ** 2 + xx ** 2 <= radius ** 2).astype(np.float64)
    kernel = inside.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    if kernel.sum() == 0:
        kernel[half, half] = 1.0
    return (kernel / kernel.sum()).astype(np.float32)


def motion_kernel(length, angle_deg, supersample=8):
    """Normalized line of ``length`` pixels through the kernel center, rotated by ``angle_deg``."""
    size = int(length) if int(length) % 2 else int(length) + 1
    canvas = Image.new("L", (size * supersample, size * supersample), 0)
    center = size * supersample / 2
    half = (length - 1) / 2 * supersample
    dx = half * math.cos(math.radians(angle_deg))
    dy = half * math.sin(math.radians(angle_deg))
    ImageDraw.Draw(canvas).line([(center - dx, center - dy), (center + dx, center + dy)], fill=255,
                                width=supersample)
    kernel = np.asarray(canvas.resize((size, size), Image.BOX), dtype=np.float64)
    return (kernel / kernel.sum()).astype(np.float32)


def _pixelate(image, factor):
    height, width = image.shape[-2:]
    small = (max(1, int(round(height * factor))), max(1, int(round(width * factor))))
    x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None]
    x = F.interpolate(F.adaptive_avg_pool2d(x, small), size=(height, width), mode="nearest")
    return x[0].numpy()


def corrupt_image(image, spec, rng_seed, parameter=None):
    """Apply one corruption to a ``3 x H x W`` image in [-1, 1]; the result is clipped to [-1, 1].

    ``parameter`` replaces the severity-table value when given.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.size and (image.min() < -1 or image.max() > 1):
        raise ValueError("image values must lie in [-1, 1]")
    p = spec.parameter if parameter is None else parameter
    rng = numpy_rng(rng_seed, "corrupt", spec.kind)
    kind = spec.kind
    if kind == "gaussian_noise":
        out = image + rng.normal(0.0, 1.0, size=image.shape).astype(np.float32) * np.float32(p)
    elif kind == "shot_noise":
        unit = (image + 1.0) / 2.0
        out = rng.poisson(unit * p) / p * 2.0 - 1.0
    elif kind == "impulse_noise":
        flip = rng.random(image.shape) < p
        salt = rng.random(image.shape) < 0.5
        out = np.where(flip, np.where(salt, 1.0, -1.0), image)
    elif kind == "defocus_blur":
        out = _convolve(image, disk_kernel(p))
    elif kind == "motion_blur":
        out = _convolve(image, motion_kernel(p, rng.uniform(-45.0, 45.0)))
    elif kind == "brightness":
        out = image + np.float32(p)
    elif kind == "contrast":
        mean = image.mean(axis=(1, 2), keepdims=True)
        out = (image - mean) * np.float32(p) + mean
    elif kind == "pixelate":
        out = _pixelate(image, p)
    else:  # pragma: no cover - CorruptionSpec already validates the kind
        raise ValueError(f"unknown corruption kind {kind!r}")
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def image_seed(seed, kind, severity, image_id):
    return derive_seed(seed, kind, int(severity), int(image_id))


def variant_dirname(kind, severity):
    return f"{kind}_s{int(severity)}"


def write_variant(dataset, kind, severity, seed, output_path, split="val"):
    """Write one corrupted copy of ``split`` with the clean annotations copied verbatim."""
    spec = CorruptionSpec(kind, int(severity))
    ids = dataset.split_ids(split)
    os.makedirs(os.path.join(output_path, "images"), exist_ok=True)
    entries = []
    for image_id in ids:
        entry = dataset.entries[image_id]
        corrupted = corrupt_image(dataset.image(image_id), spec, image_seed(seed, kind, severity, image_id))
        save_png(os.path.join(output_path, entry["file"]), corrupted)
        entries.append(entry)
    index = {
        "images": entries,
        "classes": list(dataset.classes),
        "split": {split: list(ids)},
        "meta": {"corruption": {"kind": kind, "severity": int(severity)}, "seed": int(seed)},
    }
    write_json(os.path.join(output_path, INDEX_NAME), index)
    return DetectionDataset(output_path)


class CorruptionGrid:
    """A manifest of corrupted validation sets, one per (kind, severity)."""

    def __init__(self, root):
        self.root = os.fspath(root)
        with open(os.path.join(self.root, MANIFEST_NAME), "r", encoding="utf-8") as fh:
            self.manifest = json.load(fh)

    @property
    def clean_path(self):
        return self.manifest["clean"]

    @property
    def keys(self):
        return [(v["kind"], int(v["severity"])) for v in self.manifest["variants"]]

    def __len__(self):
        return len(self.manifest["variants"])

    def variant_path(self, kind, severity):
        for v in self.manifest["variants"]:
            if v["kind"] == kind and int(v["severity"]) == int(severity):
                return os.path.join(self.root, v["path"])
        raise KeyError(f"grid has no variant {kind}/{severity}")

    def variants(self):
        for v in self.manifest["variants"]:
            yield v["kind"], int(v["severity"]), DetectionDataset(os.path.join(self.root, v["path"]))


def build_corruption_grid(dataset, kinds, severities, seed, output_path, split="val", overwrite=False):
    """Corrupt the ``split`` images of ``dataset`` for every (kind, severity) pair and write a manifest."""
    kinds, severities = list(kinds), [int(s) for s in severities]
    for kind in kinds:
        for severity in severities:
            CorruptionSpec(kind, severity)
    if not dataset.split_ids(split):
        raise ValueError(f"split {split!r} of {dataset.root} is empty")
    prepare_output_dir(output_path, overwrite)
    variants = []
    for kind in kinds:
        for severity in severities:
            name = variant_dirname(kind, severity)
            write_variant(dataset, kind, severity, seed, os.path.join(output_path, name), split)
            variants.append({"kind": kind, "severity": severity, "path": name})
    manifest = {"clean": os.path.abspath(dataset.root), "split": split, "seed": int(seed), "variants": variants}
    write_json(os.path.join(output_path, MANIFEST_NAME), manifest)
    return CorruptionGrid(output_path)
