"""On-disk detection datasets: PNG images plus one JSON annotation index."""

import dataclasses
import json
import os
import shutil

import numpy as np
import torch
from PIL import Image

from ..detector.targets import Annotation
from ..seeding import derive_seed, numpy_rng
from .scenes import SceneSpec, generate_scene

INDEX_NAME = "index.json"


def to_uint8(image):
    """``3 x H x W`` image in [-1, 1] to an ``H x W x 3`` uint8 array."""
    return np.clip(np.round((np.asarray(image, np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(pixels):
    return (pixels.astype(np.float32).transpose(2, 0, 1) / np.float32(127.5) - np.float32(1.0)).clip(-1, 1)


def save_png(path, image):
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG", optimize=False)


def load_png(path):
    with Image.open(path) as img:
        return from_uint8(np.asarray(img.convert("RGB")))


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, indent=1, ensure_ascii=True) + "\n"


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(obj))


def prepare_output_dir(path, overwrite=False):
    if os.path.exists(path):
        if not os.path.isdir(path):
            raise FileExistsError(f"{path} exists and is not a directory")
        if os.listdir(path):
            if not overwrite:
                raise FileExistsError(f"output directory {path} is not empty (pass overwrite to replace it)")
            shutil.rmtree(path)
    os.makedirs(path, exist_ok=True)


def annotation_records(ann):
    return [{"bbox": list(box), "class": cls} for box, cls in zip(ann.boxes, ann.classes)]


def annotation_from_records(records):
    return Annotation([r["bbox"] for r in records], [r["class"] for r in records])


class DetectionDataset:
    """A dataset directory loaded fully into memory."""

    def __init__(self, root):
        self.root = os.fspath(root)
        with open(os.path.join(self.root, INDEX_NAME), "r", encoding="utf-8") as fh:
            self.index = json.load(fh)
        self.classes = list(self.index["classes"])
        self.entries = {entry["id"]: entry for entry in self.index["images"]}
        self.ids = [entry["id"] for entry in self.index["images"]]
        self.split = {name: list(ids) for name, ids in self.index.get("split", {}).items()}
        self._images = {}

    @property
    def num_classes(self):
        return len(self.classes)

    def __len__(self):
        return len(self.ids)

    def split_ids(self, name):
        if name == "all":
            return list(self.ids)
        if name not in self.split:
            raise KeyError(f"dataset at {self.root} has no split {name!r}")
        return list(self.split[name])

    def image(self, image_id):
        if image_id not in self._images:
            self._images[image_id] = load_png(os.path.join(self.root, self.entries[image_id]["file"]))
        return self._images[image_id]

    def annotation(self, image_id):
        return annotation_from_records(self.entries[image_id]["annotations"])

    def image_size(self, image_id=None):
        entry = self.entries[image_id if image_id is not None else self.ids[0]]
        return entry["height"], entry["width"]

    def load(self, split="all"):
        """``(images, annotations, ids)`` for one split; images stacked as a float tensor."""
        ids = self.split_ids(split)
        images = torch.from_numpy(np.stack([self.image(i) for i in ids])) if ids else torch.empty(0)
        return images, [self.annotation(i) for i in ids], ids


def generate_dataset(spec, n_images, seed, output_path, val_fraction=0.2, overwrite=False):
    """Render ``n_images`` scenes to ``output_path`` and write the annotation index."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    if not 0 <= val_fraction < 1:
        raise ValueError("val_fraction must lie in [0, 1)")
    prepare_output_dir(output_path, overwrite)
    os.makedirs(os.path.join(output_path, "images"))
    records, regenerated = [], {}
    for image_id in range(n_images):
        image, ann, info = generate_scene(spec, derive_seed(seed, "scene", image_id))
        name = f"images/{image_id:06d}.png"
        save_png(os.path.join(output_path, name), image)
        if info["regenerated"]:
            regenerated[str(image_id)] = info["regenerated"]
        records.append({
            "id": image_id,
            "file": name,
            "height": spec.image_size[0],
            "width": spec.image_size[1],
            "annotations": annotation_records(ann),
        })
    order = numpy_rng(seed, "split").permutation(n_images)
    n_val = int(round(n_images * val_fraction))
    val = sorted(int(i) for i in order[:n_val])
    train = sorted(int(i) for i in order[n_val:])
    index = {
        "images": records,
        "classes": list(spec.classes),
        "split": {"train": train, "val": val},
        "meta": {
            "seed": int(seed),
            "scene_spec": {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(spec).items()},
            "regenerated": regenerated,
        },
    }
    write_json(os.path.join(output_path, INDEX_NAME), index)
    return DetectionDataset(output_path)


def scene_spec_from_dict(values):
    known = {f.name for f in dataclasses.fields(SceneSpec)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown scene spec keys {sorted(unknown)}")
    return SceneSpec(**values)
