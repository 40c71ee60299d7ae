"""Labeled sub-seeds derived from a single root seed."""

import hashlib

import numpy as np
import torch


def derive_seed(root, *labels):
    """Return a 63-bit integer seed that depends only on ``root`` and ``labels``."""
    text = ":".join([str(int(root))] + [str(label) for label in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def numpy_rng(root, *labels):
    return np.random.default_rng(derive_seed(root, *labels))


def torch_generator(root, *labels):
    gen = torch.Generator()
    gen.manual_seed(derive_seed(root, *labels))
    return gen
