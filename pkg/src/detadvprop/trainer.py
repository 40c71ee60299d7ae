"""Training loops for the vanilla baseline and the adversarial variants.

Every variant optimizes one summed objective per step: the clean total loss
on the main batch-norm branch plus, for each adversarial domain, the total
loss of that domain's images on its own auxiliary branch.
"""

import json
import math
import os
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List

import numpy as np
import torch
import torch.nn.functional as F

from . import __version__
from .attacks import generate_adversarial
from .config import detector_config_from_dict, detector_config_to_dict, dump_flat
from .detector.losses import LossBundle, detection_loss
from .detector.model import BRANCH_NAMES, SplitBatchNorm2d, build_detector, strip_auxiliary_branches
from .detector.targets import Annotation, assign_targets, stack_targets
from .seeding import derive_seed, numpy_rng


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class StepResult:
    state: torch.nn.Module
    losses: Dict[str, LossBundle]
    total: float
    source_tags: List[str] = field(default_factory=list)


@dataclass
class TrainLog:
    records: List[dict] = field(default_factory=list)

    def append(self, record):
        if self.records and record["epoch"] <= self.records[-1]["epoch"]:
            raise ValueError("epoch index must increase")
        self.records.append(record)

    def to_jsonl(self):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def lr_schedule(step, total_steps, warmup_steps, base_lr):
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0 at ``total_steps``."""
    if warmup_steps > total_steps:
        raise ValueError("warmup_steps must not exceed total_steps")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    decay_steps = total_steps - warmup_steps
    if decay_steps == 0:
        return base_lr
    progress = (step - warmup_steps) / decay_steps
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


def make_optimizer(state, lr, momentum=0.9, weight_decay=4e-5):
    """SGD with momentum; batch-norm scale and shift are exempt from weight decay."""
    bn_params = set()
    for module in state.modules():
        if isinstance(module, SplitBatchNorm2d):
            bn_params.update(id(p) for p in module.parameters())
    decay = [p for p in state.parameters() if id(p) not in bn_params]
    no_decay = [p for p in state.parameters() if id(p) in bn_params]
    return torch.optim.SGD(
        [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=lr,
        momentum=momentum,
    )


def set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


def _optimize(total, optimizer, step, grad_clip=None):
    if not torch.isfinite(total):
        raise NonFiniteLossError(f"non-finite training loss {float(total.detach())} at step {step}")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    if grad_clip is not None:
        params = [p for group in optimizer.param_groups for p in group["params"]]
        torch.nn.utils.clip_grad_norm_(params, grad_clip)
    optimizer.step()


def _detached(bundle):
    return LossBundle(bundle.l_cls.detach(), bundle.l_loc.detach(), bundle.l_det.detach())


def vanilla_step(batch, targets, state, optimizer, step=None, grad_clip=None):
    """One update on the clean total loss through the main branch."""
    state.train()
    clean = detection_loss(batch, targets, 0, state)
    _optimize(clean.l_det, optimizer, step, grad_clip)
    return StepResult(state, {"clean": _detached(clean)}, float(clean.l_det.detach()))


def det_advprop_step(batch, targets, state, optimizer, attack, rng_seed, annotations=None, step=None,
                     grad_clip=None):
    """One adversarial-propagation update with a single auxiliary branch.

    The attack is generated against branch 1 with frozen statistics; the clean
    batch then runs through branch 0 and the adversarial batch through branch
    1, both updating their own statistics, and one optimizer step is taken on
    the sum of the two total losses.
    """
    adv = generate_adversarial(batch, targets, attack, state, 1, rng_seed, annotations)
    state.train()
    clean = detection_loss(batch, targets, 0, state)
    adv_loss = detection_loss(adv.images, targets, 1, state)
    total = clean.l_det + adv_loss.l_det
    _optimize(total, optimizer, step, grad_clip)
    return StepResult(state, {"clean": _detached(clean), "adv": _detached(adv_loss)}, float(total.detach()),
                      adv.source_tags)


def three_bn_step(batch, targets, state, optimizer, attack, rng_seed, annotations=None, step=None,
                  grad_clip=None):
    """Clean, classification-sourced and localization-sourced batches on branches 0, 1 and 2."""
    x_cls = generate_adversarial(batch, targets, replace(attack, source="cls"), state, 1, rng_seed, annotations)
    x_loc = generate_adversarial(batch, targets, replace(attack, source="loc"), state, 2, rng_seed, annotations)
    state.train()
    clean = detection_loss(batch, targets, 0, state)
    cls_loss = detection_loss(x_cls.images, targets, 1, state)
    loc_loss = detection_loss(x_loc.images, targets, 2, state)
    total = clean.l_det + cls_loss.l_det + loc_loss.l_det
    _optimize(total, optimizer, step, grad_clip)
    losses = {"clean": _detached(clean), "adv_cls": _detached(cls_loss), "adv_loc": _detached(loc_loss)}
    return StepResult(state, losses, float(total.detach()), x_cls.source_tags + x_loc.source_tags)


def run_step(config, batch, targets, state, optimizer, rng_seed, annotations=None, step=None):
    clip = config.grad_clip_norm
    if config.variant == "vanilla":
        return vanilla_step(batch, targets, state, optimizer, step, clip)
    if config.variant == "three_bn":
        return three_bn_step(batch, targets, state, optimizer, config.attack, rng_seed, annotations, step, clip)
    return det_advprop_step(batch, targets, state, optimizer, config.attack, rng_seed, annotations, step, clip)


def augment(images, annotations, rng, hflip=True, jitter_min=1.0, jitter_max=1.0, min_area=4.0):
    """Random horizontal flip and scale jitter (resize, then crop or pad back to size)."""
    height, width = images.shape[-2:]
    out_images, out_anns = [], []
    for image, ann in zip(images, annotations):
        boxes = np.asarray(ann.boxes, dtype=np.float64).reshape(-1, 4)
        classes = list(ann.classes)
        if hflip and rng.random() < 0.5:
            image = torch.flip(image, dims=[-1])
            boxes = boxes[:, [0, 3, 2, 1]] * np.array([1, -1, 1, -1]) + np.array([0, width, 0, width])
        scale = rng.uniform(jitter_min, jitter_max)
        if scale != 1.0:
            new_h, new_w = max(1, round(height * scale)), max(1, round(width * scale))
            resized = F.interpolate(image[None], size=(new_h, new_w), mode="bilinear", align_corners=False,
                                    antialias=scale < 1)[0]
            sy, sx = new_h / height, new_w / width
            boxes = boxes * np.array([sy, sx, sy, sx])
            canvas = torch.zeros_like(image)
            off_y = int(rng.integers(0, abs(new_h - height) + 1))
            off_x = int(rng.integers(0, abs(new_w - width) + 1))
            if new_h >= height:
                src_y, dst_y, h = off_y, 0, height
                shift_y = -off_y
            else:
                src_y, dst_y, h = 0, off_y, new_h
                shift_y = off_y
            if new_w >= width:
                src_x, dst_x, w = off_x, 0, width
                shift_x = -off_x
            else:
                src_x, dst_x, w = 0, off_x, new_w
                shift_x = off_x
            canvas[:, dst_y:dst_y + h, dst_x:dst_x + w] = resized[:, src_y:src_y + h, src_x:src_x + w]
            image = canvas.clamp(-1, 1)
            boxes = boxes + np.array([shift_y, shift_x, shift_y, shift_x])
            boxes = np.clip(boxes, 0, [height, width, height, width])
        keep = ((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1]) >= min_area) & \
               (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        out_images.append(image)
        out_anns.append(Annotation(boxes[keep].tolist(), [c for c, k in zip(classes, keep) if k]))
    return torch.stack(out_images), out_anns


def batch_targets(state, images, annotations):
    anchors = state.anchors(images.shape[-2:])
    cfg = state.config
    return stack_targets([assign_targets(anchors, ann, cfg.pos_iou, cfg.neg_iou) for ann in annotations])


def save_checkpoint(state, path, epoch, rng_seed):
    """Weights as a torch blob plus a JSON sidecar describing the model."""
    os.makedirs(path, exist_ok=True)
    torch.save(state.state_dict(), os.path.join(path, "model.pt"))
    sidecar = {
        "config": detector_config_to_dict(state.config),
        "branch_names": list(BRANCH_NAMES[: state.config.bn_branches]),
        "epoch": int(epoch),
        "rng_seed": int(rng_seed),
        "version": __version__,
    }
    with open(os.path.join(path, "model.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    return path


def load_checkpoint(path):
    with open(os.path.join(path, "model.json"), "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    state = build_detector(detector_config_from_dict(sidecar["config"]))
    state.load_state_dict(torch.load(os.path.join(path, "model.pt"), map_location="cpu", weights_only=True))
    state.eval()
    return state, sidecar


def _mean_bundles(bundles):
    keys = ("l_cls", "l_loc", "l_det")
    return {k: math.fsum(b[k] for b in bundles) / len(bundles) for k in keys}


def train(config, dataset, out_dir, split="train", log=None):
    """Train ``config.variant`` on ``dataset`` and write checkpoints under ``out_dir``.

    Writes ``epoch_NNN/`` after every epoch, ``last/`` (all branches) and the
    stripped inference model ``final/``, plus ``config.cfg`` and
    ``train_log.jsonl``. Returns ``(path of final/, TrainLog)``.
    """
    images, annotations, _ = dataset.load(split if split in dataset.split else "all")
    if len(annotations) == 0:
        raise ValueError("training split is empty")
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.cfg"), "w", encoding="utf-8") as fh:
        fh.write(dump_flat(config))

    seed = config.seed
    state = build_detector(config.model, seed=derive_seed(seed, "init"))
    optimizer = make_optimizer(state, 0.0, config.momentum, config.weight_decay)
    n = len(annotations)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    warmup_steps = int(round(config.warmup_epochs * steps_per_epoch))
    train_log = TrainLog()
    log_path = os.path.join(out_dir, "train_log.jsonl")
    open(log_path, "w").close()

    step = 0
    for epoch in range(config.epochs):
        started = time.perf_counter()
        order = numpy_rng(seed, "data", epoch).permutation(n)
        per_domain, totals, lr = {}, [], 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            rng = numpy_rng(seed, "augment", step)
            batch, anns = augment(images[idx], [annotations[i] for i in idx], rng,
                                  config.hflip, config.jitter_min, config.jitter_max)
            targets = batch_targets(state, batch, anns)
            lr = lr_schedule(step + 1, total_steps, warmup_steps, config.base_lr)
            set_lr(optimizer, lr)
            result = run_step(config, batch, targets, state, optimizer, derive_seed(seed, "attack", step),
                              anns, step)
            for name, bundle in result.losses.items():
                per_domain.setdefault(name, []).append(bundle.item())
            totals.append(result.total)
            step += 1
        record = {
            "epoch": epoch,
            "steps": steps_per_epoch,
            "lr": lr,
            "losses": {name: _mean_bundles(b) for name, b in per_domain.items()},
            "objective": math.fsum(totals) / len(totals),
            "wall_time": time.perf_counter() - started,
        }
        train_log.append(record)
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        save_checkpoint(state, os.path.join(out_dir, f"epoch_{epoch:03d}"), epoch, seed)
        if log is not None:
            log(f"epoch {epoch}: objective {record['objective']:.4f} lr {lr:.4f} ({record['wall_time']:.1f}s)")

    save_checkpoint(state, os.path.join(out_dir, "last"), config.epochs - 1, seed)
    final = os.path.join(out_dir, "final")
    save_checkpoint(strip_auxiliary_branches(state).eval(), final, config.epochs - 1, seed)
    return final, train_log


__all__ = [
    "NonFiniteLossError", "StepResult", "TrainLog", "lr_schedule", "make_optimizer", "vanilla_step",
    "det_advprop_step", "three_bn_step", "train", "augment", "save_checkpoint", "load_checkpoint",
]
