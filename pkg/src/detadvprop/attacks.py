"""One-step L-infinity attacks against the classification, localization or total loss.

Attack strengths are given on the 0-255 pixel scale; with inputs in [-1, 1]
a strength ``eps`` is a radius of ``2 * eps / 255``.
"""

from dataclasses import dataclass
from typing import List

import numpy as np
import torch

from .detector.losses import detection_loss
from .detector.targets import AnchorTargets
from .seeding import derive_seed, torch_generator

LOSS_SELECTORS = ("cls", "loc", "det")


class AttackError(RuntimeError):
    pass


@dataclass
class AdversarialBatch:
    images: torch.Tensor
    source_tags: List[str]


def epsilon_radius(epsilon):
    return 2.0 * float(epsilon) / 255.0


def _select(bundle, loss_selector):
    if loss_selector not in LOSS_SELECTORS:
        raise ValueError(f"loss selector must be one of {LOSS_SELECTORS}, got {loss_selector!r}")
    return {"cls": bundle.l_cls, "loc": bundle.l_loc, "det": bundle.l_det}[loss_selector]


def input_gradient(batch, loss_selector, targets, branch, state, bn_mode="frozen"):
    """Gradient of the selected loss w.r.t. the input pixels.

    Runs with frozen batch-norm statistics and leaves every parameter and
    its ``.grad`` untouched.
    """
    x = batch.detach().clone().requires_grad_(True)
    with state.frozen_statistics(bn_mode), torch.enable_grad():
        loss = _select(detection_loss(x, targets, branch, state), loss_selector)
        if not torch.isfinite(loss):
            raise AttackError(
                f"non-finite {loss_selector} loss ({float(loss.detach())}) during attack on branch {branch}"
            )
        (grad,) = torch.autograd.grad(loss, x)
    return grad


def project_clip(candidate, origin, radius):
    """Clamp ``candidate`` into the L-infinity ball around ``origin``, then into [-1, 1].

    ``radius`` is a scalar or a per-pixel map broadcastable to ``origin``.
    """
    if candidate.shape != origin.shape:
        raise ValueError(f"shape mismatch: {tuple(candidate.shape)} vs {tuple(origin.shape)}")
    radius = torch.as_tensor(radius, dtype=origin.dtype)
    out = torch.maximum(torch.minimum(candidate, origin + radius), origin - radius)
    return out.clamp(-1.0, 1.0)


def random_start(batch, radius, rng_seed):
    """``x + U(-r, r)`` per pixel, clipped to [-1, 1]."""
    gen = torch_generator(rng_seed, "random-init")
    noise = torch.rand(batch.shape, generator=gen, dtype=batch.dtype) * 2 - 1
    return (batch + noise * torch.as_tensor(radius, dtype=batch.dtype)).clamp(-1.0, 1.0)


def fgsm_step(origin, start, grad, radius, targeted=False):
    """Signed step of size ``radius`` from ``start`` (descent when targeted), projected around ``origin``."""
    direction = -torch.sign(grad) if targeted else torch.sign(grad)
    return project_clip(start + torch.as_tensor(radius, dtype=origin.dtype) * direction, origin, radius)


def fgsm_attack(batch, loss_selector, targets, epsilon, random_init, rng_seed, state, branch,
                mode="nontargeted", adv_targets=None, radius=None, bn_mode="frozen"):
    """FGSM with optional uniform random start.

    Non-targeted mode ascends the loss on ``targets``; targeted mode descends
    the loss on ``adv_targets``. ``radius`` overrides the scalar strength with
    a per-pixel map (already in [-1, 1] units).
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    targeted = mode == "targeted"
    if targeted and adv_targets is None:
        raise AttackError("targeted attack needs adversarial target labels")
    if radius is None:
        radius = epsilon_radius(epsilon)
    start = random_start(batch, radius, rng_seed) if random_init else batch
    grad = input_gradient(start, loss_selector, adv_targets if targeted else targets, branch, state, bn_mode)
    images = fgsm_step(batch, start, grad, radius, targeted)
    return AdversarialBatch(images.detach(), [loss_selector] * batch.shape[0])


def make_targeted_labels(targets, scope, num_classes, rng_seed):
    """Random adversarial class labels.

    Positive anchors draw uniformly from the classes other than their own.
    With ``scope='all_anchors'`` background and ignored anchors draw from all
    classes; with ``'object_anchors'`` they are left as they are. Box targets
    and the regression mask are unchanged.
    """
    if num_classes < 2:
        raise AttackError("targeted attacks need at least two classes (K=1 has no alternative label)")
    if scope not in ("all_anchors", "object_anchors"):
        raise ValueError(f"unknown target scope {scope!r}")
    rng = np.random.default_rng(derive_seed(rng_seed, "targeted-labels"))
    true = targets.class_target.cpu().numpy()
    adv = true.copy()
    positive = true >= 0
    shift = rng.integers(0, num_classes - 1, size=true.shape)
    adv[positive] = (shift + (shift >= true))[positive]
    if scope == "all_anchors":
        uniform = rng.integers(0, num_classes, size=true.shape)
        adv[~positive] = uniform[~positive]
    return AnchorTargets(
        torch.from_numpy(adv).to(targets.class_target.device),
        targets.box_target.clone(),
        targets.box_mask.clone(),
    )


def per_image_det_loss(images, targets, branch, state, bn_mode="frozen"):
    with state.frozen_statistics(bn_mode), torch.no_grad():
        return detection_loss(images, targets, branch, state, reduction="none").l_det


def maxmax_select(x_cls, x_loc, targets, branch, state, bn_mode="frozen"):
    """Keep, per image, whichever candidate has the larger total loss (ties go to ``x_cls``)."""
    if x_cls.shape != x_loc.shape:
        raise ValueError(f"shape mismatch: {tuple(x_cls.shape)} vs {tuple(x_loc.shape)}")
    loss_cls = per_image_det_loss(x_cls, targets, branch, state, bn_mode)
    loss_loc = per_image_det_loss(x_loc, targets, branch, state, bn_mode)
    take_cls = loss_cls >= loss_loc
    images = torch.where(take_cls.view(-1, *([1] * (x_cls.dim() - 1))), x_cls, x_loc)
    return AdversarialBatch(images, ["cls" if t else "loc" for t in take_cls.tolist()])


def region_weighted_epsilon(ann, eps_obj, eps_bg, image_size):
    """Per-pixel radius map: ``2 * eps_obj / 255`` inside any box, ``2 * eps_bg / 255`` elsewhere.

    A pixel belongs to a box when its center lies inside it.
    """
    if eps_obj < 0 or eps_bg < 0:
        raise ValueError("region strengths must be >= 0")
    height, width = image_size
    rows = torch.arange(height, dtype=torch.float64)[:, None] + 0.5
    cols = torch.arange(width, dtype=torch.float64)[None, :] + 0.5
    inside = torch.zeros((height, width), dtype=torch.bool)
    for ymin, xmin, ymax, xmax in ann.boxes:
        inside |= (rows >= ymin) & (rows <= ymax) & (cols >= xmin) & (cols <= xmax)
    return torch.where(
        inside,
        torch.tensor(epsilon_radius(eps_obj), dtype=torch.float32),
        torch.tensor(epsilon_radius(eps_bg), dtype=torch.float32),
    )


def radius_for(batch, cfg, annotations=None):
    """Scalar radius, or a ``B x 1 x H x W`` map when region strengths are set."""
    if not cfg.region_weighted:
        return epsilon_radius(cfg.epsilon)
    if annotations is None or len(annotations) != batch.shape[0]:
        raise ValueError("region-weighted strengths need one annotation per image")
    maps = [region_weighted_epsilon(a, cfg.epsilon_object, cfg.epsilon_background, batch.shape[-2:])
            for a in annotations]
    return torch.stack(maps)[:, None].to(batch.dtype)


def attack_seeds(rng_seed):
    """Independent sub-seeds for the label draw and the two FGSM random starts."""
    return {name: derive_seed(rng_seed, name) for name in ("labels", "cls", "loc", "det")}


def generate_adversarial(batch, targets, cfg, state, branch, rng_seed, annotations=None):
    """Adversarial batch for one attack configuration.

    ``cls``/``loc``/``det`` run a single FGSM against that loss. ``maxmax``
    attacks the classification and localization losses separately and keeps
    the candidate with the larger total loss on the true labels.
    """
    seeds = attack_seeds(rng_seed)
    radius = radius_for(batch, cfg, annotations)
    adv_targets = None
    if cfg.mode == "targeted":
        adv_targets = make_targeted_labels(targets, cfg.target_scope, state.config.num_classes, seeds["labels"])

    def attack(selector):
        return fgsm_attack(batch, selector, targets, cfg.epsilon, cfg.random_init, seeds[selector], state, branch,
                           mode=cfg.mode, adv_targets=adv_targets, radius=radius, bn_mode=cfg.bn_mode)

    if cfg.source in LOSS_SELECTORS:
        return attack(cfg.source)
    if cfg.source != "maxmax":
        raise ValueError(f"unknown attack source {cfg.source!r}")
    x_cls = attack("cls").images
    x_loc = attack("loc").images
    return maxmax_select(x_cls, x_loc, targets, branch, state, cfg.bn_mode)
