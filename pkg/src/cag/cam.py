"""Class activation maps from GAP-headed classifiers.

A map is the head-weighted sum of final conv feature maps for one class,
ReLU-ed, bilinearly upsampled to the input resolution, and min-max
normalized into [0, 1]. All computations stay differentiable w.r.t. the
input image so the generator training loss can propagate through them.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import CamUnsupportedError, ShapeError

_EPS = 1e-12


def _check_cam_contract(model) -> None:
    if not (hasattr(model, "features") and hasattr(model, "head_weights")):
        raise CamUnsupportedError(
            f"{type(model).__name__} does not expose final-conv features and head weights"
        )


def compute_cam_batch(model, images: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Activation maps for a batch: (n, c, h, w), (n,) -> (n, h, w) in [0, 1].

    An identically-zero raw map normalizes to all zeros instead of dividing
    by zero; otherwise the max is exactly 1 and the min exactly 0.
    """
    _check_cam_contract(model)
    if images.dim() != 4:
        raise ShapeError(f"expected (n, c, h, w), got {tuple(images.shape)}")
    labels = torch.atleast_1d(torch.as_tensor(labels, dtype=torch.int64))
    if len(labels) != len(images):
        raise ShapeError("labels length must match batch size")
    feats = model.features(images)  # (n, K, h', w')
    weights = model.head_weights[labels]  # (n, K)
    raw = torch.einsum("nkuv,nk->nuv", feats, weights)
    raw = F.relu(raw)
    maps = F.interpolate(
        raw.unsqueeze(1), size=images.shape[2:], mode="bilinear", align_corners=False
    ).squeeze(1)
    flat = maps.flatten(1)
    lo = flat.min(dim=1).values.view(-1, 1, 1)
    hi = flat.max(dim=1).values.view(-1, 1, 1)
    span = hi - lo
    normed = (maps - lo) / torch.where(span > _EPS, span, torch.ones_like(span))
    # keep all-zero maps all-zero rather than normalizing noise
    return torch.where(hi > _EPS, normed, torch.zeros_like(normed))


def compute_cam(model, image: torch.Tensor, label: int) -> torch.Tensor:
    """Single-image activation map: (c, h, w) -> (h, w) in [0, 1]."""
    if image.dim() != 3:
        raise ShapeError(f"expected (c, h, w), got {tuple(image.shape)}")
    return compute_cam_batch(model, image.unsqueeze(0), torch.tensor([int(label)]))[0]


def cam_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance between two maps, summed over all entries."""
    if a.shape != b.shape:
        raise ShapeError(f"map shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).sum()


def cam_distance_batch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-image squared L2 distance for batched maps (n, h, w) -> (n,)."""
    if a.shape != b.shape:
        raise ShapeError(f"map shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).flatten(1).sum(dim=1)


def overlay_heatmap(image: torch.Tensor, cam: torch.Tensor) -> "object":
    """Blend a [0,1] activation map over the image; returns a PIL image
    with exactly the input's pixel dimensions."""
    import numpy as np
    from matplotlib import cm
    from PIL import Image

    if image.shape[1:] != cam.shape:
        raise ShapeError("cam spatial shape must equal the image's")
    rgb = image.detach().cpu().numpy().transpose(1, 2, 0)
    if rgb.shape[2] == 1:
        rgb = np.repeat(rgb, 3, axis=2)
    heat = cm.jet(cam.detach().cpu().numpy())[:, :, :3]
    blend = np.clip(0.5 * rgb + 0.5 * heat, 0.0, 1.0)
    return Image.fromarray((blend * 255).round().astype(np.uint8))


def cam_drift_report(
    model,
    clean: torch.Tensor,
    adv: torch.Tensor,
    true_label: int,
    target_label: int,
    out_dir: str | None = None,
    tag: str = "drift",
) -> dict:
    """Compare the clean true-class map with the adversarial target-class map.

    Returns distances plus overlay file paths when out_dir is given.
    """
    if clean.shape != adv.shape:
        raise ShapeError("clean and adversarial images must share a shape")
    cam_clean = compute_cam(model, clean, true_label)
    cam_adv = compute_cam(model, adv, target_label)
    record = {
        "true_label": int(true_label),
        "target_label": int(target_label),
        "cam_distance": float(cam_distance(cam_clean, cam_adv)),
    }
    if out_dir is not None:
        import os

        os.makedirs(out_dir, exist_ok=True)
        clean_path = os.path.join(out_dir, f"{tag}_clean.png")
        adv_path = os.path.join(out_dir, f"{tag}_adv.png")
        overlay_heatmap(clean, cam_clean).save(clean_path)
        overlay_heatmap(adv, cam_adv).save(adv_path)
        record["overlays"] = [clean_path, adv_path]
    return record
