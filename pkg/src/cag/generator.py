"""Single-generator targeted attack: label-embedding layer, activation-map
conditioned U-Net, perturbation pipeline, training loop, and one-pass
attack inference.

The generator consumes a (c+3)-channel tensor [image | true-class embedding
slice | target-class embedding slice | activation map] and emits a c-channel
perturbation that is dropout-masked (train only), rescaled to a fixed L2
norm, added to the image, and clipped.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attacks import AttackResult
from .cam import cam_distance_batch, compute_cam_batch
from .core import LabeledDataset, RngHandle, clip_to_valid, l2_norm, l2_norm_scale, linf_norm, random_targets
from .errors import ConfigError, SameTargetError, ShapeError, TrainingDivergedError
from .models import ClassifierEnsemble, GapClassifier


class EmbeddingLayer(nn.Module):
    """Trainable per-class spatial encodings, one (h, w) slice per class.

    All slices live in a single (L, h, w) parameter so a training step only
    updates the slices selected that step (the others receive zero grad).
    """

    def __init__(self, num_classes: int, height: int, width: int):
        super().__init__()
        if num_classes < 1 or height < 1 or width < 1:
            raise ConfigError("embedding dimensions must be positive")
        self.num_classes = num_classes
        self.table = nn.Parameter(torch.randn(num_classes, height, width))

    def slice(self, label: int) -> torch.Tensor:
        """k-th class slice, a view into the shared parameter."""
        if not 0 <= int(label) < self.num_classes:
            raise ConfigError(f"label {label} outside 0..{self.num_classes - 1}")
        return self.table[int(label)]

    def slices(self, labels: torch.Tensor) -> torch.Tensor:
        """Batched slice lookup: (n,) -> (n, h, w)."""
        return self.table[labels]

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return tuple(self.table.shape[1:])


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.ReLU(),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.ReLU(),
    )


@dataclass(frozen=True)
class UNetSpec:
    """Encoder-decoder size: `levels` downsamplings below the input
    resolution, channel width doubling from base_width (capped at 4x)."""

    in_channels: int = 6
    out_channels: int = 3
    levels: int = 3
    base_width: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1 or self.base_width < 1:
            raise ConfigError("levels and base_width must be positive")


class UNet(nn.Module):
    """U-Net with concatenation skips and a linear output layer; the output
    magnitude is irrelevant because the pipeline rescales to a fixed norm."""

    def __init__(self, spec: UNetSpec):
        super().__init__()
        self.spec = spec
        widths = [min(spec.base_width * 2**i, spec.base_width * 4) for i in range(spec.levels + 1)]
        self.enc = nn.ModuleList()
        self.enc.append(_conv_block(spec.in_channels, widths[0]))
        for i in range(spec.levels):
            self.enc.append(_conv_block(widths[i], widths[i + 1]))
        self.pool = nn.MaxPool2d(2)
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in range(spec.levels, 0, -1):
            self.up.append(nn.Conv2d(widths[i], widths[i - 1], 3, padding=1))
            self.dec.append(_conv_block(2 * widths[i - 1], widths[i - 1]))
        self.out = nn.Conv2d(widths[0], spec.out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        h = self.enc[0](x)
        for block in self.enc[1:]:
            skips.append(h)
            h = block(self.pool(h))
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            h = up(F.interpolate(h, size=skip.shape[2:], mode="nearest"))
            h = dec(torch.cat([h, skip], dim=1))
        return self.out(h)


def build_generator(spec: UNetSpec) -> UNet:
    """Randomly initialized U-Net, deterministic under spec.seed."""
    torch.manual_seed(RngHandle(spec.seed, "init/unet").entropy() % (2**63))
    return UNet(spec)


def build_embedding(num_classes: int, height: int, width: int, seed: int = 0) -> EmbeddingLayer:
    """Unit-normal initialized embedding, deterministic under seed."""
    torch.manual_seed(RngHandle(seed, "init/embedding").entropy() % (2**63))
    return EmbeddingLayer(num_classes, height, width)


def build_input_tensor(
    x: torch.Tensor, i: int, t: int, embedding: EmbeddingLayer, cam: torch.Tensor
) -> torch.Tensor:
    """Concatenate [x | E_i | E_t | cam] into a (c+3, h, w) tensor."""
    if int(i) == int(t):
        raise SameTargetError(f"target class {t} equals true class {i}")
    if x.dim() != 3:
        raise ShapeError(f"expected (c, h, w) image, got {tuple(x.shape)}")
    if cam.shape != x.shape[1:] or embedding.spatial_shape != tuple(x.shape[1:]):
        raise ShapeError("image, embedding, and activation map spatial shapes must agree")
    return torch.cat(
        [x, embedding.slice(i).unsqueeze(0), embedding.slice(t).unsqueeze(0), cam.unsqueeze(0)]
    )


def build_input_tensor_batch(
    x: torch.Tensor, true_labels: torch.Tensor, targets: torch.Tensor,
    embedding: EmbeddingLayer, cams: torch.Tensor,
) -> torch.Tensor:
    """Batched input-tensor construction: (n, c, h, w) -> (n, c+3, h, w)."""
    if bool((true_labels == targets).any()):
        raise SameTargetError("target equals true label for some image")
    if cams.shape != (x.shape[0], *x.shape[2:]):
        raise ShapeError("activation map batch shape must be (n, h, w)")
    e_i = embedding.slices(true_labels).unsqueeze(1)
    e_t = embedding.slices(targets).unsqueeze(1)
    return torch.cat([x, e_i, e_t, cams.unsqueeze(1)], dim=1)


def decompose_input_tensor(tensor: torch.Tensor, image_channels: int):
    """Inverse of the channel layout: returns (x, e_i, e_t, cam)."""
    c = image_channels
    if tensor.dim() == 3:
        return tensor[:c], tensor[c], tensor[c + 1], tensor[c + 2]
    return tensor[:, :c], tensor[:, c], tensor[:, c + 1], tensor[:, c + 2]


def perturbation_pipeline(
    raw: torch.Tensor,
    x: torch.Tensor,
    dropout_p: float,
    l2_target: float,
    mode: str = "infer",
    mask_gen: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """dropout (train only) -> L2 rescale -> add -> clip.

    Returns (x_adv, delta) where delta is the rescaled perturbation whose
    per-image L2 norm equals l2_target exactly (pre-clip); clipping can only
    shrink the realized ||x_adv - x||.
    """
    if mode not in ("train", "infer"):
        raise ConfigError("mode must be 'train' or 'infer'")
    if not 0.0 <= dropout_p < 1.0:
        raise ConfigError("dropout probability must be in [0, 1)")
    delta = raw
    if mode == "train" and dropout_p > 0.0:
        keep = torch.rand(raw.shape, generator=mask_gen, dtype=raw.dtype) >= dropout_p
        delta = raw * keep / (1.0 - dropout_p)
    delta = l2_norm_scale(delta, l2_target)
    return clip_to_valid(x + delta), delta


@dataclass(frozen=True)
class CAGTrainConfig:
    """Training protocol for the generator and embedding."""

    beta: float = 3.0
    dropout_p: float = 0.0
    l2_target: float = 0.1
    lr: float = 5e-2
    lr_floor: float = 1e-6
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int = 256
    seed: int = 0
    cam_stop_gradient: bool = False
    dropout_at_inference: bool = False

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout probability must be in [0, 1)")
        if self.l2_target <= 0:
            raise ConfigError("l2_target must be > 0")
        if self.lr_floor > self.lr:
            raise ConfigError("lr_floor must not exceed lr")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


def cag_loss(pred, target, cam_clean, cam_adv, beta: float, from_logits: bool = False):
    """Combined loss: targeted cross-entropy plus beta times the squared
    distance between the clean true-class map and adversarial target map.

    Accepts batched or single predictions; returns (loss, components).
    """
    if beta < 0:
        raise ConfigError("beta must be >= 0")
    pred = torch.atleast_2d(torch.as_tensor(pred))
    target = torch.atleast_1d(torch.as_tensor(target, dtype=torch.int64))
    if from_logits:
        ce = F.cross_entropy(pred, target)
    else:
        picked = pred.gather(1, target.view(-1, 1)).squeeze(1)
        ce = -torch.log(torch.clamp(picked, min=1e-12)).mean()
    if cam_clean.dim() == 2:
        cam_clean, cam_adv = cam_clean.unsqueeze(0), cam_adv.unsqueeze(0)
    cam_term = cam_distance_batch(cam_clean, cam_adv).mean()
    loss = ce + beta * cam_term
    return loss, {"loss_target": float(ce), "loss_cam": float(cam_term)}


def _cosine_lr(cfg: CAGTrainConfig, epoch: int) -> float:
    frac = epoch / max(cfg.epochs, 1)
    return cfg.lr_floor + 0.5 * (cfg.lr - cfg.lr_floor) * (1.0 + math.cos(math.pi * frac))


def _member_list(classifiers) -> list[GapClassifier]:
    if isinstance(classifiers, ClassifierEnsemble):
        return classifiers.members
    if isinstance(classifiers, GapClassifier):
        return [classifiers]
    members = list(classifiers)
    if not members:
        raise ConfigError("need at least one classifier to train against")
    return members


def train_cag(
    generator: UNet,
    embedding: EmbeddingLayer,
    classifiers,
    data: LabeledDataset,
    cfg: CAGTrainConfig,
    cam_model: GapClassifier | None = None,
    snapshot_fn=None,
    start_epoch: int = 0,
    opt_state: dict | None = None,
    stop_after_epoch: int | None = None,
):
    """Joint training of generator and embedding (the classifiers stay frozen).

    Per step: draw random targets, build input tensors from clean images and
    their true-class activation maps, generate perturbations, run the train
    pipeline, classify, and minimize the combined loss with SGD + Nesterov
    under a per-epoch cosine-annealed learning rate. The targeted
    cross-entropy averages over all classifiers; the map term uses only the
    designated cam_model (default: the first classifier).

    Randomness is derived per epoch from cfg.seed, so resuming from an epoch
    snapshot (snapshot_fn receives epoch, models, optimizer state, history)
    reproduces the uninterrupted run exactly.
    """
    members = _member_list(classifiers)
    cam_model = cam_model if cam_model is not None else members[0]
    for m in members:
        m.eval()
    cam_model.eval()
    num_classes = embedding.num_classes

    params = list(generator.parameters()) + list(embedding.parameters())
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, nesterov=True)
    if opt_state is not None:
        opt.load_state_dict(opt_state)

    history = []
    rng = RngHandle(cfg.seed, "train-cag")
    last_epoch = cfg.epochs if stop_after_epoch is None else min(stop_after_epoch, cfg.epochs)
    for epoch in range(start_epoch, last_epoch):
        for group in opt.param_groups:
            group["lr"] = _cosine_lr(cfg, epoch)
        target_gen = rng.child(f"targets-{epoch}").numpy()
        mask_gen = rng.child(f"dropout-{epoch}").torch()
        generator.train()
        sums = {"loss": 0.0, "loss_target": 0.0, "loss_cam": 0.0}
        hits, count, step = 0, 0, 0
        for xb, yb in data.batches(cfg.batch_size, rng.child(f"shuffle-{epoch}")):
            tb = random_targets(yb, num_classes, target_gen)
            with torch.no_grad():
                cam_clean = compute_cam_batch(cam_model, xb, yb)
            tensor_in = build_input_tensor_batch(xb, yb, tb, embedding, cam_clean)
            raw = generator(tensor_in)
            x_adv, _ = perturbation_pipeline(
                raw, xb, cfg.dropout_p, cfg.l2_target, mode="train", mask_gen=mask_gen
            )
            logits = [m(x_adv) for m in members]
            loss_target = torch.stack(
                [F.cross_entropy(lg, tb) for lg in logits]
            ).mean()
            cam_in = x_adv.detach() if cfg.cam_stop_gradient else x_adv
            cam_adv = compute_cam_batch(cam_model, cam_in, tb)
            loss_cam = cam_distance_batch(cam_clean, cam_adv).mean()
            loss = loss_target + cfg.beta * loss_cam
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {step}", step=step
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums["loss"] += float(loss) * len(xb)
            sums["loss_target"] += float(loss_target) * len(xb)
            sums["loss_cam"] += float(loss_cam) * len(xb)
            hits += int((logits[0].argmax(dim=1) == tb).sum())
            count += len(xb)
            step += 1
        entry = {
            "epoch": epoch,
            "lr": _cosine_lr(cfg, epoch),
            "loss": sums["loss"] / count,
            "loss_target": sums["loss_target"] / count,
            "loss_cam": sums["loss_cam"] / count,
            "train_asr": hits / count,
        }
        history.append(entry)
        if snapshot_fn is not None:
            snapshot_fn(epoch + 1, generator, embedding, opt.state_dict(), history)
    generator.eval()
    return generator, embedding, history


def cag_attack_batch(
    generator: UNet,
    embedding: EmbeddingLayer,
    cam_model: GapClassifier,
    images: torch.Tensor,
    true_labels: torch.Tensor,
    targets: torch.Tensor,
    l2_target: float = 0.1,
    victim: GapClassifier | None = None,
    dropout_p: float = 0.0,
    rng: RngHandle | None = None,
) -> list[AttackResult]:
    """One-pass attack: one activation-map forward, one generator forward,
    then the inference pipeline. The victim (default: cam_model) is only
    used to record the outcome, never iterated against.

    dropout_p > 0 applies the training-style mask at attack time; the
    default (0) keeps inference deterministic.
    """
    victim = victim if victim is not None else cam_model
    generator.eval()
    true_labels = torch.as_tensor(true_labels, dtype=torch.int64)
    targets = torch.as_tensor(targets, dtype=torch.int64)
    t0 = time.perf_counter()
    with torch.no_grad():
        cams = compute_cam_batch(cam_model, images, true_labels)
        tensor_in = build_input_tensor_batch(images, true_labels, targets, embedding, cams)
        raw = generator(tensor_in)
        if dropout_p > 0.0:
            mask_gen = (rng or RngHandle(0, "cag-attack")).torch()
            adv, _ = perturbation_pipeline(
                raw, images, dropout_p, l2_target, mode="train", mask_gen=mask_gen
            )
        else:
            adv, _ = perturbation_pipeline(raw, images, 0.0, l2_target, mode="infer")
    elapsed = time.perf_counter() - t0
    with torch.no_grad():
        preds = victim(adv).argmax(dim=1)
    delta = adv - images
    l2s, linfs = l2_norm(delta), linf_norm(delta)
    return [
        AttackResult(
            adv=adv[i],
            true_label=int(true_labels[i]),
            target_label=int(targets[i]),
            predicted=int(preds[i]),
            success=int(preds[i]) == int(targets[i]),
            l2=float(l2s[i]),
            linf=float(linfs[i]),
            iterations=1,
            time_s=elapsed / len(images),
        )
        for i in range(len(images))
    ]


def cag_attack(
    generator: UNet,
    embedding: EmbeddingLayer,
    cam_model: GapClassifier,
    image: torch.Tensor,
    true_label: int,
    target: int,
    l2_target: float = 0.1,
    victim: GapClassifier | None = None,
) -> AttackResult:
    """Single-image convenience wrapper around cag_attack_batch."""
    return cag_attack_batch(
        generator,
        embedding,
        cam_model,
        image.unsqueeze(0),
        torch.tensor([int(true_label)]),
        torch.tensor([int(target)]),
        l2_target=l2_target,
        victim=victim,
    )[0]


def embedding_projection(embedding: EmbeddingLayer, method: str = "pca") -> np.ndarray:
    """Project each class slice to 2-D for inspection; returns (L, 2).

    "pca" uses principal components (deterministic); "tsne" uses
    scikit-learn when available.
    """
    flat = embedding.table.detach().cpu().numpy().reshape(embedding.num_classes, -1)
    if method == "pca":
        centered = flat - flat.mean(axis=0, keepdims=True)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        return centered @ vt[:2].T
    if method == "tsne":
        try:
            from sklearn.manifold import TSNE
        except ImportError as exc:
            raise ConfigError("tsne projection needs scikit-learn installed") from exc
        perplexity = min(30.0, max(2.0, embedding.num_classes / 2.0 - 1.0))
        return TSNE(n_components=2, perplexity=perplexity, random_state=0).fit_transform(flat)
    raise ConfigError(f"unknown projection method {method!r}")
