"""Small CNN classifier family with a CAM-compatible head.

Every variant ends in final conv feature maps -> global average pooling ->
one linear layer, so activation maps can be formed from the head weights.
The variants differ in depth, width and skip structure to make seen/unseen
transfer splits meaningful.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import LabeledDataset, RngHandle
from .errors import ConfigError, ShapeError, TrainingDivergedError

ARCH_NAMES = ("cnn-a", "cnn-b", "cnn-c", "cnn-d")


@dataclass(frozen=True)
class ClassifierSpec:
    """Architecture descriptor: which variant, at which size."""

    arch: str = "cnn-a"
    num_classes: int = 10
    in_channels: int = 3
    width: int = 32
    seed: int = 0


@dataclass(frozen=True)
class TrainConfig:
    """SGD + Nesterov momentum with cosine-annealed learning rate."""

    lr: float = 0.05
    lr_floor: float = 1e-4
    momentum: float = 0.9
    epochs: int = 8
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.lr_floor > self.lr:
            raise ConfigError("lr_floor must not exceed lr")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


class GapClassifier(nn.Module):
    """Base class fixing the features -> GAP -> linear head contract."""

    def __init__(self, spec: ClassifierSpec, feature_channels: int):
        super().__init__()
        self.spec = spec
        self.head = nn.Linear(feature_channels, spec.num_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.features(x)
        return self.head(feats.mean(dim=(2, 3)))

    @property
    def head_weights(self) -> torch.Tensor:
        """Linear head weight matrix (num_classes, feature_channels)."""
        return self.head.weight


def _cbr(cin, cout, stride=1, kernel=3):
    return [
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2),
        nn.BatchNorm2d(cout),
        nn.ReLU(),
    ]


class CnnA(GapClassifier):
    """Plain stride-2 conv stack."""

    def __init__(self, spec: ClassifierSpec):
        w = spec.width
        super().__init__(spec, 4 * w)
        self.stack = nn.Sequential(
            *_cbr(spec.in_channels, w),
            *_cbr(w, 2 * w, stride=2),
            *_cbr(2 * w, 3 * w, stride=2),
            *_cbr(3 * w, 4 * w),
        )

    def features(self, x):
        return self.stack(x)


class _ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = nn.BatchNorm2d(channels)
        self.norm2 = nn.BatchNorm2d(channels)

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(x + h)


class CnnB(GapClassifier):
    """Residual variant: identity-skip blocks between strided downsamples."""

    def __init__(self, spec: ClassifierSpec):
        w = spec.width
        super().__init__(spec, 4 * w)
        self.stem = nn.Sequential(*_cbr(spec.in_channels, w))
        self.block1 = _ResBlock(w)
        self.down1 = nn.Sequential(*_cbr(w, 2 * w, stride=2))
        self.block2 = _ResBlock(2 * w)
        self.down2 = nn.Sequential(*_cbr(2 * w, 4 * w, stride=2))
        self.block3 = _ResBlock(4 * w)

    def features(self, x):
        h = self.block1(self.stem(x))
        h = self.block2(self.down1(h))
        return self.block3(self.down2(h))


class CnnC(GapClassifier):
    """VGG-style double-conv blocks with max pooling."""

    def __init__(self, spec: ClassifierSpec):
        w = max(spec.width * 3 // 4, 4)
        super().__init__(spec, 4 * w)
        self.stack = nn.Sequential(
            *_cbr(spec.in_channels, w),
            *_cbr(w, w),
            nn.MaxPool2d(2),
            *_cbr(w, 2 * w),
            *_cbr(2 * w, 2 * w),
            nn.MaxPool2d(2),
            *_cbr(2 * w, 4 * w),
            *_cbr(4 * w, 4 * w),
        )

    def features(self, x):
        return self.stack(x)


class CnnD(GapClassifier):
    """Wide shallow variant with a 5x5 stem."""

    def __init__(self, spec: ClassifierSpec):
        w = spec.width * 2
        super().__init__(spec, 3 * w)
        self.stack = nn.Sequential(
            *_cbr(spec.in_channels, w, stride=2, kernel=5),
            *_cbr(w, 2 * w, stride=2),
            *_cbr(2 * w, 3 * w),
        )

    def features(self, x):
        return self.stack(x)


_ARCHS = {"cnn-a": CnnA, "cnn-b": CnnB, "cnn-c": CnnC, "cnn-d": CnnD}


def build_classifier(spec: ClassifierSpec) -> GapClassifier:
    """Instantiate a randomly initialized variant, deterministic under seed."""
    if spec.arch not in _ARCHS:
        raise ConfigError(f"unknown classifier arch {spec.arch!r}; choose from {ARCH_NAMES}")
    torch.manual_seed(RngHandle(spec.seed, f"init/{spec.arch}").entropy() % (2**63))
    model = _ARCHS[spec.arch](spec)
    model.eval()
    return model


def parameter_hash(model: nn.Module) -> str:
    """Stable hash of all parameters and buffers, used by determinism tests."""
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def _as_batch(images: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if images.dim() == 3:
        return images.unsqueeze(0), True
    if images.dim() == 4:
        return images, False
    raise ShapeError(f"expected (c,h,w) or (n,c,h,w), got shape {tuple(images.shape)}")


def predict(model: GapClassifier, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Forward pass returning (logits, softmax probabilities)."""
    batch, single = _as_batch(images)
    if batch.shape[1] != model.spec.in_channels:
        raise ShapeError(
            f"model expects {model.spec.in_channels} channels, got {batch.shape[1]}"
        )
    model.eval()
    with torch.no_grad():
        logits = model(batch)
        probs = F.softmax(logits, dim=1)
    if single:
        return logits[0], probs[0]
    return logits, probs


def predict_labels(model: GapClassifier, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Argmax predictions over a (possibly large) batch."""
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(model(images[start : start + batch_size]).argmax(dim=1))
    return torch.cat(out)


LOSS_KINDS = ("cross-entropy-true", "cross-entropy-target")


def input_gradient(
    model: GapClassifier, images: torch.Tensor, labels: torch.Tensor, loss_kind: str
) -> torch.Tensor:
    """Gradient of the summed cross-entropy w.r.t. the input pixels.

    loss_kind records whether `labels` are true labels (untargeted ascent)
    or target labels (targeted descent); the derivative is the same, the
    caller chooses the sign of the update.
    """
    if loss_kind not in LOSS_KINDS:
        raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}")
    batch, single = _as_batch(images)
    labels = torch.atleast_1d(torch.as_tensor(labels, dtype=torch.int64))
    model.eval()
    x = batch.clone().detach().requires_grad_(True)
    loss = F.cross_entropy(model(x), labels, reduction="sum")
    (grad,) = torch.autograd.grad(loss, x)
    return grad[0] if single else grad


@dataclass
class ClassifierEnsemble:
    """Uniform-weight ensemble; the training loss averages member losses."""

    members: list[GapClassifier] = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ConfigError("ensemble needs at least one member")
        heads = {m.spec.num_classes for m in self.members}
        chans = {m.spec.in_channels for m in self.members}
        if len(heads) != 1 or len(chans) != 1:
            raise ConfigError("ensemble members must share label space and input shape")


def ensemble_loss(
    ensemble: ClassifierEnsemble, images: torch.Tensor, targets: torch.Tensor
) -> torch.Tensor:
    """Mean over members of the targeted cross-entropy (batch-mean inside)."""
    batch, _ = _as_batch(images)
    targets = torch.atleast_1d(torch.as_tensor(targets, dtype=torch.int64))
    losses = [F.cross_entropy(m(batch), targets) for m in ensemble.members]
    return torch.stack(losses).mean()


def accuracy(model: GapClassifier, data: LabeledDataset, batch_size: int = 256) -> float:
    preds = predict_labels(model, data.images, batch_size)
    return float((preds == data.labels).float().mean())


def train_classifier(
    model: GapClassifier,
    data: LabeledDataset,
    cfg: TrainConfig,
    val_data: LabeledDataset | None = None,
) -> tuple[GapClassifier, list[dict]]:
    """Train with SGD + Nesterov under a per-epoch cosine-annealed lr.

    Returns the trained model and a per-epoch history of loss/accuracy.
    Raises TrainingDivergedError on a non-finite loss.
    """
    if len(data) == 0:
        raise ConfigError("training data is empty")
    if cfg.epochs == 0:
        return model, []
    opt = torch.optim.SGD(
        model.parameters(), lr=cfg.lr, momentum=cfg.momentum, nesterov=True
    )
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=cfg.epochs, eta_min=cfg.lr_floor
    )
    rng = RngHandle(cfg.seed, "train-classifier")
    history = []
    for epoch in range(cfg.epochs):
        model.train()
        total_loss, total_hits, total = 0.0, 0, 0
        for xb, yb in data.batches(cfg.batch_size, rng.child(f"epoch-{epoch}")):
            opt.zero_grad()
            logits = model(xb)
            loss = F.cross_entropy(logits, yb)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}", step=epoch)
            loss.backward()
            opt.step()
            total_loss += float(loss.detach()) * len(xb)
            total_hits += int((logits.argmax(dim=1) == yb).sum())
            total += len(xb)
        sched.step()
        entry = {
            "epoch": epoch,
            "loss": total_loss / total,
            "train_acc": total_hits / total,
        }
        if val_data is not None:
            entry["val_acc"] = accuracy(model, val_data)
        history.append(entry)
    model.eval()
    return model, history
