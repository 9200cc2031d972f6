"""Core value types and pixel-domain utilities.

Images are torch tensors in channels-first layout: (c, h, w) for a single
image or (n, c, h, w) for a batch, with float values in [0, 1] once clipped.
Labels are 0-indexed internally and rendered 1-indexed only in reports.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, NoValidTargetError, ZeroPerturbationError


@dataclass(frozen=True)
class LabelSpace:
    """The set of valid class labels {0, ..., num_classes - 1}."""

    num_classes: int
    names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be positive, got {self.num_classes}")
        if self.names and len(self.names) != self.num_classes:
            raise ConfigError("names length must match num_classes")

    def contains(self, label: int) -> bool:
        return 0 <= int(label) < self.num_classes

    def name_of(self, label: int) -> str:
        return self.names[label] if self.names else str(int(label))


@dataclass(frozen=True)
class AttackBudget:
    """Perturbation budget shared by the attack implementations.

    epsilon/alpha are Linf strengths for the iterative attacks, max_iters the
    iteration count, l2_target the fixed whole-tensor L2 norm used by the
    generator pipeline.
    """

    epsilon: float = 0.1
    alpha: float = 0.035
    max_iters: int = 50
    l2_target: float = 0.1

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.alpha <= 0:
            raise ConfigError("alpha must be > 0")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if self.l2_target <= 0:
            raise ConfigError("l2_target must be > 0")


class RngHandle:
    """Named, seed-derived random stream.

    Identical (seed, stream) always reproduces the same numpy and torch
    draw sequences. Child streams are derived by name so that consumers
    (data shuffling, dropout masks, defenses, ...) never share state.
    """

    def __init__(self, seed: int, stream: str = "root"):
        self.seed = int(seed)
        self.stream = stream

    def child(self, name: str) -> "RngHandle":
        return RngHandle(self.seed, f"{self.stream}/{name}")

    def entropy(self) -> int:
        digest = hashlib.sha256(f"{self.seed}:{self.stream}".encode()).digest()
        return int.from_bytes(digest[:8], "little")

    def numpy(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.entropy()))

    def torch(self) -> torch.Generator:
        gen = torch.Generator()
        gen.manual_seed(self.entropy() % (2**63))
        return gen

    def __repr__(self):
        return f"RngHandle(seed={self.seed}, stream={self.stream!r})"


def clip_to_valid(image: torch.Tensor) -> torch.Tensor:
    """Clamp pixel values into the valid [0, 1] range."""
    return torch.clamp(image, 0.0, 1.0)


def l2_norm(delta: torch.Tensor) -> torch.Tensor:
    """Whole-tensor L2 norm per image: (n, c, h, w) -> (n,), (c, h, w) -> scalar."""
    if delta.dim() == 4:
        return torch.linalg.vector_norm(delta.flatten(1), dim=1)
    return torch.linalg.vector_norm(delta)


def linf_norm(delta: torch.Tensor) -> torch.Tensor:
    """Max absolute value per image: (n, c, h, w) -> (n,), (c, h, w) -> scalar."""
    if delta.dim() == 4:
        return delta.abs().flatten(1).max(dim=1).values
    return delta.abs().max()


def l2_norm_scale(delta: torch.Tensor, target: float) -> torch.Tensor:
    """Rescale a perturbation so each image's whole-tensor L2 norm equals target.

    Raises ZeroPerturbationError when any image has zero norm (direction
    undefined, cannot scale).
    """
    if target <= 0:
        raise ConfigError(f"l2 target must be > 0, got {target}")
    norms = l2_norm(delta)
    if bool((norms == 0).any()):
        raise ZeroPerturbationError("cannot rescale a zero-norm perturbation")
    if delta.dim() == 4:
        return delta * (target / norms).view(-1, 1, 1, 1)
    return delta * (target / norms)


def random_target(true_label: int, space: LabelSpace, rng: RngHandle | np.random.Generator) -> int:
    """Draw a target label uniformly from all classes except the true one."""
    if space.num_classes < 2:
        raise NoValidTargetError("need at least 2 classes to pick a target != true label")
    gen = rng.numpy() if isinstance(rng, RngHandle) else rng
    offset = int(gen.integers(1, space.num_classes))
    return (int(true_label) + offset) % space.num_classes


def random_targets(true_labels: torch.Tensor, num_classes: int, gen: np.random.Generator) -> torch.Tensor:
    """Vectorised random_target over a batch of true labels."""
    if num_classes < 2:
        raise NoValidTargetError("need at least 2 classes to pick a target != true label")
    offsets = gen.integers(1, num_classes, size=len(true_labels))
    return (true_labels + torch.from_numpy(offsets).to(true_labels.dtype)) % num_classes


@dataclass
class LabeledDataset:
    """Images plus labels with a deterministic iteration order.

    images: (n, c, h, w) float32 in [0, 1]; labels: (n,) int64.
    """

    images: torch.Tensor
    labels: torch.Tensor
    space: LabelSpace
    name: str = "dataset"
    split: str = "train"

    def __post_init__(self):
        if self.images.dim() != 4:
            raise ConfigError("images must be (n, c, h, w)")
        if len(self.images) != len(self.labels):
            raise ConfigError("images and labels length mismatch")
        bad = [int(v) for v in self.labels.unique() if not self.space.contains(int(v))]
        if bad:
            raise ConfigError(f"labels outside the label space: {bad}")

    def __len__(self):
        return len(self.images)

    def __getitem__(self, idx):
        return self.images[idx], int(self.labels[idx])

    def subset(self, n: int, offset: int = 0) -> "LabeledDataset":
        return LabeledDataset(
            self.images[offset : offset + n],
            self.labels[offset : offset + n],
            self.space,
            name=self.name,
            split=self.split,
        )

    def batches(self, batch_size: int, rng: RngHandle | None = None):
        """Yield (images, labels) batches; shuffled when an rng is given."""
        order = np.arange(len(self))
        if rng is not None:
            rng.numpy().shuffle(order)
        for start in range(0, len(self), batch_size):
            idx = torch.from_numpy(order[start : start + batch_size])
            yield self.images[idx], self.labels[idx]

    def order_hash(self, rng: RngHandle | None = None) -> str:
        """Hash of the iteration order, used by determinism checks."""
        order = np.arange(len(self))
        if rng is not None:
            rng.numpy().shuffle(order)
        return hashlib.sha256(order.tobytes()).hexdigest()
