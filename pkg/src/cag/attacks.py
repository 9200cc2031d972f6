"""Baseline attacks: FGSM, I-FGSM, PGD, and the C&W L2 optimizer.

All attacks operate on batches (n, c, h, w) and return one AttackResult per
image. fgsm is the single-step special case of the I-FGSM loop and PGD is
I-FGSM plus an optional random start, so the collapse identities
(fgsm == ifgsm(N=1, alpha=eps), pgd(random_start=False) == ifgsm) hold
bitwise by construction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core import AttackBudget, RngHandle, clip_to_valid, l2_norm, linf_norm
from .errors import ConfigError, SameTargetError


@dataclass
class AttackResult:
    """Per-image attack outcome feeding the evaluation metrics."""

    adv: torch.Tensor
    true_label: int
    target_label: int | None
    predicted: int
    success: bool
    l2: float
    linf: float
    iterations: int
    time_s: float


def _results(
    model, x0, adv, true_labels, targets, iterations, elapsed
) -> list[AttackResult]:
    with torch.no_grad():
        preds = model(adv).argmax(dim=1)
    delta = adv - x0
    l2s, linfs = l2_norm(delta), linf_norm(delta)
    per_image_time = elapsed / len(adv)
    out = []
    for i in range(len(adv)):
        pred = int(preds[i])
        if targets is None:
            success = pred != int(true_labels[i])
            tgt = None
        else:
            tgt = int(targets[i])
            success = pred == tgt
        out.append(
            AttackResult(
                adv=adv[i],
                true_label=int(true_labels[i]),
                target_label=tgt,
                predicted=pred,
                success=success,
                l2=float(l2s[i]),
                linf=float(linfs[i]),
                iterations=iterations,
                time_s=per_image_time,
            )
        )
    return out


def _ifgsm_core(model, x0, labels, eps, alpha, steps, targeted, x_start=None):
    """Shared sign-gradient loop. Targeted mode descends the target-class
    cross-entropy; every iterate is projected to the eps ball and [0, 1]."""
    model.eval()
    x = x0.clone() if x_start is None else x_start.clone()
    direction = -1.0 if targeted else 1.0
    for _ in range(steps):
        xg = x.detach().requires_grad_(True)
        loss = F.cross_entropy(model(xg), labels, reduction="sum")
        (grad,) = torch.autograd.grad(loss, xg)
        x = xg.detach() + direction * alpha * torch.sign(grad)
        x = x0 + torch.clamp(x - x0, -eps, eps)
        x = clip_to_valid(x)
    return x.detach()


def fgsm(model, images, true_labels, epsilon: float) -> list[AttackResult]:
    """One-step untargeted sign attack: x' = clip(x + eps * sign(grad))."""
    if epsilon < 0:
        raise ConfigError("epsilon must be >= 0")
    true_labels = torch.as_tensor(true_labels, dtype=torch.int64)
    t0 = time.perf_counter()
    adv = _ifgsm_core(model, images, true_labels, epsilon, epsilon, 1, targeted=False)
    return _results(model, images, adv, true_labels, None, 1, time.perf_counter() - t0)


def _check_budget(budget: AttackBudget):
    if budget.alpha > budget.epsilon:
        raise ConfigError("iterative Linf attacks need alpha <= epsilon")


def ifgsm(
    model, images, labels, budget: AttackBudget, targeted: bool = False
) -> list[AttackResult]:
    """Iterated sign attack. In targeted mode `labels` are the targets."""
    _check_budget(budget)
    labels = torch.as_tensor(labels, dtype=torch.int64)
    t0 = time.perf_counter()
    adv = _ifgsm_core(
        model, images, labels, budget.epsilon, budget.alpha, budget.max_iters, targeted
    )
    elapsed = time.perf_counter() - t0
    targets = labels if targeted else None
    true = labels if not targeted else torch.full_like(labels, -1)
    return _results(model, images, adv, true, targets, budget.max_iters, elapsed)


def ifgsm_targeted(
    model, images, true_labels, targets, budget: AttackBudget
) -> list[AttackResult]:
    """Targeted I-FGSM that also records the true labels in the results."""
    _check_budget(budget)
    true_labels = torch.as_tensor(true_labels, dtype=torch.int64)
    targets = torch.as_tensor(targets, dtype=torch.int64)
    if bool((targets == true_labels).any()):
        raise SameTargetError("target equals true label for some image")
    t0 = time.perf_counter()
    adv = _ifgsm_core(
        model, images, targets, budget.epsilon, budget.alpha, budget.max_iters, True
    )
    elapsed = time.perf_counter() - t0
    return _results(model, images, adv, true_labels, targets, budget.max_iters, elapsed)


def pgd(
    model,
    images,
    labels,
    budget: AttackBudget,
    targeted: bool = False,
    random_start: bool = False,
    rng: RngHandle | None = None,
) -> list[AttackResult]:
    """I-FGSM with an optional uniform random start inside the eps ball."""
    _check_budget(budget)
    labels = torch.as_tensor(labels, dtype=torch.int64)
    t0 = time.perf_counter()
    x_start = None
    if random_start:
        gen = (rng or RngHandle(0, "pgd")).torch()
        noise = (
            torch.rand(images.shape, generator=gen, dtype=images.dtype) * 2.0 - 1.0
        ) * budget.epsilon
        x_start = clip_to_valid(images + noise)
    adv = _ifgsm_core(
        model,
        images,
        labels,
        budget.epsilon,
        budget.alpha,
        budget.max_iters,
        targeted,
        x_start=x_start,
    )
    elapsed = time.perf_counter() - t0
    targets = labels if targeted else None
    true = labels if not targeted else torch.full_like(labels, -1)
    return _results(model, images, adv, true, targets, budget.max_iters, elapsed)


@dataclass(frozen=True)
class CWConfig:
    """C&W L2 attack configuration. margin_on selects whether the hinge
    margin is computed on softmax outputs (default) or raw logits."""

    confidence: float = 0.0
    binary_search_steps: int = 10
    iterations: int = 1000
    lr: float = 0.005
    initial_const: float = 1e-2
    margin_on: str = "softmax"

    def __post_init__(self):
        if self.confidence < 0:
            raise ConfigError("confidence must be >= 0")
        if self.binary_search_steps < 1 or self.iterations < 1:
            raise ConfigError("binary_search_steps and iterations must be >= 1")
        if self.lr <= 0 or self.initial_const <= 0:
            raise ConfigError("lr and initial_const must be > 0")
        if self.margin_on not in ("softmax", "logits"):
            raise ConfigError("margin_on must be 'softmax' or 'logits'")


_C_MIN, _C_MAX = 1e-5, 1e10
_ATANH_CLIP = 1.0 - 1e-6


def _cw_margin(logits: torch.Tensor, targets: torch.Tensor, cfg: CWConfig) -> torch.Tensor:
    """max_{i != t} f_i - f_t per image; success when <= -confidence."""
    scores = F.softmax(logits, dim=1) if cfg.margin_on == "softmax" else logits
    target_score = scores.gather(1, targets.view(-1, 1)).squeeze(1)
    masked = scores.clone()
    masked.scatter_(1, targets.view(-1, 1), float("-inf"))
    return masked.max(dim=1).values - target_score


def cw(model, images, true_labels, targets, cfg: CWConfig = CWConfig()) -> list[AttackResult]:
    """Targeted C&W with tanh box change of variables and Adam.

    Binary-searches the trade-off constant per image: doubling while no
    success has been seen, bisecting between the last failure and success
    otherwise. Returns the successful adversarial with smallest L2, or the
    lowest-margin failed attempt flagged unsuccessful.
    """
    model.eval()
    true_labels = torch.as_tensor(true_labels, dtype=torch.int64)
    targets = torch.as_tensor(targets, dtype=torch.int64)
    if bool((targets == true_labels).any()):
        raise SameTargetError("C&W is targeted: target must differ from true label")

    n = len(images)
    t0 = time.perf_counter()
    x0 = images.detach()
    w0 = torch.atanh((x0 * 2.0 - 1.0) * _ATANH_CLIP)

    const = torch.full((n,), cfg.initial_const, dtype=images.dtype)
    lo = torch.zeros(n, dtype=images.dtype)
    hi = torch.full((n,), float("nan"), dtype=images.dtype)  # nan = no success yet

    best_adv = x0.clone()
    best_l2 = torch.full((n,), float("inf"), dtype=images.dtype)
    ever_success = torch.zeros(n, dtype=torch.bool)
    fallback_adv = x0.clone()
    fallback_margin = torch.full((n,), float("inf"), dtype=images.dtype)

    for _ in range(cfg.binary_search_steps):
        w = w0.clone().requires_grad_(True)
        opt = torch.optim.Adam([w], lr=cfg.lr)
        round_success = torch.zeros(n, dtype=torch.bool)
        for _ in range(cfg.iterations):
            adv = (torch.tanh(w) + 1.0) / 2.0
            dist = ((adv - x0) ** 2).flatten(1).sum(dim=1)
            logits = model(adv)
            margin = _cw_margin(logits, targets, cfg)
            obj = dist + const * torch.clamp(margin, min=-cfg.confidence)
            opt.zero_grad()
            obj.sum().backward()
            opt.step()
            with torch.no_grad():
                success = margin <= -cfg.confidence
                l2 = dist.sqrt()
                better = success & (l2 < best_l2)
                if bool(better.any()):
                    best_adv[better] = adv.detach()[better]
                    best_l2[better] = l2[better]
                round_success |= success
                lower_margin = ~success & (margin < fallback_margin)
                if bool(lower_margin.any()):
                    fallback_adv[lower_margin] = adv.detach()[lower_margin]
                    fallback_margin[lower_margin] = margin.detach()[lower_margin]
        ever_success |= round_success
        hi = torch.where(round_success & torch.isnan(hi), const, hi)
        hi = torch.where(round_success & ~torch.isnan(hi), torch.minimum(hi, const), hi)
        lo = torch.where(~round_success, torch.maximum(lo, const), lo)
        const = torch.where(
            torch.isnan(hi), torch.clamp(const * 2.0, max=_C_MAX), (lo + hi) / 2.0
        )
        const = torch.clamp(const, min=_C_MIN, max=_C_MAX)

    adv_out = torch.where(ever_success.view(-1, 1, 1, 1), best_adv, fallback_adv)
    elapsed = time.perf_counter() - t0
    iters = cfg.binary_search_steps * cfg.iterations
    return _results(model, x0, adv_out, true_labels, targets, iters, elapsed)
