"""l-infinity bounded attacks: sign-gradient PGD on cross-entropy or on the
Carlini-Wagner margin."""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .model import ImageBatch, TextEmbeddings, classification_logits


class LossKind(str, enum.Enum):
    CROSS_ENTROPY = "cross_entropy"
    CW_MARGIN = "cw_margin"


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 1 / 255
    step_size: float = 1 / 255
    iterations: int = 2
    random_init: bool = False
    clamp: tuple[float, float] = (0.0, 1.0)
    loss_kind: LossKind = LossKind.CROSS_ENTROPY
    kappa: float = 0.0
    seed: int = 0  # only used when random_init

    def __post_init__(self):
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
        object.__setattr__(self, "clamp", tuple(self.clamp))
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.step_size < 0:
            raise ValueError("step_size must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")

    def summary(self) -> dict:
        d = asdict(self)
        d["loss_kind"] = self.loss_kind.value
        d["clamp"] = list(self.clamp)
        return d


def pgd_config(epsilon: float = 1 / 255, iterations: int = 2, step_size: float | None = None, **kw) -> AttackConfig:
    return AttackConfig(epsilon=epsilon, step_size=epsilon if step_size is None else step_size, iterations=iterations, **kw)


def _bounds(x: torch.Tensor, eps: float) -> tuple[torch.Tensor, torch.Tensor]:
    # Bounds are formed in float64 and rounded inward, so that no point of the
    # clipped box lies farther than eps from x even after casting to x.dtype.
    xd = x.double()
    lo = (xd - eps).to(x.dtype)
    hi = (xd + eps).to(x.dtype)
    for _ in range(4):
        bad_lo = (xd - lo.double()) > eps
        bad_hi = (hi.double() - xd) > eps
        if not (bad_lo.any() or bad_hi.any()):
            break
        lo = torch.where(bad_lo, torch.nextafter(lo, torch.full_like(lo, np.inf)), lo)
        hi = torch.where(bad_hi, torch.nextafter(hi, torch.full_like(hi, -np.inf)), hi)
    return lo, hi


def project(x_adv: torch.Tensor, x: torch.Tensor, eps: float, clamp: tuple[float, float] = (0.0, 1.0)) -> torch.Tensor:
    """Project onto the eps-ball around ``x`` intersected with the valid pixel box."""
    lo, hi = _bounds(x, eps)
    out = torch.minimum(torch.maximum(x_adv, lo), hi)
    return out.clamp(clamp[0], clamp[1])


def ascend(loss_fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, cfg: AttackConfig) -> torch.Tensor:
    """Maximize ``loss_fn`` over the ball with ``x <- P(x + step * sign(grad))``.

    ``loss_fn`` maps pixels to a scalar. Only the pixels get gradients;
    parameters captured by ``loss_fn`` are left untouched.
    """
    x = x.detach()
    x_adv = x.clone()
    if cfg.random_init and cfg.epsilon > 0:
        gen = torch.Generator().manual_seed(cfg.seed)
        noise = torch.rand(x.shape, generator=gen, dtype=x.dtype) * 2 - 1
        x_adv = project(x + cfg.epsilon * noise, x, cfg.epsilon, cfg.clamp)
    for _ in range(cfg.iterations):
        x_adv.requires_grad_(True)
        with torch.enable_grad():
            loss = loss_fn(x_adv)
            if loss.requires_grad:
                (grad,) = torch.autograd.grad(loss, x_adv)
            else:
                grad = torch.zeros_like(x_adv)
        x_adv = project(x_adv.detach() + cfg.step_size * torch.sign(grad), x, cfg.epsilon, cfg.clamp)
    return x_adv.detach()


def cw_margin(logits: torch.Tensor, labels: torch.Tensor, kappa: float = 0.0) -> torch.Tensor:
    """Per-sample ``max(max_{k != y} z_k - z_y, -kappa)``."""
    true = logits.gather(1, labels[:, None]).squeeze(1)
    others = logits.masked_fill(F.one_hot(labels, logits.shape[1]).bool(), -torch.inf)
    return torch.clamp(others.amax(dim=1) - true, min=-kappa)


def attack_loss(logits: torch.Tensor, labels: torch.Tensor, cfg: AttackConfig) -> torch.Tensor:
    if cfg.loss_kind is LossKind.CROSS_ENTROPY:
        return F.cross_entropy(logits, labels, reduction="sum")
    return cw_margin(logits, labels, cfg.kappa).sum()


def _run(encoder, batch: ImageBatch, text: TextEmbeddings, cfg: AttackConfig, temperature: float) -> ImageBatch:
    labels = batch.labels

    def loss_fn(pixels):
        return attack_loss(classification_logits(encoder(pixels).pooled, text, temperature), labels, cfg)

    return ImageBatch(ascend(loss_fn, batch.pixels, cfg), labels.clone())


def pgd_attack(encoder, batch: ImageBatch, text: TextEmbeddings, cfg: AttackConfig, temperature: float = 0.07) -> ImageBatch:
    if cfg.loss_kind is not LossKind.CROSS_ENTROPY:
        raise ValueError("pgd_attack needs loss_kind=cross_entropy")
    return _run(encoder, batch, text, cfg, temperature)


def cw_attack(encoder, batch: ImageBatch, text: TextEmbeddings, cfg: AttackConfig, temperature: float = 0.07) -> ImageBatch:
    """Margin-loss PGD inside the same l-inf ball (not the l2 Lagrangian form)."""
    if cfg.loss_kind is not LossKind.CW_MARGIN:
        raise ValueError("cw_attack needs loss_kind=cw_margin")
    return _run(encoder, batch, text, cfg, temperature)


def run_attack(encoder, batch: ImageBatch, text: TextEmbeddings, cfg: AttackConfig, temperature: float = 0.07) -> ImageBatch:
    """Dispatch on ``cfg.loss_kind``; the plug point for external attack suites."""
    return _run(encoder, batch, text, cfg, temperature)
