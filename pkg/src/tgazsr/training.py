"""Adversarial fine-tuning with text-guided attention alignment.

Per step: craft PGD adversaries against the current target encoder, then
minimize

    L_total = CE(target(x_adv)) + alpha * L_AR + beta * L_AMC

where L_AR aligns the target's attention on adversarial inputs with the
frozen original's attention on clean inputs, and L_AMC aligns the target's
and original's attention on the same clean inputs. Only the target image
encoder is updated.
"""
from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import torch
import torch.nn.functional as F

from .attacks import AttackConfig, pgd_attack
from .attention import AttentionMap, gradient_attention, text_guided_attention
from .data import ImageDataset, batches
from .model import DualModelState, ImageBatch, ImageEncoding, TextEmbeddings, classification_logits, save_checkpoint

log = logging.getLogger(__name__)


class Distance(str, enum.Enum):
    L2 = "l2"
    L1 = "l1"
    COSINE = "cosine"


class AttentionKind(str, enum.Enum):
    TEXT_GUIDED = "text_guided"
    GRADIENT = "gradient"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.08
    beta: float = 0.05
    distance: Distance = Distance.L2

    def __post_init__(self):
        object.__setattr__(self, "distance", Distance(self.distance))
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 1
    seed: int = 0
    attack: AttackConfig = field(default_factory=AttackConfig)
    clean_ce: bool = False  # add CE on clean inputs (off: CE on adversarial inputs only)
    attention: AttentionKind = AttentionKind.TEXT_GUIDED

    def __post_init__(self):
        object.__setattr__(self, "attention", AttentionKind(self.attention))
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class StepMetrics:
    l_ce: float
    l_ar: float
    l_amc: float
    l_total: float
    adv_correct: int = 0
    n: int = 0


def contrastive_ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Image-to-text cross-entropy over temperature-scaled cosine logits."""
    k = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return F.cross_entropy(logits, labels)


def map_distance(a: AttentionMap | torch.Tensor, b: AttentionMap | torch.Tensor, metric: Distance | str = "l2") -> torch.Tensor:
    """Per-sample distance between two stacks of maps (shape N)."""
    a = a.values if isinstance(a, AttentionMap) else a
    b = b.values if isinstance(b, AttentionMap) else b
    if a.shape != b.shape:
        raise ValueError(f"map shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    metric = Distance(metric)
    fa, fb = a.flatten(1), b.flatten(1)
    if metric is Distance.L1:
        return (fa - fb).abs().sum(dim=1)
    if metric is Distance.L2:
        sq = (fa - fb).pow(2).sum(dim=1)
        # sqrt has an infinite derivative at 0; route exact zeros around it
        zero = sq == 0
        return torch.where(zero, torch.zeros_like(sq), torch.sqrt(torch.where(zero, torch.ones_like(sq), sq)))
    na = fa.norm(dim=1)
    nb = fb.norm(dim=1)
    za, zb = na == 0, nb == 0
    denom = torch.where(za | zb, torch.ones_like(na), na * nb)
    dist = 1 - (fa * fb).sum(dim=1) / denom
    dist = torch.where(za & zb, torch.zeros_like(dist), dist)
    return torch.where(za ^ zb, torch.ones_like(dist), dist)


def total_loss(ce, l_ar, l_amc, weights: LossWeights):
    return ce + weights.alpha * l_ar + weights.beta * l_amc


def _text_map(enc: ImageEncoding, labels: torch.Tensor, text: TextEmbeddings, out_hw) -> AttentionMap:
    return text_guided_attention(enc.patches, text.for_labels(labels), out_hw)


def attention_refinement_loss(
    state: DualModelState, x_adv: torch.Tensor, x: torch.Tensor, labels: torch.Tensor, metric="l2"
) -> torch.Tensor:
    out_hw = tuple(x.shape[-2:])
    a_tar = _text_map(state.target(x_adv), labels, state.text, out_hw)
    with torch.no_grad():
        a_ori = _text_map(state.original(x), labels, state.text, out_hw)
    return map_distance(a_tar, a_ori, metric).mean()


def model_constraint_loss(state: DualModelState, x: torch.Tensor, labels: torch.Tensor, metric="l2") -> torch.Tensor:
    out_hw = tuple(x.shape[-2:])
    a_tar = _text_map(state.target(x), labels, state.text, out_hw)
    with torch.no_grad():
        a_ori = _text_map(state.original(x), labels, state.text, out_hw)
    return map_distance(a_tar, a_ori, metric).mean()


def tga_loss(
    state: DualModelState,
    batch: ImageBatch,
    x_adv: torch.Tensor,
    weights: LossWeights,
    attention: AttentionKind | str = AttentionKind.TEXT_GUIDED,
    clean_ce: bool = False,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Total loss for fixed adversarial inputs; returns ``(total, parts)``.

    The original-encoder maps are computed without a graph, so gradients
    reach the target parameters only through the target-side maps.
    """
    attention = AttentionKind(attention)
    x, labels = batch.pixels, batch.labels
    out_hw = tuple(x.shape[-2:])
    need_clean = weights.beta > 0 or clean_ce
    enc_adv = state.target(x_adv)
    logits_adv = state.logits(enc_adv.pooled)
    ce = contrastive_ce_loss(logits_adv, labels)

    if attention is AttentionKind.TEXT_GUIDED:
        a_adv = _text_map(enc_adv, labels, state.text, out_hw)
        with torch.set_grad_enabled(need_clean and torch.is_grad_enabled()):
            enc_clean = state.target(x)
            a_clean = _text_map(enc_clean, labels, state.text, out_hw)
        with torch.no_grad():
            a_ori = _text_map(state.original(x), labels, state.text, out_hw)
    else:
        def cam(encoder, pixels, graph):
            return gradient_attention(
                encoder, ImageBatch(pixels, labels), state.text, out_hw, state.temperature, create_graph=graph
            )

        a_adv = cam(state.target, x_adv, True)
        a_clean = cam(state.target, x, need_clean)
        a_ori = AttentionMap(cam(state.original, x, False).values.detach(), a_clean.source)
        enc_clean = state.target(x) if clean_ce else None

    l_ar = map_distance(a_adv, a_ori, weights.distance).mean()
    l_amc = map_distance(a_clean, a_ori, weights.distance).mean()
    total = total_loss(ce, l_ar, l_amc, weights)
    parts = {"l_ce": ce, "l_ar": l_ar, "l_amc": l_amc}
    if clean_ce:
        ce_clean = contrastive_ce_loss(state.logits(enc_clean.pooled), labels)
        total = total + ce_clean
        parts["l_ce_clean"] = ce_clean
    parts["logits_adv"] = logits_adv
    return total, parts


def make_optimizer(state: DualModelState, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.SGD(
        state.target.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )


def finetune_step(
    state: DualModelState,
    batch: ImageBatch,
    optimizer: torch.optim.Optimizer,
    cfg: TrainConfig,
    weights: LossWeights,
) -> StepMetrics:
    adv = pgd_attack(state.target, batch, state.text, cfg.attack, state.temperature)
    total, parts = tga_loss(state, batch, adv.pixels, weights, cfg.attention, cfg.clean_ce)
    if not torch.isfinite(total):
        detail = ", ".join(f"{k}={v.item():.4g}" for k, v in parts.items() if v.dim() == 0)
        raise TrainingDivergedError(f"non-finite loss ({detail})")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    correct = int((parts["logits_adv"].argmax(dim=1) == batch.labels).sum())
    return StepMetrics(
        l_ce=parts["l_ce"].item(),
        l_ar=parts["l_ar"].item(),
        l_amc=parts["l_amc"].item(),
        l_total=total.item(),
        adv_correct=correct,
        n=len(batch),
    )


def epoch_seed(seed: int, epoch: int) -> int:
    return seed * 1_000_003 + epoch


def finetune(
    state: DualModelState,
    dataset: ImageDataset,
    cfg: TrainConfig,
    weights: LossWeights,
    eval_data: ImageDataset | None = None,
    eval_attack: AttackConfig | None = None,
    out_dir: str | Path | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Run ``cfg.epochs`` epochs; returns one metrics dict per epoch.

    With ``out_dir`` set, appends each record to ``training_log.jsonl`` and
    writes the target encoder to ``checkpoints/epoch_XXX`` after each epoch.
    """
    from .evaluation import robust_accuracy, zero_shot_accuracy

    torch.manual_seed(cfg.seed)
    optimizer = make_optimizer(state, cfg)
    eval_data = eval_data if eval_data is not None else dataset
    eval_attack = eval_attack or cfg.attack
    records = []
    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = out_dir / "training_log.jsonl"
        log_file.write_text("")
    for epoch in range(1, cfg.epochs + 1):
        sums = {"l_ce": 0.0, "l_ar": 0.0, "l_amc": 0.0, "l_total": 0.0}
        count = 0
        for batch in batches(dataset, cfg.batch_size, seed=epoch_seed(cfg.seed, epoch), shuffle=True):
            m = finetune_step(state, batch, optimizer, cfg, weights)
            for key in sums:
                sums[key] += getattr(m, key) * m.n
            count += m.n
        record = {"epoch": epoch, **{k: v / max(count, 1) for k, v in sums.items()}}
        record["clean_acc"] = zero_shot_accuracy(state.target, eval_data, state.text, state.temperature)
        record["robust_acc"] = robust_accuracy(state.target, eval_data, state.text, eval_attack, state.temperature)
        records.append(record)
        log.info("epoch %d: %s", epoch, record)
        if log_file is not None:
            with open(log_file, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            save_checkpoint(out_dir / "checkpoints" / f"epoch_{epoch:03d}", state.target, state.text, state.temperature,
                            {"epoch": epoch})
        if on_epoch is not None:
            on_epoch(record)
    return records


def train_clean(
    encoder,
    dataset: ImageDataset,
    text: TextEmbeddings,
    temperature: float = 0.07,
    epochs: int = 10,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
) -> list[float]:
    """Plain (non-adversarial) CE training with Adam.

    Stands in for large-scale pretraining: it produces the "original"
    encoder that adversarial fine-tuning starts from.
    """
    torch.manual_seed(seed)
    opt = torch.optim.Adam(encoder.parameters(), lr=lr)
    losses = []
    for epoch in range(1, epochs + 1):
        total, count = 0.0, 0
        for batch in batches(dataset, batch_size, seed=epoch_seed(seed, epoch) + 7919, shuffle=True):
            logits = classification_logits(encoder(batch.pixels).pooled, text, temperature)
            loss = contrastive_ce_loss(logits, batch.labels)
            if not math.isfinite(loss.item()):
                raise TrainingDivergedError("non-finite loss during clean training")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
            count += len(batch)
        losses.append(total / count)
    return losses


def config_dict(cfg: TrainConfig, weights: LossWeights) -> dict:
    d = asdict(cfg)
    d["attack"] = cfg.attack.summary()
    d["attention"] = cfg.attention.value
    return {"train": d, "loss": {"alpha": weights.alpha, "beta": weights.beta, "distance": weights.distance.value}}
