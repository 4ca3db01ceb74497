"""Desk-scale experiment protocol.

Stand-in for "pretrained CLIP, adversarially fine-tuned on one dataset,
evaluated zero-shot on others":

* the *original* encoder is trained on clean images of all eight shape
  classes (the pretraining distribution);
* adversarial fine-tuning only sees the first four classes;
* evaluation covers a seen-class split and a held-out-class split, each
  with its own class prompts, and reports their average.

The miniature encoder is far less fragile than CLIP at 1/255, so the desk
attack radius defaults to 4/255 for both training and evaluation.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch

from .attacks import AttackConfig
from .data import SHAPE_CLASSES, ImageDataset, synthetic_dataset
from .evaluation import EvalReport, evaluate_datasets, config_hash
from .model import DualModelState, MiniViT, TextEmbeddings, ViTConfig, encode_text, load_checkpoint, save_checkpoint
from .training import LossWeights, TrainConfig, finetune, train_clean

SEEN = tuple(SHAPE_CLASSES[:4])
UNSEEN = tuple(SHAPE_CLASSES[4:])


@dataclass(frozen=True)
class DeskProtocol:
    model: ViTConfig = field(default_factory=ViTConfig)
    temperature: float = 0.07
    text_seed: int = 0
    pretrain_n: int = 2048
    pretrain_epochs: int = 20
    pretrain_lr: float = 1e-3
    finetune_n: int = 1024
    finetune_epochs: int = 3
    finetune_lr: float = 5e-3
    test_n: int = 256
    train_eps: float = 4 / 255
    train_iters: int = 2
    eval_eps: float = 4 / 255
    eval_step: float = 1 / 255
    eval_iters: int = 100
    batch_size: int = 32

    def train_attack(self) -> AttackConfig:
        return AttackConfig(epsilon=self.train_eps, step_size=self.train_eps, iterations=self.train_iters)

    def eval_attack(self, eps: float | None = None) -> AttackConfig:
        return AttackConfig(epsilon=self.eval_eps if eps is None else eps, step_size=self.eval_step,
                            iterations=self.eval_iters)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DeskData:
    pretrain: ImageDataset
    finetune: ImageDataset
    tests: list[ImageDataset]
    texts: dict[str, TextEmbeddings]  # keyed by dataset name


def desk_data(protocol: DeskProtocol, seed: int) -> DeskData:
    size = protocol.model.image_size
    all_classes = list(SHAPE_CLASSES)
    pre = synthetic_dataset(n=protocol.pretrain_n, seed=seed, classes=all_classes, image_size=size)
    ft = synthetic_dataset(n=protocol.finetune_n, seed=seed + 500, classes=SEEN, image_size=size)
    seen = synthetic_dataset(n=protocol.test_n, seed=seed + 1000, classes=SEEN, image_size=size)
    unseen = synthetic_dataset(n=protocol.test_n, seed=seed + 1000, classes=UNSEEN, image_size=size)
    pre.name, ft.name, seen.name, unseen.name = "pretrain", "finetune", "seen", "unseen"
    dim = protocol.model.embed_dim
    texts = {ds.name: encode_text(ds.class_names, source=protocol.text_seed, dim=dim) for ds in (pre, ft, seen, unseen)}
    return DeskData(pre, ft, [seen, unseen], texts)


def pretrain_original(protocol: DeskProtocol, seed: int, data: DeskData | None = None,
                      cache_dir: str | Path | None = None) -> MiniViT:
    """Clean-trained encoder for ``seed``; cached as a tensor archive if asked."""
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"original-{config_hash(protocol.to_dict())}-s{seed}"
        if (path / "index.json").is_file():
            return load_checkpoint(path)[0]
    data = data or desk_data(protocol, seed)
    torch.manual_seed(seed)
    encoder = MiniViT(protocol.model)
    train_clean(encoder, data.pretrain, data.texts["pretrain"], protocol.temperature,
                epochs=protocol.pretrain_epochs, lr=protocol.pretrain_lr, batch_size=protocol.batch_size, seed=seed)
    if path is not None:
        save_checkpoint(path, encoder, data.texts["pretrain"], protocol.temperature)
    return encoder


def adversarial_finetune(protocol: DeskProtocol, original: MiniViT, data: DeskData, weights: LossWeights, seed: int,
                         out_dir: str | Path | None = None, **train_overrides) -> tuple[DualModelState, list[dict]]:
    state = DualModelState.from_encoder(copy.deepcopy(original), data.texts["finetune"], protocol.temperature)
    cfg = TrainConfig(learning_rate=protocol.finetune_lr, epochs=protocol.finetune_epochs, seed=seed,
                      batch_size=protocol.batch_size, attack=protocol.train_attack())
    cfg = replace(cfg, **train_overrides)
    probe = data.finetune.subset(range(min(64, len(data.finetune))))
    records = finetune(state, data.finetune, cfg, weights, eval_data=probe, out_dir=out_dir)
    return state, records


def evaluate_zero_shot(protocol: DeskProtocol, encoder, data: DeskData, eps: float | None = None,
                       seed: int = 0) -> EvalReport:
    return evaluate_datasets(encoder, data.tests, data.texts, protocol.eval_attack(eps), protocol.temperature,
                             config={"protocol": protocol.to_dict(), "eps": eps}, seed=seed)


ABLATION_ARMS = {
    "ce": LossWeights(alpha=0.0, beta=0.0),
    "ce+ar": LossWeights(alpha=0.08, beta=0.0),
    "tga-zsr": LossWeights(alpha=0.08, beta=0.05),
}


def component_ablation(protocol: DeskProtocol, seed: int, arms=("ce", "tga-zsr"),
                       cache_dir: str | Path | None = None) -> dict[str, EvalReport]:
    """Fine-tune one copy of the same original per arm and evaluate each."""
    data = desk_data(protocol, seed)
    original = pretrain_original(protocol, seed, data, cache_dir)
    reports = {}
    for arm in arms:
        state, _ = adversarial_finetune(protocol, original, data, ABLATION_ARMS[arm], seed)
        reports[arm] = evaluate_zero_shot(protocol, state.target, data, seed=seed)
    return reports
