"""Zero-shot clean/robust accuracy, strength sweeps, attention-shift and
trade-off reporting."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .attacks import AttackConfig, run_attack
from .attention import text_guided_attention
from .data import ImageDataset, batches
from .model import DualModelState, TextEmbeddings, classification_logits
from .training import map_distance


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


@torch.no_grad()
def predict(encoder, pixels: torch.Tensor, text: TextEmbeddings, temperature: float) -> np.ndarray:
    logits = classification_logits(encoder(pixels).pooled, text, temperature)
    # numpy argmax returns the first maximum: ties go to the lowest class index
    return logits.cpu().numpy().argmax(axis=1)


def zero_shot_accuracy(
    encoder, dataset: ImageDataset, text: TextEmbeddings, temperature: float = 0.07, batch_size: int = 256
) -> float:
    correct = 0
    for batch in batches(dataset, batch_size, shuffle=False):
        correct += int((predict(encoder, batch.pixels, text, temperature) == batch.labels.numpy()).sum())
    return correct / len(dataset)


def robust_accuracy(
    encoder,
    dataset: ImageDataset,
    text: TextEmbeddings,
    attack: AttackConfig,
    temperature: float = 0.07,
    batch_size: int = 256,
    source_encoder=None,
) -> float:
    """Accuracy on adversarial inputs.

    Attacks are white-box against ``encoder`` unless ``source_encoder`` is
    given, in which case adversaries transfer from it.
    """
    attacker = encoder if source_encoder is None else source_encoder
    correct = 0
    for batch in batches(dataset, batch_size, shuffle=False):
        adv = run_attack(attacker, batch, text, attack, temperature)
        correct += int((predict(encoder, adv.pixels, text, temperature) == batch.labels.numpy()).sum())
    return correct / len(dataset)


@dataclass
class EvalReport:
    entries: list[dict]
    config_hash: str = ""
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def averages(self) -> dict:
        if not self.entries:
            return {"clean_acc": 0.0, "robust_acc": 0.0}
        n = len(self.entries)
        return {
            "clean_acc": sum(e["clean_acc"] for e in self.entries) / n,
            "robust_acc": sum(e["robust_acc"] for e in self.entries) / n,
        }

    def to_dict(self) -> dict:
        return {
            "entries": self.entries,
            "averages": self.averages,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        return cls(doc["entries"], doc.get("config_hash", ""), doc.get("seed", 0), doc.get("meta", {}))


def evaluate_datasets(
    encoder,
    datasets: Sequence[ImageDataset],
    text_for: dict | TextEmbeddings,
    attack: AttackConfig,
    temperature: float = 0.07,
    batch_size: int = 256,
    config: dict | None = None,
    seed: int = 0,
    source_encoder=None,
) -> EvalReport:
    """Clean and robust accuracy per dataset. ``text_for`` maps dataset name to
    its class embeddings (or one TextEmbeddings shared by all)."""
    entries = []
    for ds in datasets:
        text = text_for if isinstance(text_for, TextEmbeddings) else text_for[ds.name]
        entries.append({
            "dataset_id": ds.name,
            "n": len(ds),
            "clean_acc": zero_shot_accuracy(encoder, ds, text, temperature, batch_size),
            "robust_acc": robust_accuracy(encoder, ds, text, attack, temperature, batch_size, source_encoder),
            "attack": attack.summary(),
        })
    return EvalReport(entries, config_hash(config or {}), seed)


def strength_sweep(
    state: DualModelState,
    dataset: ImageDataset,
    eps_list: Sequence[float] = (1 / 255, 2 / 255, 4 / 255),
    iterations: int = 100,
    step_size: float | None = 1 / 255,
    batch_size: int = 256,
    seed: int = 0,
    config: dict | None = None,
) -> EvalReport:
    """One report entry per attack strength (step fixed at 1/255 by default)."""
    clean = zero_shot_accuracy(state.target, dataset, state.text, state.temperature, batch_size)
    entries = []
    for eps in eps_list:
        cfg = AttackConfig(epsilon=eps, step_size=eps if step_size is None else step_size, iterations=iterations)
        entries.append({
            "dataset_id": dataset.name,
            "epsilon": eps,
            "clean_acc": clean,
            "robust_acc": robust_accuracy(state.target, dataset, state.text, cfg, state.temperature, batch_size),
            "attack": cfg.summary(),
        })
    return EvalReport(entries, config_hash(config or {}), seed)


def uniform_sign_noise(x: torch.Tensor, eps: float, seed: int) -> torch.Tensor:
    """x + delta with delta_i uniform on {-eps, +eps}, clipped to [0, 1]."""
    gen = torch.Generator().manual_seed(seed)
    signs = torch.randint(0, 2, x.shape, generator=gen).to(x.dtype) * 2 - 1
    return (x + eps * signs).clamp(0, 1)


def attention_shift_report(
    state: DualModelState,
    dataset: ImageDataset,
    attack: AttackConfig,
    n: int = 100,
    seed: int = 0,
    batch_size: int = 128,
    out_dir: str | Path | None = None,
    max_images: int = 8,
) -> dict:
    """Distances between the target's clean attention and its attention on
    adversarial vs. randomly perturbed inputs of the same l-inf size.

    Reporting only; nothing is asserted here.
    """
    encoder, text = state.target, state.text
    subset = dataset.subset(range(min(n, len(dataset))))
    d_adv, d_noise = [], []
    saved = []
    offset = 0
    for batch in batches(subset, batch_size, shuffle=False):
        adv = run_attack(encoder, batch, text, attack, state.temperature)
        noisy = uniform_sign_noise(batch.pixels, attack.epsilon, seed + offset)
        out_hw = tuple(batch.pixels.shape[-2:])
        vecs = text.for_labels(batch.labels)
        with torch.no_grad():
            maps = [text_guided_attention(encoder(px).patches, vecs, out_hw)
                    for px in (batch.pixels, adv.pixels, noisy)]
        d_adv += map_distance(maps[0], maps[1], "l2").tolist()
        d_noise += map_distance(maps[0], maps[2], "l2").tolist()
        if out_dir is not None and len(saved) < max_images:
            take = min(max_images - len(saved), len(batch))
            for j in range(take):
                saved.append((offset + j, batch.pixels[j], adv.pixels[j], maps[0].values[j], maps[1].values[j]))
        offset += len(batch)
    report = {
        "n": len(d_adv),
        "epsilon": attack.epsilon,
        "attack": attack.summary(),
        "d_adv": d_adv,
        "d_noise": d_noise,
        "mean_d_adv": float(np.mean(d_adv)) if d_adv else 0.0,
        "mean_d_noise": float(np.mean(d_noise)) if d_noise else 0.0,
    }
    if out_dir is not None:
        from .viz import save_attention_pairs

        report["images"] = save_attention_pairs(out_dir, saved)
    return report


def tradeoff_table(reports: dict[str, EvalReport | dict], out_dir: str | Path | None = None) -> list[dict]:
    """Rows of (method, clean, robust, mean); optionally writes CSV + scatter PNG."""
    rows = []
    for method, rep in reports.items():
        avg = rep.averages if isinstance(rep, EvalReport) else rep
        clean, robust = float(avg["clean_acc"]), float(avg["robust_acc"])
        rows.append({"method": method, "clean": clean, "robust": robust, "mean": (clean + robust) / 2})
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "tradeoff.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["method", "clean", "robust", "mean"], lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
        from .viz import tradeoff_scatter

        tradeoff_scatter(rows, out_dir / "tradeoff.png")
    return rows
