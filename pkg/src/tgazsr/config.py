"""Run configuration: nested defaults, TOML/JSON loading, dotted overrides."""
from __future__ import annotations

import copy
import json
from fractions import Fraction
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .attacks import AttackConfig, LossKind
from .model import ViTConfig
from .training import AttentionKind, Distance, LossWeights, TrainConfig


class ConfigError(Exception):
    pass


DEFAULTS: dict[str, dict[str, Any]] = {
    "model": {"image_size": 32, "patch": 4, "dim": 64, "depth": 2, "heads": 4, "mlp_ratio": 4, "temperature": 0.07},
    "train": {
        "lr": 5e-3, "momentum": 0.9, "weight_decay": 0.0, "batch": 32, "epochs": 3, "seed": 0,
        "clean_ce": False, "attention": "text_guided", "pretrain_epochs": 20, "pretrain_lr": 1e-3,
    },
    "loss": {"alpha": 0.08, "beta": 0.05, "distance": "l2"},
    "attack": {"eps": "4/255", "step": None, "iters": 2, "loss": "ce", "kappa": 0.0, "random_init": False},
    "eval": {"eps": ["4/255"], "step": "1/255", "iters": 100, "loss": "ce", "batch": 256},
    "data": {
        "pretrain": "synthetic:shapes:n=2048:classes=square,circle,triangle,cross,ring,diamond,hbar,vbar",
        "train": "synthetic:shapes:n=1024:classes=square,circle,triangle,cross",
        "eval": [
            "synthetic:shapes:n=256:classes=square,circle,triangle,cross",
            "synthetic:shapes:n=256:classes=ring,diamond,hbar,vbar",
        ],
    },
    "text": {"source": 0, "template": "a photo of a {}"},
    "run": {
        "init": "", "ckpt": "", "source_ckpt": "", "out": "runs", "archive": "",
        "n": 100, "panel": True, "save_images": 8,
    },
    "sweep": {"alpha": [], "beta": [], "lr": [], "distance": []},
}

# seed offsets keep pretraining, fine-tuning and evaluation images disjoint
DATA_SEED_OFFSET = {"pretrain": 0, "train": 500, "eval": 1000}


def parse_number(value) -> float:
    """Accept floats, ints, or strings such as ``"4/255"``."""
    if isinstance(value, bool):
        raise ConfigError(f"expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(Fraction(value.strip()))
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"cannot parse number {value!r}") from exc
    raise ConfigError(f"expected a number, got {value!r}")


def deep_merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a table")
            out[key] = deep_merge(out[key], value, where + ".")
        else:
            out[key] = value
    return out


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix == ".json":
            doc = json.loads(text)
        else:
            doc = tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a table")
    return doc


def _coerce(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values are JSON when they parse."""
    out = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {dotted!r} must be section.key")
        out = deep_merge(out, {parts[0]: {parts[1]: _coerce(raw)}})
    return out


def resolve(path: str | Path | None = None, overrides: list[str] | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        cfg = deep_merge(cfg, load_config_file(path))
    cfg = apply_overrides(cfg, overrides or [])
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    try:
        vit_config(cfg)
        train_config(cfg)
        loss_weights(cfg)
        eval_attacks(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if not isinstance(cfg["data"]["eval"], list):
        raise ConfigError("data.eval must be a list of dataset specs")


def vit_config(cfg: dict) -> ViTConfig:
    m = cfg["model"]
    return ViTConfig(image_size=int(m["image_size"]), patch_size=int(m["patch"]), width=int(m["dim"]),
                     depth=int(m["depth"]), heads=int(m["heads"]), embed_dim=int(m["dim"]),
                     mlp_ratio=int(m["mlp_ratio"]))


def _loss_kind(name: str) -> LossKind:
    aliases = {"ce": LossKind.CROSS_ENTROPY, "cw": LossKind.CW_MARGIN}
    if name in aliases:
        return aliases[name]
    try:
        return LossKind(name)
    except ValueError as exc:
        raise ConfigError(f"unknown attack loss {name!r}") from exc


def train_attack(cfg: dict) -> AttackConfig:
    a = cfg["attack"]
    eps = parse_number(a["eps"])
    step = eps if a["step"] is None else parse_number(a["step"])
    return AttackConfig(epsilon=eps, step_size=step, iterations=int(a["iters"]), loss_kind=_loss_kind(a["loss"]),
                        kappa=parse_number(a["kappa"]), random_init=bool(a["random_init"]), seed=int(cfg["train"]["seed"]))


def eval_attacks(cfg: dict) -> list[AttackConfig]:
    e = cfg["eval"]
    eps_list = e["eps"] if isinstance(e["eps"], list) else [e["eps"]]
    step = e["step"]
    return [
        AttackConfig(epsilon=parse_number(eps), step_size=parse_number(eps) if step is None else parse_number(step),
                     iterations=int(e["iters"]), loss_kind=_loss_kind(e["loss"]), kappa=parse_number(cfg["attack"]["kappa"]))
        for eps in eps_list
    ]


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(learning_rate=parse_number(t["lr"]), momentum=parse_number(t["momentum"]),
                       weight_decay=parse_number(t["weight_decay"]), batch_size=int(t["batch"]),
                       epochs=int(t["epochs"]), seed=int(t["seed"]), attack=train_attack(cfg),
                       clean_ce=bool(t["clean_ce"]), attention=AttentionKind(t["attention"]))


def loss_weights(cfg: dict) -> LossWeights:
    w = cfg["loss"]
    return LossWeights(alpha=parse_number(w["alpha"]), beta=parse_number(w["beta"]), distance=Distance(w["distance"]))


def text_source(cfg: dict) -> int | str:
    src = cfg["text"]["source"]
    if isinstance(src, int) and not isinstance(src, bool):
        return src
    if isinstance(src, str) and src.lstrip("-").isdigit():
        return int(src)
    if isinstance(src, str) and src:
        return src
    raise ConfigError(f"text.source must be an integer seed or an archive path, got {src!r}")
