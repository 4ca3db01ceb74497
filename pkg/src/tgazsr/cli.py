"""Command line entry point: ``tgazsr {finetune,evaluate,attack,attn-viz,sweep}``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import itertools
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import torch

from . import config as C
from .archive import save_archive
from .attacks import run_attack
from .data import ImageDataset, ManifestError, batches, parse_dataset_spec
from .evaluation import (
    EvalReport,
    attention_shift_report,
    config_hash,
    evaluate_datasets,
    predict,
    tradeoff_table,
)
from .model import DualModelState, MiniViT, TextEmbeddings, encode_text, load_checkpoint, save_checkpoint
from .training import finetune, train_clean

log = logging.getLogger("tgazsr")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML or JSON config file (resolved_config.json works too)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable")
    p.add_argument("--out-dir", help="root directory for run outputs (run.out)")
    p.add_argument("--seed", type=int, help="train.seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tgazsr", description="Text-guided attention adversarial fine-tuning toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("finetune", help="adversarially fine-tune a target image encoder")
    _common(p)
    p.add_argument("--init", help="checkpoint of the original encoder (default: pretrain on data.pretrain)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--distance", choices=["l2", "l1", "cosine"])
    p.add_argument("--attention", choices=["text_guided", "gradient"])
    p.add_argument("--eps", help="training attack radius, e.g. 1/255")
    p.add_argument("--step", help="training attack step size")
    p.add_argument("--iters", type=int, help="training attack iterations")

    p = sub.add_parser("evaluate", help="clean and robust zero-shot accuracy")
    _common(p)
    p.add_argument("--ckpt", help="checkpoint archive to evaluate")
    p.add_argument("--datasets", nargs="+", help="dataset specs or manifest paths")
    p.add_argument("--eps", nargs="+", help="one or more attack radii")
    p.add_argument("--step")
    p.add_argument("--iters", type=int)
    p.add_argument("--loss", choices=["ce", "cw"])
    p.add_argument("--source-ckpt", help="craft adversaries on this checkpoint instead (transfer attack)")
    p.add_argument("--out", help="also copy report.json to this path")

    p = sub.add_parser("attack", help="attack a dataset and save the adversarial images")
    _common(p)
    p.add_argument("--ckpt")
    p.add_argument("--dataset")
    p.add_argument("--eps")
    p.add_argument("--step")
    p.add_argument("--iters", type=int)
    p.add_argument("--loss", choices=["ce", "cw"])
    p.add_argument("--kappa", type=float)
    p.add_argument("--out", help="tensor archive for the attacked images")

    p = sub.add_parser("attn-viz", help="clean vs adversarial attention heatmaps")
    _common(p)
    p.add_argument("--ckpt")
    p.add_argument("--dataset")
    p.add_argument("--n", type=int, help="number of samples in the shift report")
    p.add_argument("--eps")
    p.add_argument("--iters", type=int)
    p.add_argument("--images", type=int, help="how many samples get PNGs")
    p.add_argument("--no-panel", action="store_true", help="skip side-by-side panels")

    p = sub.add_parser("sweep", help="grid over alpha/beta/lr/distance; one report per cell")
    _common(p)
    p.add_argument("--init")
    p.add_argument("--alpha", nargs="+", type=float)
    p.add_argument("--beta", nargs="+", type=float)
    p.add_argument("--lr", nargs="+", type=float)
    p.add_argument("--distance", nargs="+", choices=["l2", "l1", "cosine"])
    return parser


def _flag_overrides(args) -> list[str]:
    """Translate explicit flags into config overrides (flags beat the file)."""
    mapping = {
        "finetune": {"init": "run.init", "epochs": "train.epochs", "lr": "train.lr", "alpha": "loss.alpha",
                     "beta": "loss.beta", "distance": "loss.distance", "attention": "train.attention",
                     "eps": "attack.eps", "step": "attack.step", "iters": "attack.iters"},
        "evaluate": {"ckpt": "run.ckpt", "datasets": "data.eval", "eps": "eval.eps", "step": "eval.step",
                     "iters": "eval.iters", "loss": "eval.loss", "source_ckpt": "run.source_ckpt"},
        "attack": {"ckpt": "run.ckpt", "eps": "eval.eps", "step": "eval.step", "iters": "eval.iters",
                   "loss": "eval.loss", "kappa": "attack.kappa", "out": "run.archive"},
        "attn-viz": {"ckpt": "run.ckpt", "eps": "eval.eps", "iters": "eval.iters", "n": "run.n",
                     "images": "run.save_images"},
        "sweep": {"init": "run.init", "alpha": "sweep.alpha", "beta": "sweep.beta", "lr": "sweep.lr",
                  "distance": "sweep.distance"},
    }[args.command]
    out = []
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        if key == "eval.eps" and not isinstance(value, list):
            value = [value]
        out.append(f"{key}={json.dumps(value)}")
    if getattr(args, "dataset", None):
        out.append(f"data.eval={json.dumps([args.dataset])}")
    if getattr(args, "no_panel", False):
        out.append("run.panel=false")
    if args.out_dir:
        out.append(f"run.out={json.dumps(args.out_dir)}")
    if args.seed is not None:
        out.append(f"train.seed={args.seed}")
    return out


def run_hash(cfg: dict, command: str) -> str:
    hashed = json.loads(json.dumps(cfg))
    hashed["run"].pop("out", None)
    return config_hash({"command": command, "config": hashed})


def make_run_dir(cfg: dict, command: str) -> Path:
    root = Path(cfg["run"]["out"])
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = root / f"{stamp}-{run_hash(cfg, command)}"
    path, i = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{i}")
        i += 1
    path.mkdir(parents=True)
    return path


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _dataset(cfg: dict, spec: str, role: str) -> ImageDataset:
    seed = int(cfg["train"]["seed"]) + C.DATA_SEED_OFFSET[role]
    try:
        return parse_dataset_spec(spec, default_seed=seed)
    except ValueError as exc:
        raise C.ConfigError(f"bad dataset spec {spec!r}: {exc}") from exc


def text_for(ds: ImageDataset, cfg: dict, dim: int, known: TextEmbeddings | None = None) -> TextEmbeddings:
    """Class embeddings for ``ds``: reuse rows stored with a checkpoint when
    they cover every class, otherwise encode from the configured source."""
    template = cfg["text"]["template"]
    if known is not None and all(name in known.class_names for name in ds.class_names):
        rows = [known.vectors[known.class_names.index(name)] for name in ds.class_names]
        return TextEmbeddings(torch.stack(rows), list(ds.class_names), known.template)
    return encode_text(ds.class_names, template, C.text_source(cfg), dim=dim)


def _original_encoder(cfg: dict) -> MiniViT:
    init = cfg["run"]["init"]
    if init:
        encoder, _, _ = load_checkpoint(init)
        return encoder
    vit = C.vit_config(cfg)
    seed = int(cfg["train"]["seed"])
    pre = _dataset(cfg, cfg["data"]["pretrain"], "pretrain")
    text = text_for(pre, cfg, vit.embed_dim)
    torch.manual_seed(seed)
    encoder = MiniViT(vit)
    log.info("pretraining original encoder on %s (%d images)", pre.name, len(pre))
    train_clean(encoder, pre, text, float(cfg["model"]["temperature"]), epochs=int(cfg["train"]["pretrain_epochs"]),
                lr=C.parse_number(cfg["train"]["pretrain_lr"]), batch_size=int(cfg["train"]["batch"]), seed=seed)
    return encoder


def _load_ckpt(cfg: dict):
    path = cfg["run"]["ckpt"]
    if not path:
        raise C.ConfigError("a checkpoint is required (--ckpt or run.ckpt)")
    if not Path(path).is_dir():
        raise C.ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _evaluate(encoder, cfg: dict, known_text: TextEmbeddings | None, source_encoder=None) -> EvalReport:
    temperature = float(cfg["model"]["temperature"])
    datasets = [_dataset(cfg, spec, "eval") for spec in cfg["data"]["eval"]]
    dim = encoder.config.embed_dim
    texts = {ds.name: text_for(ds, cfg, dim, known_text) for ds in datasets}
    entries = []
    for attack in C.eval_attacks(cfg):
        rep = evaluate_datasets(encoder, datasets, texts, attack, temperature, int(cfg["eval"]["batch"]),
                                source_encoder=source_encoder)
        for entry in rep.entries:
            entry["epsilon"] = attack.epsilon
        entries.extend(rep.entries)
    return EvalReport(entries, config_hash(cfg_without_out(cfg)), int(cfg["train"]["seed"]),
                      {"attack_label": "cw-margin l-inf PGD" if cfg["eval"]["loss"] == "cw" else "l-inf PGD"})


def archive_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    for name in ("index.json", "data.bin"):
        h.update((Path(path) / name).read_bytes())
    return h.hexdigest()[:16]


def cfg_without_out(cfg: dict) -> dict:
    """Config as it bears on results: no output root, checkpoints by content."""
    d = json.loads(json.dumps(cfg))
    d["run"].pop("out", None)
    for key in ("init", "ckpt", "source_ckpt"):
        if d["run"][key] and Path(d["run"][key]).is_dir():
            d["run"][key] = "sha256:" + archive_digest(d["run"][key])
    return d


def cmd_finetune(cfg: dict, run_dir: Path) -> None:
    train_cfg, weights = C.train_config(cfg), C.loss_weights(cfg)
    temperature = float(cfg["model"]["temperature"])
    original = _original_encoder(cfg)
    train = _dataset(cfg, cfg["data"]["train"], "train")
    text = text_for(train, cfg, original.config.embed_dim)
    state = DualModelState.from_encoder(original, text, temperature)
    save_checkpoint(run_dir / "original", state.original, text, temperature)
    probe = train.subset(range(min(64, len(train))))
    finetune(state, train, train_cfg, weights, eval_data=probe, out_dir=run_dir)
    save_checkpoint(run_dir / "final", state.target, text, temperature)
    report = _evaluate(state.target, cfg, text)
    report.write(run_dir / "report.json")


def cmd_evaluate(cfg: dict, run_dir: Path, args) -> None:
    encoder, text, _ = _load_ckpt(cfg)
    source = None
    if cfg["run"]["source_ckpt"]:
        source, _, _ = load_checkpoint(cfg["run"]["source_ckpt"])
    report = _evaluate(encoder, cfg, text, source)
    path = report.write(run_dir / "report.json")
    if getattr(args, "out", None):
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(path, args.out)
    print(json.dumps(report.averages, sort_keys=True))


def cmd_attack(cfg: dict, run_dir: Path) -> None:
    encoder, text, _ = _load_ckpt(cfg)
    temperature = float(cfg["model"]["temperature"])
    ds = _dataset(cfg, cfg["data"]["eval"][0], "eval")
    text = text_for(ds, cfg, encoder.config.embed_dim, text)
    attack = C.eval_attacks(cfg)[0]
    advs, linf, clean_ok, adv_ok = [], [], 0, 0
    for batch in batches(ds, int(cfg["eval"]["batch"]), shuffle=False):
        adv = run_attack(encoder, batch, text, attack, temperature)
        advs.append(adv.pixels)
        linf += (adv.pixels - batch.pixels).abs().flatten(1).amax(dim=1).tolist()
        clean_ok += int((predict(encoder, batch.pixels, text, temperature) == batch.labels.numpy()).sum())
        adv_ok += int((predict(encoder, adv.pixels, text, temperature) == batch.labels.numpy()).sum())
    archive = Path(cfg["run"]["archive"]) if cfg["run"]["archive"] else run_dir / "attacked"
    save_archive(archive, {"pixels": torch.cat(advs), "labels": ds.labels.float()},
                 {"dataset": ds.name, "class_names": ds.class_names, "attack": attack.summary()})
    stats = {
        "dataset": ds.name,
        "n": len(ds),
        "attack": attack.summary(),
        "linf_max": max(linf),
        "linf_mean": sum(linf) / len(linf),
        "linf_min": min(linf),
        "clean_acc": clean_ok / len(ds),
        "robust_acc": adv_ok / len(ds),
        "archive": str(archive),
    }
    write_json(run_dir / "attack_stats.json", stats)
    print(json.dumps(stats, sort_keys=True))


def cmd_attn_viz(cfg: dict, run_dir: Path) -> None:
    encoder, text, _ = _load_ckpt(cfg)
    temperature = float(cfg["model"]["temperature"])
    ds = _dataset(cfg, cfg["data"]["eval"][0], "eval")
    text = text_for(ds, cfg, encoder.config.embed_dim, text)
    state = DualModelState.from_encoder(encoder, text, temperature)
    report = attention_shift_report(state, ds, C.eval_attacks(cfg)[0], n=int(cfg["run"]["n"]),
                                    seed=int(cfg["train"]["seed"]), out_dir=None)
    n_img = int(cfg["run"]["save_images"])
    if n_img > 0:
        from .attention import text_guided_attention
        from .viz import save_attention_pairs

        sub = ds.subset(range(min(n_img, len(ds))))
        batch = next(batches(sub, len(sub), shuffle=False))
        adv = run_attack(encoder, batch, text, C.eval_attacks(cfg)[0], temperature)
        vecs = text.for_labels(batch.labels)
        with torch.no_grad():
            clean_map = text_guided_attention(encoder(batch.pixels).patches, vecs, batch.pixels.shape[-2:])
            adv_map = text_guided_attention(encoder(adv.pixels).patches, vecs, batch.pixels.shape[-2:])
        items = [(i, batch.pixels[i], adv.pixels[i], clean_map.values[i], adv_map.values[i]) for i in range(len(sub))]
        report["images"] = save_attention_pairs(run_dir / "attention", items, with_panel=bool(cfg["run"]["panel"]))
    write_json(run_dir / "attention_shift.json", report)
    print(json.dumps({"mean_d_adv": report["mean_d_adv"], "mean_d_noise": report["mean_d_noise"]}))


def cmd_sweep(cfg: dict, run_dir: Path) -> None:
    grid = {
        "alpha": cfg["sweep"]["alpha"] or [cfg["loss"]["alpha"]],
        "beta": cfg["sweep"]["beta"] or [cfg["loss"]["beta"]],
        "lr": cfg["sweep"]["lr"] or [cfg["train"]["lr"]],
        "distance": cfg["sweep"]["distance"] or [cfg["loss"]["distance"]],
    }
    original = _original_encoder(cfg)
    save_checkpoint(run_dir / "original", original)
    reports = {}
    for alpha, beta, lr, distance in itertools.product(*grid.values()):
        cell = json.loads(json.dumps(cfg))
        cell["loss"].update(alpha=alpha, beta=beta, distance=distance)
        cell["train"]["lr"] = lr
        C.validate(cell)
        name = f"alpha={alpha}_beta={beta}_lr={lr}_dist={distance}"
        log.info("sweep cell %s", name)
        train = _dataset(cell, cell["data"]["train"], "train")
        text = text_for(train, cell, original.config.embed_dim)
        state = DualModelState.from_encoder(copy.deepcopy(original), text, float(cell["model"]["temperature"]))
        cell_dir = run_dir / "cells" / name
        probe = train.subset(range(min(64, len(train))))
        finetune(state, train, C.train_config(cell), C.loss_weights(cell), eval_data=probe, out_dir=cell_dir)
        report = _evaluate(state.target, cell, text)
        report.meta["cell"] = {"alpha": alpha, "beta": beta, "lr": lr, "distance": distance}
        report.write(cell_dir / "report.json")
        reports[name] = report
    tradeoff_table(reports, run_dir)


COMMANDS = {"finetune": cmd_finetune, "attack": cmd_attack, "attn-viz": cmd_attn_viz, "sweep": cmd_sweep}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = C.resolve(args.config, list(args.overrides) + _flag_overrides(args))
        run_dir = make_run_dir(cfg, args.command)
        write_json(run_dir / "resolved_config.json", cfg)
        if args.command == "evaluate":
            cmd_evaluate(cfg, run_dir, args)
        else:
            COMMANDS[args.command](cfg, run_dir)
        print(f"run directory: {run_dir}")
        return EXIT_OK
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ManifestError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        log.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
