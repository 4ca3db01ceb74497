"""PNG output for attention heatmaps and the robustness/accuracy scatter."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image


def _to_uint8(arr) -> np.ndarray:
    if isinstance(arr, torch.Tensor):
        arr = arr.detach().cpu().numpy()
    return (np.clip(arr, 0.0, 1.0) * 255).round().astype(np.uint8)


def save_heatmap(values, path: str | Path, scale: int = 1) -> Path:
    """Write one H x W map in [0, 1] as an 8-bit grayscale PNG."""
    img = Image.fromarray(_to_uint8(values), mode="L")
    if scale > 1:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    path = Path(path)
    img.save(path)
    return path


def panel(images: list, maps: list, scale: int = 4) -> Image.Image:
    """Images on the top row, their heatmaps (grayscale) underneath."""
    tiles_top = [_to_uint8(im).transpose(1, 2, 0) for im in images]
    tiles_bot = [np.repeat(_to_uint8(m)[:, :, None], 3, axis=2) for m in maps]
    grid = np.concatenate([np.concatenate(tiles_top, axis=1), np.concatenate(tiles_bot, axis=1)], axis=0)
    img = Image.fromarray(grid, mode="RGB")
    return img.resize((img.width * scale, img.height * scale), Image.NEAREST)


def save_attention_pairs(out_dir: str | Path, items, with_panel: bool = True) -> list[str]:
    """``items`` are (index, clean_img, adv_img, clean_map, adv_map) tuples.

    Writes ``{index}_clean.png`` and ``{index}_adv.png`` heatmaps and, when
    ``with_panel``, a side-by-side ``{index}_panel.png``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for index, clean_img, adv_img, clean_map, adv_map in items:
        for tag, m in (("clean", clean_map), ("adv", adv_map)):
            written.append(save_heatmap(m, out_dir / f"{index}_{tag}.png").name)
        if with_panel:
            p = out_dir / f"{index}_panel.png"
            panel([clean_img, adv_img], [clean_map, adv_map]).save(p)
            written.append(p.name)
    return written


def tradeoff_scatter(rows: list[dict], path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 4))
    for row in rows:
        ax.scatter(row["clean"], row["robust"], s=40)
        ax.annotate(row["method"], (row["clean"], row["robust"]), textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax.set_xlabel("clean accuracy")
    ax.set_ylabel("robust accuracy")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
