"""Datasets: procedural shapes for desk-scale runs, image-folder manifests,
and seeded batching."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

from .model import ImageBatch

SHAPE_CLASSES = ("square", "circle", "triangle", "cross", "ring", "diamond", "hbar", "vbar")


class ManifestError(Exception):
    pass


class MissingFileError(ManifestError):
    pass


class MalformedManifestError(ManifestError):
    pass


class LabelRangeError(ManifestError):
    pass


class EmptyDatasetError(ManifestError):
    pass


@dataclass
class ImageDataset:
    images: torch.Tensor  # N x 3 x H x W float32 in [0, 1]
    labels: torch.Tensor  # N int64
    class_names: list[str]
    name: str = "dataset"

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> "ImageDataset":
        idx = torch.as_tensor(indices, dtype=torch.long)
        return ImageDataset(self.images[idx], self.labels[idx], list(self.class_names), self.name)

    def split(self, n_first: int) -> tuple["ImageDataset", "ImageDataset"]:
        n = len(self)
        return self.subset(range(n_first)), self.subset(range(n_first, n))


@dataclass
class DatasetManifest:
    root: Path
    entries: list[tuple[str, int]]
    class_names: list[str]
    image_size: tuple[int, int]
    extra: dict = field(default_factory=dict)


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == "circle":
        return dy**2 + dx**2 <= r**2
    if kind == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "cross":
        w = r * 0.35
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    if kind == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "hbar":
        return (np.abs(dy) <= r * 0.3) & (np.abs(dx) <= r)
    if kind == "vbar":
        return (np.abs(dx) <= r * 0.3) & (np.abs(dy) <= r)
    raise ValueError(f"unknown shape {kind!r}")


def synthetic_dataset(
    kind: str = "shapes",
    n: int = 512,
    seed: int = 0,
    num_classes: int = 4,
    image_size: int = 32,
    noise: float = 0.05,
    classes: Sequence[str] | None = None,
) -> ImageDataset:
    """Procedurally drawn shapes, one geometry per class.

    Position, radius, foreground and background colour are randomized per
    image; labels cycle through the classes so every class is balanced.
    ``classes`` picks shapes by name (overrides ``num_classes``).
    """
    if kind != "shapes":
        raise ValueError(f"unknown synthetic dataset kind {kind!r}")
    names = list(classes) if classes is not None else list(SHAPE_CLASSES[:num_classes])
    unknown = [c for c in names if c not in SHAPE_CLASSES]
    if unknown:
        raise ValueError(f"unknown shape classes {unknown}")
    num_classes = len(names)
    if not 2 <= num_classes <= len(SHAPE_CLASSES):
        raise ValueError(f"need between 2 and {len(SHAPE_CLASSES)} classes")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    images = np.empty((n, 3, image_size, image_size), dtype=np.float32)
    for i, label in enumerate(labels):
        r = rng.uniform(0.22, 0.32) * image_size
        cy, cx = rng.uniform(r + 1, image_size - r - 1, size=2)
        fg = rng.uniform(0.55, 1.0, size=3)
        bg = rng.uniform(0.0, 0.35, size=3)
        mask = _shape_mask(names[label], image_size, cy, cx, r)
        img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
        img = img + rng.normal(0.0, noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return ImageDataset(torch.from_numpy(images), torch.from_numpy(labels.astype(np.int64)), names, f"shapes-s{seed}")


def batches(dataset: ImageDataset, batch_size: int, seed: int = 0, shuffle: bool = True) -> Iterator[ImageBatch]:
    """Yield ImageBatch objects; the trailing partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    if shuffle:
        order = torch.randperm(n, generator=torch.Generator().manual_seed(seed))
    else:
        order = torch.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield ImageBatch(dataset.images[idx], dataset.labels[idx])


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedManifestError(f"{path}: not valid UTF-8 JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise MalformedManifestError(f"{path}: top level must be an object")
    for key in ("classes", "image_size", "entries"):
        if key not in doc:
            raise MalformedManifestError(f"{path}: missing key {key!r}")
    classes = doc["classes"]
    if not isinstance(classes, list) or not all(isinstance(c, str) for c in classes):
        raise MalformedManifestError(f"{path}: 'classes' must be a list of strings")
    size = doc["image_size"]
    if not (isinstance(size, list) and len(size) == 2 and all(isinstance(s, int) and s > 0 for s in size)):
        raise MalformedManifestError(f"{path}: 'image_size' must be [H, W]")
    raw_entries = doc["entries"]
    if not isinstance(raw_entries, list):
        raise MalformedManifestError(f"{path}: 'entries' must be a list")
    if not raw_entries:
        raise EmptyDatasetError(f"{path}: manifest has no entries")
    root = path.parent
    entries = []
    for i, item in enumerate(raw_entries):
        if not (isinstance(item, list) and len(item) == 2 and isinstance(item[0], str)
                and isinstance(item[1], int) and not isinstance(item[1], bool)):
            raise MalformedManifestError(f"{path}: entry {i} must be [\"path\", label]")
        rel, label = item
        if not 0 <= label < len(classes):
            raise LabelRangeError(f"{path}: entry {i} label {label} outside [0, {len(classes)})")
        if check_files and not (root / rel).is_file():
            raise MissingFileError(f"{path}: entry {i} refers to missing file {rel}")
        entries.append((rel, label))
    extra = {k: v for k, v in doc.items() if k not in ("classes", "image_size", "entries")}
    return DatasetManifest(root, entries, list(classes), (size[0], size[1]), extra)


def manifest_text(manifest: DatasetManifest) -> str:
    doc = {
        "classes": manifest.class_names,
        "image_size": list(manifest.image_size),
        "entries": [[rel, label] for rel, label in manifest.entries],
        **manifest.extra,
    }
    lines = [
        "{",
        f'  "classes": {json.dumps(doc["classes"], ensure_ascii=False)},',
        f'  "image_size": {json.dumps(doc["image_size"])},',
    ]
    for key in sorted(manifest.extra):
        lines.append(f"  {json.dumps(key)}: {json.dumps(manifest.extra[key], ensure_ascii=False, sort_keys=True)},")
    lines.append('  "entries": [')
    body = [f"    {json.dumps(e, ensure_ascii=False)}" for e in doc["entries"]]
    lines.append(",\n".join(body))
    lines.append("  ]")
    lines.append("}")
    return "\n".join(lines) + "\n"


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(manifest_text(manifest), encoding="utf-8")
    return path


def load_image_dataset(manifest: DatasetManifest | str | Path, name: str | None = None) -> ImageDataset:
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    h, w = manifest.image_size
    images = np.empty((len(manifest.entries), 3, h, w), dtype=np.float32)
    for i, (rel, _) in enumerate(manifest.entries):
        with Image.open(manifest.root / rel) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        if arr.shape[:2] != (h, w):
            raise MalformedManifestError(f"{rel}: image is {arr.shape[1]}x{arr.shape[0]}, manifest says {w}x{h}")
        images[i] = arr.transpose(2, 0, 1) / 255.0
    labels = torch.tensor([label for _, label in manifest.entries], dtype=torch.long)
    return ImageDataset(torch.from_numpy(images), labels, list(manifest.class_names), name or manifest.root.name)


def export_image_folder(dataset: ImageDataset, root: str | Path, manifest_name: str = "manifest.json") -> Path:
    """Write a dataset as 8-bit RGB PNGs plus a manifest; returns the manifest path."""
    root = Path(root)
    entries = []
    for i in range(len(dataset)):
        label = int(dataset.labels[i])
        rel = f"{dataset.class_names[label]}/{i:05d}.png"
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
        arr = (dataset.images[i].clamp(0, 1).numpy().transpose(1, 2, 0) * 255).round().astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(root / rel)
        entries.append((rel, label))
    h, w = dataset.images.shape[-2:]
    manifest = DatasetManifest(root, entries, list(dataset.class_names), (int(h), int(w)))
    return write_manifest(manifest, root / manifest_name)


def parse_dataset_spec(spec: str, default_seed: int = 0) -> ImageDataset:
    """``synthetic:shapes[:key=value...]`` or a manifest path.

    Synthetic options: n, seed, num_classes, image_size, noise, and
    ``classes=a,b,c`` to pick shapes by name.
    """
    if spec.startswith("synthetic:"):
        parts = spec.split(":")
        kind = parts[1] if len(parts) > 1 else "shapes"
        kwargs: dict = {"seed": default_seed}
        for part in parts[2:]:
            if "=" not in part:
                raise ValueError(f"bad synthetic dataset option {part!r} in {spec!r}")
            key, value = part.split("=", 1)
            if key == "classes":
                kwargs[key] = [c for c in value.split(",") if c]
            elif key == "noise":
                kwargs[key] = float(value)
            elif key in ("n", "seed", "num_classes", "image_size"):
                kwargs[key] = int(value)
            else:
                raise ValueError(f"unknown synthetic dataset option {key!r}")
        ds = synthetic_dataset(kind, **kwargs)
        ds.name = spec
        return ds
    return load_image_dataset(spec, name=spec)
