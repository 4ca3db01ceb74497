"""Tensor archive: a directory holding ``index.json`` plus one ``data.bin`` blob.

The blob is a concatenation of row-major little-endian float32 arrays. The
index maps each tensor name to its shape, dtype and byte offset; an optional
``metadata`` object carries JSON-serializable extras (model config, class
names, ...).
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

INDEX_NAME = "index.json"
BLOB_NAME = "data.bin"
_DTYPE = np.dtype("<f4")


class ArchiveError(Exception):
    pass


def save_archive(
    path: str | Path,
    tensors: Mapping[str, torch.Tensor | np.ndarray],
    metadata: Mapping[str, Any] | None = None,
) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index: dict[str, Any] = {}
    offset = 0
    with open(path / BLOB_NAME, "wb") as fh:
        for name, value in tensors.items():
            if isinstance(value, torch.Tensor):
                value = value.detach().cpu().numpy()
            arr = np.array(value, dtype=_DTYPE, order="C")
            raw = arr.tobytes(order="C")
            fh.write(raw)
            index[name] = {"shape": list(arr.shape), "dtype": "float32", "offset": offset}
            offset += len(raw)
    doc = {"tensors": index, "metadata": dict(metadata or {})}
    (path / INDEX_NAME).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_index(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    index_file = path / INDEX_NAME
    if not index_file.is_file():
        raise ArchiveError(f"no tensor archive at {path} (missing {INDEX_NAME})")
    try:
        doc = json.loads(index_file.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"corrupt archive index {index_file}: {exc}") from exc
    if "tensors" not in doc:
        raise ArchiveError(f"archive index {index_file} has no 'tensors' table")
    return doc


def load_archive(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    """Return ``(tensors, metadata)``; tensors are float32 CPU tensors."""
    path = Path(path)
    doc = read_index(path)
    blob = (path / BLOB_NAME).read_bytes()
    tensors = {}
    for name, entry in doc["tensors"].items():
        if entry.get("dtype", "float32") != "float32":
            raise ArchiveError(f"unsupported dtype {entry['dtype']!r} for tensor {name!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * _DTYPE.itemsize
        if end > len(blob):
            raise ArchiveError(f"tensor {name!r} runs past end of blob")
        arr = np.frombuffer(blob, dtype=_DTYPE, count=count, offset=start).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    return tensors, doc.get("metadata", {})
