import json

import numpy as np
import pytest
import torch
from PIL import Image

from tgazsr.data import (
    EmptyDatasetError,
    LabelRangeError,
    MalformedManifestError,
    MissingFileError,
    batches,
    export_image_folder,
    load_image_dataset,
    load_manifest,
    manifest_text,
    parse_dataset_spec,
    synthetic_dataset,
)


def _write_folder(root, labels=(0, 1, 1), classes=("cat", "dog"), size=4):
    entries = []
    for i, label in enumerate(labels):
        rel = f"img{i}.png"
        arr = np.full((size, size, 3), 10 * i, dtype=np.uint8)
        Image.fromarray(arr, mode="RGB").save(root / rel)
        entries.append([rel, label])
    doc = {"classes": list(classes), "image_size": [size, size], "entries": entries}
    path = root / "manifest.json"
    path.write_text(json.dumps(doc))
    return path


def test_valid_manifest_loads(tmp_path):
    ds = load_image_dataset(_write_folder(tmp_path))
    assert ds.images.shape == (3, 3, 4, 4)
    assert ds.labels.tolist() == [0, 1, 1]
    assert ds.class_names == ["cat", "dog"]
    assert ds.images[2].max().item() == pytest.approx(20 / 255)


def test_label_out_of_range(tmp_path):
    with pytest.raises(LabelRangeError):
        load_manifest(_write_folder(tmp_path, labels=(0, 2)))


def test_empty_manifest(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"classes": ["a", "b"], "image_size": [4, 4], "entries": []}))
    with pytest.raises(EmptyDatasetError):
        load_manifest(path)


def test_missing_manifest_and_missing_image(tmp_path):
    with pytest.raises(MissingFileError):
        load_manifest(tmp_path / "nope.json")
    path = _write_folder(tmp_path)
    (tmp_path / "img1.png").unlink()
    with pytest.raises(MissingFileError):
        load_manifest(path)


@pytest.mark.parametrize("doc", [
    "not json",
    "[]",
    json.dumps({"classes": ["a"], "entries": []}),
    json.dumps({"classes": "a", "image_size": [4, 4], "entries": [["x.png", 0]]}),
    json.dumps({"classes": ["a"], "image_size": [4], "entries": [["x.png", 0]]}),
    json.dumps({"classes": ["a"], "image_size": [4, 4], "entries": [["x.png", "0"]]}),
    json.dumps({"classes": ["a"], "image_size": [4, 4], "entries": [["x.png", True]]}),
])
def test_malformed_manifest(tmp_path, doc):
    path = tmp_path / "m.json"
    path.write_text(doc)
    with pytest.raises(MalformedManifestError):
        load_manifest(path, check_files=False)


def test_image_size_mismatch(tmp_path):
    path = _write_folder(tmp_path)
    doc = json.loads(path.read_text())
    doc["image_size"] = [5, 5]
    path.write_text(json.dumps(doc))
    with pytest.raises(MalformedManifestError):
        load_image_dataset(path)


def test_manifest_round_trip_is_byte_identical(tmp_path):
    path = _write_folder(tmp_path)
    first = manifest_text(load_manifest(path))
    path.write_text(first)
    assert manifest_text(load_manifest(path)) == first


def test_export_then_load_round_trip(tmp_path):
    ds = synthetic_dataset(n=6, seed=0, num_classes=3, image_size=8)
    path = export_image_folder(ds, tmp_path / "out")
    back = load_image_dataset(path)
    assert torch.equal(back.labels, ds.labels)
    # 8-bit quantization error is at most half a level
    assert (back.images - ds.images).abs().max().item() <= 0.5 / 255 + 1e-6
    assert manifest_text(load_manifest(path)) == path.read_text()


def test_synthetic_is_deterministic_and_balanced():
    a = synthetic_dataset(n=40, seed=3, num_classes=4, image_size=16)
    b = synthetic_dataset(n=40, seed=3, num_classes=4, image_size=16)
    assert torch.equal(a.images, b.images) and torch.equal(a.labels, b.labels)
    assert torch.bincount(a.labels).tolist() == [10, 10, 10, 10]
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert not torch.equal(a.images, synthetic_dataset(n=40, seed=4, num_classes=4, image_size=16).images)


def test_synthetic_rejects_bad_options():
    with pytest.raises(ValueError):
        synthetic_dataset(kind="digits")
    with pytest.raises(ValueError):
        synthetic_dataset(classes=["square", "blob"])
    with pytest.raises(ValueError):
        synthetic_dataset(num_classes=1)


def test_batches_seeded_and_partial():
    ds = synthetic_dataset(n=10, seed=0, num_classes=2, image_size=8)
    first = [b.labels.tolist() for b in batches(ds, 4, seed=1)]
    again = [b.labels.tolist() for b in batches(ds, 4, seed=1)]
    assert first == again
    assert [len(b) for b in first] == [4, 4, 2]
    ordered = list(batches(ds, 4, shuffle=False))
    assert torch.equal(ordered[0].pixels, ds.images[:4])
    with pytest.raises(ValueError):
        next(batches(ds, 0))


def test_parse_dataset_spec():
    ds = parse_dataset_spec("synthetic:shapes:n=8:seed=2:classes=ring,cross:image_size=8")
    assert ds.class_names == ["ring", "cross"] and len(ds) == 8
    assert ds.name == "synthetic:shapes:n=8:seed=2:classes=ring,cross:image_size=8"
    ref = synthetic_dataset(n=8, seed=2, classes=["ring", "cross"], image_size=8)
    assert torch.equal(ds.images, ref.images)
    with pytest.raises(ValueError):
        parse_dataset_spec("synthetic:shapes:bogus=1")


def test_parse_dataset_spec_manifest(tmp_path):
    path = _write_folder(tmp_path)
    assert len(parse_dataset_spec(str(path))) == 3
