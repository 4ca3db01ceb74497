import math

import pytest
import torch

from tgazsr.archive import save_archive
from tgazsr.model import (
    DualModelState,
    ImageBatch,
    MiniViT,
    MissingClassError,
    ShapeMismatchError,
    TextEmbeddings,
    ViTConfig,
    classification_logits,
    encode_image,
    encode_text,
    load_checkpoint,
    save_checkpoint,
)


def test_bias_only_network_emits_bias():
    enc = MiniViT(ViTConfig())
    b = torch.linspace(-1, 2, enc.config.embed_dim)
    with torch.no_grad():
        for p in enc.parameters():
            p.zero_()
        enc.proj.bias.copy_(b)
    out = encode_image(enc, ImageBatch(torch.zeros(1, 3, 32, 32), torch.zeros(1, dtype=torch.long)))
    assert torch.allclose(out.patches, b.expand_as(out.patches))
    assert torch.allclose(out.pooled[0], b / b.norm(), atol=1e-7)


def test_default_shapes():
    torch.manual_seed(0)
    enc = MiniViT(ViTConfig(image_size=32, patch_size=4, width=64, depth=2, heads=4, embed_dim=64))
    out = encode_image(enc, torch.rand(2, 3, 32, 32))
    assert out.patches.shape == (2, 64, 64)
    assert math.isqrt(out.patches.shape[1]) == 8
    assert out.pooled.shape == (2, 64)


def test_pooled_unit_norm_and_self_dot(tiny_encoder):
    out = tiny_encoder(torch.rand(5, 3, 8, 8))
    assert torch.allclose(out.pooled.norm(dim=1), torch.ones(5), atol=1e-6)
    assert abs((out.pooled[0] @ out.pooled[0]).item() - 1.0) < 1e-6


def test_deterministic_forward(tiny_encoder):
    x = torch.rand(3, 3, 8, 8)
    a, b = tiny_encoder(x), tiny_encoder(x)
    assert torch.equal(a.pooled, b.pooled) and torch.equal(a.patches, b.patches)


def test_shape_errors(tiny_encoder):
    with pytest.raises(ShapeMismatchError):
        tiny_encoder(torch.rand(1, 3, 10, 10))
    with pytest.raises(ShapeMismatchError):
        MiniViT(ViTConfig(image_size=30, patch_size=4))
    with pytest.raises(ShapeMismatchError):
        ImageBatch(torch.rand(2, 3, 8, 8), torch.zeros(3, dtype=torch.long))


def test_pixel_gradient_matches_finite_differences(tiny_config):
    torch.manual_seed(3)
    enc = MiniViT(tiny_config).double()
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64, requires_grad=True)
    (grad,) = torch.autograd.grad(enc(x).pooled.sum(), x)
    h = 1e-5
    gen = torch.Generator().manual_seed(0)
    idx = torch.randperm(x.numel(), generator=gen)[:25]
    with torch.no_grad():
        for i in idx.tolist():
            xp, xm = x.detach().clone().view(-1), x.detach().clone().view(-1)
            xp[i] += h
            xm[i] -= h
            fd = (enc(xp.view_as(x)).pooled.sum() - enc(xm.view_as(x)).pooled.sum()) / (2 * h)
            g = grad.view(-1)[i]
            assert abs(fd - g) / max(abs(fd), abs(g), 1e-8) < 1e-4


def test_encode_text_synthetic_is_deterministic():
    a = encode_text(["a", "b"], source=0)
    b = encode_text(["a", "b"], source=0)
    assert torch.equal(a.vectors, b.vectors)
    assert torch.allclose(a.vectors.norm(dim=1), torch.ones(2), atol=1e-6)
    assert not torch.equal(a.vectors, encode_text(["a", "b"], source=1).vectors)


def test_encode_text_from_archive(tmp_path):
    save_archive(tmp_path / "t", {"a": torch.tensor([3.0, 4.0]), "b": torch.tensor([0.0, 2.0])})
    text = encode_text(["a", "b"], source=tmp_path / "t")
    assert torch.allclose(text.vectors[0], torch.tensor([0.6, 0.8]))
    assert text.class_names == ["a", "b"]
    with pytest.raises(MissingClassError):
        encode_text(["a", "c"], source=tmp_path / "t")


def test_encode_text_needs_two_classes():
    with pytest.raises(ValueError):
        encode_text(["only"], source=0)


def test_logits_identity_orthogonal_arithmetic():
    text = TextEmbeddings(torch.eye(2), ["x", "y"])
    logits = classification_logits(torch.tensor([[1.0, 0.0]]), text, 0.07)
    assert logits[0, 0].item() == pytest.approx(1 / 0.07)
    assert logits[0, 1].item() == 0.0
    c = torch.tensor([[0.35, math.sqrt(1 - 0.35**2)]])
    assert classification_logits(c, text, 0.07)[0, 0].item() == pytest.approx(5.0, abs=1e-6)


def test_logits_dimension_mismatch():
    with pytest.raises(ShapeMismatchError):
        classification_logits(torch.rand(2, 3), TextEmbeddings(torch.eye(2), ["x", "y"]), 1.0)


def test_logits_scale_covariance_and_softmax(tiny_encoder, tiny_text):
    pooled = tiny_encoder(torch.rand(6, 3, 8, 8)).pooled.double()
    base = classification_logits(pooled, tiny_text, 1.0)
    for c in (0.5, 2.0, 8.0):
        scaled = classification_logits(pooled, tiny_text, 1.0 / c)
        assert torch.allclose(scaled, base * c, rtol=1e-12, atol=0)
        assert torch.equal(scaled.argmax(1), base.argmax(1))
    sums = torch.softmax(classification_logits(pooled, tiny_text, 0.07), dim=1).sum(1)
    assert torch.allclose(sums, torch.ones(6, dtype=torch.float64), atol=1e-6)
    assert base.abs().max() <= 1.0 + 1e-12


def test_dual_state_freezes_original(tiny_encoder, tiny_text):
    state = DualModelState.from_encoder(tiny_encoder, tiny_text)
    assert state.target is tiny_encoder
    assert all(not p.requires_grad for p in state.original.parameters())
    assert state.original.config == state.target.config
    with pytest.raises(ValueError):
        DualModelState.from_encoder(tiny_encoder, tiny_text, temperature=0.0)


def test_checkpoint_round_trip(tmp_path, tiny_encoder, tiny_text):
    save_checkpoint(tmp_path / "ck", tiny_encoder, tiny_text, 0.07)
    enc, text, meta = load_checkpoint(tmp_path / "ck")
    for (k, a), (_, b) in zip(tiny_encoder.state_dict().items(), enc.state_dict().items()):
        assert torch.equal(a, b), k
    assert torch.equal(text.vectors, tiny_text.vectors)
    assert meta["temperature"] == 0.07
