import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import attention_map, bilinear_resize
from tgazsr.attention import (
    AttentionSource,
    gradient_attention,
    minmax_normalize,
    resize_bilinear,
    text_guided_attention,
)
from tgazsr.model import ImageBatch, ImageEncoding, ShapeMismatchError, TextEmbeddings


def test_hand_computed_map():
    patches = torch.tensor([[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]])
    amap = text_guided_attention(patches, torch.tensor([[1.0, 0.0]]), (2, 2))
    assert amap.source is AttentionSource.TEXT_GUIDED
    assert torch.equal(amap.values, torch.tensor([[[1.0, 0.0], [1.0, 0.0]]]))


def test_constant_map_is_all_zero():
    patches = torch.ones(2, 9, 4)
    amap = text_guided_attention(patches, torch.rand(2, 4), (6, 6))
    assert torch.equal(amap.values, torch.zeros(2, 6, 6))


def test_resize_4x4_matches_oracle():
    patches = torch.tensor([[[0.0], [1.0], [2.0], [3.0]]], dtype=torch.float64)
    amap = text_guided_attention(patches, torch.ones(1, 1, dtype=torch.float64), (4, 4))
    expected = attention_map([0, 1, 2, 3], 4, 4)
    assert np.abs(amap.values[0].numpy() - expected).max() < 1e-12
    # corners of the raw grid survive a corner-aligned resize
    assert expected[0, 0] == 0.0 and expected[-1, -1] == 1.0


@pytest.mark.parametrize("side,out", [(2, (4, 4)), (3, (7, 5)), (8, (32, 32)), (4, (1, 3)), (5, (2, 2))])
def test_resize_matches_oracle_random(side, out):
    gen = torch.Generator().manual_seed(side)
    grid = torch.rand(1, side, side, generator=gen, dtype=torch.float64)
    ours = resize_bilinear(grid, out)[0].numpy()
    assert np.abs(ours - bilinear_resize(grid[0].numpy(), *out)).max() < 1e-10


def test_resize_to_grid_is_identity():
    gen = torch.Generator().manual_seed(0)
    patches = torch.randn(3, 16, 5, generator=gen, dtype=torch.float64)
    vec = torch.randn(3, 5, generator=gen, dtype=torch.float64)
    raw = torch.einsum("npd,nd->np", patches, vec).reshape(3, 4, 4)
    amap = text_guided_attention(patches, vec, (4, 4))
    assert torch.allclose(amap.values, minmax_normalize(raw), atol=1e-15)


def test_errors():
    with pytest.raises(ShapeMismatchError):
        text_guided_attention(torch.rand(1, 5, 2), torch.rand(1, 2), (4, 4))
    with pytest.raises(ValueError):
        text_guided_attention(torch.rand(1, 4, 2), torch.rand(1, 2), (0, 4))
    with pytest.raises(ShapeMismatchError):
        text_guided_attention(torch.rand(2, 4, 2), torch.rand(1, 2), (4, 4))


@settings(max_examples=60, deadline=None)
@given(
    side=st.integers(1, 5),
    out_h=st.integers(1, 12),
    out_w=st.integers(1, 12),
    seed=st.integers(0, 2**31 - 1),
)
def test_range_property(side, out_h, out_w, seed):
    gen = torch.Generator().manual_seed(seed)
    patches = torch.randn(2, side * side, 3, generator=gen, dtype=torch.float64)
    vals = text_guided_attention(patches, torch.randn(2, 3, generator=gen, dtype=torch.float64), (out_h, out_w)).values
    assert vals.min() >= 0 and vals.max() <= 1
    for v in vals:
        if v.max() > 0:
            assert abs(v.max().item() - 1) < 1e-6 and abs(v.min().item()) < 1e-6
        else:
            assert torch.count_nonzero(v) == 0


def test_gradient_through_attention_matches_finite_differences():
    gen = torch.Generator().manual_seed(7)
    patches = torch.randn(2, 9, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    vec = torch.randn(2, 4, generator=gen, dtype=torch.float64)
    weight = torch.rand(2, 6, 6, generator=gen, dtype=torch.float64)

    def f(p):
        # weighted sum: the plain sum of a min-max map is not informative enough
        return (text_guided_attention(p, vec, (6, 6)).values * weight).sum()

    (grad,) = torch.autograd.grad(f(patches), patches)
    h = 1e-5
    base = patches.detach()
    for i in range(base.numel()):
        e = torch.zeros(base.numel(), dtype=torch.float64)
        e[i] = h
        e = e.view_as(base)
        fd = (f(base + e) - f(base - e)) / (2 * h)
        g = grad.view(-1)[i]
        assert abs(fd - g) / max(abs(fd), abs(g), 1e-8) < 1e-4


class LinearPatchEncoder(nn.Module):
    """tokens_p = W @ patch_p; patches = tokens; pooled = normalize(mean tokens)."""

    def __init__(self, weight, patch=2):
        super().__init__()
        self.weight = nn.Parameter(weight)
        self.patch = patch

    def forward(self, pixels):
        n, c, h, w = pixels.shape
        p = self.patch
        x = pixels.reshape(n, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5).reshape(n, -1, c * p * p)
        tokens = x @ self.weight.T
        return ImageEncoding(F.normalize(tokens.mean(1), dim=-1), tokens, tokens)


def test_gradient_attention_linear_closed_form():
    gen = torch.Generator().manual_seed(11)
    weight = torch.randn(3, 12, generator=gen, dtype=torch.float64)
    enc = LinearPatchEncoder(weight)
    pixels = torch.rand(2, 3, 4, 4, generator=gen, dtype=torch.float64)
    labels = torch.tensor([0, 2])
    text = TextEmbeddings(F.normalize(torch.randn(3, 3, generator=gen, dtype=torch.float64), dim=1), ["a", "b", "c"])
    tau = 0.5
    amap = gradient_attention(enc, ImageBatch(pixels, labels), text, (4, 4), temperature=tau)

    x = pixels.numpy()
    w = weight.numpy()
    for i in range(2):
        toks = []
        for gy in range(2):
            for gx in range(2):
                patch = x[i, :, 2 * gy:2 * gy + 2, 2 * gx:2 * gx + 2].reshape(-1)
                toks.append(w @ patch)
        toks = np.array(toks)
        m = toks.mean(0)
        mhat = m / np.linalg.norm(m)
        u = text.vectors[labels[i]].numpy()
        # d logit / d token_p = (u - (u.mhat) mhat) / (|m| tau P), identical for all p
        g = (u - (u @ mhat) * mhat) / (np.linalg.norm(m) * tau * 4)
        raw = np.maximum(toks @ g, 0)
        expected = attention_map(list(raw), 4, 4)
        assert np.abs(amap.values[i].numpy() - expected).max() < 1e-10


class ConstantEncoder(nn.Module):
    def __init__(self):
        super().__init__()
        self.bias = nn.Parameter(torch.tensor([1.0, 0.0]))

    def forward(self, pixels):
        n = pixels.shape[0]
        tokens = pixels.reshape(n, 3, 2, 2, 2, 2).permute(0, 2, 4, 1, 3, 5).reshape(n, 4, 12)[..., :2] * 0.0
        tokens = tokens + self.bias
        pooled = F.normalize(self.bias.expand(n, 2), dim=-1)
        return ImageEncoding(pooled, tokens, tokens)


def test_gradient_attention_zero_for_constant_logit():
    text = TextEmbeddings(torch.eye(2), ["a", "b"])
    amap = gradient_attention(ConstantEncoder(), ImageBatch(torch.rand(2, 3, 4, 4), torch.tensor([0, 1])), text, (4, 4))
    assert torch.equal(amap.values, torch.zeros(2, 4, 4))


@pytest.mark.parametrize("out_hw", [(8, 8), (3, 5), (16, 16)])
def test_gradient_attention_shape(tiny_encoder, tiny_text, out_hw):
    batch = ImageBatch(torch.rand(3, 3, 8, 8), torch.tensor([0, 1, 2]))
    amap = gradient_attention(tiny_encoder, batch, tiny_text, out_hw)
    assert amap.values.shape == (3, *out_hw)
    assert amap.source is AttentionSource.GRADIENT_BASED
    assert amap.values.min() >= 0 and amap.values.max() <= 1


def test_gradient_attention_on_frozen_encoder(tiny_encoder, tiny_text):
    tiny_encoder.requires_grad_(False)
    batch = ImageBatch(torch.rand(2, 3, 8, 8), torch.tensor([0, 1]))
    amap = gradient_attention(tiny_encoder, batch, tiny_text)
    assert amap.values.abs().sum() > 0
