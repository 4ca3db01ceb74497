"""Text-guided and gradient-based (Grad-CAM) spatial attention maps."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .model import ImageBatch, ShapeMismatchError, TextEmbeddings, classification_logits


class AttentionSource(str, enum.Enum):
    TEXT_GUIDED = "text_guided"
    GRADIENT_BASED = "gradient_based"


@dataclass
class AttentionMap:
    values: torch.Tensor  # N x H x W, each sample min-max scaled to [0, 1]
    source: AttentionSource = AttentionSource.TEXT_GUIDED

    @property
    def shape(self):
        return self.values.shape


def grid_side(num_patches: int) -> int:
    side = math.isqrt(num_patches)
    if side * side != num_patches:
        raise ShapeMismatchError(f"patch count {num_patches} is not a perfect square")
    return side


def resize_bilinear(maps: torch.Tensor, out_hw: tuple[int, int]) -> torch.Tensor:
    """Corner-aligned bilinear resize of N x h x w maps to N x H x W."""
    h, w = int(out_hw[0]), int(out_hw[1])
    if h < 1 or w < 1:
        raise ValueError(f"output size must be positive, got {out_hw}")
    if tuple(maps.shape[-2:]) == (h, w):
        return maps
    return F.interpolate(maps.unsqueeze(1), size=(h, w), mode="bilinear", align_corners=True).squeeze(1)


def minmax_normalize(maps: torch.Tensor, degenerate: torch.Tensor | None = None) -> torch.Tensor:
    """Scale each N x H x W map to [0, 1]; constant maps become all zeros."""
    flat = maps.flatten(1)
    lo = flat.amin(dim=1)
    hi = flat.amax(dim=1)
    span = hi - lo
    flat_out = span == 0
    if degenerate is not None:
        flat_out = flat_out | degenerate
    safe = torch.where(flat_out, torch.ones_like(span), span)
    scaled = (maps - lo[:, None, None]) / safe[:, None, None]
    return torch.where(flat_out[:, None, None], torch.zeros_like(scaled), scaled)


def spatial_map(raw: torch.Tensor, out_hw: tuple[int, int]) -> torch.Tensor:
    """Reshape raw N x P scores to the patch grid, resize, then normalize."""
    side = grid_side(raw.shape[1])
    grid = raw.reshape(raw.shape[0], side, side)
    span = raw.amax(dim=1) - raw.amin(dim=1)
    return minmax_normalize(resize_bilinear(grid, out_hw), degenerate=span == 0)


def text_guided_attention(
    patches: torch.Tensor, text_vectors: torch.Tensor, out_hw: tuple[int, int]
) -> AttentionMap:
    """Dot each patch feature with the sample's ground-truth class embedding.

    ``patches`` is N x P x d and ``text_vectors`` N x d (one row per sample).
    """
    if patches.shape[0] != text_vectors.shape[0] or patches.shape[-1] != text_vectors.shape[-1]:
        raise ShapeMismatchError(
            f"patches {tuple(patches.shape)} incompatible with text vectors {tuple(text_vectors.shape)}"
        )
    raw = torch.einsum("npd,nd->np", patches, text_vectors.to(patches.dtype))
    return AttentionMap(spatial_map(raw, out_hw), AttentionSource.TEXT_GUIDED)


def gradient_attention(
    encoder,
    batch: ImageBatch,
    text: TextEmbeddings,
    out_hw: tuple[int, int] | None = None,
    temperature: float = 0.07,
    create_graph: bool = False,
) -> AttentionMap:
    """Grad-CAM over the encoder's last-block patch tokens.

    Channel weights are the patch-averaged gradients of the ground-truth
    logit; the map is the positive part of the weighted token sum. With
    ``create_graph`` the result stays differentiable w.r.t. parameters.
    """
    pixels = batch.pixels
    if out_hw is None:
        out_hw = tuple(pixels.shape[-2:])
    if not pixels.requires_grad:
        # frozen encoders still need a graph from tokens to the logit
        pixels = pixels.detach().requires_grad_(True)
    with torch.enable_grad():
        enc = encoder(pixels)
        tokens = enc.tokens
        if tokens is None:
            raise ValueError("encoder does not expose last-block tokens")
        logits = classification_logits(enc.pooled, text, temperature)
        score = logits.gather(1, batch.labels[:, None]).sum()
        grads = None
        if score.requires_grad and tokens.requires_grad:
            (grads,) = torch.autograd.grad(score, tokens, create_graph=create_graph, allow_unused=True)
        if grads is None:
            grads = torch.zeros_like(tokens)
    weights = grads.mean(dim=1)  # N x C
    raw = F.relu(torch.einsum("npc,nc->np", tokens, weights))
    if not create_graph:
        raw = raw.detach()
    return AttentionMap(spatial_map(raw, out_hw), AttentionSource.GRADIENT_BASED)
