"""Dual-encoder model pieces: a miniature ViT image encoder, frozen text
embeddings, and temperature-scaled cosine classification."""
from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import load_archive, save_archive

DEFAULT_TEMPERATURE = 0.07
DEFAULT_TEMPLATE = "a photo of a {}"


class ShapeMismatchError(ValueError):
    pass


class MissingClassError(KeyError):
    pass


@dataclass
class ImageBatch:
    pixels: torch.Tensor  # N x 3 x H x W in [0, 1]
    labels: torch.Tensor  # N, int64

    def __post_init__(self):
        if self.pixels.dim() != 4 or self.pixels.shape[1] != 3:
            raise ShapeMismatchError(f"expected N x 3 x H x W pixels, got {tuple(self.pixels.shape)}")
        if self.pixels.shape[0] < 1:
            raise ShapeMismatchError("empty image batch")
        if self.labels.shape != (self.pixels.shape[0],):
            raise ShapeMismatchError(
                f"labels shape {tuple(self.labels.shape)} does not match batch size {self.pixels.shape[0]}"
            )

    def __len__(self) -> int:
        return self.pixels.shape[0]


@dataclass
class TextEmbeddings:
    vectors: torch.Tensor  # K x d, unit rows
    class_names: list[str]
    template: str = DEFAULT_TEMPLATE

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def for_labels(self, labels: torch.Tensor) -> torch.Tensor:
        """Per-sample ground-truth class embedding, N x d."""
        return self.vectors[labels]

    def prompts(self) -> list[str]:
        return [self.template.format(name) for name in self.class_names]


@dataclass
class ImageEncoding:
    pooled: torch.Tensor  # N x d, unit rows
    patches: torch.Tensor  # N x P x d, projected patch tokens (no class token)
    tokens: torch.Tensor | None = None  # N x P x width, last-block activations


@dataclass
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    width: int = 64
    depth: int = 2
    heads: int = 4
    embed_dim: int = 64
    mlp_ratio: int = 4

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    def to_dict(self) -> dict:
        return asdict(self)


class Block(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.ln_1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.ln_2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, width * mlp_ratio),
            nn.GELU(),
            nn.Linear(width * mlp_ratio, width),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # Call the functional form directly: the module's fused inference path
        # rounds differently, and the original and target encoders must agree
        # bit for bit when their weights match.
        h = self.ln_1(x).transpose(0, 1)
        a = self.attn
        out, _ = F.multi_head_attention_forward(
            h, h, h, a.embed_dim, a.num_heads, a.in_proj_weight, a.in_proj_bias, None, None, False, 0.0,
            a.out_proj.weight, a.out_proj.bias, training=self.training, need_weights=False,
        )
        x = x + out.transpose(0, 1)
        return x + self.mlp(self.ln_2(x))


class MiniViT(nn.Module):
    """Pre-LN vision transformer without a class token.

    Pooled output is the mean of the projected patch tokens, l2-normalized.
    Because the projection is affine it commutes with the mean, so this is
    the same as projecting the mean token.
    """

    def __init__(self, config: ViTConfig | None = None, **overrides):
        super().__init__()
        config = config or ViTConfig(**overrides)
        if config.image_size % config.patch_size:
            raise ShapeMismatchError(
                f"image size {config.image_size} not divisible by patch size {config.patch_size}"
            )
        self.config = config
        patch_dim = 3 * config.patch_size**2
        self.patch_embed = nn.Linear(patch_dim, config.width)
        self.pos_embed = nn.Parameter(torch.randn(config.num_patches, config.width) * 0.02)
        self.blocks = nn.ModuleList(
            Block(config.width, config.heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.ln_post = nn.LayerNorm(config.width)
        self.proj = nn.Linear(config.width, config.embed_dim)

    def patchify(self, pixels: torch.Tensor) -> torch.Tensor:
        n, c, h, w = pixels.shape
        p = self.config.patch_size
        if h % p or w % p:
            raise ShapeMismatchError(f"image {h}x{w} not divisible by patch size {p}")
        if h != self.config.image_size or w != self.config.image_size:
            raise ShapeMismatchError(
                f"encoder expects {self.config.image_size}x{self.config.image_size} input, got {h}x{w}"
            )
        x = pixels.reshape(n, c, h // p, p, w // p, p)
        return x.permute(0, 2, 4, 1, 3, 5).reshape(n, (h // p) * (w // p), c * p * p)

    def forward(self, pixels: torch.Tensor) -> ImageEncoding:
        x = self.patch_embed(self.patchify(pixels)) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        tokens = x
        patches = self.proj(self.ln_post(tokens))
        pooled = F.normalize(patches.mean(dim=1), dim=-1)
        return ImageEncoding(pooled=pooled, patches=patches, tokens=tokens)


def encode_image(encoder: nn.Module, batch: ImageBatch | torch.Tensor) -> ImageEncoding:
    pixels = batch.pixels if isinstance(batch, ImageBatch) else batch
    out = encoder(pixels)
    root = math.isqrt(out.patches.shape[1])
    if root * root != out.patches.shape[1]:
        raise ShapeMismatchError(f"patch count {out.patches.shape[1]} is not a perfect square")
    return out


def _synthetic_vector(prompt: str, seed: int, dim: int) -> torch.Tensor:
    digest = hashlib.sha256(f"{seed}\x00{prompt}".encode("utf-8")).digest()
    gen = torch.Generator().manual_seed(int.from_bytes(digest[:8], "little") & (2**63 - 1))
    return torch.randn(dim, generator=gen, dtype=torch.float64)


def encode_text(
    class_names: Sequence[str],
    template: str = DEFAULT_TEMPLATE,
    source: int | str | Path = 0,
    dim: int = 64,
) -> TextEmbeddings:
    """Frozen class-prompt embeddings.

    ``source`` is either an integer seed (synthetic vectors derived from the
    seed and the prompt text) or a tensor-archive directory whose tensors are
    keyed by class name.
    """
    class_names = list(class_names)
    if len(class_names) < 2:
        raise ValueError("need at least two classes")
    if isinstance(source, bool) or not isinstance(source, (int, str, Path)):
        raise TypeError(f"unsupported text source {source!r}")
    if isinstance(source, int):
        rows = [_synthetic_vector(template.format(name), source, dim) for name in class_names]
    else:
        tensors, _ = load_archive(source)
        missing = [name for name in class_names if name not in tensors]
        if missing:
            raise MissingClassError(f"archive {source} has no embedding for {missing}")
        rows = [tensors[name].double().reshape(-1) for name in class_names]
    vectors = F.normalize(torch.stack(rows), dim=-1).float()
    return TextEmbeddings(vectors=vectors, class_names=class_names, template=template)


def save_text_archive(path: str | Path, text: TextEmbeddings) -> Path:
    return save_archive(path, dict(zip(text.class_names, text.vectors)), {"template": text.template})


def classification_logits(pooled: torch.Tensor, text: TextEmbeddings | torch.Tensor, temperature: float) -> torch.Tensor:
    vectors = text.vectors if isinstance(text, TextEmbeddings) else text
    if pooled.shape[-1] != vectors.shape[-1]:
        raise ShapeMismatchError(f"embedding dim mismatch: image {pooled.shape[-1]} vs text {vectors.shape[-1]}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return pooled @ vectors.to(pooled.dtype).T / temperature


@dataclass
class DualModelState:
    original: nn.Module
    target: nn.Module
    text: TextEmbeddings
    temperature: float = DEFAULT_TEMPERATURE

    @classmethod
    def from_encoder(cls, encoder: nn.Module, text: TextEmbeddings, temperature: float = DEFAULT_TEMPERATURE):
        """Snapshot ``encoder`` as the frozen original; ``encoder`` itself becomes the target."""
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        original = copy.deepcopy(encoder)
        original.requires_grad_(False)
        original.eval()
        return cls(original=original, target=encoder, text=text, temperature=temperature)

    def logits(self, pooled: torch.Tensor) -> torch.Tensor:
        return classification_logits(pooled, self.text, self.temperature)


def save_checkpoint(
    path: str | Path,
    encoder: MiniViT,
    text: TextEmbeddings | None = None,
    temperature: float = DEFAULT_TEMPERATURE,
    extra: dict | None = None,
) -> Path:
    tensors = {f"encoder.{k}": v for k, v in encoder.state_dict().items()}
    meta = {"model": encoder.config.to_dict(), "temperature": temperature}
    if text is not None:
        tensors.update({f"text.{name}": vec for name, vec in zip(text.class_names, text.vectors)})
        meta["class_names"] = text.class_names
        meta["template"] = text.template
    meta.update(extra or {})
    return save_archive(path, tensors, meta)


def load_checkpoint(path: str | Path) -> tuple[MiniViT, TextEmbeddings | None, dict]:
    tensors, meta = load_archive(path)
    encoder = MiniViT(ViTConfig(**meta["model"]))
    state = {k[len("encoder."):]: v for k, v in tensors.items() if k.startswith("encoder.")}
    encoder.load_state_dict(state)
    text = None
    if "class_names" in meta:
        names = meta["class_names"]
        text = TextEmbeddings(
            vectors=torch.stack([tensors[f"text.{n}"] for n in names]),
            class_names=list(names),
            template=meta.get("template", DEFAULT_TEMPLATE),
        )
    return encoder, text, meta
