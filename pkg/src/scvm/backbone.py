"""Miniature pre-norm vision transformer.

Stands in for a frozen production image encoder: small enough that every
gradient can be verified by finite differences, but structurally a real
ViT (patch embedding, CLS token, learned positions, pre-LN blocks with
multi-head attention and an MLP). The per-layer token grids it produces
are what the cross-layer memory modules hook into.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


@dataclass
class BackboneConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    dim: int = 32
    layers: int = 6
    heads: int = 4
    mlp_ratio: int = 4
    freeze_backbone: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1  # CLS at index 0

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def mlp_hidden(self) -> int:
        return self.dim * self.mlp_ratio


def images_to_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """Rearrange (B, H, W, C) images into (B, patches, patch_size^2 * C).

    Patches are ordered row-major over the patch grid; pixels inside a
    patch are row-major as well. A pure data rearrangement, no learning.
    """
    if images.ndim == 3:
        images = images[None]
    b, h, w, c = images.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, gh, patch_size, gw, patch_size, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(b, gh * gw, patch_size * patch_size * c))


class LayerNorm:
    """Layer norm over the channel axis with a learnable affine pair."""

    def __init__(self, dim: int, name: str):
        self.gain = Parameter(f"{name}.g", np.ones(dim))
        self.bias = Parameter(f"{name}.b", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x) * self.gain.tensor + self.bias.tensor

    def params(self):
        return [self.gain, self.bias]


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, name: str):
        self.w = Parameter(f"{name}.w", T.xavier_uniform(rng, (d_in, d_out)), decay=True)
        self.b = Parameter(f"{name}.b", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w.tensor + self.b.tensor

    def params(self):
        return [self.w, self.b]


class PatchEmbed:
    """Patch projection + CLS token + learned positional embedding."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, name: str):
        self.cfg = cfg
        self.proj = Linear(cfg.patch_dim, cfg.dim, rng, f"{name}.proj")
        self.cls = Parameter(f"{name}.cls", rng.normal(0.0, 0.02, (1, cfg.dim)))
        self.pos = Parameter(f"{name}.pos", rng.normal(0.0, 0.02, (cfg.n_tokens, cfg.dim)))

    def __call__(self, patches: Tensor) -> Tensor:
        b, p, pd = patches.shape
        if p != self.cfg.n_patches or pd != self.cfg.patch_dim:
            raise T.ShapeError(
                f"patch_embed: got {patches.shape}, expected "
                f"(B, {self.cfg.n_patches}, {self.cfg.patch_dim})"
            )
        tok = self.proj(patches)
        anchor = Tensor(np.zeros((b, 1, self.cfg.dim)))
        cls_row = anchor + T.reshape(self.cls.tensor, (1, 1, self.cfg.dim))
        tokens = T.concat([cls_row, tok], axis=1)
        return tokens + self.pos.tensor

    def params(self):
        return self.proj.params() + [self.cls, self.pos]


class Attention:
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, name: str):
        self.cfg = cfg
        d = cfg.dim
        self.q = Linear(d, d, rng, f"{name}.q")
        self.k = Linear(d, d, rng, f"{name}.k")
        self.v = Linear(d, d, rng, f"{name}.v")
        self.out = Linear(d, d, rng, f"{name}.out")

    def _split(self, x: Tensor, b: int, n: int) -> Tensor:
        h, dh = self.cfg.heads, self.cfg.head_dim
        return T.transpose(T.reshape(x, (b, n, h, dh)), (0, 2, 1, 3))

    def with_probs(self, x: Tensor):
        b, n, d = x.shape
        q = self._split(self.q(x), b, n)
        k = self._split(self.k(x), b, n)
        v = self._split(self.v(x), b, n)
        scores = (q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.cfg.head_dim))
        probs = T.softmax(scores)
        ctx = probs @ v
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
        return self.out(merged), probs

    def __call__(self, x: Tensor) -> Tensor:
        return self.with_probs(x)[0]

    def params(self):
        return self.q.params() + self.k.params() + self.v.params() + self.out.params()


class Mlp:
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, name: str):
        self.fc1 = Linear(cfg.dim, cfg.mlp_hidden, rng, f"{name}.fc1")
        self.fc2 = Linear(cfg.mlp_hidden, cfg.dim, rng, f"{name}.fc2")

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))

    def params(self):
        return self.fc1.params() + self.fc2.params()


class TransformerBlock:
    """Pre-LN block: x + attn(LN(x)), then + mlp(LN(.))."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, name: str):
        self.ln1 = LayerNorm(cfg.dim, f"{name}.ln1")
        self.attn = Attention(cfg, rng, f"{name}.attn")
        self.ln2 = LayerNorm(cfg.dim, f"{name}.ln2")
        self.mlp = Mlp(cfg, rng, f"{name}.mlp")

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        x = x + self.mlp(self.ln2(x))
        return x

    def params(self):
        return self.ln1.params() + self.attn.params() + self.ln2.params() + self.mlp.params()


class VisionBackbone:
    """Patch embedding plus a stack of pre-LN transformer blocks."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, name: str = "backbone"):
        self.cfg = cfg
        self.patch = PatchEmbed(cfg, rng, f"{name}.patch")
        self.blocks = [
            TransformerBlock(cfg, rng, f"{name}.block{i}") for i in range(cfg.layers)
        ]

    def embed(self, patches: Tensor) -> Tensor:
        return self.patch(patches)

    def forward_plain(self, patches: Tensor) -> Tensor:
        """Run the plain backbone with no cross-layer modulation."""
        x = self.patch(patches)
        for block in self.blocks:
            x = block(x)
        return x

    def params(self):
        out = self.patch.params()
        for block in self.blocks:
            out.extend(block.params())
        return out
