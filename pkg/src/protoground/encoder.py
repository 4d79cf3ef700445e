"""Desk-scale trainable encoder producing a visual token grid and text features.

Replaces a large pretrained dual encoder while keeping its interface: the
image becomes a flattened patch grid, optionally resampled to a larger
token count, and the text is embedded then refined by a few layers of
self-attention, cross-attention onto the image tokens, and an FFN.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import attention as A
from . import tensor as T
from .errors import ConfigError, DataError
from .tensor import Tensor


@dataclass
class TokenGrid:
    """Visual token sequence with its 2-D grid shape attached."""

    tokens: Tensor  # [B, N, C_feat]
    grid: Optional[tuple[int, int]]  # (H_g, W_g) with H_g * W_g == N, None if not grid-shaped

    def __post_init__(self):
        if self.grid is not None and self.grid[0] * self.grid[1] != self.tokens.shape[-2]:
            raise ConfigError(f"grid {self.grid} does not cover {self.tokens.shape[-2]} tokens")


@dataclass
class TextFeatures:
    tokens: Tensor  # [B, L, C_feat]
    token_ids: np.ndarray  # [B, L]


@dataclass
class TextLayerParams:
    mha: A.AttentionParams
    mca: A.AttentionParams
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    ln3_g: Tensor
    ln3_b: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        out.update(self.mha.tensors(f"{prefix}.mha"))
        out.update(self.mca.tensors(f"{prefix}.mca"))
        for name in ("ln1_g", "ln1_b", "ln2_g", "ln2_b", "ln3_g", "ln3_b",
                     "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"):
            out[f"{prefix}.{name}"] = getattr(self, name)
        return out


@dataclass
class EncoderParams:
    patch_w: Tensor  # [3*p*p, C0]
    patch_b: Tensor  # [C0]
    pos_embed: Tensor  # [N0, C0], learned absolute positions for patches
    embed: Tensor  # [vocab, C0]
    text_pos: Tensor  # [L_max, C0], learned positions for text slots
    layers: list[TextLayerParams] = field(default_factory=list)
    patch: int = 8

    def tensors(self, prefix: str = "encoder") -> dict[str, Tensor]:
        out = {f"{prefix}.patch_w": self.patch_w, f"{prefix}.patch_b": self.patch_b,
               f"{prefix}.pos_embed": self.pos_embed, f"{prefix}.embed": self.embed,
               f"{prefix}.text_pos": self.text_pos}
        for i, layer in enumerate(self.layers):
            out.update(layer.tensors(f"{prefix}.text{i}"))
        return out


def init_text_layer(c0: int, heads: int, ffn_dim: int, rng: np.random.Generator) -> TextLayerParams:
    return TextLayerParams(
        mha=A.init_attention(c0, heads, rng),
        mca=A.init_attention(c0, heads, rng),
        ln1_g=T.param(np.ones(c0)), ln1_b=T.param(np.zeros(c0)),
        ln2_g=T.param(np.ones(c0)), ln2_b=T.param(np.zeros(c0)),
        ln3_g=T.param(np.ones(c0)), ln3_b=T.param(np.zeros(c0)),
        ffn_w1=T.param(T.xavier_uniform((c0, ffn_dim), rng)),
        ffn_b1=T.param(np.zeros(ffn_dim)),
        ffn_w2=T.param(T.xavier_uniform((ffn_dim, c0), rng)),
        ffn_b2=T.param(np.zeros(c0)),
    )


def init_encoder(c0: int, vocab: int, patch: int, heads: int, depth: int, ffn_dim: int,
                 rng: np.random.Generator, n_positions: int = 1024,
                 max_text_len: int = 64, pos_scale: float = 0.02) -> EncoderParams:
    return EncoderParams(
        patch_w=T.param(T.xavier_uniform((3 * patch * patch, c0), rng)),
        patch_b=T.param(np.zeros(c0)),
        pos_embed=T.param(pos_scale * rng.normal(size=(n_positions, c0))),
        embed=T.param(T.xavier_uniform((vocab, c0), rng)),
        text_pos=T.param(pos_scale * rng.normal(size=(max_text_len, c0))),
        layers=[init_text_layer(c0, heads, ffn_dim, rng) for _ in range(depth)],
        patch=patch,
    )


def patch_embed(image, params: EncoderParams) -> TokenGrid:
    """Project non-overlapping p x p patches to C0-wide tokens.

    Accepts a single [3, H, W] image or a batch [B, 3, H, W].
    """
    x = image if isinstance(image, Tensor) else T.constant(image)
    squeeze = x.ndim == 3
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    b, ch, h0, w0 = x.shape
    p = params.patch
    if h0 % p != 0 or w0 % p != 0:
        raise ConfigError(f"image {h0}x{w0} not divisible by patch size {p}")
    hg, wg = h0 // p, w0 // p
    n = hg * wg
    if n > params.pos_embed.shape[0]:
        raise ConfigError(f"{n} patches exceed the {params.pos_embed.shape[0]}-slot position table")
    x = T.reshape(x, (b, ch, hg, p, wg, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))  # [B, hg, wg, 3, p, p]
    x = T.reshape(x, (b, n, ch * p * p))
    tokens = T.linear(x, params.patch_w, params.patch_b)
    pos = T.reshape(T.narrow(params.pos_embed, 0, 0, n), (1, n, params.pos_embed.shape[1]))
    tokens = T.add(tokens, T.broadcast_to(pos, tokens.shape))
    return TokenGrid(tokens=tokens, grid=(hg, wg))


def interpolation_matrix(n: int, m: int) -> np.ndarray:
    """Linear-resampling matrix W [m, n]: out = W @ tokens, endpoints preserved."""
    if n < 2 or m < 2:
        raise ConfigError(f"interpolation needs n >= 2 and m >= 2, got {n} -> {m}")
    w = np.zeros((m, n))
    pos = np.arange(m) * (n - 1) / (m - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    w[np.arange(m), lo] += 1.0 - frac
    w[np.arange(m), hi] += frac
    return w


def interpolate_tokens(g: TokenGrid, target: int) -> TokenGrid:
    """Resample the token sequence to ``target`` positions along the token axis."""
    b, n, c = g.tokens.shape
    w = T.constant(interpolation_matrix(n, target))
    wb = T.broadcast_to(T.reshape(w, (1, target, n)), (b, target, n))
    tokens = T.bmm(wb, g.tokens)
    side = int(round(target ** 0.5))
    grid = (side, side) if side * side == target else None
    return TokenGrid(tokens=tokens, grid=grid)


def text_encode(ids: np.ndarray, f_v: TokenGrid, params: EncoderParams) -> TextFeatures:
    """Embed token ids, then run depth layers of self-attn, cross-attn to the
    image tokens, and FFN, each with a residual + norm."""
    ids = np.asarray(ids, dtype=np.int64)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
    vocab = params.embed.shape[0]
    if ids.min() < 0 or ids.max() >= vocab:
        raise DataError(f"token id outside vocabulary of size {vocab}")
    b, l = ids.shape
    if l > params.text_pos.shape[0]:
        raise ConfigError(f"text length {l} exceeds the {params.text_pos.shape[0]}-slot position table")
    flat = T.embedding(params.embed, ids.reshape(-1))
    x = T.reshape(flat, (b, l, params.embed.shape[1]))
    pos = T.reshape(T.narrow(params.text_pos, 0, 0, l), (1, l, params.embed.shape[1]))
    x = T.add(x, T.broadcast_to(pos, x.shape))
    for layer in params.layers:
        x = T.layer_norm(T.add(x, A.mha(x, layer.mha)), layer.ln1_g, layer.ln1_b)
        x = T.layer_norm(T.add(x, A.mca(x, f_v.tokens, f_v.tokens, layer.mca)), layer.ln2_g, layer.ln2_b)
        h = T.linear(T.relu(T.linear(x, layer.ffn_w1, layer.ffn_b1)), layer.ffn_w2, layer.ffn_b2)
        x = T.layer_norm(T.add(x, h), layer.ln3_g, layer.ln3_b)
    return TextFeatures(tokens=x, token_ids=ids)
