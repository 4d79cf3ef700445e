"""Multi-head attention variants: self (MHA), cross (MCA), and cross with
an additive relative-position bias folded into the pre-softmax logits
(MHARPE).

All inputs are batched [B, n, d].  Cross attention takes separate key and
value sources, so the same routine serves both "query the text" and "keys
from one stream, values from another" call sites.  Projections carry no
biases; the output projection closes each block.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class AttentionParams:
    """Projection weights for one attention block.

    ``w_q`` maps the query source (width d_q) and ``w_k``/``w_v`` map the
    key/value sources (widths d_kv) into the shared model width d; ``w_o``
    maps concatenated heads back to d.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int

    @property
    def model_dim(self) -> int:
        return self.w_q.shape[1]

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_q": self.w_q, f"{prefix}.w_k": self.w_k,
                f"{prefix}.w_v": self.w_v, f"{prefix}.w_o": self.w_o}


def init_attention(d: int, heads: int, rng: np.random.Generator,
                   d_q: Optional[int] = None, d_kv: Optional[int] = None) -> AttentionParams:
    if d % heads != 0:
        raise ConfigError(f"model dim {d} not divisible by {heads} heads")
    d_q = d_q or d
    d_kv = d_kv or d
    return AttentionParams(
        w_q=T.param(T.xavier_uniform((d_q, d), rng)),
        w_k=T.param(T.xavier_uniform((d_kv, d), rng)),
        w_v=T.param(T.xavier_uniform((d_kv, d), rng)),
        w_o=T.param(T.xavier_uniform((d, d), rng)),
        heads=heads,
    )


@dataclass
class RPETable:
    """Learnable position-embedding tables for the relative bias.

    ``p_y`` scores the running count along rows, ``p_x`` the running count
    along columns; each covers offsets in [-(max_extent-1), max_extent-1]
    after shifting by ``offset``.
    """

    p_y: Tensor
    p_x: Tensor
    offset: int

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.p_y": self.p_y, f"{prefix}.p_x": self.p_x}


def init_rpe(d: int, max_extent: int, rng: np.random.Generator) -> RPETable:
    span = 2 * max_extent - 1
    return RPETable(
        p_y=T.param(T.xavier_uniform((span, d // 2), rng)),
        p_x=T.param(T.xavier_uniform((span, d // 2), rng)),
        offset=max_extent - 1,
    )


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[Tensor] = None,
                         diag: Optional[dict] = None) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v over 2-D or batched 3-D operands."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"scaled_dot_attention: query width {q.shape} vs key width {k.shape}")
    scale = 1.0 / np.sqrt(q.shape[-1])
    if q.ndim == 2:
        scores = T.scale(T.matmul(q, T.transpose(k, (1, 0))), scale)
    else:
        scores = T.scale(T.bmm(q, T.transpose(k, (0, 2, 1))), scale)
    if mask is not None:
        scores = T.add(scores, mask)
    weights = T.softmax(scores, axis=-1)
    if diag is not None:
        diag["weights"] = weights.data.copy()
    return T.matmul(weights, v) if q.ndim == 2 else T.bmm(weights, v)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    x = T.reshape(x, (b, n, heads, d // heads))
    x = T.transpose(x, (0, 2, 1, 3))
    return T.reshape(x, (b * heads, n, d // heads))


def _merge_heads(x: Tensor, heads: int) -> Tensor:
    bh, n, dh = x.shape
    x = T.reshape(x, (bh // heads, heads, n, dh))
    x = T.transpose(x, (0, 2, 1, 3))
    return T.reshape(x, (bh // heads, n, heads * dh))


def mca(q_src: Tensor, k_src: Tensor, v_src: Tensor, params: AttentionParams,
        diag: Optional[dict] = None) -> Tensor:
    """Multi-head cross attention; key and value sources may differ."""
    if k_src.shape[1] != v_src.shape[1]:
        raise ShapeError(f"mca: key tokens {k_src.shape} vs value tokens {v_src.shape}")
    h = params.heads
    q = _split_heads(T.linear(q_src, params.w_q), h)
    k = _split_heads(T.linear(k_src, params.w_k), h)
    v = _split_heads(T.linear(v_src, params.w_v), h)
    out = scaled_dot_attention(q, k, v, diag=diag)
    return T.linear(_merge_heads(out, h), params.w_o)


def mha(x: Tensor, params: AttentionParams, diag: Optional[dict] = None) -> Tensor:
    """Multi-head self attention."""
    return mca(x, x, x, params, diag=diag)


def cumulative_positions(image_mask: np.ndarray):
    """Running 0/1 counts along rows and columns, flattened to [B, HW]."""
    mask = np.asarray(image_mask, dtype=np.float64)
    b, hg, wg = mask.shape
    yy = np.cumsum(mask, axis=2).reshape(b, hg * wg)
    xx = np.cumsum(mask, axis=1).reshape(b, hg * wg)
    return yy, xx


def relative_position_bias(image_mask: np.ndarray, q_heads: Tensor, rpe: RPETable,
                           w_k: Tensor, heads: int) -> Tensor:
    """Additive bias R for every (query, key) pair of flattened grid tokens.

    Pipeline: cumulative counts along rows/columns -> pairwise differences
    -> project each table through its half of the key projection's input
    rows -> raw query/table scores -> gather at shifted difference indices
    -> sum the two axes.  With an unpadded (all-ones) mask the gather
    indices are shared across the batch, which keeps the backward dense.
    """
    b, hg, wg = image_mask.shape
    n = hg * wg
    d = w_k.shape[0]
    if q_heads.shape[1] != n:
        raise ShapeError(f"relative_position_bias: {q_heads.shape[1]} queries vs {hg}x{wg} grid")
    yy, xx = cumulative_positions(image_mask)
    dyy = (yy[:, :, None] - yy[:, None, :]).astype(np.int64) + rpe.offset
    dxx = (xx[:, :, None] - xx[:, None, :]).astype(np.int64) + rpe.offset
    for name, idx, table in (("y", dyy, rpe.p_y), ("x", dxx, rpe.p_x)):
        span = table.shape[0]
        if idx.min() < 0 or idx.max() >= span:
            raise ConfigError(
                f"relative position table ({name}) spans {span} offsets but the grid needs "
                f"indices in [{idx.min()}, {idx.max()}]; enlarge max_extent")

    # K_y/K_x: each table feeds one half of the key projection's input rows.
    k_y = T.matmul(rpe.p_y, T.narrow(w_k, 0, 0, d // 2))
    k_x = T.matmul(rpe.p_x, T.narrow(w_k, 0, d // 2, d - d // 2))
    bias = None
    shared = bool(np.all(image_mask == 1))
    for idx, k_tab in ((dyy, k_y), (dxx, k_x)):
        span = k_tab.shape[0]
        kh = _split_heads(T.broadcast_to(T.reshape(k_tab, (1, span, d)), (b, span, d)), heads)
        a_raw = T.bmm(q_heads, T.transpose(kh, (0, 2, 1)))  # [B*h, n, span]
        if shared:
            gathered = T.gather_bias(a_raw, idx[0])
        else:
            gathered = T.gather_bias(a_raw, np.repeat(idx, heads, axis=0))
        bias = gathered if bias is None else T.add(bias, gathered)
    return bias


def mharpe(q_src: Tensor, k_src: Tensor, v_src: Tensor, image_mask: np.ndarray,
           params: AttentionParams, rpe: RPETable, diag: Optional[dict] = None) -> Tensor:
    """Cross attention with logits (q k^T + R) / sqrt(d_k)."""
    b, hg, wg = np.asarray(image_mask).shape
    if q_src.shape[1] != hg * wg or k_src.shape[1] != hg * wg:
        raise ShapeError(f"mharpe: token count {q_src.shape[1]} vs grid {hg}x{wg}")
    h = params.heads
    dh = params.model_dim // h
    q = _split_heads(T.linear(q_src, params.w_q), h)
    k = _split_heads(T.linear(k_src, params.w_k), h)
    v = _split_heads(T.linear(v_src, params.w_v), h)
    bias = relative_position_bias(np.asarray(image_mask), q, rpe, params.w_k, h)
    scores = T.scale(T.add(T.bmm(q, T.transpose(k, (0, 2, 1))), bias), 1.0 / np.sqrt(dh))
    weights = T.softmax(scores, axis=-1)
    if diag is not None:
        diag["weights"] = weights.data.copy()
    out = T.bmm(weights, v)
    return T.linear(_merge_heads(out, h), params.w_o)
