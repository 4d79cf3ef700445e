"""Multi-stage decoder: a single visual query refined by alternating
text-then-vision cross attention.

Each stage extracts a language summary conditioned on the current query,
uses it to select visual evidence (prototype features as keys, raw
projected features as values), then applies the residual/FFN update.  All
intermediate queries are returned so the loss can supervise every stage.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import attention as A
from . import tensor as T
from .tensor import Tensor


@dataclass
class DecoderLayerParams:
    mca_text: A.AttentionParams
    mca_vision: A.AttentionParams
    ln_t_g: Tensor
    ln_t_b: Tensor
    ln_v_g: Tensor
    ln_v_b: Tensor
    ln_r1_g: Tensor
    ln_r1_b: Tensor
    ln_r2_g: Tensor
    ln_r2_b: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        out.update(self.mca_text.tensors(f"{prefix}.mca_text"))
        out.update(self.mca_vision.tensors(f"{prefix}.mca_vision"))
        for name in ("ln_t_g", "ln_t_b", "ln_v_g", "ln_v_b", "ln_r1_g", "ln_r1_b",
                     "ln_r2_g", "ln_r2_b", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"):
            out[f"{prefix}.{name}"] = getattr(self, name)
        return out


def init_decoder_layer(c: int, heads: int, ffn_dim: int, rng: np.random.Generator) -> DecoderLayerParams:
    return DecoderLayerParams(
        mca_text=A.init_attention(c, heads, rng),
        mca_vision=A.init_attention(c, heads, rng),
        ln_t_g=T.param(np.ones(c)), ln_t_b=T.param(np.zeros(c)),
        ln_v_g=T.param(np.ones(c)), ln_v_b=T.param(np.zeros(c)),
        ln_r1_g=T.param(np.ones(c)), ln_r1_b=T.param(np.zeros(c)),
        ln_r2_g=T.param(np.ones(c)), ln_r2_b=T.param(np.zeros(c)),
        ffn_w1=T.param(T.xavier_uniform((c, ffn_dim), rng)),
        ffn_b1=T.param(np.zeros(ffn_dim)),
        ffn_w2=T.param(T.xavier_uniform((ffn_dim, c), rng)),
        ffn_b2=T.param(np.zeros(c)),
    )


def init_decoder(c: int, heads: int, ffn_dim: int, depth: int,
                 rng: np.random.Generator) -> list[DecoderLayerParams]:
    return [init_decoder_layer(c, heads, ffn_dim, rng) for _ in range(depth)]


def text_info(f_vq_prev: Tensor, f_l: Tensor, layer: DecoderLayerParams,
              diag: Optional[dict] = None) -> Tensor:
    """Normalized language summary conditioned on the current query; [B, 1, C]."""
    return T.layer_norm(A.mca(f_vq_prev, f_l, f_l, layer.mca_text, diag=diag),
                        layer.ln_t_g, layer.ln_t_b)


def visual_info(t_info: Tensor, f_q: Tensor, f_v_proj: Tensor, layer: DecoderLayerParams,
                diag: Optional[dict] = None) -> Tensor:
    """Normalized visual evidence: prototype features key the raw projected values."""
    return T.layer_norm(A.mca(t_info, f_q, f_v_proj, layer.mca_vision, diag=diag),
                        layer.ln_v_g, layer.ln_v_b)


def stage(f_vq_prev: Tensor, f_l: Tensor, f_q: Tensor, f_v_proj: Tensor,
          layer: DecoderLayerParams, diag: Optional[dict] = None) -> Tensor:
    t_diag = {} if diag is not None else None
    v_diag = {} if diag is not None else None
    t_info = text_info(f_vq_prev, f_l, layer, diag=t_diag)
    v_info = visual_info(t_info, f_q, f_v_proj, layer, diag=v_diag)
    f_vqt = T.layer_norm(T.add(f_vq_prev, v_info), layer.ln_r1_g, layer.ln_r1_b)
    ffn = T.linear(T.relu(T.linear(f_vqt, layer.ffn_w1, layer.ffn_b1)),
                   layer.ffn_w2, layer.ffn_b2)
    out = T.layer_norm(T.add(f_vqt, ffn), layer.ln_r2_g, layer.ln_r2_b)
    if diag is not None:
        diag["text_weights"] = t_diag["weights"]
        diag["vision_weights"] = v_diag["weights"]
    return out


def decode(f_l: Tensor, f_q: Tensor, f_v_proj: Tensor, layers: list[DecoderLayerParams],
           diag: Optional[list] = None) -> list[Tensor]:
    """Run every stage from the zero-initialized query; returns all stage outputs."""
    b = f_l.shape[0]
    c = f_l.shape[-1]
    f_vq = T.zeros((b, 1, c))
    outputs = []
    for layer in layers:
        stage_diag = {} if diag is not None else None
        f_vq = stage(f_vq, f_l, f_q, f_v_proj, layer, diag=stage_diag)
        outputs.append(f_vq)
        if diag is not None:
            diag.append(stage_diag)
    return outputs
