"""Visual discriminative feature encoder.

Projects visual and text features to a shared width, scores each visual
token's language relevance by cosine similarity, remaps the score through a
blend of Gaussian and Laplacian bumps, modulates the visual stream with
language guidance, contextualizes it with position-biased attention, and
finally gates the normalized sum per token.

The blend weight lives in [0, 1] through a logistic reparameterization and
the two bump widths stay positive through softplus; only their initial
values are configured.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import attention as A
from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

TRANSFORM_MODES = ("gaussian", "laplacian", "blend-fixed", "blend-learnable")


@dataclass
class VDFEParams:
    proj_v_w: Tensor
    proj_v_b: Tensor
    proj_l_w: Tensor
    proj_l_b: Tensor
    mca1: A.AttentionParams
    mca2: A.AttentionParams
    sigma_raw: Tensor  # softplus -> sigma > 0, init 0.5
    b_raw: Tensor  # softplus -> b > 0, init 1.0
    lambda_raw: Tensor  # sigmoid -> lambda in [0,1], init 0.5
    alpha: Tensor  # [C, C]
    beta: Tensor  # [C, C]
    mharpe: A.AttentionParams
    rpe: A.RPETable
    ln_v_g: Tensor
    ln_v_b: Tensor
    ln_c_g: Tensor
    ln_c_b: Tensor

    def tensors(self, prefix: str = "vdfe") -> dict[str, Tensor]:
        out = {f"{prefix}.proj_v_w": self.proj_v_w, f"{prefix}.proj_v_b": self.proj_v_b,
               f"{prefix}.proj_l_w": self.proj_l_w, f"{prefix}.proj_l_b": self.proj_l_b,
               f"{prefix}.sigma_raw": self.sigma_raw, f"{prefix}.b_raw": self.b_raw,
               f"{prefix}.lambda_raw": self.lambda_raw,
               f"{prefix}.alpha": self.alpha, f"{prefix}.beta": self.beta,
               f"{prefix}.ln_v_g": self.ln_v_g, f"{prefix}.ln_v_b": self.ln_v_b,
               f"{prefix}.ln_c_g": self.ln_c_g, f"{prefix}.ln_c_b": self.ln_c_b}
        out.update(self.mca1.tensors(f"{prefix}.mca1"))
        out.update(self.mca2.tensors(f"{prefix}.mca2"))
        out.update(self.mharpe.tensors(f"{prefix}.mharpe"))
        out.update(self.rpe.tensors(f"{prefix}.rpe"))
        return out


def _softplus_inverse(y: float) -> float:
    return math.log(math.expm1(y))


def init_vdfe(c0: int, c: int, heads: int, max_extent: int, rng: np.random.Generator,
              sigma0: float = 0.5, b0: float = 1.0, lambda0: float = 0.5) -> VDFEParams:
    return VDFEParams(
        proj_v_w=T.param(T.xavier_uniform((c0, c), rng)),
        proj_v_b=T.param(np.zeros(c)),
        proj_l_w=T.param(T.xavier_uniform((c0, c), rng)),
        proj_l_b=T.param(np.zeros(c)),
        mca1=A.init_attention(c, heads, rng),
        mca2=A.init_attention(c, heads, rng),
        sigma_raw=T.param([_softplus_inverse(sigma0)]),
        b_raw=T.param([_softplus_inverse(b0)]),
        lambda_raw=T.param([math.log(lambda0 / (1.0 - lambda0)) if lambda0 not in (0.0, 1.0) else 0.0]),
        alpha=T.param(T.xavier_uniform((c, c), rng)),
        beta=T.param(T.xavier_uniform((c, c), rng)),
        mharpe=A.init_attention(c, heads, rng),
        rpe=A.init_rpe(c, max_extent, rng),
        ln_v_g=T.param(np.ones(c)), ln_v_b=T.param(np.zeros(c)),
        ln_c_g=T.param(np.ones(c)), ln_c_b=T.param(np.zeros(c)),
    )


def language_info(f_v_proj: Tensor, f_l_proj: Tensor, mca_params: A.AttentionParams,
                  diag: Optional[dict] = None) -> Tensor:
    """Per visual token summary of the language content relevant to it."""
    return A.mca(f_v_proj, f_l_proj, f_l_proj, mca_params, diag=diag)


def similarity_score(f_linfo: Tensor, f_v_proj: Tensor) -> Tensor:
    """Per-token cosine similarity in [-1, 1], with a 1e-12 norm floor."""

    def unit(x):
        norm = T.sqrt(T.sum_(T.hadamard(x, x), axis=-1, keepdims=True))
        norm = T.clamp_min(norm, 1e-12)
        return T.div(x, T.broadcast_to(norm, x.shape))

    return T.sum_(T.hadamard(unit(f_linfo), unit(f_v_proj)), axis=-1, keepdims=True)


def gaussian_transform(phi_sim: Tensor, sigma: Tensor) -> Tensor:
    """exp(-(1 - phi^2) / (2 sigma^2)); equals 1 iff |phi| == 1."""
    inv = T.power(T.scale(T.hadamard(sigma, sigma), 2.0), -1.0)
    arg = T.hadamard(T.add_const(T.hadamard(phi_sim, phi_sim), -1.0),
                     T.broadcast_to(T.reshape(inv, (1,) * phi_sim.ndim), phi_sim.shape))
    return T.exp(arg)


def laplacian_transform(phi_sim: Tensor, b: Tensor) -> Tensor:
    """exp(-|1 - phi| / b); equals 1 iff phi == 1, monotone on [-1, 1]."""
    inv = T.power(b, -1.0)
    arg = T.scale(T.hadamard(T.abs_(T.add_const(T.scale(phi_sim, -1.0), 1.0)),
                             T.broadcast_to(T.reshape(inv, (1,) * phi_sim.ndim), phi_sim.shape)), -1.0)
    return T.exp(arg)


def blend(phi_g: Tensor, phi_l: Tensor, lam: Tensor) -> Tensor:
    """Convex combination lam * phi_g + (1 - lam) * phi_l."""
    lam_b = T.broadcast_to(T.reshape(lam, (1,) * phi_g.ndim), phi_g.shape)
    return T.add(T.hadamard(lam_b, phi_g),
                 T.hadamard(T.add_const(T.scale(lam_b, -1.0), 1.0), phi_l))


def modulate(f_lcinfo: Tensor, f_v_proj: Tensor, alpha: Tensor, beta: Tensor) -> Tensor:
    """(f_lcinfo @ alpha) * f_v + f_lcinfo @ beta, feature-axis linear maps."""
    return T.add(T.hadamard(T.linear(f_lcinfo, alpha), f_v_proj), T.linear(f_lcinfo, beta))


def contextualize(f_mv: Tensor, f_v_proj: Tensor, image_mask: np.ndarray,
                  params: A.AttentionParams, rpe: A.RPETable, diag: Optional[dict] = None) -> Tensor:
    """Position-biased attention with query = key = modulated stream, value = raw stream."""
    return A.mharpe(f_mv, f_mv, f_v_proj, image_mask, params, rpe, diag=diag)


def discriminative_features(f_v_proj: Tensor, f_lcv: Tensor, phi_v: Tensor,
                            params: VDFEParams) -> Tensor:
    """(Norm(f_v) + Norm(f_lcv)) gated per token by phi_v."""
    normed = T.add(T.layer_norm(f_v_proj, params.ln_v_g, params.ln_v_b),
                   T.layer_norm(f_lcv, params.ln_c_g, params.ln_c_b))
    return T.hadamard(normed, T.broadcast_to(phi_v, normed.shape))


@dataclass
class VDFEOutput:
    f_v_proj: Tensor  # [B, N, C]
    f_l_proj: Tensor  # [B, L, C]
    f_disv: Tensor  # [B, N, C]
    combined: Tensor  # [B, N, 2C], raw projection concatenated with f_disv
    phi_v: Optional[Tensor]  # [B, N, 1], None when the module is bypassed


def vdfe_forward(f_v: Tensor, f_l: Tensor, image_mask: np.ndarray, params: VDFEParams,
                 transform_mode: str = "blend-learnable", enabled: bool = True,
                 diag: Optional[dict] = None) -> VDFEOutput:
    """Full encoder pass; ``enabled=False`` keeps only the width projections."""
    if transform_mode not in TRANSFORM_MODES:
        raise ConfigError(f"transform_mode {transform_mode!r} not one of {TRANSFORM_MODES}")
    f_v_proj = T.linear(f_v, params.proj_v_w, params.proj_v_b)
    f_l_proj = T.linear(f_l, params.proj_l_w, params.proj_l_b)
    if not enabled:
        return VDFEOutput(f_v_proj=f_v_proj, f_l_proj=f_l_proj, f_disv=f_v_proj,
                          combined=T.concat([f_v_proj, f_v_proj], axis=-1), phi_v=None)

    f_linfo = language_info(f_v_proj, f_l_proj, params.mca1)
    phi_sim = similarity_score(f_linfo, f_v_proj)
    # Transform ablations skip the unused branch entirely so its parameters
    # stay out of the graph (their gradients remain exactly zero).
    if transform_mode == "gaussian":
        phi_v = gaussian_transform(phi_sim, T.softplus(params.sigma_raw))
    elif transform_mode == "laplacian":
        phi_v = laplacian_transform(phi_sim, T.softplus(params.b_raw))
    else:
        phi_g = gaussian_transform(phi_sim, T.softplus(params.sigma_raw))
        phi_l = laplacian_transform(phi_sim, T.softplus(params.b_raw))
        if transform_mode == "blend-fixed":
            lam = T.constant([0.5])
        else:
            lam = T.sigmoid(params.lambda_raw)
        phi_v = blend(phi_g, phi_l, lam)

    f_lcinfo = language_info(f_v_proj, f_l_proj, params.mca2)
    f_mv = modulate(f_lcinfo, f_v_proj, params.alpha, params.beta)
    f_lcv = contextualize(f_mv, f_v_proj, image_mask, params.mharpe, params.rpe, diag=diag)
    f_disv = discriminative_features(f_v_proj, f_lcv, phi_v, params)
    if diag is not None:
        diag["phi_v"] = phi_v.data.copy()
        diag["phi_sim"] = phi_sim.data.copy()
    return VDFEOutput(f_v_proj=f_v_proj, f_l_proj=f_l_proj, f_disv=f_disv,
                      combined=T.concat([f_v_proj, f_disv], axis=-1), phi_v=phi_v)
