"""Full grounding model: encoder -> discriminative encoding -> prototype
bank -> multi-stage decoding -> box head, with the ablation toggles wired
the same way the reported module on/off rows compose."""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import bank as BK
from . import decoder as D
from . import encoder as E
from . import head as H
from . import tensor as T
from . import vdfe as V
from .config import RunConfig
from .tensor import Tensor


@contextmanager
def _module(name: str):
    try:
        yield
    except Exception as e:
        if getattr(e, "_module_tagged", False):
            raise
        try:
            wrapped = type(e)(f"[{name}] {e}")
        except TypeError:
            raise
        wrapped._module_tagged = True
        raise wrapped from e


class GroundingModel:
    def __init__(self, cfg: RunConfig, vocab_size: int, seed: int | None = None):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng((cfg.seed if seed is None else seed, 101))
        n_patches = (cfg.image_size // cfg.patch) ** 2
        self.encoder = E.init_encoder(cfg.c0, vocab_size, cfg.patch, cfg.heads,
                                      cfg.text_depth, cfg.text_ffn_dim, rng,
                                      n_positions=n_patches, max_text_len=cfg.text_len)
        self.vdfe = V.init_vdfe(cfg.c0, cfg.c, cfg.heads, cfg.grid_side, rng)
        self.bank = BK.PrototypeBank.create(cfg.n_p, cfg.c1, cfg.k)
        self.gate = BK.init_gate_fusion(cfg.c, cfg.c1, rng)
        self.decoder_layers = D.init_decoder(cfg.c, cfg.heads, cfg.ffn_dim,
                                             cfg.effective_depth, rng)
        self.head = H.init_head(cfg.c, rng)

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.encoder.tensors("encoder"))
        out.update(self.vdfe.tensors("vdfe"))
        out.update(self.gate.tensors("bank"))
        for i, layer in enumerate(self.decoder_layers):
            out.update(layer.tensors(f"decoder{i}"))
        out.update(self.head.tensors("head"))
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def clamp_tau(self, floor: float = 1e-3):
        np.maximum(self.gate.tau.data, floor, out=self.gate.tau.data)

    def forward(self, images: np.ndarray, token_ids: np.ndarray, train: bool = False,
                diag: dict | None = None) -> list[Tensor]:
        """Batched pipeline pass; returns per-stage box predictions [B, 4]."""
        cfg = self.cfg
        b = images.shape[0]
        with _module("encoder"):
            # pixels arrive in [0, 1]; center to [-1, 1] so patch features
            # start at a healthy scale for attention logits
            grid = E.patch_embed(T.constant(images * 2.0 - 1.0), self.encoder)
            grid = E.interpolate_tokens(grid, cfg.tokens_target)
            text = E.text_encode(token_ids, grid, self.encoder)
        mask = np.ones((b, cfg.grid_side, cfg.grid_side))
        with _module("vdfe"):
            venc = V.vdfe_forward(grid.tokens, text.tokens, mask, self.vdfe,
                                  transform_mode=cfg.transform_mode,
                                  enabled=cfg.use_vdfe, diag=diag)
        with _module("prototype_bank"):
            if cfg.use_bank:
                f_q = BK.bank_forward(self.bank, venc.f_disv, self.gate, train=train, diag=diag)
            else:
                f_q = venc.f_disv
        with _module("decoder"):
            stage_diag = [] if diag is not None else None
            queries = D.decode(venc.f_l_proj, f_q, venc.f_v_proj, self.decoder_layers,
                               diag=stage_diag)
            if diag is not None:
                diag["stages"] = stage_diag
        with _module("head"):
            boxes = [H.predict_box(q, self.head) for q in queries]
        return boxes

    # --- persistence ------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.parameters().items()}
        out.update(self.bank.state_arrays("bank_state"))
        return out

    def load_state(self, arrays: dict[str, np.ndarray]):
        for name, p in self.parameters().items():
            p.data = arrays[name].copy()
        self.bank.embed = arrays["bank_state.embed"].copy()
        self.bank.sizes = arrays["bank_state.sizes"].copy()
        self.bank.sums = arrays["bank_state.sums"].copy()
        self.bank.step = int(arrays["bank_state.step"][0])
