"""AdamW with decoupled weight decay and a step-decay learning rate."""

from __future__ import annotations

import logging

import numpy as np

from .tensor import Tensor

logger = logging.getLogger(__name__)


class AdamW:
    """Standard AdamW; steps with non-finite gradients are skipped and counted."""

    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.skipped = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> bool:
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                self.skipped += 1
                logger.warning("skipping optimizer step %d: non-finite gradient in %s",
                               self.t + 1, name)
                return False
            grads[name] = g
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                 + self.weight_decay * p.data)
        return True

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self, prefix: str = "optim") -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([float(self.t)])}
        for name in self.params:
            out[f"{prefix}.m.{name}"] = self.m[name]
            out[f"{prefix}.v.{name}"] = self.v[name]
        return out

    def load_state(self, arrays: dict[str, np.ndarray], prefix: str = "optim"):
        self.t = int(arrays[f"{prefix}.t"][0])
        for name in self.params:
            self.m[name] = arrays[f"{prefix}.m.{name}"].copy()
            self.v[name] = arrays[f"{prefix}.v.{name}"].copy()


def lr_at_epoch(base_lr: float, epoch: int, decay_epoch: int) -> float:
    """Base rate until the decay epoch, then one-tenth of it."""
    return base_lr if epoch < decay_epoch else base_lr / 10.0
