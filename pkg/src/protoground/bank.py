"""EMA-maintained prototype bank with multi-neighbor inheritance.

The bank holds a codebook E, running cluster sizes S, and running sums C,
all zero-initialized and updated by exponential moving averages outside the
differentiation tape.  A token inherits the softmax-weighted combination of
its k nearest prototypes; the straight-through estimator forwards the
quantized value while the backward treats quantization as identity, so the
input receives the upstream gradient unchanged and the codebook receives
none.  The temperature does receive gradient through the forward weights.

Order of operations per training step follows the update procedure
exactly: weights come from pre-update distances, the EMA update runs, and
inheritance reads the refreshed codebook.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError, ShapeError
from .tensor import Tensor


@dataclass
class PrototypeBank:
    embed: np.ndarray  # E [n_p, C1]
    sizes: np.ndarray  # S [n_p]
    sums: np.ndarray  # C [n_p, C1]
    k: int = 5
    alpha_decay: float = 0.4
    epsilon: float = 1e-5
    step: int = 0

    @classmethod
    def create(cls, n_p: int, c1: int, k: int = 5, alpha_decay: float = 0.4,
               epsilon: float = 1e-5) -> "PrototypeBank":
        if k > n_p:
            raise ConfigError(f"k={k} exceeds bank size {n_p}")
        return cls(embed=np.zeros((n_p, c1)), sizes=np.zeros(n_p), sums=np.zeros((n_p, c1)), k=k,
                   alpha_decay=alpha_decay, epsilon=epsilon)

    @property
    def n_p(self) -> int:
        return self.embed.shape[0]

    def state_arrays(self, prefix: str = "bank") -> dict[str, np.ndarray]:
        return {f"{prefix}.embed": self.embed, f"{prefix}.sizes": self.sizes,
                f"{prefix}.sums": self.sums, f"{prefix}.step": np.array([float(self.step)])}


def pairwise_sq_dist(x: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance matrix; tiny negatives clamp to 0."""
    if x.shape[1] != e.shape[1]:
        raise ShapeError(f"pairwise_sq_dist: widths {x.shape} vs {e.shape}")
    d = (x * x).sum(axis=1, keepdims=True) + (e * e).sum(axis=1)[None, :] - 2.0 * (x @ e.T)
    return np.maximum(d, 0.0)


def topk_neighbors(d: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest distances per row; ties break to the lowest index."""
    if k > d.shape[1]:
        raise ConfigError(f"k={k} exceeds {d.shape[1]} prototypes")
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def neighbor_weights(d: np.ndarray, neighbors: np.ndarray, tau) -> Tensor:
    """Row-stochastic weights, nonzero only on the neighbor columns.

    ``tau`` may be a float or a positive scalar Tensor; in the latter case
    gradient flows into it through the softmax.
    """
    d_nb = T.constant(np.take_along_axis(d, neighbors, axis=1))
    if isinstance(tau, Tensor):
        inv = T.power(tau, -1.0)
        logits = T.hadamard(T.scale(d_nb, -1.0), T.broadcast_to(T.reshape(inv, (1, 1)), d_nb.shape))
    else:
        logits = T.scale(d_nb, -1.0 / float(tau))
    w_nb = T.softmax(logits, axis=-1)
    return T.scatter_along_last(w_nb, neighbors, d.shape[1])


def ema_update(bank: PrototypeBank, x: np.ndarray, w: np.ndarray) -> None:
    """One training-step statistics update (not differentiated).

    s_j aggregates assignment mass, c_j the weighted feature sums; both are
    EMA-blended, sizes are Laplace-smoothed preserving their total, and the
    codebook becomes C / S.
    """
    a = bank.alpha_decay
    s = w.sum(axis=0)
    c = w.T @ x
    if not (np.isfinite(s).all() and np.isfinite(c).all()):
        raise NumericError("prototype statistics became non-finite; aborting the step")
    bank.sizes = (1.0 - a) * bank.sizes + a * s
    bank.sums = (1.0 - a) * bank.sums + a * c
    total = bank.sizes.sum()
    bank.sizes = (bank.sizes + bank.epsilon) / (total + bank.n_p * bank.epsilon) * total
    bank.embed = bank.sums / bank.sizes[:, None]
    bank.step += 1


def inherit(x: Tensor, embed: np.ndarray, w: Tensor) -> Tensor:
    """Weighted prototype combination with a straight-through backward.

    Forward value is w @ E; backward delivers the upstream gradient to x
    with an identity Jacobian, nothing to E, and lets the weight path carry
    gradient only to the temperature (distances are built from detached x).
    """
    q_pre = T.matmul(w, T.constant(embed))
    return T.add(q_pre, T.sub(x, T.stop_gradient(x)))


@dataclass
class GateFusionParams:
    up_w: Tensor  # [C, C1] pointwise conv C -> C1
    up_b: Tensor
    gate_w: Tensor  # [2*C1, 2]
    gate_b: Tensor
    out_w: Tensor  # [C1, C] pointwise conv C1 -> C
    out_b: Tensor
    tau: Tensor  # [1], learnable temperature, clamped positive after steps

    def tensors(self, prefix: str = "bank") -> dict[str, Tensor]:
        return {f"{prefix}.up_w": self.up_w, f"{prefix}.up_b": self.up_b,
                f"{prefix}.gate_w": self.gate_w, f"{prefix}.gate_b": self.gate_b,
                f"{prefix}.out_w": self.out_w, f"{prefix}.out_b": self.out_b,
                f"{prefix}.tau": self.tau}


def init_gate_fusion(c: int, c1: int, rng: np.random.Generator) -> GateFusionParams:
    return GateFusionParams(
        up_w=T.param(T.xavier_uniform((c, c1), rng)), up_b=T.param(np.zeros(c1)),
        gate_w=T.param(T.xavier_uniform((2 * c1, 2), rng)), gate_b=T.param(np.zeros(2)),
        out_w=T.param(T.xavier_uniform((c1, c), rng)), out_b=T.param(np.zeros(c)),
        tau=T.param([1.0]),
    )


def gate_fuse(f_in: Tensor, f_qt: Tensor, params: GateFusionParams, diag=None) -> Tensor:
    """Blend the raw and quantized streams through a 2-channel softmax gate.

    Channel 0 of the gate weights the quantized stream (E_s), channel 1 the
    raw stream (I_s); the two sum to 1 at every site.  All convolutions are
    pointwise, so they act as per-token linear maps on [B, N, C] layouts.
    """
    if f_in.shape != f_qt.shape:
        raise ShapeError(f"gate_fuse: stream shapes {f_in.shape} vs {f_qt.shape}")
    t_feat = T.concat([f_in, f_qt], axis=-1)
    t_s = T.softmax(T.linear(t_feat, params.gate_w, params.gate_b), axis=-1)
    e_s = T.narrow(t_s, t_s.ndim - 1, 0, 1)
    i_s = T.narrow(t_s, t_s.ndim - 1, 1, 1)
    if diag is not None:
        diag["gate_e"] = e_s.data.copy()
        diag["gate_i"] = i_s.data.copy()
    mixed = T.add(T.hadamard(f_in, T.broadcast_to(i_s, f_in.shape)),
                  T.hadamard(f_qt, T.broadcast_to(e_s, f_qt.shape)))
    return T.linear(mixed, params.out_w, params.out_b)


def bank_forward(bank: PrototypeBank, f_disv: Tensor, params: GateFusionParams,
                 train: bool, diag=None) -> Tensor:
    """f_disv [B, N, C] -> fused prototype features [B, N, C]."""
    b, n, _ = f_disv.shape
    f_in = T.linear(f_disv, params.up_w, params.up_b)  # [B, N, C1]
    c1 = f_in.shape[-1]
    x = T.reshape(f_in, (b * n, c1))
    d = pairwise_sq_dist(x.data, bank.embed)
    neighbors = topk_neighbors(d, bank.k)
    w = neighbor_weights(d, neighbors, params.tau)
    if train:
        ema_update(bank, x.data, w.data)
    q = inherit(x, bank.embed, w)
    f_qt = T.reshape(q, (b, n, c1))
    if diag is not None:
        diag["neighbors"] = neighbors.reshape(b, n, -1).copy()
    return gate_fuse(f_in, f_qt, params, diag=diag)
