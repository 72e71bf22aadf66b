"""Cross-entropy, KL and cosine-similarity distillation losses.

Probability-level losses take a teacher distribution ``p`` (constant) and a
student distribution ``q`` (a tape tensor, usually ``softmax(z / T)``).
Batched inputs of shape (N, C) are averaged over the batch.

The cosine-similarity loss is ``1 - p.q`` on the softmax outputs themselves,
with no further L2 normalization; this is the form whose logit gradient is
``-(p_i q_i - q_i (p.q))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

EPS = 1e-12
LOSS_KINDS = ("cs", "kl")


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 3.0
    kind: str = "cs"
    lam: float = 0.5

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")


def _const(x, dtype=None) -> np.ndarray:
    if isinstance(x, Tensor):
        if x.requires_grad:
            raise AssertionError("teacher distribution/logits must be detached")
        return x.data
    return np.asarray(x, dtype=dtype)


def _batch_mean(per_sample: Tensor) -> Tensor:
    return per_sample if per_sample.data.ndim == 0 else T.mean(per_sample)


def ce_loss(y, q) -> Tensor:
    """``-log q_y`` with ``q_y`` clamped at 1e-12."""
    q = T._as_tensor(q)
    if q.data.ndim == 1:
        q = T.reshape(q, (1, -1))
    logq = T.log(T.pick(q, np.atleast_1d(np.asarray(y))), EPS)
    return T.mul(T.mean(logq), -1.0)


def cross_entropy_logits(z: Tensor, y) -> Tensor:
    """Cross-entropy of ``softmax(z)`` against labels, via log-softmax."""
    y = np.atleast_1d(np.asarray(y))
    z = T.reshape(z, (1, -1)) if z.data.ndim == 1 else z
    return T.mul(T.mean(T.pick(T.log_softmax(z, 1.0), y)), -1.0)


def kl_loss(p, q) -> Tensor:
    """``sum_i p_i log(p_i / q_i)``, teacher ``p`` constant."""
    q = T._as_tensor(q)
    p = _const(p, q.dtype).astype(q.dtype)
    if p.shape != q.shape:
        raise T.ShapeError(f"kl_loss: p {p.shape} vs q {q.shape}")
    plogp = np.where(p > 0, p * np.log(np.maximum(p, EPS)), 0.0).sum(axis=-1)
    cross = T.sum_(T.mul(T.log(q, EPS), p), axis=-1)
    per = T.add(T.mul(cross, -1.0), T.Tensor(plogp.astype(q.dtype)))
    return _batch_mean(per)


def cs_loss(p, q) -> Tensor:
    """``1 - p.q``, teacher ``p`` constant."""
    q = T._as_tensor(q)
    p = _const(p, q.dtype).astype(q.dtype)
    if p.shape != q.shape:
        raise T.ShapeError(f"cs_loss: p {p.shape} vs q {q.shape}")
    dot = T.sum_(T.mul(q, p), axis=-1)
    return _batch_mean(T.add(T.mul(dot, -1.0), 1.0))


def kl_grad(p, q, temperature: float = 1.0) -> np.ndarray:
    """Closed-form d KL / d z for ``q = softmax(z / T)``: ``(q - p) / T``."""
    p, q = np.asarray(p, np.float64), np.asarray(q, np.float64)
    return (q - p) / temperature


def cs_grad(p, q, temperature: float = 1.0) -> np.ndarray:
    """Closed-form d CS / d z for ``q = softmax(z / T)``.

    ``-sum_j p_j (q_j delta_ij - q_j q_i) = -(p_i q_i - q_i (p.q))``, divided
    by T. Evaluated as ``-q_i sum_j q_j (p_i - p_j)`` (equal because ``q`` sums
    to one), which is exactly zero for a uniform teacher.
    """
    p, q = np.asarray(p, np.float64), np.asarray(q, np.float64)
    p, q = np.broadcast_arrays(p, q)
    diff = p[..., :, None] - p[..., None, :]
    return -q * (diff * q[..., None, :]).sum(axis=-1) / temperature


def _distill(kind: str, p, q) -> Tensor:
    return cs_loss(p, q) if kind == "cs" else kl_loss(p, q)


def speq_terms(y, z_tpp: Tensor, z_spp, cfg: DistillConfig) -> tuple[Tensor, Tensor]:
    """(cross-entropy, T^2-scaled distillation) terms of the self-distillation loss."""
    z_spp = _const(z_spp)
    t = cfg.temperature
    ce = cross_entropy_logits(z_tpp, y)
    p = T.softmax_t(z_spp, t).astype(z_tpp.dtype)
    q = T.softmax(z_tpp, t)
    return ce, T.mul(_distill(cfg.kind, p, q), t * t)


def speq_loss(y, z_tpp: Tensor, z_spp, cfg: DistillConfig) -> Tensor:
    ce, dist = speq_terms(y, z_tpp, z_spp, cfg)
    return T.add(ce, dist)


def teacher_term(z_tpp: Tensor, z_teacher, cfg: DistillConfig) -> Tensor:
    """KL from an external teacher, scaled by T^2."""
    t = cfg.temperature
    p = T.softmax_t(_const(z_teacher), t).astype(z_tpp.dtype)
    return T.mul(kl_loss(p, T.softmax(z_tpp, t)), t * t)


def speq_kd_loss(y, z_tpp: Tensor, z_spp, z_teacher, cfg: DistillConfig) -> Tensor:
    """``lam * L_SPEQ + (1 - lam) * L_T``."""
    own = speq_loss(y, z_tpp, z_spp, cfg)
    ext = teacher_term(z_tpp, z_teacher, cfg)
    return T.add(T.mul(own, cfg.lam), T.mul(ext, 1.0 - cfg.lam))


def gradient_grid(kind: str, n: int = 51, n_classes: int = 10, temperature: float = 1.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ground-truth-logit gradient over a grid of (student q_i, teacher p_i).

    Both axes share the same values (``n`` evenly spaced points plus
    ``1/n_classes``); the remaining mass is spread evenly over the other
    classes. Returns ``(q_values, p_values, grad)`` with ``grad[a, b]`` taken
    at ``p_i = p_values[a]``, ``q_i = q_values[b]``.
    """
    uniform = 1.0 / n_classes
    vals = np.union1d(np.linspace(0.0, 1.0, n), [uniform])
    fn = cs_grad if kind == "cs" else kl_grad
    dists = np.empty((len(vals), n_classes))
    dists[:, 0] = vals
    dists[:, 1:] = ((1 - vals) / (n_classes - 1))[:, None]
    dists[vals == uniform] = uniform
    grid = np.stack([fn(dists[a][None, :], dists, temperature)[:, 0] for a in range(len(vals))])
    return vals, vals.copy(), grid
