"""MK-MMD, the hierarchical divergence loss and the classification losses.

Loss functions return a float; their ``*_grad`` companions return
``(value, gradients...)`` for backpropagation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class KernelFamily:
    """Gaussian kernels k_u(p, q) = exp(-||p - q||^2 / sigma_u) mixed with weights beta_u."""

    sigmas: np.ndarray
    betas: np.ndarray

    def __post_init__(self):
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.sigmas.shape != self.betas.shape or self.sigmas.ndim != 1:
            raise ValueError("sigmas and betas must be 1-D arrays of equal length")
        if np.any(self.betas < 0):
            raise ValueError("kernel weights must be non-negative")
        if np.any(self.sigmas <= 0):
            raise ValueError("bandwidths must be positive")

    @property
    def d(self) -> int:
        return len(self.sigmas)

    @property
    def budget(self) -> float:
        return float(self.betas.sum())

    @classmethod
    def default(cls, d: int = 11, budget: float = 1.0):
        """sigma_u = 2^(u-6), u = 1..d, uniform weights summing to ``budget``."""
        u = np.arange(1, d + 1)
        return cls(2.0 ** (u - 6), np.full(d, budget / d))


def _sqdist(x, y):
    d = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2 * x @ y.T
    return np.maximum(d, 0)


def gaussian_kernel_matrix(x, y, family: KernelFamily):
    x = np.atleast_2d(x)
    y = np.atleast_2d(y)
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"feature dims differ: {x.shape[1]} vs {y.shape[1]}")
    d2 = _sqdist(x, y)
    return sum(b * np.exp(-d2 / s) for s, b in zip(family.sigmas, family.betas))


def _pair_kernel(p, q, family):
    """Row-wise k(p_i, q_i) and its gradient factor dk/d(p_i) = g_i * (p_i - q_i)."""
    d2 = ((p - q) ** 2).sum(axis=1)
    k = np.zeros_like(d2)
    g = np.zeros_like(d2)
    for s, b in zip(family.sigmas, family.betas):
        e = b * np.exp(-d2 / s)
        k += e
        g += -2.0 / s * e
    return k, g


def mkmmd_unbiased_grad(x, y, family: KernelFamily):
    """Linear-time unbiased MK-MMD over consecutive sample pairs.

    psi = 2/b * sum_i [k(x1,x2) + k(y1,y2) - k(x1,y2) - k(y1,x2)] with
    (x1, x2) = rows (2i, 2i+1).  Returns (psi, dx, dy).
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError(f"mkmmd needs equal (b, D) inputs, got {x.shape} and {y.shape}")
    b = len(x)
    if b % 2 or b < 2:
        raise ValueError(f"mkmmd batch size must be even, got {b}")
    x1, x2, y1, y2 = x[0::2], x[1::2], y[0::2], y[1::2]
    kxx, gxx = _pair_kernel(x1, x2, family)
    kyy, gyy = _pair_kernel(y1, y2, family)
    kxy, gxy = _pair_kernel(x1, y2, family)
    kyx, gyx = _pair_kernel(y1, x2, family)
    c = 2.0 / b
    psi = c * float((kxx + kyy - kxy - kyx).sum())
    dx = np.zeros_like(x)
    dy = np.zeros_like(y)
    # d k(p, q)/dp = g (p - q);  d/dq = -g (p - q)
    dx[0::2] = c * (gxx[:, None] * (x1 - x2) - gxy[:, None] * (x1 - y2))
    dx[1::2] = c * (-gxx[:, None] * (x1 - x2) + gyx[:, None] * (y1 - x2))
    dy[0::2] = c * (gyy[:, None] * (y1 - y2) - gyx[:, None] * (y1 - x2))
    dy[1::2] = c * (-gyy[:, None] * (y1 - y2) + gxy[:, None] * (x1 - y2))
    return psi, dx, dy


def mkmmd_unbiased(x, y, family: KernelFamily) -> float:
    return mkmmd_unbiased_grad(x, y, family)[0]


def mmd_biased_oracle(x, y, family: KernelFamily) -> float:
    """Full pairwise V-statistic: mean K_xx + mean K_yy - 2 mean K_xy."""
    return float(gaussian_kernel_matrix(x, x, family).mean()
                 + gaussian_kernel_matrix(y, y, family).mean()
                 - 2 * gaussian_kernel_matrix(x, y, family).mean())


def spatial_mean(fmap):
    """Global average pool (b, C, h, w) -> (b, C)."""
    return fmap.mean(axis=(2, 3))


def spatial_mean_backward(d, shape):
    return np.broadcast_to(d[:, :, None, None] / (shape[2] * shape[3]), shape).copy()


def hd_loss_grad(ga_feats, ma_feats, family: KernelFamily):
    """sum_j psi_j(GA_rgb, GA_t) - sum_j psi_j(MA_rgb, MA_t).

    ``ga_feats`` and ``ma_feats`` are three ``(rgb, thermal)`` pairs of
    (b, C) arrays (already spatially pooled).  Returns
    (loss, ga_sum, ma_sum, d_ga, d_ma) with the gradients in the same
    nested layout as the inputs.
    """
    if len(ga_feats) != 3 or len(ma_feats) != 3:
        raise ValueError("hd_loss needs exactly three layers of GA and MA features")
    ga_sum = ma_sum = 0.0
    d_ga, d_ma = [], []
    for (gr, gt), (mr, mt) in zip(ga_feats, ma_feats):
        v, dr, dt = mkmmd_unbiased_grad(gr, gt, family)
        ga_sum += v
        d_ga.append((dr, dt))
        v, dr, dt = mkmmd_unbiased_grad(mr, mt, family)
        ma_sum += v
        d_ma.append((-dr, -dt))
    return ga_sum - ma_sum, ga_sum, ma_sum, d_ga, d_ma


def hd_loss(ga_feats, ma_feats, family: KernelFamily) -> float:
    return hd_loss_grad(ga_feats, ma_feats, family)[0]


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def bce_loss_grad(logits, labels):
    """Softmax cross-entropy over (negative, positive) logits; labels are 0/1."""
    labels = np.asarray(labels).astype(np.int64)
    n = len(labels)
    if n == 0:
        return 0.0, np.zeros_like(logits)
    ls = _log_softmax(logits)
    loss = -float(ls[np.arange(n), labels].mean())
    d = np.exp(ls)
    d[np.arange(n), labels] -= 1
    return loss, d / n


def bce_loss(logits, labels) -> float:
    return bce_loss_grad(logits, labels)[0]


@dataclass
class LossConfig:
    lambda1: float = 0.5
    lambda2: float = 0.5
    nu1: float = 0.1
    nu2_steps: tuple = ((0, 1.0), (200, 0.1), (500, 0.01))
    phase: str = "offline"

    @classmethod
    def offline(cls):
        return cls(0.5, 0.5, phase="offline")

    @classmethod
    def online(cls):
        return cls(1.0, 1.0, phase="online")

    def nu2(self, iteration: int) -> float:
        val = self.nu2_steps[0][1]
        for start, v in self.nu2_steps:
            if iteration >= start:
                val = v
        return val


def cls_loss_grad(s_fusion, s_r, s_t, labels, cfg: LossConfig):
    """L_fusion + lambda1 L_R + lambda2 L_T.  Returns (loss, parts, dS_fusion, dS_R, dS_T)."""
    lf, df = bce_loss_grad(s_fusion, labels)
    lr, dr = bce_loss_grad(s_r, labels)
    lt, dt = bce_loss_grad(s_t, labels)
    loss = lf + cfg.lambda1 * lr + cfg.lambda2 * lt
    return loss, (lf, lr, lt), df, cfg.lambda1 * dr, cfg.lambda2 * dt


def cls_loss(s_fusion, s_r, s_t, labels, cfg: LossConfig) -> float:
    return cls_loss_grad(s_fusion, s_r, s_t, labels, cfg)[0]


def instance_embedding_loss_grad(pos_scores, current_domain: int):
    """Cross-domain softmax on the positive-class logits of positive samples.

    ``pos_scores`` is (n_pos, D).  Returns (loss, d_pos_scores).
    """
    pos_scores = np.atleast_2d(pos_scores)
    n, d = pos_scores.shape
    if d < 2 or n == 0:
        if d < 2:
            logger.debug("instance embedding loss skipped: only %d domain(s)", d)
        return 0.0, np.zeros_like(pos_scores)
    ls = _log_softmax(pos_scores)
    loss = -float(ls[:, current_domain].mean())
    g = np.exp(ls)
    g[:, current_domain] -= 1
    return loss, g / n


def instance_embedding_loss(pos_scores, current_domain: int) -> float:
    return instance_embedding_loss_grad(pos_scores, current_domain)[0]


def total_loss(l_cls: float, l_inst: float, l_hd: float, cfg: LossConfig, iteration: int) -> float:
    """Offline objective L_cls + nu1 L_inst + nu2(iter) L_hd; online phase uses L_cls alone."""
    if cfg.phase == "online":
        return l_cls
    return l_cls + cfg.nu1 * l_inst + cfg.nu2(iteration) * l_hd
