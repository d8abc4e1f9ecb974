"""Offline one-stage training of the whole network on multiple sequences.

Each iteration draws a minibatch (8 frames, 32 positives and 96 negatives
per frame) from one training sequence, cycling through the sequences, and
takes one SGD step on L_cls + nu1 * L_inst + nu2(iter) * L_hd.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import adapters as A
from . import layers as L
from .losses import (KernelFamily, LossConfig, cls_loss_grad, hd_loss_grad,
                     instance_embedding_loss_grad, spatial_mean, spatial_mean_backward, total_loss)
from .sampling import POSITIVE, build_minibatch
from .synthgen import to_input

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration, record):
        super().__init__(f"non-finite loss at iteration {iteration}: {record}")
        self.iteration = iteration
        self.record = record


@dataclass
class TrainConfig:
    iterations: int = 1000
    lr: float = 1e-4
    weight_decay: float = 5e-4
    momentum: float = 0.9
    n_frames: int = 8
    n_pos: int = 32
    n_neg: int = 96
    crop_size: int = 107
    crop_jitter: int = 8
    probe_every: int = 50
    probe_frames: int = 16
    seed: int = 0


def _images(frames, attr, dtype):
    return to_input(np.stack([getattr(f, attr) for f in frames]), dtype)


def _hd_features(taps):
    return [(spatial_mean(g), spatial_mean(m)) for g, m in taps]


def train_step(model: A.Manet, batch, it: int, losses: LossConfig, family: KernelFamily,
               rng, lr: float, weight_decay: float, update: bool = True, optimizer=None):
    """Forward, backward and (optionally) one SGD step.  Returns the log record."""
    frames = batch.frames
    dt = model.dtype
    branch = batch.domain
    f_r, taps_r, c_r = A.backbone_forward(model, _images(frames, "rgb", dt), "rgb", True, rng)
    f_t, taps_t, c_t = A.backbone_forward(model, _images(frames, "thermal", dt), "thermal", True, rng)

    # hierarchical divergence on spatially averaged per-layer features
    ga = [(gr, gt) for (gr, _), (gt, _) in zip(_hd_features(taps_r), _hd_features(taps_t))]
    ma = [(mr, mt) for (_, mr), (_, mt) in zip(_hd_features(taps_r), _hd_features(taps_t))]
    l_hd, psi_ga, psi_ma, d_ga, d_ma = hd_loss_grad(ga, ma, family)
    nu2 = losses.nu2(it)

    n_f = len(frames)
    c3 = f_r.shape[1]
    # both modalities share boxes, so pool them together along channels
    pooled, pcache = A.pooled_features_batch(model, np.concatenate([f_r, f_t], axis=1),
                                             np.stack([fb.samples.boxes for fb in frames]))
    pooled = pooled.reshape(n_f, -1, 9, 2 * c3)
    d_pooled = np.zeros_like(pooled)
    l_cls = l_inst = 0.0
    parts = np.zeros(3)
    for i, fb in enumerate(frames):
        labels = fb.samples.labels
        n = len(labels)
        pr = pooled[i, :, :, :c3].reshape(n, -1)
        pt = pooled[i, :, :, c3:].reshape(n, -1)
        s_f, s_r, s_t, _, cache = A.instance_forward(
            model.ia, pr, pt, branch, training=True, rng=rng,
            dropout_rate=model.cfg.dropout_rate, all_branches=True)
        lc, p3, df, dr, dtt = cls_loss_grad(s_f, s_r, s_t, labels, losses)
        pos = labels == POSITIVE
        li, dpos = instance_embedding_loss_grad(cache["all"][pos, :, 1], branch)
        d_all = np.zeros_like(cache["all"])
        d_all[pos, :, 1] = losses.nu1 * dpos
        l_cls += lc / n_f
        l_inst += li / n_f
        parts += np.asarray(p3) / n_f
        if update:
            dpr, dpt = A.instance_backward(model.ia, cache, df / n_f, dr / n_f, dtt / n_f, d_all / n_f)
            d_pooled[i, :, :, :c3] = dpr.reshape(n, 9, c3)
            d_pooled[i, :, :, c3:] = dpt.reshape(n, 9, c3)

    total = total_loss(l_cls, l_inst, l_hd, losses, it)
    record = {"iter": it, "domain": branch, "total": total, "l_cls": l_cls, "l_inst": l_inst,
              "l_hd": l_hd, "psi_ga": psi_ga, "psi_ma": psi_ma, "nu2": nu2,
              "l_fusion": parts[0], "l_rgb": parts[1], "l_thermal": parts[2]}
    if not all(math.isfinite(v) for v in (total, l_cls, l_inst, l_hd)):
        raise TrainingDiverged(it, record)
    if update:
        d_maps = A.pooled_features_batch_backward(d_pooled.reshape(n_f, -1, 18 * c3), pcache)
        d_fr, d_ft = d_maps[:, :c3], d_maps[:, c3:]
        for mod, dfeat, taps_c, d_idx in (("rgb", d_fr, c_r, 0), ("thermal", d_ft, c_t, 1)):
            d_taps = []
            for l in range(3):
                g_shape = taps_r[l][0].shape
                d_taps.append((spatial_mean_backward(nu2 * d_ga[l][d_idx], g_shape).astype(dt),
                               spatial_mean_backward(nu2 * d_ma[l][d_idx], g_shape).astype(dt)))
            A.backbone_backward(model, np.ascontiguousarray(dfeat), mod, taps_c, d_taps,
                                need_input_grad=False)
        if optimizer is None:
            L.sgd_step(model.all_params(), lr, weight_decay)
        else:
            optimizer.step(model.all_params(), lr, weight_decay)
    return record


def probe_batch(sequences, n_frames, crop_size, seed=12345):
    """Fixed target-centred crops from the training sequences for divergence probes."""
    rng = np.random.default_rng(seed)
    rgb, thermal = [], []
    for k in range(n_frames):
        seq = sequences[k % len(sequences)]
        t = int(rng.integers(len(seq)))
        _, fh, fw = seq.rgb[t].shape
        x, y, w, h = seq.gt[t]
        ox = int(np.clip(round(x + w / 2 - crop_size / 2), 0, fw - crop_size))
        oy = int(np.clip(round(y + h / 2 - crop_size / 2), 0, fh - crop_size))
        rgb.append(seq.rgb[t][:, oy : oy + crop_size, ox : ox + crop_size])
        thermal.append(seq.thermal[t][:, oy : oy + crop_size, ox : ox + crop_size])
    return np.stack(rgb), np.stack(thermal)


def probe_divergence(model: A.Manet, probe, family: KernelFamily):
    """(sum_j psi_GA, sum_j psi_MA) on the fixed probe crops, inference mode."""
    rgb, thermal = probe
    _, taps_r, _ = A.backbone_forward(model, to_input(rgb, model.dtype), "rgb", False)
    _, taps_t, _ = A.backbone_forward(model, to_input(thermal, model.dtype), "thermal", False)
    fr, ft = _hd_features(taps_r), _hd_features(taps_t)
    _, psi_ga, psi_ma, _, _ = hd_loss_grad([(a[0], b[0]) for a, b in zip(fr, ft)],
                                           [(a[1], b[1]) for a, b in zip(fr, ft)], family)
    return psi_ga, psi_ma


def train(sequences, net_cfg: A.NetConfig | None = None, cfg: TrainConfig | None = None,
          losses: LossConfig | None = None, family: KernelFamily | None = None, callback=None):
    """Train a fresh network with one instance branch per sequence.

    Returns (model, log, probes) where ``log`` has one record per iteration
    and ``probes`` maps iteration -> (psi_GA, psi_MA) on fixed probe crops.
    """
    cfg = cfg or TrainConfig()
    losses = losses or LossConfig.offline()
    family = family or KernelFamily.default()
    if not sequences:
        raise ValueError("training needs at least one sequence")
    model = A.Manet(net_cfg, n_branches=len(sequences), seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    probe = probe_batch(sequences, cfg.probe_frames, cfg.crop_size)
    log, probes = [], {}
    opt = L.Momentum(cfg.momentum)
    for it in range(cfg.iterations + 1):
        if cfg.probe_every and it % cfg.probe_every == 0:
            probes[it] = probe_divergence(model, probe, family)
        if it == cfg.iterations:
            break
        k = it % len(sequences)
        batch = build_minibatch(sequences[k], rng, domain=k, n_frames=cfg.n_frames, n_pos=cfg.n_pos,
                                n_neg=cfg.n_neg, crop_size=cfg.crop_size, crop_jitter=cfg.crop_jitter)
        record = train_step(model, batch, it, losses, family, rng, cfg.lr, cfg.weight_decay,
                            optimizer=opt)
        log.append(record)
        if callback is not None:
            callback(record)
        if it % 50 == 0:
            logger.info("iter %d  L_cls %.4f  L_inst %.4f  L_hd %.4f  psi_GA %.4f  psi_MA %.4f",
                        it, record["l_cls"], record["l_inst"], record["l_hd"],
                        record["psi_ga"], record["psi_ma"])
    return model, log, probes
