"""Online tracking-by-detection with the instance adapter.

The backbone (GA and MA) is frozen after offline training; only the
instance adapter is fine-tuned on the first frame and then updated from
sample memories during tracking.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adapters as A
from . import layers as L
from .losses import LossConfig, cls_loss_grad
from .sampling import (NEGATIVE, POSITIVE, RegressorModel, SampleSet, draw_labeled,
                       gaussian_candidates, overlap_ratio, refine_bbox)
from .synthgen import to_input

logger = logging.getLogger(__name__)


@dataclass
class UpdateConfig:
    short_threshold: float = 0.0
    long_interval: int = 10
    init_iterations: int = 50
    init_lr_instance: float = 1e-3
    init_lr_other: float = 1e-4
    init_pos: int = 500
    init_neg: int = 5000
    update_iterations: int = 15
    update_lr_instance: float = 1e-3
    update_lr_other: float = 1e-4
    momentum: float = 0.9
    batch_pos: int = 32
    batch_neg: int = 96
    memory_pos: int = 50
    memory_neg: int = 200
    long_memory: int = 100
    short_memory: int = 20
    n_candidates: int = 256
    trans_sigma: float = 0.6
    scale_sigma: float = 1.0
    refine_gate: float = 0.5
    regression_samples: int = 1000
    regression_iou: float = 0.6
    ridge: float = 1000.0
    seed: int = 0


@dataclass
class TrackerState:
    model: A.Manet
    branch: int
    regressor: RegressorModel
    cfg: UpdateConfig
    frame_size: tuple
    long_memory: deque
    short_memory: deque
    box: np.ndarray
    rng: np.random.Generator
    optimizer: L.Momentum
    t: int = 0
    score: float = 1.0      # positive probability of the last result
    margin: float = 0.0     # positive-minus-negative logit of the last result
    log: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# features


def frame_features(model: A.Manet, rgb_u8, thermal_u8):
    """Fused layer-3 maps of both modalities, concatenated along channels: (1, 2C, h, w)."""
    fr, _, _ = A.backbone_forward(model, to_input(rgb_u8, model.dtype), "rgb", False)
    ft, _, _ = A.backbone_forward(model, to_input(thermal_u8, model.dtype), "thermal", False)
    return np.concatenate([fr, ft], axis=1)


def pool_boxes(model: A.Manet, fmaps, boxes, chunk=1024):
    """RoIAlign features of ``boxes`` on one frame: ({"rgb": (n, D), "thermal": (n, D)})."""
    c = fmaps.shape[1] // 2
    out = []
    for s in range(0, len(boxes), chunk):
        p, _ = A.pooled_features_batch(model, fmaps, np.asarray(boxes[s : s + chunk])[None])
        out.append(p[0].reshape(-1, 9, 2 * c))
    p = np.concatenate(out)
    n = len(p)
    return {"rgb": np.ascontiguousarray(p[:, :, :c]).reshape(n, -1),
            "thermal": np.ascontiguousarray(p[:, :, c:]).reshape(n, -1)}


def score_samples(model: A.Manet, branch, feats):
    """(positive probability, positive-minus-negative logit) per sample."""
    s, _, _, _, _ = A.instance_forward(model.ia, feats["rgb"], feats["thermal"], branch,
                                       training=False)
    p, _ = L.softmax2(s.astype(np.float64))
    return p[:, 1], s[:, 1].astype(np.float64) - s[:, 0]


# ---------------------------------------------------------------------------
# instance-adapter training


def train_instance_adapter(state: TrackerState, pos, neg, iterations, lr_instance, lr_other):
    """Mini-batch SGD on the current branch and shared IA layers with L_cls (online weights)."""
    model, cfg, rng = state.model, state.cfg, state.rng
    ia = model.ia
    losses = LossConfig.online()
    head = ia.instance[state.branch].params()
    other = ia.shared_params()
    n_pos, n_neg = len(pos["rgb"]), len(neg["rgb"])
    labels = np.r_[np.full(cfg.batch_pos, POSITIVE), np.full(cfg.batch_neg, NEGATIVE)]
    last = None
    for _ in range(iterations):
        ip = rng.choice(n_pos, cfg.batch_pos, replace=n_pos < cfg.batch_pos)
        ineg = rng.choice(n_neg, cfg.batch_neg, replace=n_neg < cfg.batch_neg)
        xr = np.concatenate([pos["rgb"][ip], neg["rgb"][ineg]])
        xt = np.concatenate([pos["thermal"][ip], neg["thermal"][ineg]])
        s_f, s_r, s_t, _, cache = A.instance_forward(ia, xr, xt, state.branch, training=True, rng=rng,
                                                     dropout_rate=model.cfg.dropout_rate)
        last, _, df, dr, dt = cls_loss_grad(s_f, s_r, s_t, labels, losses)
        A.instance_backward(ia, cache, df, dr, dt)
        state.optimizer.step(head, lr_instance)
        state.optimizer.step(other, lr_other)
    return last


def _memory_features(mem):
    pos = {m: [] for m in A.MODALITIES}
    neg = {m: [] for m in A.MODALITIES}
    for s in mem:
        for m in A.MODALITIES:
            pos[m].append(s.features[m][s.labels == POSITIVE])
            neg[m].append(s.features[m][s.labels == NEGATIVE])
    cat = {m: np.concatenate(v) for m, v in pos.items()}, {m: np.concatenate(v) for m, v in neg.items()}
    return cat


def _collect(state: TrackerState, fmaps, box, frame_id):
    """Memory samples around ``box``: positives IoU > 0.7, negatives IoU < 0.3."""
    cfg = state.cfg
    boxes, labels = draw_labeled(box, cfg.memory_pos, cfg.memory_neg, state.frame_size, state.rng,
                                 phase="online-update")
    s = SampleSet(boxes, labels, frame_id, pool_boxes(state.model, fmaps, boxes))
    state.long_memory.append(s)
    state.short_memory.append(s)


# ---------------------------------------------------------------------------
# the three tracker operations


def init_tracker(rgb_u8, thermal_u8, gt, weights: A.Manet, cfg: UpdateConfig | None = None) -> TrackerState:
    """First-frame initialisation: new instance branch, IA fine-tuning, bbox regressor."""
    cfg = cfg or UpdateConfig()
    gt = np.asarray(gt, dtype=np.float64).reshape(4)
    if not (gt[2] > 0 and gt[3] > 0):
        raise ValueError(f"invalid first-frame box {gt}")
    rng = np.random.default_rng(cfg.seed)
    model = weights.copy()
    branch = A.new_instance_head(model.ia, rng, model.cfg.init_std)
    frame_size = (rgb_u8.shape[-1], rgb_u8.shape[-2])
    state = TrackerState(model, branch, RegressorModel(lam=cfg.ridge), cfg, frame_size,
                         deque(maxlen=cfg.long_memory), deque(maxlen=cfg.short_memory), gt.copy(),
                         rng, L.Momentum(cfg.momentum))
    fmaps = frame_features(model, rgb_u8, thermal_u8)

    boxes, labels = draw_labeled(gt, cfg.init_pos, cfg.init_neg, frame_size, rng, phase="online-init")
    feats = pool_boxes(model, fmaps, boxes)
    pos = {m: f[labels == POSITIVE] for m, f in feats.items()}
    neg = {m: f[labels == NEGATIVE] for m, f in feats.items()}
    loss = train_instance_adapter(state, pos, neg, cfg.init_iterations, cfg.init_lr_instance,
                                  cfg.init_lr_other)
    state.log.append({"event": "init", "t": 0, "n_pos": int((labels == POSITIVE).sum()),
                      "n_neg": int((labels == NEGATIVE).sum()), "iterations": cfg.init_iterations,
                      "loss": loss})

    # bounding-box regressor on RGB features of boxes overlapping the target
    cand = gaussian_candidates(gt, 10 * cfg.regression_samples, 0.3, 1.0, rng, frame_size,
                               scale_base=1.3)
    cand = cand[overlap_ratio(cand, gt) > cfg.regression_iou][: cfg.regression_samples]
    if len(cand) < 2:
        raise RuntimeError("could not draw regression samples on the first frame")
    state.regressor.fit(pool_boxes(model, fmaps, cand)["rgb"], cand, gt)
    state.log.append({"event": "regressor_fit", "t": 0, "n": len(cand)})

    _collect(state, fmaps, gt, 0)
    p, margin = score_samples(model, branch, pool_boxes(model, fmaps, gt[None]))
    state.score, state.margin = float(p[0]), float(margin[0])
    return state


def select_candidate(scores) -> int:
    """Index of the highest score; ties go to the lowest index."""
    return int(np.argmax(scores))


def track_frame(state: TrackerState, rgb_u8, thermal_u8):
    """Score candidates around the last result; returns (box, positive probability)."""
    cfg = state.cfg
    state.t += 1
    model = state.model
    fmaps = frame_features(model, rgb_u8, thermal_u8)
    cand = gaussian_candidates(state.box, cfg.n_candidates, cfg.trans_sigma, cfg.scale_sigma,
                               state.rng, state.frame_size)
    feats = pool_boxes(model, fmaps, cand)
    prob, margin = score_samples(model, state.branch, feats)
    i = select_candidate(margin)
    box = cand[i]
    state.score, state.margin = float(prob[i]), float(margin[i])
    refined = state.score > cfg.refine_gate
    if refined:
        box = refine_bbox(state.regressor, box, feats["rgb"][i : i + 1], state.frame_size)
    state.log.append({"event": "track", "t": state.t, "score": state.score, "margin": state.margin,
                      "refined": bool(refined)})
    state.box = np.asarray(box, dtype=np.float64)
    if state.margin > 0:
        _collect(state, fmaps, state.box, state.t)
    return state.box.copy(), state.score


def maybe_update(state: TrackerState, cfg: UpdateConfig | None = None):
    """Short-term update when the last margin is negative, long-term every ``long_interval`` frames."""
    cfg = cfg or state.cfg
    done = []
    kinds = []
    if state.margin < cfg.short_threshold:
        kinds.append(("short", state.short_memory))
    if state.t % cfg.long_interval == 0:
        kinds.append(("long", state.long_memory))
    for kind, mem in kinds:
        if not mem:
            logger.info("frame %d: %s-term memory empty, update skipped", state.t, kind)
            continue
        pos, neg = _memory_features(mem)
        if len(pos["rgb"]) == 0 or len(neg["rgb"]) == 0:
            logger.info("frame %d: %s-term memory lacks a class, update skipped", state.t, kind)
            continue
        loss = train_instance_adapter(state, pos, neg, cfg.update_iterations, cfg.update_lr_instance,
                                      cfg.update_lr_other)
        state.log.append({"event": "update", "kind": kind, "t": state.t, "loss": loss})
        done.append(kind)
    return done


def run_sequence(seq, weights: A.Manet, cfg: UpdateConfig | None = None, callback=None):
    """Track a whole sequence; returns (boxes (T, 4), scores (T,), state)."""
    state = init_tracker(seq.rgb[0], seq.thermal[0], seq.gt[0], weights, cfg)
    boxes = [np.asarray(seq.gt[0], dtype=np.float64)]
    scores = [state.score]
    for t in range(1, len(seq)):
        box, score = track_frame(state, seq.rgb[t], seq.thermal[t])
        maybe_update(state)
        boxes.append(box)
        scores.append(score)
        if callback is not None:
            callback(t, box, score)
    return np.array(boxes), np.array(scores), state


def static_baseline(seq):
    """First-frame box repeated for every frame."""
    return np.repeat(np.asarray(seq.gt[0], dtype=np.float64)[None], len(seq), axis=0)


def write_trajectory(path, boxes, scores):
    """CSV lines "frame_id,x,y,w,h,score" with 1-based frame ids (matching image names)."""
    lines = ["frame_id,x,y,w,h,score"]
    for i, (b, s) in enumerate(zip(boxes, scores), 1):
        lines.append(f"{i},{b[0]:.4f},{b[1]:.4f},{b[2]:.4f},{b[3]:.4f},{s:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path):
    rows = Path(path).read_text().splitlines()
    if not rows or not rows[0].startswith("frame_id"):
        raise ValueError(f"{path}: missing trajectory header")
    data = np.array([[float(v) for v in r.split(",")] for r in rows[1:] if r.strip()])
    data = data.reshape(-1, 6)
    return data[:, 1:5], data[:, 5]
