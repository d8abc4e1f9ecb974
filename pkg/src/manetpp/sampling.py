"""Candidate boxes, IoU labelling, minibatch assembly and bounding-box regression.

Boxes are (x, y, w, h) in pixels with (x, y) the top-left corner.  Bulk
operations use (n, 4) float arrays; :class:`BBox` is the scalar form.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

POSITIVE, NEGATIVE = 1, 0
# (positive IoU >, negative IoU <) per phase
IOU_THRESHOLDS = {"offline": (0.7, 0.5), "online-init": (0.7, 0.5), "online-update": (0.7, 0.3)}


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive: {self}")

    @property
    def center(self):
        return self.x + self.w / 2, self.y + self.h / 2

    def as_array(self):
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, a):
        return cls(*(float(v) for v in np.asarray(a).reshape(4)))


def _as_boxes(b):
    if isinstance(b, BBox):
        return b.as_array()[None]
    return np.asarray(b, dtype=np.float64).reshape(-1, 4)


def overlap_ratio(boxes, ref):
    """IoU of each row of ``boxes`` with ``ref`` (array or BBox)."""
    a = _as_boxes(boxes)
    r = _as_boxes(ref)
    ix = np.maximum(0.0, np.minimum(a[:, 0] + a[:, 2], r[:, 0] + r[:, 2]) - np.maximum(a[:, 0], r[:, 0]))
    iy = np.maximum(0.0, np.minimum(a[:, 1] + a[:, 3], r[:, 1] + r[:, 3]) - np.maximum(a[:, 1], r[:, 1]))
    inter = ix * iy
    union = a[:, 2] * a[:, 3] + r[:, 2] * r[:, 3] - inter
    return inter / union


def iou(a, b) -> float:
    return float(overlap_ratio(a, b)[0])


def centers(boxes):
    b = _as_boxes(boxes)
    return b[:, :2] + b[:, 2:] / 2


def clamp_boxes(boxes, frame_size, min_size=4.0):
    """Keep boxes fully inside a (width, height) frame with extents >= ``min_size``."""
    b = _as_boxes(boxes).copy()
    fw, fh = frame_size
    b[:, 2] = np.clip(b[:, 2], min_size, fw)
    b[:, 3] = np.clip(b[:, 3], min_size, fh)
    b[:, 0] = np.clip(b[:, 0], 0, fw - b[:, 2])
    b[:, 1] = np.clip(b[:, 1], 0, fh - b[:, 3])
    return b


def gaussian_candidates(center, n, trans_sigma=0.6, scale_sigma=1.0, rng=None, frame_size=None,
                        scale_base=1.05, min_size=4.0):
    """``n`` boxes around ``center``: centre shift ~ N(0, trans_sigma * mean(w, h)),
    size scaled by ``scale_base ** r`` with r ~ N(0, scale_sigma) clipped to [-2, 2]."""
    if n < 1:
        raise ValueError("need at least one candidate")
    c = _as_boxes(center)[0]
    rng = np.random.default_rng() if rng is None else rng
    z = rng.standard_normal((n, 3))
    size = (c[2] + c[3]) / 2
    r = np.clip(scale_sigma * z[:, 2], -2, 2)
    s = scale_base ** r
    w, h = c[2] * s, c[3] * s
    cx = c[0] + c[2] / 2 + trans_sigma * size * z[:, 0]
    cy = c[1] + c[3] / 2 + trans_sigma * size * z[:, 1]
    out = np.stack([cx - w / 2, cy - h / 2, w, h], axis=1)
    if frame_size is not None:
        out = clamp_boxes(out, frame_size, min_size)
    return out


def uniform_candidates(n, frame_size, ref, rng, scale_range=(0.7, 1.4), min_size=4.0):
    """Boxes of roughly the reference size placed uniformly over the frame."""
    ref = _as_boxes(ref)[0]
    fw, fh = frame_size
    s = rng.uniform(*scale_range, size=n)
    w, h = ref[2] * s, ref[3] * s
    x = rng.uniform(0, 1, n) * np.maximum(fw - w, 0)
    y = rng.uniform(0, 1, n) * np.maximum(fh - h, 0)
    return clamp_boxes(np.stack([x, y, w, h], axis=1), frame_size, min_size)


@dataclass
class SampleSet:
    boxes: np.ndarray
    labels: np.ndarray
    frame_id: int = 0
    features: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def subset(self, mask):
        return SampleSet(self.boxes[mask], self.labels[mask], self.frame_id,
                         {k: v[mask] for k, v in self.features.items()})

    @property
    def n_pos(self):
        return int((self.labels == POSITIVE).sum())

    @property
    def n_neg(self):
        return int((self.labels == NEGATIVE).sum())


def label_samples(candidates, gt, phase="offline", frame_id=0) -> SampleSet:
    """Positive iff IoU > 0.7; negative iff IoU < 0.5 (offline) or < 0.3 (online update).
    Candidates in between are dropped."""
    pos_t, neg_t = IOU_THRESHOLDS[phase]
    boxes = _as_boxes(candidates)
    ov = overlap_ratio(boxes, gt)
    pos = ov > pos_t
    neg = ov < neg_t
    keep = pos | neg
    return SampleSet(boxes[keep], np.where(pos[keep], POSITIVE, NEGATIVE).astype(np.int64), frame_id)


def draw_labeled(gt, n_pos, n_neg, frame_size, rng, phase="offline", max_attempts=10_000):
    """Rejection-sample exactly ``n_pos`` positives and ``n_neg`` negatives around ``gt``.

    Positives come from tight Gaussian jitter, negatives half from wide
    jitter and half from uniform placement.  Each class may use at most
    ``max_attempts`` draws.
    """
    pos_t, neg_t = IOU_THRESHOLDS[phase]
    pos, neg = [], []
    got_pos = got_neg = tried_pos = tried_neg = 0
    while got_pos < n_pos or got_neg < n_neg:
        if tried_pos >= max_attempts or tried_neg >= max_attempts:
            raise RuntimeError(f"could not reach {n_pos}/{n_neg} samples within {max_attempts} "
                               f"draws per class (have {got_pos}/{got_neg})")
        if got_pos < n_pos:
            k = min(max(64, 3 * (n_pos - got_pos)), max_attempts - tried_pos)
            cand = gaussian_candidates(gt, k, 0.1, 1.0, rng, frame_size, scale_base=1.2)
            cand = cand[overlap_ratio(cand, gt) > pos_t][: n_pos - got_pos]
            pos.append(cand)
            got_pos += len(cand)
            tried_pos += k
        if got_neg < n_neg:
            k = min(max(64, 2 * (n_neg - got_neg)), max_attempts - tried_neg)
            half = k // 2
            cand = np.concatenate([
                gaussian_candidates(gt, half, 1.0, 1.0, rng, frame_size, scale_base=1.3),
                uniform_candidates(k - half, frame_size, gt, rng)])
            cand = cand[overlap_ratio(cand, gt) < neg_t][: n_neg - got_neg]
            neg.append(cand)
            got_neg += len(cand)
            tried_neg += k
    boxes = np.concatenate(pos + neg)
    labels = np.r_[np.full(n_pos, POSITIVE), np.full(n_neg, NEGATIVE)].astype(np.int64)
    return boxes, labels


# ---------------------------------------------------------------------------
# minibatches


@dataclass
class FrameBatch:
    frame: int
    origin: tuple           # (x, y) of the crop inside the frame
    rgb: np.ndarray         # (3, S, S) uint8
    thermal: np.ndarray     # (1, S, S) uint8
    gt: np.ndarray          # (4,) in crop coordinates
    samples: SampleSet      # boxes in crop coordinates


@dataclass
class Minibatch:
    domain: int
    frames: list

    @property
    def counts(self):
        return (sum(f.samples.n_pos for f in self.frames), sum(f.samples.n_neg for f in self.frames))


def crop_window(image, origin, size):
    x, y = origin
    return image[:, y : y + size, x : x + size]


def build_minibatch(sequence, rng, domain=0, n_frames=8, n_pos=32, n_neg=96, crop_size=107,
                    crop_jitter=8) -> Minibatch:
    """8 random frames of one sequence with 32 positive and 96 negative boxes each.

    Each frame is cut to a ``crop_size`` square around the target (shifted
    by up to ``crop_jitter`` px) so the backbone runs on small inputs.
    """
    t = len(sequence.gt)
    if t < n_frames:
        raise ValueError(f"sequence has {t} frames, minibatch needs {n_frames}")
    _, fh, fw = sequence.rgb[0].shape
    if crop_size > min(fh, fw):
        raise ValueError(f"crop {crop_size} larger than frame {fw}x{fh}")
    idx = np.sort(rng.choice(t, n_frames, replace=False))
    frames = []
    for i in idx:
        gt = np.asarray(sequence.gt[i], dtype=np.float64)
        cx, cy = gt[0] + gt[2] / 2, gt[1] + gt[3] / 2
        jx, jy = rng.integers(-crop_jitter, crop_jitter + 1, size=2)
        ox = int(np.clip(round(cx - crop_size / 2) + jx, 0, fw - crop_size))
        oy = int(np.clip(round(cy - crop_size / 2) + jy, 0, fh - crop_size))
        local_gt = gt - np.array([ox, oy, 0, 0])
        boxes, labels = draw_labeled(local_gt, n_pos, n_neg, (crop_size, crop_size), rng)
        frames.append(FrameBatch(int(i), (ox, oy),
                                 crop_window(sequence.rgb[i], (ox, oy), crop_size),
                                 crop_window(sequence.thermal[i], (ox, oy), crop_size),
                                 local_gt, SampleSet(boxes, labels, int(i))))
    return Minibatch(domain, frames)


# ---------------------------------------------------------------------------
# bounding-box regression


def regression_targets(boxes, gt):
    """R-CNN offsets (dx, dy, dw, dh) that map each box onto ``gt``."""
    b = _as_boxes(boxes)
    g = _as_boxes(gt)
    bc, gc = centers(b), centers(g)
    return np.stack([(gc[:, 0] - bc[:, 0]) / b[:, 2], (gc[:, 1] - bc[:, 1]) / b[:, 3],
                     np.log(g[:, 2] / b[:, 2]), np.log(g[:, 3] / b[:, 3])], axis=1)


def apply_offsets(boxes, offsets):
    b = _as_boxes(boxes)
    c = centers(b)
    w = b[:, 2] * np.exp(offsets[:, 2])
    h = b[:, 3] * np.exp(offsets[:, 3])
    cx = c[:, 0] + offsets[:, 0] * b[:, 2]
    cy = c[:, 1] + offsets[:, 1] * b[:, 3]
    return np.stack([cx - w / 2, cy - h / 2, w, h], axis=1)


@dataclass
class RegressorModel:
    """Ridge regression from pooled features to box offsets, fitted once per sequence."""

    weights: np.ndarray | None = None    # (D, 4)
    intercept: np.ndarray | None = None  # (4,)
    mean: np.ndarray | None = None       # (D,) feature mean used for centring
    lam: float = 1000.0
    trained: bool = False

    def fit(self, features, boxes, gt):
        if self.trained:
            raise RuntimeError("bounding-box regressor is trained on the first frame only")
        x = np.asarray(features, dtype=np.float64)
        y = regression_targets(boxes, gt)
        if len(x) < 2:
            raise ValueError("bounding-box regression needs at least two samples")
        self.mean = x.mean(axis=0)
        xc = x - self.mean
        ym = y.mean(axis=0)
        lam = self.lam
        while True:
            # dual form: n x n system, cheaper than D x D for wide features
            gram = xc @ xc.T + lam * np.eye(len(xc))
            if np.isfinite(gram).all() and np.linalg.cond(gram) < 1e12:
                break
            lam *= 10
            logger.warning("bbox regressor: ill-conditioned design, raising ridge to %g", lam)
        self.weights = xc.T @ np.linalg.solve(gram, y - ym)
        self.intercept = ym
        self.lam = lam
        self.trained = True
        return self

    def predict(self, features):
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if not self.trained:
            return np.zeros((len(x), 4))
        return (x - self.mean) @ self.weights + self.intercept


def fit_bbox_regressor(features, boxes, gt, lam=1000.0) -> RegressorModel:
    return RegressorModel(lam=lam).fit(features, boxes, gt)


def refine_bbox(model: RegressorModel, box, features, frame_size=None):
    """Apply the predicted offsets to ``box``; result is clamped to the frame if given."""
    out = apply_offsets(_as_boxes(box), model.predict(features))
    if frame_size is not None:
        out = clamp_boxes(out, frame_size)
    return BBox.from_array(out[0]) if isinstance(box, BBox) else out[0]


# ---------------------------------------------------------------------------
# ground-truth files: one "x,y,w,h" line per frame


def write_groundtruth(path, boxes):
    lines = [",".join(repr(float(v)) for v in b) for b in _as_boxes(boxes)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_groundtruth(path, n_frames=None):
    path = Path(path)
    rows = []
    for i, line in enumerate(path.read_text().splitlines()):
        if not line.strip():
            raise ValueError(f"{path}: empty ground-truth line for frame {i}")
        parts = line.replace("\t", ",").split(",")
        if len(parts) != 4:
            raise ValueError(f"{path}: frame {i}: expected 'x,y,w,h', got {line!r}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as e:
            raise ValueError(f"{path}: frame {i}: {e}") from None
    if n_frames is not None and len(rows) != n_frames:
        raise ValueError(f"{path}: missing ground truth for frame {len(rows)} "
                         f"(have {len(rows)} lines, {n_frames} frames)")
    return np.array(rows, dtype=np.float64).reshape(-1, 4)
