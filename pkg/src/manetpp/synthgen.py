"""Synthetic RGB/thermal sequence pairs with shared ground truth.

A textured target moves over a static textured background.  Scheduled
events perturb one or both modalities:

* ``illumination_flare`` brightens and washes out the RGB frame,
* ``thermal_crossover`` sets the target's thermal level to the background's,
* ``partial_occlusion`` covers part of the target in both modalities.

Sequences are stored as ``<seq>/visible/%06d.ppm``, ``<seq>/infrared/%06d.pgm``
and ``<seq>/groundtruth.txt``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .sampling import read_groundtruth, write_groundtruth

EVENTS = ("illumination_flare", "thermal_crossover", "partial_occlusion")


@dataclass
class SynthConfig:
    frame_size: tuple = (160, 160)       # (width, height)
    length: int = 60
    target_size_range: tuple = (20, 30)
    speed_range: tuple = (0.5, 1.5)      # px / frame
    jitter: float = 0.3                  # std of per-frame position noise, px
    rgb_noise: float = 0.02
    thermal_noise: float = 0.02
    events: list = field(default_factory=list)   # (start, stop, kind), stop exclusive
    margin: int = 12
    seed: int = 0

    def __post_init__(self):
        for start, stop, kind in self.events:
            if kind not in EVENTS:
                raise ValueError(f"unknown event {kind!r}; expected one of {EVENTS}")
            if not 0 <= start < stop:
                raise ValueError(f"bad event range {start}..{stop}")
        lo, hi = self.target_size_range
        if lo < 8 or hi + 2 * self.margin > min(self.frame_size):
            raise ValueError(f"target size range {self.target_size_range} does not fit the frame")


@dataclass
class SequencePair:
    rgb: np.ndarray        # (T, 3, H, W) uint8
    thermal: np.ndarray    # (T, 1, H, W) uint8
    gt: np.ndarray         # (T, 4) float64
    name: str = "seq"
    events: list = field(default_factory=list)
    ellipse: bool = False

    def __len__(self):
        return len(self.gt)

    def __eq__(self, other):
        return (isinstance(other, SequencePair) and np.array_equal(self.rgb, other.rgb)
                and np.array_equal(self.thermal, other.thermal) and np.array_equal(self.gt, other.gt))

    def active_events(self, t):
        return [k for a, b, k in self.events if a <= t < b]


def _smooth_noise(rng, shape, sigma, lo, hi):
    f = gaussian_filter(rng.random(shape), sigma)
    f = (f - f.min()) / max(f.max() - f.min(), 1e-12)
    return lo + (hi - lo) * f


def _target_mask(h, w, ellipse):
    if not ellipse:
        return np.ones((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy + 0.5 - h / 2) / (h / 2)) ** 2 + ((xx + 0.5 - w / 2) / (w / 2)) ** 2 <= 1.0


def _trajectory(cfg: SynthConfig, rng, w, h):
    fw, fh = cfg.frame_size
    m = cfg.margin
    lo_x, hi_x = m, fw - m - w
    lo_y, hi_y = m, fh - m - h
    pos = np.array([rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)])
    speed = rng.uniform(*cfg.speed_range) if cfg.speed_range[1] > 0 else 0.0
    ang = rng.uniform(0, 2 * np.pi)
    vel = speed * np.array([np.cos(ang), np.sin(ang)])
    out = []
    for t in range(cfg.length):
        if t:
            pos = pos + vel + cfg.jitter * rng.standard_normal(2)
            for k, (lo, hi) in enumerate(((lo_x, hi_x), (lo_y, hi_y))):
                if pos[k] < lo or pos[k] > hi:
                    vel[k] = -vel[k]
                    pos[k] = np.clip(pos[k], lo, hi)
        out.append(np.round(pos))
    return np.array(out)


def generate_sequence(cfg: SynthConfig, name: str = "seq") -> SequencePair:
    rng = np.random.default_rng(cfg.seed)
    fw, fh = cfg.frame_size
    w, h = (int(v) for v in rng.integers(cfg.target_size_range[0], cfg.target_size_range[1] + 1, 2))
    ellipse = bool(rng.random() < 0.5)
    mask = _target_mask(h, w, ellipse)

    bg_rgb = np.stack([_smooth_noise(rng, (fh, fw), 6, 0.15, 0.75) for _ in range(3)])
    bg_rgb += 0.08 * (_smooth_noise(rng, (fh, fw), 1, -1, 1))
    bg_th = _smooth_noise(rng, (fh, fw), 8, 0.25, 0.5) + 0.03 * _smooth_noise(rng, (fh, fw), 1, -1, 1)

    # target appearance: a saturated colour with a stripe pattern, a warm thermal blob
    base = rng.uniform(0.1, 0.9, 3)
    base[rng.integers(3)] = rng.choice([0.05, 0.95])
    yy, xx = np.mgrid[0:h, 0:w]
    period = rng.uniform(4, 8)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(0.7) + yy * np.sin(0.7)) / period)
    tex_rgb = np.clip(base[:, None, None] * (0.6 + 0.6 * stripes[None]), 0, 1)
    th_tex = 0.06 * (_smooth_noise(rng, (h, w), 1.5, -1, 1))
    th_level = rng.uniform(0.75, 0.9)

    traj = _trajectory(cfg, rng, w, h)
    glow = np.exp(-(((np.mgrid[0:fh, 0:fw][0] - fh * 0.3) ** 2 + (np.mgrid[0:fh, 0:fw][1] - fw * 0.6) ** 2)
                    / (2 * (0.35 * fw) ** 2)))

    rgb = np.empty((cfg.length, 3, fh, fw), dtype=np.uint8)
    thermal = np.empty((cfg.length, 1, fh, fw), dtype=np.uint8)
    gt = np.empty((cfg.length, 4), dtype=np.float64)
    active = lambda t, kind: any(a <= t < b and k == kind for a, b, k in cfg.events)  # noqa: E731
    for t, (x, y) in enumerate(traj):
        x, y = int(x), int(y)
        frame = bg_rgb.copy()
        th = bg_th.copy()
        region = (slice(y, y + h), slice(x, x + w))
        frame[:, region[0], region[1]] = np.where(mask, tex_rgb, frame[:, region[0], region[1]])
        if active(t, "thermal_crossover"):
            outside = np.ones((fh, fw), dtype=bool)
            outside[region][mask] = False
            level = bg_th[outside].mean()
            tex = th_tex - th_tex[mask].mean()
        else:
            level, tex = th_level, th_tex
        th[region] = np.where(mask, level + tex, th[region])
        if active(t, "partial_occlusion"):
            ow = int(round(0.45 * w))
            occ = (slice(y - 2, y + h + 2), slice(x - 2, x - 2 + ow))
            frame[:, occ[0], occ[1]] = 0.45
            th[occ] = bg_th[occ].mean()
        if active(t, "illumination_flare"):
            frame = frame * 1.7 + 0.45 * glow[None]
        frame = frame + cfg.rgb_noise * rng.standard_normal(frame.shape)
        th = th + cfg.thermal_noise * rng.standard_normal(th.shape)
        rgb[t] = np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8)
        thermal[t, 0] = np.round(np.clip(th, 0, 1) * 255).astype(np.uint8)
        gt[t] = (x, y, w, h)
    return SequencePair(rgb, thermal, gt, name, list(cfg.events), ellipse)


def target_mask_at(seq: SequencePair, t: int):
    """Boolean (H, W) mask of the target pixels in frame ``t``."""
    x, y, w, h = (int(v) for v in seq.gt[t])
    out = np.zeros(seq.thermal.shape[2:], dtype=bool)
    out[y : y + h, x : x + w] = _target_mask(h, w, seq.ellipse)
    return out


def default_corpus(n_train=5, n_test=2, length=60, seed=0):
    """Training sequences plus held-out test sequences with an illumination
    flare and a thermal crossover each."""
    train, test = [], []
    for i in range(n_train):
        events = [(20 + 5 * (i % 3), 30 + 5 * (i % 3), EVENTS[i % 3])]
        train.append(generate_sequence(SynthConfig(length=length, events=events, seed=seed * 1000 + i),
                                       f"train{i:02d}"))
    for i in range(n_test):
        events = [(15, 25, "illumination_flare"), (35, 45, "thermal_crossover")]
        test.append(generate_sequence(SynthConfig(length=length, events=events,
                                                  seed=seed * 1000 + 500 + i), f"test{i:02d}"))
    return train, test


# ---------------------------------------------------------------------------
# netpbm I/O


class NetpbmError(ValueError):
    pass


def write_pnm(path, image):
    """Write (3, H, W) uint8 as P6 or (1, H, W) / (H, W) as P5."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise TypeError("netpbm writer expects uint8")
    if img.ndim == 3 and img.shape[0] == 3:
        magic, data = b"P6", img.transpose(1, 2, 0)
    else:
        magic, data = b"P5", img.reshape(img.shape[-2:])
    h, w = data.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(data).tobytes())


def read_pnm(path):
    """Read a binary P5/P6 file with maxval 255; returns (C, H, W) uint8."""
    path = Path(path)
    raw = path.read_bytes()
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise NetpbmError(f"{path}: truncated header at byte {start}")
        tokens.append((raw[start:pos], start))
    magic, off = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"{path}: unsupported magic {magic!r} at byte {off}")
    try:
        w, h, maxval = (int(t) for t, _ in tokens[1:])
    except ValueError:
        bad = next((o for t, o in tokens[1:] if not t.isdigit()), tokens[1][1])
        raise NetpbmError(f"{path}: non-numeric header field at byte {bad}") from None
    if maxval != 255:
        raise NetpbmError(f"{path}: maxval {maxval} at byte {tokens[3][1]} not supported (need 255)")
    if w < 1 or h < 1:
        raise NetpbmError(f"{path}: bad image size {w}x{h} at byte {tokens[1][1]}")
    pos += 1  # single whitespace after maxval
    c = 3 if magic == b"P6" else 1
    need = w * h * c
    if len(raw) - pos != need:
        raise NetpbmError(f"{path}: pixel data at byte {pos} has {len(raw) - pos} bytes, expected {need}")
    data = np.frombuffer(raw, dtype=np.uint8, offset=pos).reshape(h, w, c)
    return np.ascontiguousarray(data.transpose(2, 0, 1))


def write_sequence(seq: SequencePair, directory):
    d = Path(directory)
    (d / "visible").mkdir(parents=True, exist_ok=True)
    (d / "infrared").mkdir(parents=True, exist_ok=True)
    for t in range(len(seq)):
        write_pnm(d / "visible" / f"{t + 1:06d}.ppm", seq.rgb[t])
        write_pnm(d / "infrared" / f"{t + 1:06d}.pgm", seq.thermal[t])
    write_groundtruth(d / "groundtruth.txt", seq.gt)
    if seq.events:
        (d / "events.txt").write_text("".join(f"{a},{b},{k}\n" for a, b, k in seq.events))


def read_sequence(directory) -> SequencePair:
    d = Path(directory)
    vis = sorted((d / "visible").glob("*.ppm"))
    inf = sorted((d / "infrared").glob("*.pgm"))
    if not vis:
        raise FileNotFoundError(f"{d}: no frames under visible/")
    if len(vis) != len(inf):
        raise ValueError(f"{d}: {len(vis)} visible frames but {len(inf)} infrared frames")
    rgb = np.stack([read_pnm(p) for p in vis])
    thermal = np.stack([read_pnm(p) for p in inf])
    if rgb.shape[1] != 3 or thermal.shape[1] != 1:
        raise ValueError(f"{d}: expected P6 visible and P5 infrared frames")
    gt = read_groundtruth(d / "groundtruth.txt", len(vis))
    events = []
    if (d / "events.txt").exists():
        for line in (d / "events.txt").read_text().splitlines():
            a, b, k = line.split(",")
            events.append((int(a), int(b), k))
    return SequencePair(rgb, thermal, gt, d.name, events)


def to_input(image_u8, dtype=np.float32):
    """uint8 (C, H, W) -> float in [-0.5, 0.5]; single-channel images are replicated to 3."""
    dtype = np.dtype(dtype)
    x = image_u8.astype(dtype) / dtype.type(255.0) - dtype.type(0.5)
    if x.shape[-3] == 1:
        x = np.repeat(x, 3, axis=-3)
    return x
