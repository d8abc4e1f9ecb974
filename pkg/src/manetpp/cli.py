"""Command-line entry point: ``manetpp <command> [--config FILE] [--key value ...] --out DIR``.

Commands: synth, train, track, eval, gradcheck, dump-features.
Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, checks, config, evaluation, synthgen, tracker, training
from .adapters import MODALITIES, backbone_forward
from .sampling import read_groundtruth

logger = logging.getLogger("manetpp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
COMMANDS = ("synth", "train", "track", "eval", "gradcheck", "dump-features")
# test-only negative control: comma-separated gradcheck case names whose
# analytic gradient is sign-flipped before comparison
CORRUPT_ENV = "MANETPP_GRADCHECK_CORRUPT"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class CheckFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="manetpp", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key = value file; command-line flags override it")
    p.add_argument("--out", required=True, help="directory receiving every artifact of the run")
    for key, spec in config.KEYS.items():
        flags = dict.fromkeys(("--" + key.replace("_", "-"), "--" + key))
        p.add_argument(*flags, dest=key, default=None, metavar="V", help=spec.help)
    return p


# ---------------------------------------------------------------------------
# helpers


def _require(cfg, key):
    if not cfg[key]:
        raise UsageError(f"--{key.replace('_', '-')} is required for this command")
    return cfg[key]


def _load_sequence(path):
    try:
        return synthgen.read_sequence(path)
    except (OSError, ValueError) as e:
        raise DataError(str(e)) from None


def _load_checkpoint(path):
    try:
        return checkpoint.load(path)[0]
    except (OSError, ValueError) as e:
        raise DataError(f"{path}: {e}") from None


def _sequence_dirs(root):
    root = Path(root)
    if (root / "groundtruth.txt").exists():
        return [root]
    dirs = sorted(d for d in root.iterdir() if (d / "groundtruth.txt").exists()) if root.is_dir() else []
    if not dirs:
        raise DataError(f"{root}: no sequence directories (with groundtruth.txt) found")
    return dirs


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg, out: Path):
    train, test = synthgen.default_corpus(cfg["n_train"], cfg["n_test"], cfg["length"], cfg["seed"])
    for split, seqs in (("train", train), ("test", test)):
        for s in seqs:
            synthgen.write_sequence(s, out / split / s.name)
    print(f"wrote {len(train)} training and {len(test)} test sequences under {out}")


def cmd_train(cfg, out: Path):
    seqs = [_load_sequence(d) for d in _sequence_dirs(_require(cfg, "data"))]
    log_path = out / "train_log.csv"
    cols = ["iter", "domain", "total", "l_cls", "l_inst", "l_hd", "psi_ga", "psi_ma", "nu2",
            "l_fusion", "l_rgb", "l_thermal"]
    with open(log_path, "w") as fh:
        fh.write(",".join(cols) + "\n")

        def write(rec):
            fh.write(",".join(repr(float(rec[c])) if c not in ("iter", "domain") else str(rec[c])
                              for c in cols) + "\n")

        try:
            model, _, probes = training.train(seqs, config.net_config(cfg), config.train_config(cfg),
                                              config.loss_config(cfg), config.kernel_family(cfg),
                                              callback=write)
        except training.TrainingDiverged as e:
            (out / "divergence_dump.txt").write_text(
                "".join(f"{k} = {v}\n" for k, v in e.record.items()))
            raise CheckFailure(str(e)) from None
    with open(out / "probe_divergence.csv", "w") as fh:
        fh.write("iter,psi_ga,psi_ma\n")
        for it, (g, m) in sorted(probes.items()):
            fh.write(f"{it},{g!r},{m!r}\n")
    checkpoint.save(model, out / "model.ckpt", extra={"sequences": [s.name for s in seqs]})
    print(f"trained {len(seqs)} branches for {cfg['iterations']} iterations -> {out / 'model.ckpt'}")


def _draw_box(img, box, color):
    h, w = img.shape[1:]
    x0, y0, bw, bh = (int(round(v)) for v in box)
    x1, y1 = min(x0 + bw - 1, w - 1), min(y0 + bh - 1, h - 1)
    x0, y0 = max(x0, 0), max(y0, 0)
    c = np.asarray(color, dtype=np.uint8)[:, None]
    img[:, y0, x0 : x1 + 1] = c
    img[:, y1, x0 : x1 + 1] = c
    img[:, y0 : y1 + 1, x0] = c
    img[:, y0 : y1 + 1, x1] = c


def cmd_track(cfg, out: Path):
    model = _load_checkpoint(_require(cfg, "checkpoint"))
    seq = _load_sequence(_require(cfg, "data"))
    boxes, scores, _ = tracker.run_sequence(seq, model, config.update_config(cfg))
    tracker.write_trajectory(out / "trajectory.csv", boxes, scores)
    if cfg["overlay"]:
        odir = out / "overlay"
        odir.mkdir(exist_ok=True)
        for t, (b, g) in enumerate(zip(boxes, seq.gt), 1):
            img = seq.rgb[t - 1].copy()
            _draw_box(img, g, (0, 255, 0))      # ground truth green
            _draw_box(img, b, (255, 0, 0))      # result red
            synthgen.write_pnm(odir / f"{t:06d}.ppm", img)
    r = evaluation.evaluate(boxes, seq.gt)
    print(f"{seq.name}: {len(boxes)} frames, PR@20 {r.pr20:.3f}, SR {r.sr:.3f}")


def _read_gt(path):
    p = Path(path)
    if p.is_dir():
        p = p / "groundtruth.txt"
    try:
        return read_groundtruth(p)
    except (OSError, ValueError) as e:
        raise DataError(str(e)) from None


def cmd_eval(cfg, out: Path):
    try:
        boxes, _ = tracker.read_trajectory(_require(cfg, "trajectory"))
    except (OSError, ValueError) as e:
        raise DataError(str(e)) from None
    gt = _read_gt(_require(cfg, "groundtruth"))
    if len(gt) != len(boxes):
        raise DataError(f"length mismatch: {len(boxes)} trajectory rows vs {len(gt)} ground truths")
    report = evaluation.evaluate(boxes, gt)
    evaluation.write_report(report, out)
    line = report.summary()
    if cfg["groundtruth_thermal"]:
        gt_t = _read_gt(cfg["groundtruth_thermal"])
        if len(gt_t) != len(boxes):
            raise DataError("length mismatch between trajectory and thermal ground truth")
        mpr, msr = evaluation.max_metrics(boxes, gt, gt_t, 20.0)
        (out / "max_metrics.txt").write_text(f"MPR@20,MSR\n{mpr:.4f},{msr:.4f}\n")
    print("PR@5,PR@20,SR")
    print(line)


def cmd_gradcheck(cfg, out: Path):
    corrupt = tuple(s for s in os.environ.get(CORRUPT_ENV, "").split(",") if s)
    reports = checks.run_suite(seed=cfg["seed"], corrupt=corrupt)
    text = "\n".join(str(r) for r in reports)
    (out / "gradcheck.txt").write_text(text + "\n")
    print(text)
    failed = [r.name for r in reports if not r.passed]
    if failed:
        raise CheckFailure(f"gradient check failed: {', '.join(failed)}")


def feature_maps(model, rgb_u8, thermal_u8):
    """{(source, modality, layer): 2-D channel-averaged map} for GA and MA at layers 1-3."""
    maps = {}
    for m, img in zip(MODALITIES, (rgb_u8, thermal_u8)):
        _, taps, _ = backbone_forward(model, synthgen.to_input(img, model.dtype), m, False)
        for layer, (ga, ma) in enumerate(taps, 1):
            maps[("ga", m, layer)] = ga[0].mean(axis=0)
            maps[("ma", m, layer)] = ma[0].mean(axis=0)
    return maps


def to_u8(a):
    """Min-max normalise to 0..255; a constant map becomes all zeros."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi - lo <= 0:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.round((a - lo) / (hi - lo) * 255).astype(np.uint8)


def cmd_dump_features(cfg, out: Path):
    model = _load_checkpoint(_require(cfg, "checkpoint"))
    seq = _load_sequence(_require(cfg, "data"))
    t = cfg["frame"] - 1
    if not 0 <= t < len(seq):
        raise DataError(f"frame {cfg['frame']} outside 1..{len(seq)}")
    fdir = out / "features"
    fdir.mkdir(exist_ok=True)
    for (src, m, layer), a in feature_maps(model, seq.rgb[t], seq.thermal[t]).items():
        synthgen.write_pnm(fdir / f"{src}_{m}_layer{layer}.pgm", to_u8(a)[None])
    print(f"wrote {len(list(fdir.glob('*.pgm')))} feature maps to {fdir}")


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "track": cmd_track, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "dump-features": cmd_dump_features}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = {k: v for k, v in vars(args).items() if k in config.KEYS and v is not None}
        cfg = config.resolve(args.config, overrides)
    except (UsageError, config.ConfigError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"usage error: cannot read config: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=getattr(logging, str(cfg["log_level"]).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config.dump(cfg, args.command))
    try:
        HANDLERS[args.command](cfg, out)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except CheckFailure as e:
        print(f"check failed: {e}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
