"""Train a small network offline, then track a held-out synthetic sequence.

The defaults finish in a few minutes on one core.  ``--iterations 1000
--widths 24,64,128 --fc 128`` is the setting used by the end-to-end
acceptance check (about 10 minutes).

Run: python demos/02_train_and_track.py [--iterations N] [--widths a,b,c] [--fc N]
"""
import argparse
import time

import numpy as np

from manetpp import evaluation, synthgen, tracker, training
from manetpp.adapters import NetConfig

ap = argparse.ArgumentParser()
ap.add_argument("--iterations", type=int, default=200)
ap.add_argument("--widths", default="16,48,96")
ap.add_argument("--fc", type=int, default=96)
ap.add_argument("--lr", type=float, default=1e-3)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

train_seqs, test_seqs = synthgen.default_corpus()
print(f"{len(train_seqs)} training sequences, {len(test_seqs)} held out, "
      f"{len(train_seqs[0])} frames of {train_seqs[0].rgb.shape[-1]}x{train_seqs[0].rgb.shape[-2]}")
for s in test_seqs:
    print(f"  {s.name}: events {s.events}")

net = NetConfig(ga_channels=tuple(int(c) for c in args.widths.split(",")), fc_width=args.fc)
t0 = time.perf_counter()


def show(rec):
    if rec["iter"] % 50 == 0:
        print(f"iter {rec['iter']:4d}  L_cls {rec['l_cls']:.3f}  psi_GA {rec['psi_ga']:.3f}  "
              f"psi_MA {rec['psi_ma']:.3f}  nu2 {rec['nu2']}")


model, log, probes = training.train(
    train_seqs, net, training.TrainConfig(iterations=args.iterations, lr=args.lr, seed=args.seed),
    callback=show)
print(f"trained in {time.perf_counter() - t0:.0f}s")
print("fixed-probe divergence (GA, MA):",
      {k: (round(g, 3), round(m, 3)) for k, (g, m) in probes.items() if k % 100 == 0})

# the shared features should agree across modalities, the specific ones should not
no_ma = model.copy()
no_ma.zero_modality_adapters()
for s in test_seqs:
    boxes, scores, state = tracker.run_sequence(s, model)
    r = evaluation.evaluate(boxes, s.gt)
    r0 = evaluation.evaluate(tracker.run_sequence(s, no_ma)[0], s.gt)
    rs = evaluation.evaluate(tracker.static_baseline(s), s.gt)
    n_upd = sum(e["event"] == "update" for e in state.log)
    print(f"{s.name}: PR@5 {r.pr5:.3f}  PR@20 {r.pr20:.3f}  SR {r.sr:.3f}  mIoU {r.mean_iou:.3f}"
          f"  ({n_upd} online updates)")
    print(f"   static box  PR@5 {rs.pr5:.3f}  mIoU {rs.mean_iou:.3f}")
    print(f"   MA zeroed   PR@5 {r0.pr5:.3f}  mIoU {r0.mean_iou:.3f}")
    print("   score every 5th frame:", np.round(scores[::5], 2).tolist())
