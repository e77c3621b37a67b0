#!/usr/bin/env python3
"""Fit the bundled toy segmenter weights on synthetic shapes and save them.

Plain gradient descent on summed cross-entropy over a handful of
moving-shapes frames; the closed-form score/weight gradients keep this
dependency-free.  Run from the repo root:

    python3 tools/make_toy_weights.py
"""

import sys
from pathlib import Path

import numpy as np
from scipy.signal import correlate2d

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from stac.synth import moving_shapes_sequence
from stac.toyseg import KERNEL, ToySegmenter

OUT = Path(__file__).resolve().parents[1] / "src" / "stac" / "data" / "toy_segmenter.npz"
SEED = 7
CLASSES = 3
FRAMES = 6
ITERS = 250
LR = 1.5e-4
# confidence calibration: scaling scores down leaves predictions unchanged
# but keeps softmax away from saturation, like a temperature-calibrated DNN
TEMPERATURE = 4.0


def full_planes(frame):
    y = frame.y.astype(np.float64) / 255.0
    up = lambda p: np.repeat(np.repeat(p, 2, 0), 2, 1)[: y.shape[0], : y.shape[1]]
    return [y, up(frame.u.astype(np.float64)) / 255.0,
            up(frame.v.astype(np.float64)) / 255.0]


def main():
    frames, labels = moving_shapes_sequence(FRAMES, 96, 64, seed=3)
    planes = [full_planes(f) for f in frames]
    idx = [l.classes.astype(np.int64) for l in labels]

    rng = np.random.default_rng(SEED)
    kernels = rng.normal(0.0, 0.3, size=(CLASSES, 3, KERNEL, KERNEL))
    bias = np.zeros(CLASSES)

    for it in range(ITERS):
        dk = np.zeros_like(kernels)
        db = np.zeros_like(bias)
        total_loss = 0.0
        correct = 0
        count = 0
        for ps, ix in zip(planes, idx):
            h, w = ps[0].shape
            scores = np.empty((CLASSES, h, w))
            for k in range(CLASSES):
                acc = np.full((h, w), bias[k])
                for p in range(3):
                    acc += correlate2d(ps[p], kernels[k, p], mode="same",
                                       boundary="fill")
                scores[k] = acc
            z = scores - scores.max(axis=0, keepdims=True)
            e = np.exp(z)
            probs = e / e.sum(axis=0, keepdims=True)
            picked = probs[ix, np.arange(h)[:, None], np.arange(w)[None, :]]
            total_loss += float(-np.log(np.maximum(picked, 1e-300)).sum())
            correct += int((scores.argmax(axis=0) == ix).sum())
            count += h * w
            dscore = probs.copy()
            dscore[ix, np.arange(h)[:, None], np.arange(w)[None, :]] -= 1.0
            for k in range(CLASSES):
                db[k] += dscore[k].sum()
                for p in range(3):
                    xp = np.pad(ps[p], KERNEL // 2)
                    dk[k, p] += correlate2d(xp, dscore[k], mode="valid")
        kernels -= LR * dk
        bias -= LR * db
        if it % 25 == 0 or it == ITERS - 1:
            print(f"iter {it:4d}  loss {total_loss:12.1f}  "
                  f"acc {correct / count:.4f}")

    kernels /= TEMPERATURE
    bias /= TEMPERATURE
    OUT.parent.mkdir(parents=True, exist_ok=True)
    np.savez(OUT, kernels=kernels, bias=bias)
    print(f"saved {OUT}")

    seg = ToySegmenter(kernels, bias)
    frames2, labels2 = moving_shapes_sequence(4, 96, 64, seed=11)
    accs = []
    for f, l in zip(frames2, labels2):
        _, pred = seg.predict(f)
        accs.append(float((pred.classes == l.classes).mean()))
    print("holdout accuracies:", [f"{a:.4f}" for a in accs])


if __name__ == "__main__":
    main()
