"""Desk-scale segmentation oracles with exact, closed-form gradients.

ToySegmenter is a fixed bank of 5x5 convolution kernels over the three
YUV planes (chroma nearest-upsampled to luma resolution), per-pixel
softmax over class scores, and cross-entropy summed over pixels.  Small
enough that central finite differences can check every gradient in
seconds, deterministic, and fully reentrant.

FileOracle serves precomputed gradients: it answers from SGRD gradient
maps and PGM label maps stored per frame id, which is how externally
exported model sensitivities (real DNNs) are plugged into the pipeline.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d, correlate2d

from .errors import DimensionMismatch, OracleFailure
from .flow import SegmentationMap
from .frame import Frame, pad_to_block_multiple, read_pgm
from .sensitivity import PixelGradientMap, read_gradient_map

KERNEL = 5
FIXTURE_NAME = "toy_segmenter.npz"


def _upsample_to(plane: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if plane.shape == shape:
        return plane.astype(np.float64)
    up = np.repeat(np.repeat(plane, 2, axis=0), 2, axis=1)
    return up[: shape[0], : shape[1]].astype(np.float64)


def _fold_to_chroma(grad_full: np.ndarray, chroma_shape: tuple[int, int]
                    ) -> np.ndarray:
    """Adjoint of nearest-neighbor 2x upsample plus crop."""
    h, w = grad_full.shape
    padded = np.zeros(((h + 1) // 2 * 2, (w + 1) // 2 * 2))
    padded[:h, :w] = grad_full
    folded = (padded[0::2, 0::2] + padded[0::2, 1::2]
              + padded[1::2, 0::2] + padded[1::2, 1::2])
    out = np.zeros(chroma_shape)
    out[: folded.shape[0], : folded.shape[1]] = folded
    return out


class ToySegmenter:
    """K-class convolutional scorer with softmax cross-entropy loss."""

    def __init__(self, kernels: np.ndarray, bias: np.ndarray):
        kernels = np.asarray(kernels, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if kernels.ndim != 4 or kernels.shape[1] != 3:
            raise ValueError("kernels must be (classes, 3, k, k)")
        if bias.shape != (kernels.shape[0],):
            raise ValueError("one bias per class")
        self.kernels = kernels
        self.bias = bias
        self.class_count = kernels.shape[0]

    @staticmethod
    def from_fixture() -> "ToySegmenter":
        with resources.files("stac.data").joinpath(FIXTURE_NAME).open("rb") as f:
            data = np.load(f)
            return ToySegmenter(data["kernels"], data["bias"])

    @staticmethod
    def random(seed: int = 0, class_count: int = 3) -> "ToySegmenter":
        rng = np.random.default_rng(seed)
        k = rng.normal(0.0, 0.6, size=(class_count, 3, KERNEL, KERNEL))
        b = rng.normal(0.0, 0.1, size=class_count)
        return ToySegmenter(k, b)

    def save(self, path) -> None:
        np.savez(path, kernels=self.kernels, bias=self.bias)

    def _frame_planes(self, frame: Frame) -> tuple:
        return (frame.y.astype(np.float64),
                frame.u.astype(np.float64),
                frame.v.astype(np.float64))

    def scores(self, planes: tuple) -> np.ndarray:
        """(K, H, W) class scores for float planes in [0, 255] scale."""
        y = np.asarray(planes[0], dtype=np.float64)
        full = [
            y / 255.0,
            _upsample_to(np.asarray(planes[1], dtype=np.float64), y.shape) / 255.0,
            _upsample_to(np.asarray(planes[2], dtype=np.float64), y.shape) / 255.0,
        ]
        out = np.empty((self.class_count,) + y.shape)
        for k in range(self.class_count):
            acc = np.full(y.shape, self.bias[k])
            for p in range(3):
                acc += correlate2d(full[p], self.kernels[k, p],
                                   mode="same", boundary="fill")
            out[k] = acc
        return out

    @staticmethod
    def _softmax(scores: np.ndarray) -> np.ndarray:
        z = scores - scores.max(axis=0, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=0, keepdims=True)

    def predict(self, frame: Frame) -> tuple[np.ndarray, SegmentationMap]:
        s = self.scores(self._frame_planes(frame))
        return s, SegmentationMap(s.argmax(axis=0), frame.frame_id)

    def loss_at(self, planes: tuple, labels: SegmentationMap) -> float:
        """Cross-entropy (summed over pixels) at arbitrary float planes."""
        s = self.scores(planes)
        if labels.classes.shape != s.shape[1:]:
            raise DimensionMismatch("labels must match the luma plane")
        probs = self._softmax(s)
        h, w = labels.classes.shape
        picked = probs[labels.classes.astype(np.int64),
                       np.arange(h)[:, None], np.arange(w)[None, :]]
        return float(-np.log(np.maximum(picked, 1e-300)).sum())

    def loss_and_gradient(self, frame: Frame, labels: SegmentationMap
                          ) -> tuple[float, PixelGradientMap]:
        planes = self._frame_planes(frame)
        s = self.scores(planes)
        if labels.classes.shape != s.shape[1:]:
            raise DimensionMismatch("labels must match the luma plane")
        probs = self._softmax(s)
        h, w = labels.classes.shape
        idx = labels.classes.astype(np.int64)
        picked = probs[idx, np.arange(h)[:, None], np.arange(w)[None, :]]
        loss = float(-np.log(np.maximum(picked, 1e-300)).sum())

        dscore = probs.copy()
        dscore[idx, np.arange(h)[:, None], np.arange(w)[None, :]] -= 1.0

        grads_full = [np.zeros((h, w)) for _ in range(3)]
        for k in range(self.class_count):
            for p in range(3):
                grads_full[p] += convolve2d(dscore[k], self.kernels[k, p],
                                            mode="same", boundary="fill")
        for p in range(3):
            grads_full[p] /= 255.0

        gy = grads_full[0]
        gu = _fold_to_chroma(grads_full[1], frame.u.shape)
        gv = _fold_to_chroma(grads_full[2], frame.v.shape)
        if frame.subsampling == "444":
            gu, gv = grads_full[1], grads_full[2]
        return loss, PixelGradientMap(gy, gu, gv, frame.frame_id,
                                      frame.chroma_scale)


class FileOracle:
    """Serves gradients and labels exported to disk, keyed by frame id.

    Expects ``<dir>/<frame_id:06d>.sgrd`` and ``<dir>/<frame_id:06d>.pgm``
    pairs.  Scores are one-hot in the stored label and the reported loss is
    0.0: this oracle replays sensitivities, it cannot re-evaluate them.
    """

    def __init__(self, directory, class_count: int = 0):
        self.dir = Path(directory)
        if not self.dir.is_dir():
            raise OracleFailure(f"{directory} is not a directory")
        self.class_count = class_count or self._scan_class_count()

    def _scan_class_count(self) -> int:
        top = 0
        for p in sorted(self.dir.glob("*.pgm")):
            top = max(top, int(read_pgm(p).max()))
        return top + 1

    def _labels(self, frame: Frame) -> SegmentationMap:
        path = self.dir / f"{frame.frame_id:06d}.pgm"
        if not path.exists():
            raise OracleFailure(f"no stored labels for frame {frame.frame_id}")
        labels = pad_to_block_multiple(read_pgm(path))
        if labels.shape != frame.y.shape:
            raise OracleFailure(
                f"stored labels {labels.shape} do not match {frame.y.shape}"
            )
        return SegmentationMap(labels, frame.frame_id)

    def predict(self, frame: Frame) -> tuple[np.ndarray, SegmentationMap]:
        labels = self._labels(frame)
        scores = np.zeros((self.class_count,) + frame.y.shape)
        idx = labels.classes.astype(np.int64)
        h, w = idx.shape
        scores[idx, np.arange(h)[:, None], np.arange(w)[None, :]] = 1.0
        return scores, labels

    def loss_and_gradient(self, frame: Frame, labels: SegmentationMap
                          ) -> tuple[float, PixelGradientMap]:
        path = self.dir / f"{frame.frame_id:06d}.sgrd"
        if not path.exists():
            raise OracleFailure(f"no stored gradients for frame {frame.frame_id}")
        gm = read_gradient_map(path)
        if gm.y.shape != frame.y.shape:
            raise OracleFailure("stored gradient dims do not match the frame")
        return 0.0, gm
