"""Frozen, seeded convolutional feature extractor.

Three stride-2 3x3 conv layers (3 -> 16 -> 32 -> 64) with ReLU, He-style
initialization drawn once from the seed, never updated. Produces image-level
feature maps at stride 8, pooled object-level region features, and pooled
crop-level region features. Outputs are gradient-free leaves: no backbone
parameter ever reaches an optimizer.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import BoxXYXY, roi_align
from .rng import Rng
from .tensor import Tensor, tmean
from .views import crop_resize


def _crop_resize_many(pixels: np.ndarray, boxes: list[BoxXYXY], out: int) -> np.ndarray:
    """Bilinear crop+resize of several boxes from one image, (n, out, out, 3).

    One vectorized gather per corner across all boxes is much cheaper than
    per-box resampling.
    """
    H, W = pixels.shape[:2]
    n = len(boxes)
    grid = (np.arange(out, dtype=np.float64) + 0.5) / out
    xs = np.stack([b.x1 + grid * b.width for b in boxes])   # (n, out)
    ys = np.stack([b.y1 + grid * b.height for b in boxes])
    gx = np.clip(xs - 0.5, 0.0, W - 1.0)
    gy = np.clip(ys - 0.5, 0.0, H - 1.0)
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = (gx - x0).astype(np.float32)[:, None, :, None]
    wy = (gy - y0).astype(np.float32)[:, :, None, None]
    yi0, xi0 = y0[:, :, None], x0[:, None, :]
    yi1, xi1 = y1[:, :, None], x1[:, None, :]
    p00 = pixels[yi0, xi0]
    p01 = pixels[yi0, xi1]
    p10 = pixels[yi1, xi0]
    p11 = pixels[yi1, xi1]
    return (p00 * (1 - wy) * (1 - wx) + p01 * (1 - wy) * wx
            + p10 * wy * (1 - wx) + p11 * wy * wx).astype(np.float32)


def _conv_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-2, pad-1, 3x3 convolution on (B, H, W, Cin) via im2col."""
    B, H, W, Cin = x.shape
    Ho, Wo = (H + 1) // 2, (W + 1) // 2
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    sB, sH, sW, sC = padded.strides
    windows = np.lib.stride_tricks.as_strided(
        padded,
        shape=(B, Ho, Wo, 3, 3, Cin),
        strides=(sB, 2 * sH, 2 * sW, sH, sW, sC),
        writeable=False,
    )
    cols = windows.reshape(B * Ho * Wo, 9 * Cin)
    out = cols @ weight + bias
    return np.maximum(out, 0.0).reshape(B, Ho, Wo, weight.shape[1])


class FrozenBackbone:
    stride = 8

    def __init__(self, seed: int, channels: tuple[int, ...] = (16, 32, 64),
                 crop_size: int = 64):
        self.seed = seed
        self.channels = tuple(channels)
        self.crop_size = crop_size
        self.out_channels = self.channels[-1]
        rng = Rng(seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        cin = 3
        for cout in self.channels:
            fan_in = 9 * cin
            std = math.sqrt(2.0 / fan_in)
            w = np.array(rng.normals(fan_in * cout, 0.0, std),
                         dtype=np.float32).reshape(fan_in, cout)
            self.weights.append(w)
            self.biases.append(np.zeros(cout, dtype=np.float32))
            cin = cout

    # -- feature extraction -----------------------------------------------------

    def extract_batch(self, batch: np.ndarray) -> np.ndarray:
        """(B, H, W, 3) float32 -> (B, H/8, W/8, C) float32, H and W % 8 == 0."""
        if batch.shape[1] % 8 or batch.shape[2] % 8:
            raise ValueError(f"input dims {batch.shape[1]}x{batch.shape[2]} not "
                             "divisible by 8; resize the image first")
        x = batch.astype(np.float32, copy=False)
        for w, b in zip(self.weights, self.biases):
            x = _conv_forward(x, w, b)
        return x

    def extract(self, pixels: np.ndarray) -> Tensor:
        """Image-level features of one (H, W, 3) image; gradient-free leaf."""
        return Tensor(self.extract_batch(pixels[None])[0])

    def object_level_features(self, h: Tensor, boxes: list[BoxXYXY]) -> Tensor:
        """RoIAlign on the feature map (boxes in view pixels), then spatial mean."""
        fboxes = [BoxXYXY(b.x1 / self.stride, b.y1 / self.stride,
                          b.x2 / self.stride, b.y2 / self.stride) for b in boxes]
        pooled = roi_align(h, fboxes, (4, 4))
        return tmean(pooled, axis=(1, 2))

    def crop_level_features(self, view_pixels: np.ndarray,
                            boxes: list[BoxXYXY]) -> Tensor:
        """Crop each box from the view, resize, extract, pool."""
        return Tensor(self.crop_features_multi([(view_pixels, boxes)]))

    def crop_features_multi(self, groups: list[tuple[np.ndarray, list[BoxXYXY]]]
                            ) -> np.ndarray:
        """Crop-level features for several (image, boxes) groups in one conv
        pass; rows follow group order. Keeps the GEMMs large."""
        crops = []
        for pixels, boxes in groups:
            for b in boxes:
                if b.width < 2.0 or b.height < 2.0:
                    raise ValueError(f"degenerate crop box {b}")
            crops.append(_crop_resize_many(pixels, boxes, self.crop_size))
        feats = self.extract_batch(np.concatenate(crops))
        return feats.mean(axis=(1, 2))
