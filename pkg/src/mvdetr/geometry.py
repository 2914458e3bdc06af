"""Box algebra, overlap metrics, frame transforms, and RoIAlign.

Boxes are half-open intervals in continuous pixel coordinates. Pixel-frame
boxes use corner (xyxy) form; model-side boxes use center-size (cxcywh) form
normalized to [0, 1] relative to their view. Division guards use 1e-9 and
degenerate boxes report IoU 0 instead of NaN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _make

_EPS = 1e-9


@dataclass(frozen=True)
class BoxXYXY:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x1, self.y1, self.x2, self.y2)):
            raise ValueError(f"non-finite box {self}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"box corners out of order: {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def intersection(self, other: "BoxXYXY") -> "BoxXYXY | None":
        x1, y1 = max(self.x1, other.x1), max(self.y1, other.y1)
        x2, y2 = min(self.x2, other.x2), min(self.y2, other.y2)
        if x2 <= x1 or y2 <= y1:
            return None
        return BoxXYXY(x1, y1, x2, y2)


@dataclass(frozen=True)
class BoxCxCyWH:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"non-positive size: {self}")


def box_iou(a: BoxXYXY, b: BoxXYXY) -> float:
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= _EPS:
        return 0.0
    return inter / union


def box_giou(a: BoxXYXY, b: BoxXYXY) -> float:
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.area + b.area - inter
    iou = inter / union if union > _EPS else 0.0
    hull = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    if hull <= _EPS:
        return iou
    return iou - (hull - union) / hull


def to_cxcywh(box: BoxXYXY, frame_w: float, frame_h: float) -> BoxCxCyWH:
    """Pixel corners to normalized center-size."""
    if frame_w <= 0 or frame_h <= 0:
        raise ValueError(f"frame dims must be positive, got {frame_w}x{frame_h}")
    cx, cy = box.center()
    return BoxCxCyWH(cx / frame_w, cy / frame_h, box.width / frame_w, box.height / frame_h)


def to_xyxy(box: BoxCxCyWH, frame_w: float, frame_h: float) -> tuple[BoxXYXY, bool]:
    """Normalized center-size to pixel corners.

    Out-of-range inputs are clamped into the frame; the second return value
    flags whether clamping occurred.
    """
    if frame_w <= 0 or frame_h <= 0:
        raise ValueError(f"frame dims must be positive, got {frame_w}x{frame_h}")
    x1 = (box.cx - box.w / 2) * frame_w
    y1 = (box.cy - box.h / 2) * frame_h
    x2 = (box.cx + box.w / 2) * frame_w
    y2 = (box.cy + box.h / 2) * frame_h
    cx1, cy1 = max(0.0, x1), max(0.0, y1)
    cx2, cy2 = min(float(frame_w), x2), min(float(frame_h), y2)
    clamped = (cx1, cy1, cx2, cy2) != (x1, y1, x2, y2)
    cx2, cy2 = max(cx1, cx2), max(cy1, cy2)
    return BoxXYXY(cx1, cy1, cx2, cy2), clamped


@dataclass(frozen=True)
class FrameTransform:
    """Affine crop/scale (plus optional horizontal flip) between two frames.

    Points map as x' = sx * (x - dx), then x' -> dst_w - x' when flipped;
    y' = sy * (y - dy). Frame dims are carried so flips and clamping are
    well defined in both directions.
    """

    dx: float
    dy: float
    sx: float
    sy: float
    flip: bool
    src_w: float
    src_h: float
    dst_w: float
    dst_h: float

    @staticmethod
    def identity(w: float, h: float) -> "FrameTransform":
        return FrameTransform(0.0, 0.0, 1.0, 1.0, False, w, h, w, h)

    def apply_point(self, x: float, y: float) -> tuple[float, float]:
        xo = self.sx * (x - self.dx)
        yo = self.sy * (y - self.dy)
        if self.flip:
            xo = self.dst_w - xo
        return xo, yo

    def with_flip(self) -> "FrameTransform":
        return FrameTransform(self.dx, self.dy, self.sx, self.sy, not self.flip,
                              self.src_w, self.src_h, self.dst_w, self.dst_h)

    def inverse(self) -> "FrameTransform":
        sx2, sy2 = 1.0 / self.sx, 1.0 / self.sy
        if self.flip:
            # derived so that apply(inverse) == identity with the same op order
            dx2 = self.sx * (self.dx - self.src_w) + self.dst_w
        else:
            dx2 = -self.dx * self.sx
        dy2 = -self.dy * self.sy
        return FrameTransform(dx2, dy2, sx2, sy2, self.flip,
                              self.dst_w, self.dst_h, self.src_w, self.src_h)


def map_box(box: BoxXYXY, t: FrameTransform) -> BoxXYXY:
    """Express a box in the transform's target frame, clamped to its bounds.

    Raises ValueError when the mapped box has no intersection with the target
    frame (the caller drops such proposals).
    """
    xa, ya = t.apply_point(box.x1, box.y1)
    xb, yb = t.apply_point(box.x2, box.y2)
    x1, x2 = (xa, xb) if xa <= xb else (xb, xa)  # flip swaps corners
    y1, y2 = (ya, yb) if ya <= yb else (yb, ya)
    cx1, cy1 = max(0.0, x1), max(0.0, y1)
    cx2, cy2 = min(t.dst_w, x2), min(t.dst_h, y2)
    if cx2 <= cx1 or cy2 <= cy1:
        raise ValueError(f"box {box} maps outside the {t.dst_w}x{t.dst_h} frame")
    return BoxXYXY(cx1, cy1, cx2, cy2)


def _roi_sample_matrix(boxes, H, W, out_hw, sampling):
    """Sparse-in-spirit sampling matrix S with out = S @ features.reshape(H*W, C).

    Each output bin averages sampling x sampling bilinear reads at interior
    points of the bin, half-pixel aligned, border-clamped.
    """
    h_out, w_out = out_hw
    n = len(boxes)
    S = np.zeros((n * h_out * w_out, H * W), dtype=np.float32)
    frac = (np.arange(sampling) + 0.5) / sampling
    inv_count = 1.0 / (sampling * sampling)
    for bi, box in enumerate(boxes):
        bin_w = box.width / w_out
        bin_h = box.height / h_out
        xs = box.x1 + (np.arange(w_out)[:, None] + frac[None, :]).reshape(-1) * bin_w
        ys = box.y1 + (np.arange(h_out)[:, None] + frac[None, :]).reshape(-1) * bin_h
        gx = np.clip(xs - 0.5, 0.0, W - 1.0)
        gy = np.clip(ys - 0.5, 0.0, H - 1.0)
        x0 = np.floor(gx).astype(np.int64)
        y0 = np.floor(gy).astype(np.int64)
        x1 = np.minimum(x0 + 1, W - 1)
        y1 = np.minimum(y0 + 1, H - 1)
        wx = (gx - x0).astype(np.float32)
        wy = (gy - y0).astype(np.float32)
        # sample (iy, ix) belongs to bin (iy // sampling, ix // sampling)
        bin_row = (np.arange(h_out * sampling) // sampling)[:, None] * w_out \
            + (np.arange(w_out * sampling) // sampling)[None, :]
        rows = (bi * h_out * w_out + bin_row).reshape(-1)
        for cy, wgt_y in ((y0, 1.0 - wy), (y1, wy)):
            for cx, wgt_x in ((x0, 1.0 - wx), (x1, wx)):
                cols = (cy[:, None] * W + cx[None, :]).reshape(-1)
                wgts = (wgt_y[:, None] * wgt_x[None, :]).reshape(-1) * inv_count
                np.add.at(S, (rows, cols), wgts)
    return S


def roi_align(features: Tensor, boxes: list[BoxXYXY], out_hw: tuple[int, int],
              sampling: int = 2) -> Tensor:
    """Pool box regions of an (H, W, C) feature map to (n, h_out, w_out, C).

    Boxes are in feature-frame coordinates; regions outside the map clamp to
    the border. Differentiable w.r.t. the feature map.
    """
    if features.data.ndim != 3:
        raise ValueError(f"roi_align expects (H, W, C) features, got {features.data.shape}")
    H, W, C = features.data.shape
    if H == 0 or W == 0:
        raise ValueError("roi_align: empty feature map")
    h_out, w_out = out_hw
    S = _roi_sample_matrix(boxes, H, W, out_hw, sampling)
    flat = features.data.reshape(H * W, C)
    data = (S @ flat).reshape(len(boxes), h_out, w_out, C)

    def backward(g):
        g2 = g.reshape(-1, C)
        features.accumulate_grad((S.T @ g2).reshape(H, W, C))

    return _make(data, (features,), "roi_align", backward)
