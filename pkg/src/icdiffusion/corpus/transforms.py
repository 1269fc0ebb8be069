"""Deterministic pixel-space condition transforms.

Six condition kinds stand in for learned detectors: hed/depth/seg are used
for training, canny/normal/scribble are reserved for held-out evaluation.
Every transform is a pure function of the input image, so it applies equally
to rendered corpus images and to generated samples (cycle metrics rely on
this).
"""

from __future__ import annotations

import enum

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize

from ..vocab import PALETTE_RGB

EDGE_THRESHOLD = 1e-3  # Sobel magnitude above this counts as an edge
HED_SIGMA = 1.0


class TransformKind(enum.Enum):
    HED = "hed"
    DEPTH = "depth"
    SEG = "seg"
    CANNY = "canny"
    NORMAL = "normal"
    SCRIBBLE = "scribble"


TRAINING_KINDS = (TransformKind.HED, TransformKind.DEPTH, TransformKind.SEG)
HELD_OUT_KINDS = (TransformKind.CANNY, TransformKind.NORMAL, TransformKind.SCRIBBLE)

_PALETTE = np.asarray(PALETTE_RGB, dtype=np.float32)  # (8, 3)

# Segmentation label value for palette index k, inside (-1, 1].
SEG_LABELS = (-1.0 + 2.0 * (np.arange(len(PALETTE_RGB)) + 1) / len(PALETTE_RGB)).astype(np.float32)


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    return image


def quantize_to_palette(image: np.ndarray) -> np.ndarray:
    """Map each pixel to the index of its nearest palette color, (H, W) int."""
    img = _check_image(image)
    px = img.reshape(3, -1).T  # (HW, 3)
    d2 = ((px[:, None, :] - _PALETTE[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1).reshape(img.shape[1:]).astype(np.int64)


def _edge_magnitude(image: np.ndarray) -> np.ndarray:
    # Per-channel Sobel, max over channels: distinct palette colors always
    # differ in some channel even when their grayscale means collide.
    mags = []
    for ch in range(image.shape[0]):
        gx = ndimage.sobel(image[ch], axis=1, mode="nearest")
        gy = ndimage.sobel(image[ch], axis=0, mode="nearest")
        mags.append(np.hypot(gx, gy))
    return np.max(mags, axis=0)


def _binary_edges(image: np.ndarray) -> np.ndarray:
    return _edge_magnitude(image) > EDGE_THRESHOLD


def _components(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Connected same-color components of non-background pixels.

    Background is the most common quantized color (ties break to the lowest
    palette index). Returns (labels (H, W) with 0 = background, background
    palette index).
    """
    quant = quantize_to_palette(image)
    counts = np.bincount(quant.ravel(), minlength=len(_PALETTE))
    bg = int(counts.argmax())
    labels = np.zeros(quant.shape, dtype=np.int64)
    nxt = 1
    for color in np.unique(quant):
        if color == bg:
            continue
        comp, n = ndimage.label(quant == color)
        for i in range(1, n + 1):
            labels[comp == i] = nxt
            nxt += 1
    return labels, bg


def _depth01(image: np.ndarray) -> np.ndarray:
    """Per-component normalized interior distance transform, (H, W) in [0, 1]."""
    labels, _ = _components(image)
    depth = np.zeros(labels.shape, dtype=np.float32)
    for i in range(1, labels.max() + 1):
        mask = labels == i
        dist = ndimage.distance_transform_edt(mask)
        peak = dist.max()
        if peak > 0:
            depth[mask] = (dist[mask] / peak).astype(np.float32)
    return depth


def _replicate(channel: np.ndarray) -> np.ndarray:
    return np.repeat(channel[None].astype(np.float32), 3, axis=0)


def apply_transform(image: np.ndarray, kind: TransformKind) -> np.ndarray:
    """Compute the `kind` condition map of `image` as a (3, H, W) array in [-1, 1]."""
    img = _check_image(image)
    if kind is TransformKind.HED:
        soft = ndimage.gaussian_filter(_binary_edges(img).astype(np.float64), sigma=HED_SIGMA)
        out = _replicate(2.0 * np.clip(soft, 0.0, 1.0) - 1.0)
    elif kind is TransformKind.CANNY:
        out = _replicate(2.0 * _binary_edges(img).astype(np.float32) - 1.0)
    elif kind is TransformKind.DEPTH:
        out = _replicate(2.0 * _depth01(img) - 1.0)
    elif kind is TransformKind.NORMAL:
        depth = _depth01(img)
        gy, gx = np.gradient(depth.astype(np.float64))
        denom = np.sqrt(gx * gx + gy * gy + 1.0)
        out = np.stack([-gx / denom, -gy / denom, 1.0 / denom]).astype(np.float32)
    elif kind is TransformKind.SEG:
        quant = quantize_to_palette(img)
        out = _replicate(SEG_LABELS[quant])
    elif kind is TransformKind.SCRIBBLE:
        quant = quantize_to_palette(img)
        pad = np.pad(quant, 1, mode="edge")
        boundary = (
            (quant != pad[:-2, 1:-1])
            | (quant != pad[2:, 1:-1])
            | (quant != pad[1:-1, :-2])
            | (quant != pad[1:-1, 2:])
        )
        out = _replicate(2.0 * skeletonize(boundary).astype(np.float32) - 1.0)
    else:
        raise ValueError(f"unknown transform kind {kind!r}")
    np.clip(out, -1.0, 1.0, out=out)
    return out
