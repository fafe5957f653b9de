"""From probability maps to separated particle instances.

The pipeline that turns the two network outputs into countable particles:
threshold both maps, remove edge pixels from the region mask so touching
particles fall apart at their shared boundaries, clean up with a morphological
opening, and label the 4-connected components that remain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .tensor import ShapeError


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold a probability map: 1 where prob >= threshold."""
    prob = np.asarray(prob)
    if prob.ndim != 2:
        raise ShapeError(f"binarize: expected a 2-D map, got shape {prob.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"binarize: threshold must be in (0, 1), got {threshold}")
    return (prob >= threshold).astype(np.uint8)


def subtract_edge(region_mask: np.ndarray, edge_mask: np.ndarray) -> np.ndarray:
    """Region pixels that are not edge pixels (region AND NOT edge)."""
    region_mask = np.asarray(region_mask)
    edge_mask = np.asarray(edge_mask)
    if region_mask.shape != edge_mask.shape:
        raise ShapeError(f"subtract_edge: shapes differ: {region_mask.shape} "
                         f"vs {edge_mask.shape}")
    return (region_mask.astype(bool) & ~edge_mask.astype(bool)).astype(np.uint8)


def morph_open(mask: np.ndarray, se_size: int = 3) -> np.ndarray:
    """Morphological opening (erosion then dilation) with a square structuring
    element; pixels beyond the image border count as background."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"morph_open: expected a 2-D mask, got shape {mask.shape}")
    if se_size < 1 or se_size % 2 == 0:
        raise ValueError(f"morph_open: structuring element must be odd and >= 1, got {se_size}")
    if se_size == 1:
        return mask.astype(np.uint8)
    se = np.ones((se_size, se_size), dtype=bool)
    eroded = ndimage.binary_erosion(mask.astype(bool), structure=se, border_value=0)
    return ndimage.binary_dilation(eroded, structure=se, border_value=0).astype(np.uint8)


def connected_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """Label 4-connected components 1..count in raster-scan discovery order.

    Hand-rolled breadth-first labeling so the label order is pinned by this
    contract rather than by a library's internals; the test suite checks the
    partition against an independent labeler.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"connected_components: expected a 2-D mask, got {mask.shape}")
    fg = mask.astype(bool)
    h, w = fg.shape
    labels = np.zeros((h, w), dtype=np.int32)
    count = 0
    for sy, sx in zip(*np.nonzero(fg)):
        if labels[sy, sx]:
            continue
        count += 1
        stack = [(sy, sx)]
        labels[sy, sx] = count
        while stack:
            y, x = stack.pop()
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if 0 <= ny < h and 0 <= nx < w and fg[ny, nx] and not labels[ny, nx]:
                    labels[ny, nx] = count
                    stack.append((ny, nx))
    return labels, count


@dataclass
class SegmentationResult:
    region_prob: np.ndarray
    edge_prob: np.ndarray
    region_mask: np.ndarray
    edge_mask: np.ndarray
    separated_mask: np.ndarray   # region minus edge
    opened_mask: np.ndarray      # after morphological opening
    instance_map: np.ndarray
    count: int


def segment_pipeline(region_prob: np.ndarray, edge_prob: np.ndarray,
                     threshold: float = 0.5, se_size: int = 3) -> SegmentationResult:
    """Run the full post-processing chain on a pair of probability maps."""
    region_prob = np.asarray(region_prob)
    edge_prob = np.asarray(edge_prob)
    if region_prob.shape != edge_prob.shape:
        raise ShapeError(f"segment_pipeline: map shapes differ: {region_prob.shape} "
                         f"vs {edge_prob.shape}")
    region_mask = binarize(region_prob, threshold)
    edge_mask = binarize(edge_prob, threshold)
    separated = subtract_edge(region_mask, edge_mask)
    opened = morph_open(separated, se_size)
    instance_map, count = connected_components(opened)
    return SegmentationResult(region_prob, edge_prob, region_mask, edge_mask,
                              separated, opened, instance_map, count)
