"""Patch geometry and the normal self-similarity descriptor.

A patch descriptor is a histogram of all pairwise angular distances
between surface normals inside the patch. Pairwise angles survive rigid
rotation, which is what lets descriptors computed on differently posed
renders agree, and the histogram IoU is the match oracle that labels
training pairs positive or negative.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DescriptorError
from .render import NormalMap, ShadedRender


class MatchLabel(Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    EXCLUDED = "excluded"


@dataclass
class PatchRect:
    x: int
    y: int
    w: int
    h: int
    empty: bool = False
    shape_id: int = -1
    view_id: int = -1
    domain: str = ""


@dataclass
class PatchDescriptor:
    hist: np.ndarray  # (B,) nonnegative, sums to 1 unless empty
    sample_count: int
    empty: bool


def patch_side(fraction: float, resolution: int) -> int:
    return int(round(fraction * resolution))


def sample_patches(
    raster: NormalMap | ShadedRender,
    fraction: float,
    count: int,
    seed: int,
    min_coverage: float = 0.10,
) -> list[PatchRect]:
    """Draw square patch rects uniformly over valid top-left positions.

    Rects whose mask coverage falls below min_coverage are flagged empty
    rather than dropped, so callers can account for exclusions.
    """
    h, w = raster.mask.shape
    side = patch_side(fraction, min(h, w))
    if side < 2:
        raise DescriptorError(f"patch side {side} too small (fraction {fraction})")
    if side > min(h, w):
        raise DescriptorError("patch larger than raster")
    rng = np.random.default_rng(seed)
    xs = rng.integers(0, w - side + 1, size=count)
    ys = rng.integers(0, h - side + 1, size=count)
    rects = []
    for x, y in zip(xs, ys):
        cov = raster.mask[y : y + side, x : x + side].mean()
        rects.append(PatchRect(int(x), int(y), side, side, empty=cov < min_coverage))
    return rects


def content_rect(
    weight: np.ndarray,
    mask: np.ndarray,
    rect: PatchRect,
    iters: int = 3,
) -> PatchRect:
    """Snap a rect to the centroid of the content it covers.

    Pooled-cell features only match when the pooling grids of the two
    patches sit on the same piece of surface; a few pixels of offset is
    enough to decorrelate them. Anchoring every rect to its content
    centroid gives both domains the same canonical placement, so a
    query patch and the record showing the same region land on nearly
    identical grids without any search. The weight is the raster the
    caller matches with (intensity on the image side, noiseless
    shading on the shape side) plus a small mask floor so silhouette
    alone attracts the rect even where the surface faces away from the
    light. Iteration stops at a fixed point or the image border.
    """
    hgt, wid = weight.shape
    w_all = weight * mask + 0.1 * mask
    x, y = rect.x, rect.y
    ys, xs = np.mgrid[0 : rect.h, 0 : rect.w]
    for _ in range(iters):
        sub = w_all[y : y + rect.h, x : x + rect.w]
        total = sub.sum()
        if total <= 0:
            break
        cy = float((ys * sub).sum() / total)
        cx = float((xs * sub).sum() / total)
        nx = int(round(x + cx - (rect.w - 1) / 2.0))
        ny = int(round(y + cy - (rect.h - 1) / 2.0))
        nx = min(max(nx, 0), wid - rect.w)
        ny = min(max(ny, 0), hgt - rect.h)
        if nx == x and ny == y:
            break
        x, y = nx, ny
    return PatchRect(
        x,
        y,
        rect.w,
        rect.h,
        empty=rect.empty,
        shape_id=rect.shape_id,
        view_id=rect.view_id,
        domain=rect.domain,
    )


def stride_subsample(arr: np.ndarray, max_samples: int) -> np.ndarray:
    """Deterministic evenly spaced subsampling along axis 0."""
    n = len(arr)
    if n <= max_samples:
        return arr
    idx = np.floor(np.linspace(0, n - 1, max_samples)).astype(np.int64)
    return arr[idx]


def self_similarity_histogram(
    nmap: NormalMap,
    rect: PatchRect,
    bins: int = 16,
    max_samples: int = 64,
    min_coverage: float = 0.10,
) -> PatchDescriptor:
    """Histogram of pairwise normal angles inside the rect.

    Masked normals are gathered row-major, subsampled to max_samples,
    and every unordered pair contributes arccos(clamp(dot, -1, 1)),
    binned uniformly over [0, pi] with pi landing in the last bin.
    """
    if bins < 2:
        raise DescriptorError("bins must be >= 2")
    sub_mask = nmap.mask[rect.y : rect.y + rect.h, rect.x : rect.x + rect.w]
    sub_normals = nmap.normals[rect.y : rect.y + rect.h, rect.x : rect.x + rect.w]
    normals = sub_normals[sub_mask].astype(np.float64)
    area = rect.w * rect.h
    if len(normals) < max(2, min_coverage * area):
        return PatchDescriptor(np.zeros(bins), sample_count=len(normals), empty=True)
    normals = stride_subsample(normals, max_samples)
    n = len(normals)
    dots = normals @ normals.T
    iu = np.triu_indices(n, k=1)
    angles = np.arccos(np.clip(dots[iu], -1.0, 1.0))
    idx = np.minimum((angles / (np.pi / bins)).astype(np.int64), bins - 1)
    hist = np.bincount(idx, minlength=bins).astype(np.float64)
    hist /= hist.sum()
    return PatchDescriptor(hist, sample_count=n, empty=False)


def histogram_iou(a: PatchDescriptor, b: PatchDescriptor) -> float:
    if a.empty or b.empty:
        raise DescriptorError("IoU of an empty descriptor")
    if len(a.hist) != len(b.hist):
        raise DescriptorError("histogram bin counts differ")
    mins = np.minimum(a.hist, b.hist).sum()
    maxs = np.maximum(a.hist, b.hist).sum()
    return float(mins / maxs)


def label_match(
    query: PatchDescriptor,
    candidate: PatchDescriptor,
    candidate_is_gt_shape: bool,
    theta_pos: float = 0.4,
    theta_neg: float = 0.6,
) -> MatchLabel:
    """Double-threshold labeling.

    Positives must come from the ground-truth shape AND look alike;
    negatives must come from another shape AND look sufficiently
    different. Everything else is excluded: a non-gt patch that happens
    to look like the query is too similar to punish.
    """
    iou = histogram_iou(query, candidate)
    if candidate_is_gt_shape:
        return MatchLabel.POSITIVE if iou >= theta_pos else MatchLabel.EXCLUDED
    return MatchLabel.NEGATIVE if iou <= theta_neg else MatchLabel.EXCLUDED
