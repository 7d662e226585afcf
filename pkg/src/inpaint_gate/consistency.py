"""Product-consistency assessment between original and generated images.

Product masks from both images are matched by a combined IoU / centroid
distance score using an exact optimal assignment; matched regions are then
compared by mean absolute pixel difference. An image is consistent when no
original product disappeared, no significant new product appeared, and all
matched products look alike within a configurable tolerance.

Masks are bool (H, W) arrays; images are uint8 (H, W, 3) arrays. Mask sets
are plain lists of masks sharing one image size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

# Above this size the exact assignment gives way to a greedy sweep.
EXACT_MATCH_LIMIT = 64

_FORBIDDEN_COST = 1e15


@dataclass
class ConsistencyConfig:
    lambda_dist: float = 0.5
    tau_match: float = 0.1
    delta_diff: float = 0.05
    area_floor: float = 0.001
    aggregate: str = "max"  # or "mean": how per-pair diffs combine before thresholding

    def validate(self) -> None:
        if self.lambda_dist < 0:
            raise ValueError(f"lambda_dist must be >= 0, got {self.lambda_dist}")
        if not 0.0 <= self.tau_match <= 1.0:
            raise ValueError(f"tau_match must be in [0, 1], got {self.tau_match}")
        if not 0.0 <= self.delta_diff <= 1.0:
            raise ValueError(f"delta_diff must be in [0, 1], got {self.delta_diff}")
        if not 0.0 <= self.area_floor < 1.0:
            raise ValueError(f"area_floor must be in [0, 1), got {self.area_floor}")
        if self.aggregate not in ("max", "mean"):
            raise ValueError(f"aggregate must be 'max' or 'mean', got {self.aggregate!r}")


@dataclass
class MatchedPair:
    ori_index: int
    gen_index: int
    iou: float
    dist: float
    score: float
    pixel_diff: float | None = None


@dataclass
class ConsistencyResult:
    pairs: list[MatchedPair]
    unmatched_ori: list[int]
    unmatched_gen: list[int]
    max_pixel_diff: float | None
    consistent: bool
    no_products_detected: bool = False

    def to_json_dict(self) -> dict:
        return {
            "pairs": [
                {
                    "ori_index": p.ori_index,
                    "gen_index": p.gen_index,
                    "iou": p.iou,
                    "dist": p.dist,
                    "score": p.score,
                    "pixel_diff": p.pixel_diff,
                }
                for p in self.pairs
            ],
            "unmatched_ori": self.unmatched_ori,
            "unmatched_gen": self.unmatched_gen,
            "max_pixel_diff": self.max_pixel_diff,
            "consistent": self.consistent,
            "no_products_detected": self.no_products_detected,
        }


def _check_mask(mask: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2 or arr.dtype != np.bool_:
        raise ValueError(f"{what} must be a 2-d bool array, got {arr.dtype} {arr.shape}")
    return arr


def _check_same_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[:2] != b.shape[:2]:
        raise ValueError(f"dimension mismatch: {a.shape[:2]} vs {b.shape[:2]}")


def _check_mask_set(masks: Sequence[np.ndarray], what: str) -> None:
    for idx, mask in enumerate(masks):
        _check_mask(mask, f"{what}[{idx}]")
        if not mask.any():
            raise ValueError(f"{what}[{idx}] is empty (no foreground pixels)")
        if mask.shape != masks[0].shape:
            raise ValueError(f"{what} masks disagree on size: {mask.shape} vs {masks[0].shape}")


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two same-size masks; empty union -> 0."""
    a = _check_mask(a, "mask a")
    b = _check_mask(b, "mask b")
    _check_same_dims(a, b)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 0.0
    inter = int(np.logical_and(a, b).sum())
    return inter / union


def centroid_dist(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance between mask centroids in normalized coordinates.

    Pixel centers are used ((x + 0.5) / W, (y + 0.5) / H), so the result
    lies in [0, sqrt(2)] and is invariant under joint translation.
    """
    a = _check_mask(a, "mask a")
    b = _check_mask(b, "mask b")
    _check_same_dims(a, b)
    height, width = a.shape

    def centroid(mask: np.ndarray) -> tuple[float, float]:
        ys, xs = np.nonzero(mask)
        if len(xs) == 0:
            raise ValueError("cannot take the centroid of an empty mask")
        return (float(xs.mean()) + 0.5) / width, (float(ys.mean()) + 0.5) / height

    ax, ay = centroid(a)
    bx, by = centroid(b)
    return math.hypot(ax - bx, ay - by)


def _eligible_edges(ori, gen, cfg):
    edges = []
    for i, a in enumerate(ori):
        for j, b in enumerate(gen):
            overlap = iou(a, b)
            if overlap >= cfg.tau_match:
                dist = centroid_dist(a, b)
                edges.append((i, j, overlap, dist, overlap - cfg.lambda_dist * dist))
    return edges


def _optimal_selection(m, n, edges):
    # Square cost matrix with per-mask "stay unmatched" dummies; negative
    # edge costs reward matching, dummies cost 0, so pairs whose score is
    # negative are left unmatched by the optimum.
    size = m + n
    cost = np.zeros((size, size))
    cost[:m, :n] = _FORBIDDEN_COST
    for i, j, _, _, score in edges:
        cost[i, j] = -score
    rows, cols = linear_sum_assignment(cost)
    chosen = set()
    for r, c in zip(rows, cols):
        if r < m and c < n and cost[r, c] < _FORBIDDEN_COST / 2:
            chosen.add((r, c))
    return chosen


def _greedy_selection(edges):
    chosen = set()
    used_ori, used_gen = set(), set()
    for i, j, _, _, score in sorted(edges, key=lambda e: (-e[4], e[0], e[1])):
        if score < 0:
            break
        if i in used_ori or j in used_gen:
            continue
        chosen.add((i, j))
        used_ori.add(i)
        used_gen.add(j)
    return chosen


def match_masks(
    ori: Sequence[np.ndarray],
    gen: Sequence[np.ndarray],
    cfg: ConsistencyConfig | None = None,
) -> tuple[list[MatchedPair], list[int], list[int]]:
    """Match products between mask sets, maximizing total (iou - lambda*dist).

    Only pairs with iou >= tau_match are eligible. Up to EXACT_MATCH_LIMIT
    masks per side the assignment is exactly optimal (Hungarian); beyond
    that a greedy sweep by descending score (ties: lower ori then gen
    index) is used. Returns (pairs sorted by ori index, unmatched ori
    indices, unmatched gen indices).
    """
    cfg = cfg or ConsistencyConfig()
    cfg.validate()
    _check_mask_set(ori, "ori")
    _check_mask_set(gen, "gen")
    if ori and gen:
        _check_same_dims(ori[0], gen[0])
    m, n = len(ori), len(gen)
    edges = _eligible_edges(ori, gen, cfg)
    if not edges:
        return [], list(range(m)), list(range(n))
    if min(m, n) <= EXACT_MATCH_LIMIT:
        chosen = _optimal_selection(m, n, edges)
    else:
        chosen = _greedy_selection(edges)
    pairs = [
        MatchedPair(ori_index=i, gen_index=j, iou=overlap, dist=dist, score=score)
        for i, j, overlap, dist, score in sorted(edges, key=lambda e: (e[0], e[1]))
        if (i, j) in chosen
    ]
    matched_ori = {p.ori_index for p in pairs}
    matched_gen = {p.gen_index for p in pairs}
    unmatched_ori = [i for i in range(m) if i not in matched_ori]
    unmatched_gen = [j for j in range(n) if j not in matched_gen]
    return pairs, unmatched_ori, unmatched_gen


def pair_pixel_diff(img_ori: np.ndarray, img_gen: np.ndarray, region: np.ndarray) -> float:
    """Mean |ori - gen| / 255 over the region's pixels and all 3 channels."""
    img_ori = np.asarray(img_ori)
    img_gen = np.asarray(img_gen)
    region = _check_mask(region, "region")
    for img, what in ((img_ori, "original"), (img_gen, "generated")):
        if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
            raise ValueError(f"{what} image must be uint8 (H, W, 3), got {img.dtype} {img.shape}")
    _check_same_dims(img_ori, img_gen)
    _check_same_dims(img_ori, region)
    if not region.any():
        raise ValueError("diff region is empty")
    a = img_ori[region].astype(np.int64)
    b = img_gen[region].astype(np.int64)
    return float(np.abs(a - b).mean() / 255.0)


def assess_consistency(
    img_ori: np.ndarray,
    img_gen: np.ndarray,
    ori_masks: Sequence[np.ndarray],
    gen_masks: Sequence[np.ndarray],
    cfg: ConsistencyConfig | None = None,
) -> ConsistencyResult:
    """Full verdict: match masks, diff matched regions, apply thresholds.

    Consistent means: every original product found a match, no unmatched
    generated mask covers at least area_floor of the image, and the
    aggregated per-pair pixel diff stays within delta_diff. An empty
    original mask set is flagged via no_products_detected rather than
    passing silently.
    """
    cfg = cfg or ConsistencyConfig()
    cfg.validate()
    _check_same_dims(np.asarray(img_ori), np.asarray(img_gen))
    for masks, what in ((ori_masks, "ori"), (gen_masks, "gen")):
        if masks:
            _check_same_dims(np.asarray(img_ori), masks[0])
    pairs, unmatched_ori, unmatched_gen = match_masks(ori_masks, gen_masks, cfg)

    for pair in pairs:
        region = np.logical_or(ori_masks[pair.ori_index], gen_masks[pair.gen_index])
        pair.pixel_diff = pair_pixel_diff(img_ori, img_gen, region)

    height, width = np.asarray(img_ori).shape[:2]
    image_area = height * width
    significant_gen = [
        j for j in unmatched_gen if int(gen_masks[j].sum()) / image_area >= cfg.area_floor
    ]

    diffs = [p.pixel_diff for p in pairs]
    max_diff = max(diffs) if diffs else None
    agg_diff = (sum(diffs) / len(diffs) if cfg.aggregate == "mean" else max_diff) if diffs else None
    consistent = (
        not unmatched_ori
        and not significant_gen
        and (agg_diff is None or agg_diff <= cfg.delta_diff)
    )
    return ConsistencyResult(
        pairs=pairs,
        unmatched_ori=unmatched_ori,
        unmatched_gen=unmatched_gen,
        max_pixel_diff=max_diff,
        consistent=consistent,
        no_products_detected=len(ori_masks) == 0,
    )
