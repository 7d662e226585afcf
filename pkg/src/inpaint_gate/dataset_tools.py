"""Manifest handling, feature clustering, balancing, splits and pairing.

A manifest is JSONL, one record per original image, each listing the
generated variants with their human pass/fail labels and the file paths of
the embeddings, images and masks the engine consumes. Clustering and
balancing mirror a category-rebalancing workflow: cluster originals by
their pooled embeddings, then oversample small clusters up to a target.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

from .reward_head import TrainingPair
from .rng import Pcg32
from .tensor_io import load_tensor


class ManifestError(ValueError):
    """Invalid manifest content; message names the offending line."""


@dataclass
class GeneratedVariant:
    embedding: str
    image: str
    masks: list[str]
    label: int


@dataclass
class ManifestRecord:
    id: str
    original_embedding: str
    original_image: str
    original_masks: list[str]
    generated: list[GeneratedVariant]
    cluster_id: int | None = None
    augmented: bool = False


def _require(obj: dict, key: str, line_no: int):
    if key not in obj:
        raise ManifestError(f"line {line_no}: missing field {key!r}")
    return obj[key]


def _non_empty_str(value, key: str, line_no: int) -> str:
    if not isinstance(value, str) or not value:
        raise ManifestError(f"line {line_no}: field {key!r} must be a non-empty string")
    return value


def _parse_record(obj: dict, line_no: int) -> ManifestRecord:
    rec_id = _non_empty_str(_require(obj, "id", line_no), "id", line_no)
    original_embedding = _non_empty_str(
        _require(obj, "original_embedding", line_no), "original_embedding", line_no
    )
    original_image = _non_empty_str(
        _require(obj, "original_image", line_no), "original_image", line_no
    )
    original_masks = _require(obj, "original_masks", line_no)
    if not isinstance(original_masks, list):
        raise ManifestError(f"line {line_no}: 'original_masks' must be a list")
    original_masks = [_non_empty_str(p, "original_masks", line_no) for p in original_masks]
    generated_raw = _require(obj, "generated", line_no)
    if not isinstance(generated_raw, list) or len(generated_raw) == 0:
        raise ManifestError(f"line {line_no}: 'generated' must be a non-empty list")
    generated = []
    for entry in generated_raw:
        if not isinstance(entry, dict):
            raise ManifestError(f"line {line_no}: generated entries must be objects")
        label = _require(entry, "label", line_no)
        if label not in (0, 1):
            raise ManifestError(f"line {line_no}: label must be 0 or 1, got {label!r}")
        masks = entry.get("masks", [])
        if not isinstance(masks, list):
            raise ManifestError(f"line {line_no}: generated 'masks' must be a list")
        generated.append(
            GeneratedVariant(
                embedding=_non_empty_str(_require(entry, "embedding", line_no), "embedding", line_no),
                image=_non_empty_str(_require(entry, "image", line_no), "image", line_no),
                masks=[_non_empty_str(p, "masks", line_no) for p in masks],
                label=int(label),
            )
        )
    cluster_id = obj.get("cluster_id")
    if cluster_id is not None and not isinstance(cluster_id, int):
        raise ManifestError(f"line {line_no}: 'cluster_id' must be an integer or null")
    augmented = obj.get("augmented", False)
    if not isinstance(augmented, bool):
        raise ManifestError(f"line {line_no}: 'augmented' must be a boolean")
    return ManifestRecord(
        id=rec_id,
        original_embedding=original_embedding,
        original_image=original_image,
        original_masks=original_masks,
        generated=generated,
        cluster_id=cluster_id,
        augmented=augmented,
    )


def load_manifest(source: IO[str]) -> list[ManifestRecord]:
    """Parse JSONL records; every error message carries its line number."""
    records = []
    for line_no, line in enumerate(source, start=1):
        text = line.strip()
        if not text:
            continue
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"line {line_no}: malformed JSON: {exc.msg}") from None
        if not isinstance(obj, dict):
            raise ManifestError(f"line {line_no}: record must be a JSON object")
        records.append(_parse_record(obj, line_no))
    return records


def load_manifest_file(path: str | Path) -> list[ManifestRecord]:
    with open(path, "r", encoding="utf-8") as f:
        return load_manifest(f)


def record_to_json_dict(record: ManifestRecord) -> dict:
    return {
        "id": record.id,
        "original_embedding": record.original_embedding,
        "original_image": record.original_image,
        "original_masks": list(record.original_masks),
        "generated": [
            {
                "embedding": g.embedding,
                "image": g.image,
                "masks": list(g.masks),
                "label": g.label,
            }
            for g in record.generated
        ],
        "cluster_id": record.cluster_id,
        "augmented": record.augmented,
    }


def save_manifest(records: Iterable[ManifestRecord], sink: IO[str]) -> None:
    for record in records:
        sink.write(json.dumps(record_to_json_dict(record), sort_keys=True) + "\n")


def save_manifest_file(path: str | Path, records: Iterable[ManifestRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        save_manifest(records, f)


# ------------------------------------------------------------ clustering


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    inertia_history: list[float] = field(default_factory=list)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: Pcg32) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.below(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            idx = rng.below(n)
        else:
            u = rng.random() * total
            idx = min(int(np.searchsorted(np.cumsum(d2), u, side="right")), n - 1)
        centroids[c] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[c]) ** 2).sum(axis=1))
    return centroids


def kmeans(
    points: np.ndarray,
    k: int,
    seed: int,
    max_iter: int = 300,
    tol: float = 1e-4,
) -> ClusterModel:
    """Lloyd's algorithm with k-means++ init, deterministic for a seed.

    Empty clusters are re-seeded with the point farthest from its assigned
    centroid. Iterates until the largest centroid shift drops below tol.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"points must be an (n, d) matrix, got shape {points.shape}")
    n = points.shape[0]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    rng = Pcg32(seed)
    centroids = _kmeans_pp_init(points, k, rng)
    history: list[float] = []
    assignments = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2 = _sq_dists(points, centroids)
        assignments = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), assignments].sum()))
        new_centroids = centroids.copy()
        for c in range(k):
            members = assignments == c
            if members.any():
                new_centroids[c] = points[members].mean(axis=0)
        assigned_d2 = d2[np.arange(n), assignments]
        for c in range(k):
            if not (assignments == c).any():
                farthest = int(assigned_d2.argmax())
                new_centroids[c] = points[farthest]
                assigned_d2[farthest] = 0.0
        shift = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        if shift < tol:
            break
    d2 = _sq_dists(points, centroids)
    assignments = d2.argmin(axis=1)
    inertia = float(d2[np.arange(n), assignments].sum())
    history.append(inertia)
    return ClusterModel(
        k=k,
        centroids=centroids,
        assignments=assignments,
        inertia=inertia,
        inertia_history=history,
    )


# -------------------------------------------------------------- balance


def balance(
    records: Sequence[ManifestRecord],
    assignments: Sequence[int],
    seed: int,
    target: int | str = "max",
    k: int | None = None,
) -> list[ManifestRecord]:
    """Oversample small clusters up to the target size.

    Originals are kept untouched and in order; duplicates (sampled with
    replacement, PCG32) are appended with augmented=True. target="max"
    uses the largest cluster's size.
    """
    if len(assignments) != len(records):
        raise ValueError(
            f"assignments cover {len(assignments)} records, expected {len(records)}"
        )
    clusters: dict[int, list[int]] = {}
    for idx, cid in enumerate(assignments):
        clusters.setdefault(int(cid), []).append(idx)
    if target == "max":
        target_count = max((len(v) for v in clusters.values()), default=0)
    else:
        target_count = int(target)
        if target_count < 0:
            raise ValueError(f"target must be >= 0, got {target_count}")
    cluster_ids = sorted(clusters) if k is None else list(range(k))

    rng = Pcg32(seed)
    out = [
        replace(records[idx], cluster_id=int(assignments[idx]))
        for idx in range(len(records))
    ]
    extras: list[ManifestRecord] = []
    for cid in cluster_ids:
        members = clusters.get(cid, [])
        if not members:
            if target_count > 0:
                raise ValueError(f"cluster {cid} is empty but target is {target_count}")
            continue
        for _ in range(max(0, target_count - len(members))):
            pick = members[rng.below(len(members))]
            extras.append(replace(records[pick], cluster_id=cid, augmented=True))
    return out + extras


# ---------------------------------------------------------------- split


def split(
    records: Sequence[ManifestRecord],
    fractions: tuple[float, float],
    seed: int,
) -> tuple[list[ManifestRecord], list[ManifestRecord], list[ManifestRecord]]:
    """Seeded shuffle, then contiguous (train, val, rest) split.

    train gets floor(f_train * n) records. When the fractions sum to 1 the
    val set is the exact complement (so train and val always partition the
    input); otherwise val gets floor(f_val * n) and the remainder lands in
    rest.
    """
    f_train, f_val = fractions
    if f_train <= 0 or f_val <= 0:
        raise ValueError(f"fractions must be positive, got {fractions}")
    if f_train + f_val > 1.0 + 1e-9:
        raise ValueError(f"fractions must sum to at most 1, got {fractions}")
    order = list(range(len(records)))
    Pcg32(seed).shuffle(order)
    shuffled = [records[i] for i in order]
    n_train = int(f_train * len(records))
    if f_train + f_val >= 1.0 - 1e-9:
        n_val = len(records) - n_train
    else:
        n_val = int(f_val * len(records))
    train = shuffled[:n_train]
    val = shuffled[n_train : n_train + n_val]
    rest = shuffled[n_train + n_val :]
    return train, val, rest


# ---------------------------------------------------------------- pairs


@dataclass
class PairRef:
    """Embedding-file paths for one (original, good, bad) training pair."""

    record_id: str
    original: str
    good: str
    bad: str


def build_pairs(records: Sequence[ManifestRecord]) -> tuple[list[PairRef], list[str]]:
    """Cross product of each record's pass and fail variants.

    Records lacking either class contribute no pairs and are returned in
    the skipped list.
    """
    pairs: list[PairRef] = []
    skipped: list[str] = []
    for record in records:
        good = [g.embedding for g in record.generated if g.label == 1]
        bad = [g.embedding for g in record.generated if g.label == 0]
        if not good or not bad:
            skipped.append(record.id)
            continue
        for g in good:
            for b in bad:
                pairs.append(PairRef(record_id=record.id, original=record.original_embedding, good=g, bad=b))
    return pairs, skipped


def load_training_pairs(
    pair_refs: Sequence[PairRef], base_dir: str | Path = "."
) -> list[TrainingPair]:
    """Load referenced embeddings into TrainingPair objects.

    Paths resolve relative to base_dir; errors name the offending file.
    """
    base = Path(base_dir)
    cache: dict[str, np.ndarray] = {}

    def load(path_str: str) -> np.ndarray:
        if path_str not in cache:
            path = base / path_str
            try:
                arr = load_tensor(path)
            except OSError as exc:
                raise OSError(f"cannot read embedding file {path}: {exc}") from None
            if arr.ndim != 2:
                raise ValueError(f"embedding file {path} must be 2-d, got {arr.ndim} dims")
            cache[path_str] = arr.astype(np.float64)
        return cache[path_str]

    return [
        TrainingPair(original=load(p.original), good=load(p.good), bad=load(p.bad))
        for p in pair_refs
    ]
