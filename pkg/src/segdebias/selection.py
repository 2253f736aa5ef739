"""Scoring foreground centroids against the background bank and aggregating
the top fraction into one debiased centroid per class.

A centroid's score is its mean cosine distance to every background centroid
in the dataset; impostor clusters that echo background textures score low,
true object clusters score high.  Per class, the highest-scoring ceil(M * alpha)
centroids are averaged and re-normalized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

from .bank import Centroid, CentroidBank

__all__ = [
    "ScoredCentroid",
    "DebiasedCentroidSet",
    "background_distance",
    "score_foreground",
    "select_debiased",
    "selection_rows",
    "selected_count",
]


@dataclass(frozen=True)
class ScoredCentroid:
    centroid: Centroid
    dist: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.dist <= 1.0):
            raise ValueError(f"dist must lie in [0, 1], got {self.dist}")


@dataclass(frozen=True)
class DebiasedCentroidSet:
    """One unit vector per foreground class, plus how many centroids fed it."""

    per_class: Mapping[int, np.ndarray]
    alpha: float
    selected_counts: Mapping[int, int]

    def __post_init__(self) -> None:
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        per_class = {}
        for class_id, vec in self.per_class.items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.flags.writeable:
                vec = vec.copy()
                vec.setflags(write=False)
            per_class[int(class_id)] = vec
        object.__setattr__(self, "per_class", per_class)
        object.__setattr__(
            self, "selected_counts", {int(c): int(n) for c, n in self.selected_counts.items()}
        )

    def classes(self) -> tuple[int, ...]:
        return tuple(sorted(self.per_class))


def _bank_matrix(bank: CentroidBank) -> np.ndarray:
    return np.stack([c.vector for c in bank.background])


def background_distance(centroid: Union[Centroid, np.ndarray], bank: CentroidBank) -> float:
    """Mean cosine distance from one vector to every background centroid."""
    if not bank.background:
        raise ValueError("no background centroids")
    vec = centroid.vector if isinstance(centroid, Centroid) else np.asarray(centroid, np.float64)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ValueError("degenerate vector: zero norm")
    matrix = _bank_matrix(bank)
    row_norms = np.linalg.norm(matrix, axis=1)
    sims = np.clip((matrix @ vec) / (row_norms * norm), -1.0, 1.0)
    return float(np.mean((1.0 - sims) / 2.0))


def selected_count(num_candidates: int, alpha: float) -> int:
    """ceil(M * alpha) with a guard against float round-up at exact integers."""
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    return max(1, min(num_candidates, math.ceil(num_candidates * alpha - 1e-9)))


def score_foreground(bank: CentroidBank) -> dict[int, list[ScoredCentroid]]:
    """Every foreground centroid scored and sorted descending by distance,
    with ties broken by (image_id, cluster_index) for reproducibility."""
    if not bank.background:
        raise ValueError("no background centroids")
    matrix = _bank_matrix(bank)
    row_norms = np.linalg.norm(matrix, axis=1)
    out: dict[int, list[ScoredCentroid]] = {}
    for class_id in bank.foreground_classes():
        scored = []
        for c in bank.foreground[class_id]:
            sims = np.clip((matrix @ c.vector) / row_norms, -1.0, 1.0)
            scored.append(ScoredCentroid(c, float(np.mean((1.0 - sims) / 2.0))))
        scored.sort(key=lambda s: (-s.dist, s.centroid.image_id, s.centroid.cluster_index))
        out[class_id] = scored
    return out


def select_debiased(bank: CentroidBank, alpha: float) -> DebiasedCentroidSet:
    """Average the top ceil(M * alpha) centroids per class into a unit vector.

    Classes with empty banks are simply absent from the result; the average
    is re-normalized so downstream similarities stay within [-1, 1].
    """
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    per_class: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for class_id, scored in score_foreground(bank).items():
        if not scored:
            continue
        take = selected_count(len(scored), alpha)
        mean = np.mean([s.centroid.vector for s in scored[:take]], axis=0)
        norm = float(np.linalg.norm(mean))
        if norm == 0.0:
            raise ValueError(f"class {class_id}: selected centroids average to zero")
        per_class[class_id] = mean / norm
        counts[class_id] = take
    return DebiasedCentroidSet(per_class=per_class, alpha=alpha, selected_counts=counts)


def selection_rows(bank: CentroidBank, alpha: float) -> list[dict]:
    """Flat per-centroid rows (class_id, image_id, cluster_index, dist,
    selected) backing the export CSV and external scatter plots."""
    rows = []
    for class_id, scored in score_foreground(bank).items():
        take = selected_count(len(scored), alpha)
        for rank, s in enumerate(scored):
            rows.append(
                {
                    "class_id": class_id,
                    "image_id": s.centroid.image_id,
                    "cluster_index": s.centroid.cluster_index,
                    "dist": s.dist,
                    "selected": int(rank < take),
                }
            )
    return rows
