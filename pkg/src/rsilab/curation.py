"""Preference sampling and distribution-based weighting of synthetic pools.

A generated pool is scored with the analytic world fields, the top
composite scorers are kept as the training subset, and each kept sample
receives a weight of 1 inside a reference-distance threshold that
decays exponentially beyond it. The reference set is the pool the base
model generated before the first self-training round, frozen for the
whole run.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .numkit import require_finite
from .world import WorldSpec, aesthetic_scores, alignment_scores

__all__ = [
    "Sample",
    "ScoreCard",
    "CurationConfig",
    "CuratedEntry",
    "CuratedSet",
    "score_pool",
    "preference_sample",
    "distance_to_reference",
    "distances_to_reference",
    "compute_weight",
    "weights_from_distances",
    "calibrate_from_reference",
    "curate",
    "write_curation_csv",
    "read_curation_csv",
]

DISTANCE_MODES = ("mean", "nearest")


@dataclass
class Sample:
    """One generated point: pool id, coordinates, condition, round of origin."""

    id: int
    x: np.ndarray
    condition: int
    round_origin: int = 0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        require_finite(self.x, f"sample {self.id}")


@dataclass
class ScoreCard:
    """Per-sample scores in [0, 1]; composite aggregates the parts."""

    alignment: float
    aesthetic: float
    composite: float

    def __post_init__(self):
        for name in ("alignment", "aesthetic", "composite"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValueError(f"{name} score must be finite")


@dataclass
class CurationConfig:
    """Knobs for selection and weighting.

    beta is the distance threshold below which weights stay at 1;
    sigma_sq controls how fast weights decay beyond it. Mixture weights
    combine the normalized alignment and aesthetic metrics into the
    composite. distance_mode picks how far a sample is from the
    reference set: mean distance to all reference points (default) or
    distance to the nearest one.
    """

    k_select: int = 300
    beta: float = 1.0
    sigma_sq: float = 1.0
    alignment_weight: float = 0.5
    aesthetic_weight: float = 0.5
    distance_mode: str = "mean"

    def __post_init__(self):
        if self.k_select < 1:
            raise ValueError("k_select must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.sigma_sq <= 0:
            raise ValueError("sigma_sq must be > 0")
        if self.alignment_weight < 0 or self.aesthetic_weight < 0:
            raise ValueError("mixture weights must be nonnegative")
        if abs(self.alignment_weight + self.aesthetic_weight - 1.0) > 1e-9:
            raise ValueError("mixture weights must sum to 1")
        if self.distance_mode not in DISTANCE_MODES:
            raise ValueError(f"distance_mode must be one of {DISTANCE_MODES}")


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


def _minmax(values: np.ndarray) -> np.ndarray:
    """Min-max normalization over the pool; a constant metric maps to 0.5."""
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.full_like(values, 0.5)
    return (values - lo) / (hi - lo)


def score_pool(pool: list[Sample], world: WorldSpec, cfg: CurationConfig) -> list[ScoreCard]:
    """Score every sample against the world's analytic preference fields.

    Raw alignment and aesthetic values are kept on the cards; the
    composite mixes the two after per-pool min-max normalization, so it
    ranks samples within this pool only.
    """
    if not pool:
        raise ValueError("empty pool")
    X = np.stack([s.x for s in pool])
    align = np.empty(len(pool))
    by_cond: dict[int, list[int]] = {}
    for i, s in enumerate(pool):
        by_cond.setdefault(s.condition, []).append(i)
    for cond, idx in by_cond.items():
        align[idx] = alignment_scores(world, X[idx], cond)
    aest = aesthetic_scores(world, X)
    comp = cfg.alignment_weight * _minmax(align) + cfg.aesthetic_weight * _minmax(aest)
    return [
        ScoreCard(alignment=float(align[i]), aesthetic=float(aest[i]), composite=float(comp[i]))
        for i in range(len(pool))
    ]


def preference_sample(scores: list[ScoreCard], k_select: int) -> list[int]:
    """Indices of the k_select highest composites, ties to the lower index.

    Returns min(k_select, pool size) indices in ascending order.
    """
    if k_select < 1:
        raise ValueError("k_select must be >= 1")
    comp = np.array([s.composite for s in scores])
    order = np.lexsort((np.arange(len(comp)), -comp))
    return sorted(int(i) for i in order[:k_select])


# ---------------------------------------------------------------------------
# Reference distances and weights
# ---------------------------------------------------------------------------


def distances_to_reference(X, reference, mode: str = "mean") -> np.ndarray:
    """Distance of each row of X from the reference set."""
    ref = np.atleast_2d(np.asarray(reference, dtype=np.float64))
    if ref.shape[0] == 0:
        raise ValueError("empty reference set")
    if mode not in DISTANCE_MODES:
        raise ValueError(f"distance mode must be one of {DISTANCE_MODES}")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out = np.empty(X.shape[0])
    chunk = max(1, 2_000_000 // max(ref.shape[0], 1))
    for start in range(0, X.shape[0], chunk):
        D = cdist(X[start:start + chunk], ref)
        out[start:start + chunk] = D.mean(axis=1) if mode == "mean" else D.min(axis=1)
    return out


def distance_to_reference(sample, reference, mode: str = "mean") -> float:
    """Mean (default) or nearest Euclidean distance from one point."""
    x = np.asarray(sample.x if isinstance(sample, Sample) else sample, dtype=np.float64)
    return float(distances_to_reference(x[None, :], reference, mode)[0])


def compute_weight(dist: float, beta: float, sigma_sq: float) -> float:
    """Two-branch sample weight: 1 inside the threshold, exp decay beyond.

    w = 1 if dist <= beta else exp(-(dist - beta) / sigma_sq); continuous
    at the threshold and strictly positive (floored at the smallest
    normal float to survive exp underflow).
    """
    if sigma_sq <= 0:
        raise ValueError("sigma_sq must be > 0")
    if beta < 0:
        raise ValueError("beta must be >= 0")
    if dist < 0:
        raise ValueError("distance must be >= 0")
    if dist <= beta:
        return 1.0
    return float(max(np.exp(-(dist - beta) / sigma_sq), np.finfo(np.float64).tiny))


def weights_from_distances(dists: np.ndarray, beta: float, sigma_sq: float) -> np.ndarray:
    return np.array([compute_weight(float(d), beta, sigma_sq) for d in dists])


def calibrate_from_reference(reference, mode: str = "mean") -> tuple[float, float]:
    """Scale-appropriate defaults from the reference set's own geometry.

    beta = 90th percentile of reference self-distances; sigma_sq = half
    their interquartile range. Computed once per run, before round 1.
    """
    ref = np.asarray(reference, dtype=np.float64)
    d = distances_to_reference(ref, ref, mode)
    beta = float(np.percentile(d, 90))
    sigma_sq = float((np.percentile(d, 75) - np.percentile(d, 25)) / 2.0)
    if sigma_sq <= 0:
        raise ValueError("degenerate reference set: zero distance spread")
    return beta, sigma_sq


# ---------------------------------------------------------------------------
# Full curation pass
# ---------------------------------------------------------------------------


@dataclass
class CuratedEntry:
    sample: Sample
    card: ScoreCard
    distance: float
    weight: float


@dataclass
class CuratedSet:
    """Selected samples with score cards and weights for one round."""

    entries: list[CuratedEntry]
    round_index: int

    def __post_init__(self):
        for e in self.entries:
            if not 0.0 < e.weight <= 1.0:
                raise ValueError(f"weight {e.weight} outside (0, 1]")

    def __len__(self) -> int:
        return len(self.entries)


def curate(pool: list[Sample], world: WorldSpec, reference, cfg: CurationConfig,
           round_index: int = 0) -> CuratedSet:
    """Score, select the top composites, and weight by reference distance."""
    if not pool:
        raise ValueError("empty pool")
    cards = score_pool(pool, world, cfg)
    selected = preference_sample(cards, cfg.k_select)
    X_sel = np.stack([pool[i].x for i in selected])
    dists = distances_to_reference(X_sel, reference, cfg.distance_mode)
    weights = weights_from_distances(dists, cfg.beta, cfg.sigma_sq)
    entries = [
        CuratedEntry(sample=pool[i], card=cards[i], distance=float(d), weight=float(w))
        for i, d, w in zip(selected, dists, weights)
    ]
    return CuratedSet(entries=entries, round_index=round_index)


# ---------------------------------------------------------------------------
# Per-round curation dump
# ---------------------------------------------------------------------------

CSV_COLUMNS = [
    "round", "sample_id", "condition", "alignment", "aesthetic",
    "composite", "distance", "weight", "selected",
]


def write_curation_csv(path: str, round_index: int, pool: list[Sample],
                       cards: list[ScoreCard], selected: list[int],
                       distances, weights) -> None:
    """Dump every pool sample with its scores; distance/weight on selected rows."""
    sel_pos = {idx: j for j, idx in enumerate(selected)}
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for i, (s, c) in enumerate(zip(pool, cards)):
            j = sel_pos.get(i)
            writer.writerow([
                round_index, s.id, s.condition,
                repr(c.alignment), repr(c.aesthetic), repr(c.composite),
                repr(float(distances[j])) if j is not None else "",
                repr(float(weights[j])) if j is not None else "",
                int(j is not None),
            ])
    os.replace(tmp, path)


def read_curation_csv(path: str) -> list[dict]:
    """Rows back as dicts with floats parsed; empty fields become None."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append({
                "round": int(row["round"]),
                "sample_id": int(row["sample_id"]),
                "condition": int(row["condition"]),
                "alignment": float(row["alignment"]),
                "aesthetic": float(row["aesthetic"]),
                "composite": float(row["composite"]),
                "distance": float(row["distance"]) if row["distance"] else None,
                "weight": float(row["weight"]) if row["weight"] else None,
                "selected": bool(int(row["selected"])),
            })
    return out
