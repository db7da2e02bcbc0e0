"""Construction and filtering of per-round condition sets.

Conditions ("prompts") carry embeddings. The pipeline filters them with
pluggable quality predicates, clusters the survivors with seeded
k-means, keeps the records nearest each centroid for diversity, and
draws a per-round subset from the curated pool. Everything is
deterministic: tie-breaks go to the ascending record id and all
randomness comes from explicit streams.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .numkit import RngStream
from .world import Condition, WorldSpec

__all__ = [
    "PromptRecord",
    "ClusterModel",
    "PassThrough",
    "EmbeddingNormLimit",
    "filter_prompts",
    "kmeans",
    "select_diverse",
    "build_round_prompts",
    "generate_prompt_pool",
    "make_eval_conditions",
    "save_pool",
    "load_pool",
]


@dataclass
class PromptRecord:
    """A condition plus the boolean outcome of every quality predicate."""

    condition: Condition
    tags: dict[str, bool] = field(default_factory=dict)

    @property
    def id(self) -> int:
        return self.condition.id


# ---------------------------------------------------------------------------
# Quality predicates
# ---------------------------------------------------------------------------


class PassThrough:
    """Accepts every record."""

    name = "pass_through"

    def __call__(self, cond: Condition) -> bool:
        return True


class EmbeddingNormLimit:
    """Accepts records whose embedding norm does not exceed a limit."""

    def __init__(self, max_norm: float):
        if max_norm <= 0:
            raise ValueError("max_norm must be positive")
        self.max_norm = float(max_norm)
        self.name = f"norm_le_{self.max_norm:g}"

    def __call__(self, cond: Condition) -> bool:
        return float(np.linalg.norm(cond.embedding)) <= self.max_norm


def filter_prompts(records: list[PromptRecord], predicates) -> list[PromptRecord]:
    """Keep records passing all predicates; order preserved, tags recorded."""
    predicates = list(predicates)
    kept = []
    for rec in records:
        tags = dict(rec.tags)
        for pred in predicates:
            tags[pred.name] = bool(pred(rec.condition))
        rec.tags = tags
        if all(tags[p.name] for p in predicates):
            kept.append(rec)
    return kept


# ---------------------------------------------------------------------------
# K-means (Lloyd with seeded kmeans++ init)
# ---------------------------------------------------------------------------


@dataclass
class ClusterModel:
    """Fitted clustering: centroids, per-record assignment, inertia trace."""

    centroids: np.ndarray          # (k, d)
    assignment: np.ndarray         # (n,) centroid index per record
    inertia: float
    inertia_trace: list[float]


def _nearest(embeddings: np.ndarray, centroids: np.ndarray):
    d2 = np.sum((embeddings[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    assign = np.argmin(d2, axis=1)
    return assign, d2[np.arange(len(embeddings)), assign]


def kmeans(embeddings, k: int, max_iters: int = 100, rng: RngStream | None = None) -> ClusterModel:
    """Lloyd iteration with kmeans++ style seeding from an explicit stream.

    Stops when assignments stabilize or after max_iters. The inertia
    trace is nonincreasing; empty clusters keep their previous centroid.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("embeddings must be a nonempty (n, d) array")
    n_distinct = len(np.unique(X, axis=0))
    if not 1 <= k <= n_distinct:
        raise ValueError(f"k={k} must be in [1, {n_distinct}] (distinct points)")
    if rng is None:
        rng = RngStream(0)

    # kmeans++ seeding: next centroid drawn with prob proportional to the
    # squared distance from the nearest already-chosen one
    centroids = [X[int(rng.integers(0, len(X)))]]
    while len(centroids) < k:
        _, d2 = _nearest(X, np.stack(centroids))
        total = float(d2.sum())
        u = rng.uniform() * total
        idx = int(np.searchsorted(np.cumsum(d2), u, side="right"))
        centroids.append(X[min(idx, len(X) - 1)])
    C = np.stack(centroids)

    assign = None
    trace: list[float] = []
    for _ in range(max_iters):
        new_assign, d2 = _nearest(X, C)
        trace.append(float(d2.sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = X[assign == j]
            if len(members):
                C[j] = members.mean(axis=0)
    assign, d2 = _nearest(X, C)
    return ClusterModel(
        centroids=C,
        assignment=assign,
        inertia=float(d2.sum()),
        inertia_trace=trace,
    )


def select_diverse(records: list[PromptRecord], model: ClusterModel,
                   per_cluster: int) -> list[PromptRecord]:
    """Per centroid, the per_cluster assigned records nearest to it.

    Ties break on ascending record id. Output is ordered by
    (cluster, distance, id).
    """
    if per_cluster < 1:
        raise ValueError("per_cluster must be >= 1")
    if len(records) != len(model.assignment):
        raise ValueError("records and cluster assignment length mismatch")
    out: list[PromptRecord] = []
    for j in range(len(model.centroids)):
        members = [i for i in range(len(records)) if model.assignment[i] == j]
        ranked = sorted(
            members,
            key=lambda i: (
                float(np.linalg.norm(records[i].condition.embedding - model.centroids[j])),
                records[i].id,
            ),
        )
        out.extend(records[i] for i in ranked[:per_cluster])
    return out


# ---------------------------------------------------------------------------
# Per-round draws
# ---------------------------------------------------------------------------


def build_round_prompts(pool: list[Condition], round_index: int, per_round: int,
                        rng: RngStream, exclude: set[int] | None = None) -> list[Condition]:
    """Deterministic per-round draw of conditions from the curated pool.

    The draw is seeded by the round index alone, so the same (seed,
    round) always yields the same set. ``exclude`` supports a
    disjoint-rounds mode; it raises once the pool cannot cover a round.
    """
    candidates = pool if not exclude else [c for c in pool if c.id not in exclude]
    if per_round > len(candidates):
        raise ValueError(
            f"prompt pool exhausted: need {per_round}, have {len(candidates)}"
        )
    idx = rng.child("round-prompts", round_index).permutation(len(candidates))[:per_round]
    return [candidates[i] for i in np.sort(idx)]


# ---------------------------------------------------------------------------
# Pool generation and file IO
# ---------------------------------------------------------------------------


def generate_prompt_pool(spec: WorldSpec, size: int, vague_fraction: float,
                         rng: RngStream, jitter: float = 0.1,
                         vague_radius: tuple[float, float] = (2.5, 4.0),
                         id_start: int = 0) -> list[Condition]:
    """Synthetic prompt pool around the world's group anchors.

    Clean records jitter around anchors round-robin; a configurable
    fraction are "vague" records placed far from every anchor, which the
    norm predicate can filter and the catch-all mixture interprets.
    """
    if size < 1:
        raise ValueError("pool size must be >= 1")
    if not 0.0 <= vague_fraction < 1.0:
        raise ValueError("vague_fraction must be in [0, 1)")
    n_vague = int(round(size * vague_fraction))
    n_clean = size - n_vague
    G = len(spec.groups)
    conditions: list[Condition] = []
    for i in range(n_clean):
        g = i % G
        emb = spec.groups[g].anchor + jitter * rng.child("clean", i).normal(
            spec.groups[g].anchor.size
        )
        conditions.append(Condition(id=id_start + i, label=f"g{g}_v{i // G}", embedding=emb))
    lo, hi = vague_radius
    for j in range(n_vague):
        r = rng.child("vague", j)
        radius = r.uniform(lo, hi)
        theta = r.uniform(0.0, 2.0 * np.pi)
        emb = radius * np.array([np.cos(theta), np.sin(theta)])
        conditions.append(
            Condition(id=id_start + n_clean + j, label=f"vague_{j}", embedding=emb)
        )
    return conditions


EVAL_ID_START = 1_000_000


def make_eval_conditions(spec: WorldSpec, id_start: int = EVAL_ID_START) -> list[Condition]:
    """One held-out condition per group, sitting exactly on its anchor."""
    return [
        Condition(id=id_start + g, label=f"eval_g{g}", embedding=grp.anchor.copy())
        for g, grp in enumerate(spec.groups)
    ]


def save_pool(path: str, conditions: list[Condition]) -> None:
    """Prompt pool file: a JSON list of {id, label, embedding}."""
    rows = [
        {"id": c.id, "label": c.label, "embedding": c.embedding.tolist()}
        for c in conditions
    ]
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(rows, fh, indent=1, sort_keys=True)
    os.replace(tmp, path)


def load_pool(path: str) -> list[Condition]:
    with open(path) as fh:
        rows = json.load(fh)
    if not isinstance(rows, list):
        raise ValueError(f"{path}: prompt pool file must be a JSON list")
    conds = [
        Condition(id=int(r["id"]), label=str(r["label"]),
                  embedding=np.asarray(r["embedding"], dtype=np.float64))
        for r in rows
    ]
    seen = {c.id for c in conds}
    if len(seen) != len(conds):
        raise ValueError(f"{path}: duplicate condition ids")
    return conds
