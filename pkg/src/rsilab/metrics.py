"""Round-level evaluation: distribution shift, preference, hallucination.

Distribution shift is the unbiased squared maximum mean discrepancy
with a Gaussian kernel against a frozen reference draw from the
analytic world. The preference trajectory uses the raw (not
pool-normalized) world scores so values are comparable across rounds.
Hallucination is an own-condition density falling below a threshold
calibrated from world draws at a configured quantile.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .diffusion import DenoiserModel, NoiseSchedule, generate_batch
from .numkit import RngStream
from .world import Condition, WorldSpec, aesthetic_scores, alignment_scores, mixture_density

__all__ = [
    "RoundMetrics",
    "EvalSettings",
    "mmd",
    "median_heuristic_bandwidth",
    "calibrate_density_threshold",
    "hallucination_rate",
    "coverage_by_condition",
    "evaluate_round",
    "detect_peak",
]

METRICS_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# Maximum mean discrepancy
# ---------------------------------------------------------------------------


def median_heuristic_bandwidth(A, B=None) -> float:
    """Median pairwise distance of the pooled points (1.0 if degenerate)."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    pooled = A if B is None else np.vstack([A, np.atleast_2d(np.asarray(B, dtype=np.float64))])
    med = float(np.median(pdist(pooled)))
    return med if med > 0 else 1.0


def mmd(set_a, set_b, bandwidth: float | None = None) -> float:
    """Unbiased squared MMD with a Gaussian kernel, clamped at 0.

    Uses the median heuristic over the pooled sets when bandwidth is
    unset. Exactly symmetric in its arguments: the cross term sums the
    kernel matrix in both layouts and averages, so swapping A and B adds
    the same numbers in the same commutative way.
    """
    A = np.atleast_2d(np.asarray(set_a, dtype=np.float64))
    B = np.atleast_2d(np.asarray(set_b, dtype=np.float64))
    m, n = A.shape[0], B.shape[0]
    if m < 2 or n < 2:
        raise ValueError("both sets need at least two points")
    if bandwidth is None:
        bandwidth = median_heuristic_bandwidth(A, B)
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    denom = 2.0 * bandwidth * bandwidth
    Kaa = np.exp(-cdist(A, A, "sqeuclidean") / denom)
    Kbb = np.exp(-cdist(B, B, "sqeuclidean") / denom)
    Kab = np.exp(-cdist(A, B, "sqeuclidean") / denom)
    term_a = (Kaa.sum() - np.trace(Kaa)) / (m * (m - 1))
    term_b = (Kbb.sum() - np.trace(Kbb)) / (n * (n - 1))
    cross = 0.5 * (Kab.sum() + Kab.T.sum())
    value = term_a + term_b - 2.0 * cross / (m * n)
    return max(float(value), 0.0)


# ---------------------------------------------------------------------------
# Hallucination
# ---------------------------------------------------------------------------


def calibrate_density_threshold(world: WorldSpec, conditions: list[Condition],
                                quantile: float, n_draws: int, rng: RngStream) -> float:
    """Density threshold: the given quantile of own-condition densities
    over world draws spread evenly across the conditions."""
    if not 0.0 < quantile < 1.0:
        raise ValueError("quantile must be in (0, 1)")
    if not conditions:
        raise ValueError("need at least one condition")
    from .world import sample_world

    densities = []
    per = [n_draws // len(conditions) + (1 if i < n_draws % len(conditions) else 0)
           for i in range(len(conditions))]
    for i, cond in enumerate(conditions):
        if per[i] == 0:
            continue
        X = sample_world(world, cond.id, per[i], rng.child("calib", cond.id))
        densities.append(mixture_density(world.components_for(cond.id), X))
    return float(np.quantile(np.concatenate(densities), quantile))


def _hallucination_rate_arrays(X, condition_ids, world: WorldSpec, threshold) -> float:
    if threshold is None or not np.isfinite(threshold):
        raise ValueError("density threshold is uncalibrated")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    condition_ids = np.asarray(condition_ids)
    flags = np.empty(X.shape[0], dtype=bool)
    for cond in np.unique(condition_ids):
        mask = condition_ids == cond
        dens = mixture_density(world.components_for(int(cond)), X[mask])
        flags[mask] = dens < threshold
    return float(flags.mean())


def hallucination_rate(samples, world: WorldSpec, threshold: float) -> float:
    """Fraction of samples whose own-condition density is below threshold.

    ``samples`` is a list of generated-sample records (each with ``.x``
    and ``.condition``); the threshold must come from
    calibrate_density_threshold or an explicit config value.
    """
    X = np.stack([s.x for s in samples])
    conds = np.array([s.condition for s in samples])
    return _hallucination_rate_arrays(X, conds, world, threshold)


def coverage_by_condition(X, eval_conditions: list[Condition], world: WorldSpec) -> dict[int, float]:
    """Fraction of samples nearest each condition's component means.

    Every sample lands on exactly one condition (ties to the lowest
    condition id), so the fractions sum to 1.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    conds = sorted(eval_conditions, key=lambda c: c.id)
    best = np.full(X.shape[0], np.inf)
    owner = np.zeros(X.shape[0], dtype=np.intp)
    for idx, cond in enumerate(conds):
        means = np.stack([c.mean for c in world.components_for(cond.id)])
        d = cdist(X, means).min(axis=1)
        better = d < best
        best[better] = d[better]
        owner[better] = idx
    counts = np.bincount(owner, minlength=len(conds))
    return {cond.id: float(counts[i] / X.shape[0]) for i, cond in enumerate(conds)}


# ---------------------------------------------------------------------------
# Round evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalSettings:
    """Frozen evaluation recipe shared by every round of a run."""

    n_samples: int = 1000
    alignment_weight: float = 0.5
    aesthetic_weight: float = 0.5
    bandwidth: float | None = None
    density_threshold: float | None = None


@dataclass
class RoundMetrics:
    """Everything measured about one round's model."""

    round: int
    mmd_to_reference: float
    mean_composite: float
    hallucination_rate: float
    coverage: dict[int, float]
    mean_alignment: float = 0.0
    mean_aesthetic: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.hallucination_rate <= 1.0:
            raise ValueError("hallucination_rate must be in [0, 1]")
        if self.mmd_to_reference < 0.0:
            raise ValueError("mmd_to_reference must be >= 0")
        total = sum(self.coverage.values())
        if self.coverage and abs(total - 1.0) > 1e-9:
            raise ValueError(f"coverage fractions sum to {total}, not 1")

    def to_dict(self) -> dict:
        return {
            "schema_version": METRICS_SCHEMA_VERSION,
            "round": self.round,
            "mmd_to_reference": self.mmd_to_reference,
            "mean_composite": self.mean_composite,
            "hallucination_rate": self.hallucination_rate,
            "coverage": {str(k): v for k, v in self.coverage.items()},
            "mean_alignment": self.mean_alignment,
            "mean_aesthetic": self.mean_aesthetic,
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "RoundMetrics":
        if blob.get("schema_version") != METRICS_SCHEMA_VERSION:
            raise ValueError(f"unsupported metrics schema {blob.get('schema_version')!r}")
        return cls(
            round=int(blob["round"]),
            mmd_to_reference=float(blob["mmd_to_reference"]),
            mean_composite=float(blob["mean_composite"]),
            hallucination_rate=float(blob["hallucination_rate"]),
            coverage={int(k): float(v) for k, v in blob["coverage"].items()},
            mean_alignment=float(blob["mean_alignment"]),
            mean_aesthetic=float(blob["mean_aesthetic"]),
        )


def _even_split(n: int, k: int) -> list[int]:
    return [n // k + (1 if i < n % k else 0) for i in range(k)]


def evaluate_round(model: DenoiserModel, eval_conditions: list[Condition],
                   world: WorldSpec, d0_eval, settings: EvalSettings,
                   sched: NoiseSchedule, rng: RngStream, round_index: int) -> RoundMetrics:
    """Generate a fixed-size held-out eval set and measure all fields.

    Deterministic given the stream; the eval conditions are never part of
    round training, so this tracks how the shared model body generalizes.
    """
    if not eval_conditions:
        raise ValueError("need at least one eval condition")
    conds: list[int] = []
    for cond, cnt in zip(eval_conditions, _even_split(settings.n_samples, len(eval_conditions))):
        conds.extend([cond.id] * cnt)
    X = generate_batch(model, conds, sched, rng.child("gen"))

    cond_arr = np.asarray(conds)
    align = np.empty(len(conds))
    for cond in eval_conditions:
        mask = cond_arr == cond.id
        if mask.any():
            align[mask] = alignment_scores(world, X[mask], cond.id)
    aest = aesthetic_scores(world, X)
    mean_alignment = float(align.mean())
    mean_aesthetic = float(aest.mean())
    composite = (settings.alignment_weight * mean_alignment
                 + settings.aesthetic_weight * mean_aesthetic)

    return RoundMetrics(
        round=round_index,
        mmd_to_reference=mmd(X, d0_eval, settings.bandwidth),
        mean_composite=composite,
        hallucination_rate=_hallucination_rate_arrays(
            X, cond_arr, world, settings.density_threshold),
        coverage=coverage_by_condition(X, eval_conditions, world),
        mean_alignment=mean_alignment,
        mean_aesthetic=mean_aesthetic,
    )


def detect_peak(trajectory) -> int:
    """Index of the maximum value; ties go to the earliest round."""
    values = np.asarray(list(trajectory), dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty trajectory")
    return int(np.argmax(values))
