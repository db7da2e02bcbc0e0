"""Analytic ground-truth world standing in for real data and preference.

Each condition id maps, through its embedding, to a Gaussian-mixture
group: embeddings close to a group anchor inherit that group's mixture,
embeddings far from every anchor fall back to a broad catch-all mixture
(the "vague prompt" semantics). Two closed-form fields replace learned
scorers: an alignment score derived from the condition's own mixture
density, and a condition-independent aesthetic score that grows along a
preferred direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numkit import RngStream, as_vec

__all__ = [
    "MixtureComponent",
    "ConditionGroup",
    "Condition",
    "WorldSpec",
    "build_world",
    "world_to_config",
    "sample_world",
    "mixture_density",
    "true_alignment",
    "alignment_scores",
    "true_aesthetic",
    "aesthetic_scores",
]


@dataclass
class MixtureComponent:
    """One diagonal Gaussian component: mean, per-axis variance, weight."""

    mean: np.ndarray
    var: np.ndarray
    weight: float

    def __post_init__(self):
        self.mean = as_vec(self.mean, "component mean")
        self.var = as_vec(self.var, "component variance")
        if self.mean.shape != self.var.shape:
            raise ValueError("mean/variance dimension mismatch")
        if np.any(self.var <= 0):
            raise ValueError("component variances must be positive")
        if self.weight <= 0:
            raise ValueError("component weight must be positive")


@dataclass
class ConditionGroup:
    """A semantic group: an anchor in embedding space plus its mixture."""

    name: str
    anchor: np.ndarray
    components: list[MixtureComponent]

    def __post_init__(self):
        self.anchor = as_vec(self.anchor, "group anchor")
        total = sum(c.weight for c in self.components)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"group {self.name!r} mixing weights sum to {total}, not 1")


@dataclass
class Condition:
    """A prompt-like condition: unique id, label, and an embedding vector."""

    id: int
    label: str
    embedding: np.ndarray

    def __post_init__(self):
        self.id = int(self.id)
        self.embedding = as_vec(self.embedding, f"embedding of condition {self.id}")


class WorldSpec:
    """Immutable-by-convention world: groups, catch-all mixture, scorers.

    Conditions must be registered before sampling or scoring; the group
    of a condition is the nearest anchor within ``assign_radius`` of its
    embedding, else the catch-all ("vague") mixture.
    """

    def __init__(self, groups: list[ConditionGroup], vague_components: list[MixtureComponent],
                 assign_radius: float, pref_direction, pref_sharpness: float,
                 alignment_scale: float):
        if not groups:
            raise ValueError("world needs at least one group")
        if assign_radius <= 0:
            raise ValueError("assign_radius must be positive")
        if pref_sharpness <= 0 or alignment_scale <= 0:
            raise ValueError("scorer parameters must be positive")
        total = sum(c.weight for c in vague_components)
        if abs(total - 1.0) > 1e-9:
            raise ValueError("vague mixing weights must sum to 1")
        self.groups = list(groups)
        self.vague_components = list(vague_components)
        self.assign_radius = float(assign_radius)
        self.pref_direction = as_vec(pref_direction, "preferred direction")
        self.pref_sharpness = float(pref_sharpness)
        self.alignment_scale = float(alignment_scale)
        self._conditions: dict[int, Condition] = {}
        self._group_of: dict[int, int | None] = {}

    # -- condition registry -------------------------------------------------

    def register(self, conditions) -> None:
        for cond in conditions:
            self.register_condition(cond)

    def register_condition(self, cond: Condition) -> None:
        if cond.id in self._conditions:
            existing = self._conditions[cond.id]
            if not np.array_equal(existing.embedding, cond.embedding):
                raise ValueError(f"condition id {cond.id} already registered differently")
            return
        anchors = np.stack([g.anchor for g in self.groups])
        dists = np.linalg.norm(anchors - cond.embedding[None, :], axis=1)
        best = int(np.argmin(dists))
        self._conditions[cond.id] = cond
        self._group_of[cond.id] = best if dists[best] <= self.assign_radius else None

    def condition(self, c) -> Condition:
        try:
            return self._conditions[int(c)]
        except KeyError:
            raise KeyError(f"unknown condition id {c!r}") from None

    def group_index(self, c) -> int | None:
        self.condition(c)
        return self._group_of[int(c)]

    def components_for(self, c) -> list[MixtureComponent]:
        gi = self.group_index(c)
        return self.vague_components if gi is None else self.groups[gi].components

    @property
    def condition_ids(self) -> list[int]:
        return sorted(self._conditions)

    @property
    def data_dim(self) -> int:
        return self.groups[0].components[0].mean.size


# ---------------------------------------------------------------------------
# Densities and sampling
# ---------------------------------------------------------------------------


def mixture_density(components: list[MixtureComponent], X) -> np.ndarray:
    """Mixture pdf at each row of X. X may be (n, d) or a single (d,) point."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out = np.zeros(X.shape[0])
    for comp in components:
        diff = X - comp.mean[None, :]
        expo = -0.5 * np.sum(diff * diff / comp.var[None, :], axis=1)
        norm = np.sqrt((2.0 * np.pi) ** comp.mean.size * np.prod(comp.var))
        out += comp.weight * np.exp(expo) / norm
    return out


def sample_mixture(components: list[MixtureComponent], n: int, rng: RngStream) -> np.ndarray:
    """n i.i.d. draws from a diagonal Gaussian mixture."""
    weights = np.array([c.weight for c in components])
    picks = np.searchsorted(np.cumsum(weights), rng.uniform(size=n), side="right")
    picks = np.minimum(picks, len(components) - 1)
    d = components[0].mean.size
    out = rng.normal((n, d))
    for k, comp in enumerate(components):
        mask = picks == k
        out[mask] = comp.mean + np.sqrt(comp.var) * out[mask]
    return out


def sample_world(spec: WorldSpec, c, n: int, rng: RngStream) -> np.ndarray:
    """n i.i.d. draws from condition c's mixture. Shape (n, d)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return sample_mixture(spec.components_for(c), n, rng)


# ---------------------------------------------------------------------------
# Scorers
# ---------------------------------------------------------------------------


def _squash_density(p: np.ndarray, scale: float) -> np.ndarray:
    # monotone map of densities into [0, 1); high density -> near 1
    return p / (p + scale)


def alignment_scores(spec: WorldSpec, X, c) -> np.ndarray:
    """Alignment of each row of X with condition c's mixture, in [0, 1]."""
    p = mixture_density(spec.components_for(c), X)
    return _squash_density(p, spec.alignment_scale)


def true_alignment(spec: WorldSpec, x, c) -> float:
    """Squashed own-condition mixture density of a single point."""
    return float(alignment_scores(spec, np.atleast_2d(x), c)[0])


def aesthetic_scores(spec: WorldSpec, X) -> np.ndarray:
    """Condition-independent preference field: logistic along a direction."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    z = spec.pref_sharpness * (X @ spec.pref_direction)
    return 1.0 / (1.0 + np.exp(-z))


def true_aesthetic(spec: WorldSpec, x) -> float:
    return float(aesthetic_scores(spec, np.atleast_2d(x))[0])


# ---------------------------------------------------------------------------
# Built-in worlds and config round-trip
# ---------------------------------------------------------------------------

RINGS8 = "rings-8"


def _rings8_world() -> WorldSpec:
    """Eight groups on two concentric rings in 2-D.

    Group k sits at angle 2*pi*k/8 with one component on the inner ring
    (radius 1) and one on the outer ring (radius 2), diagonal variance
    0.05 each. Anchors are the unit-circle directions. The catch-all
    mixture is a single wide Gaussian at the origin: fitting it is a
    real capacity tax, which is what makes vague prompts poisonous.
    """
    groups = []
    for k in range(8):
        theta = 2.0 * np.pi * k / 8.0
        u = np.array([np.cos(theta), np.sin(theta)])
        comps = [
            MixtureComponent(mean=1.0 * u, var=np.array([0.05, 0.05]), weight=0.5),
            MixtureComponent(mean=2.0 * u, var=np.array([0.05, 0.05]), weight=0.5),
        ]
        groups.append(ConditionGroup(name=f"g{k}", anchor=u, components=comps))
    vague = [MixtureComponent(mean=np.zeros(2), var=np.array([4.0, 4.0]), weight=1.0)]
    return WorldSpec(
        groups=groups,
        vague_components=vague,
        assign_radius=0.5,
        pref_direction=np.array([1.0, 0.0]),
        pref_sharpness=2.0,
        alignment_scale=0.5,
    )


def build_world(spec) -> WorldSpec:
    """Build a world from a built-in name or a config mapping."""
    if isinstance(spec, str):
        if spec == RINGS8:
            return _rings8_world()
        raise ValueError(f"unknown built-in world {spec!r}")
    return _world_from_config(spec)


def _world_from_config(cfg: dict) -> WorldSpec:
    def comp(c):
        return MixtureComponent(
            mean=np.asarray(c["mean"], dtype=np.float64),
            var=np.asarray(c["var"], dtype=np.float64),
            weight=float(c["weight"]),
        )

    groups = [
        ConditionGroup(
            name=g["name"],
            anchor=np.asarray(g["anchor"], dtype=np.float64),
            components=[comp(c) for c in g["components"]],
        )
        for g in cfg["groups"]
    ]
    return WorldSpec(
        groups=groups,
        vague_components=[comp(c) for c in cfg["vague_components"]],
        assign_radius=float(cfg["assign_radius"]),
        pref_direction=np.asarray(cfg["pref_direction"], dtype=np.float64),
        pref_sharpness=float(cfg["pref_sharpness"]),
        alignment_scale=float(cfg["alignment_scale"]),
    )


def world_to_config(spec: WorldSpec) -> dict:
    """Serializable form accepted back by build_world."""
    def comp(c: MixtureComponent) -> dict:
        return {"mean": c.mean.tolist(), "var": c.var.tolist(), "weight": c.weight}

    return {
        "groups": [
            {
                "name": g.name,
                "anchor": g.anchor.tolist(),
                "components": [comp(c) for c in g.components],
            }
            for g in spec.groups
        ],
        "vague_components": [comp(c) for c in spec.vague_components],
        "assign_radius": spec.assign_radius,
        "pref_direction": spec.pref_direction.tolist(),
        "pref_sharpness": spec.pref_sharpness,
        "alignment_scale": spec.alignment_scale,
    }
