"""Minimal conditional denoising diffusion model over d-dimensional points.

The model predicts the clean point x0 directly from a noised input, the
timestep, and a learned per-condition embedding. Training minimizes a
per-sample weighted squared error between the prediction and the clean
point; sampling runs the standard ancestral reverse process with the
x0 parameterization of the posterior mean.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .numkit import (
    MlpParams,
    RngStream,
    adam_step,
    init_mlp,
    init_opt,
    mlp_forward_batch,
    require_finite,
    weighted_mse_grads,
)

__all__ = [
    "NoiseSchedule",
    "DenoiserModel",
    "TrainExample",
    "make_schedule",
    "forward_noise",
    "time_features",
    "predict_x0",
    "predict_x0_batch",
    "diffusion_loss",
    "train",
    "generate",
    "generate_batch",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------


@dataclass
class NoiseSchedule:
    """Per-step retention factors and their cumulative products.

    ``alpha[k]`` is the retention at timestep t = k+1; ``alpha_bar`` has
    length T+1 with ``alpha_bar[0] = 1`` by convention and
    ``alpha_bar[t] = prod(alpha[:t])``.
    """

    alpha: np.ndarray
    alpha_bar: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.alpha.ndim != 1 or self.alpha.size < 1:
            raise ValueError("alpha must be a nonempty 1-D array")
        if np.any(self.alpha <= 0.0) or np.any(self.alpha > 1.0):
            raise ValueError("alpha entries must lie in (0, 1]")
        if self.alpha_bar is None:
            self.alpha_bar = np.concatenate(([1.0], np.cumprod(self.alpha)))
        else:
            self.alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
            expected = np.concatenate(([1.0], np.cumprod(self.alpha)))
            if self.alpha_bar.shape != expected.shape or not np.allclose(
                self.alpha_bar, expected, rtol=0, atol=1e-12
            ):
                raise ValueError("alpha_bar inconsistent with cumulative products")

    @property
    def T(self) -> int:
        return int(self.alpha.size)

    @property
    def beta(self) -> np.ndarray:
        return 1.0 - self.alpha

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} out of range [1, {self.T}]")
        return t


def make_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Linear noise-variance schedule with retention alpha_t = 1 - beta_t."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError("need 0 < beta_min <= beta_max < 1")
    beta = np.linspace(beta_min, beta_max, T)
    return NoiseSchedule(alpha=1.0 - beta)


# ---------------------------------------------------------------------------
# Forward process
# ---------------------------------------------------------------------------


def forward_noise(x0: np.ndarray, t: int, sched: NoiseSchedule, rng: RngStream):
    """Noise a clean point to timestep t in closed form.

    Returns (x_t, eps) where x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps
    and eps is the standard normal draw that was used.
    """
    t = sched.check_t(t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = rng.normal(x0.shape)
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps, eps


def time_features(t, T: int, n_freqs: int = 4) -> np.ndarray:
    """Fixed featurization of timesteps: t/T plus sin/cos pairs.

    Frequencies are 1, 2, 4, ... cycles over the schedule. t may be a
    scalar or an array; output shape is (..., 1 + 2*n_freqs).
    """
    tt = np.asarray(t, dtype=np.float64) / float(T)
    cols = [tt]
    for j in range(n_freqs):
        w = 2.0 * np.pi * (2.0 ** j)
        cols.append(np.sin(w * tt))
        cols.append(np.cos(w * tt))
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# Denoiser model
# ---------------------------------------------------------------------------


@dataclass
class DenoiserModel:
    """MLP denoiser with a learned embedding row per condition id.

    The MLP consumes [x_t || time features || condition embedding] and
    outputs a d-dimensional prediction of the clean point.
    """

    mlp: MlpParams
    cond_ids: list[int]
    embeddings: np.ndarray  # (n_conditions, embed_dim)
    data_dim: int
    n_time_freqs: int = 4

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        require_finite(self.embeddings, "embeddings")
        if self.embeddings.shape[0] != len(self.cond_ids):
            raise ValueError("embedding rows != condition count")
        expected_in = self.data_dim + 1 + 2 * self.n_time_freqs + self.embeddings.shape[1]
        if self.mlp.in_dim != expected_in:
            raise ValueError(
                f"MLP fan-in {self.mlp.in_dim} != data+time+embedding dims {expected_in}"
            )
        if self.mlp.out_dim != self.data_dim:
            raise ValueError("MLP fan-out must equal data dim")
        self._row = {cid: i for i, cid in enumerate(self.cond_ids)}
        if len(self._row) != len(self.cond_ids):
            raise ValueError("duplicate condition ids")

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[1]

    def cond_row(self, c) -> int:
        try:
            return self._row[int(c)]
        except KeyError:
            raise KeyError(f"unknown condition id {c!r}") from None

    def cond_rows(self, conds) -> np.ndarray:
        return np.array([self.cond_row(c) for c in conds], dtype=np.intp)

    def copy(self) -> "DenoiserModel":
        return DenoiserModel(
            mlp=self.mlp.copy(),
            cond_ids=list(self.cond_ids),
            embeddings=self.embeddings.copy(),
            data_dim=self.data_dim,
            n_time_freqs=self.n_time_freqs,
        )


def build_denoiser(conditions, data_dim: int, hidden: list[int], embed_dim: int,
                   rng: RngStream, n_time_freqs: int = 4) -> DenoiserModel:
    """Initialize a denoiser for a fixed registry of conditions.

    Embedding rows start from the condition's own embedding vector
    (truncated or zero-padded to embed_dim) plus small noise, so ids with
    similar prompt embeddings start near each other.
    """
    conditions = list(conditions)
    in_dim = data_dim + 1 + 2 * n_time_freqs + embed_dim
    mlp = init_mlp([in_dim, *hidden, data_dim], rng.child("mlp"))
    emb = 0.01 * rng.child("emb").normal((len(conditions), embed_dim))
    for i, cond in enumerate(conditions):
        v = np.asarray(cond.embedding, dtype=np.float64)
        k = min(embed_dim, v.size)
        emb[i, :k] += v[:k]
    return DenoiserModel(
        mlp=mlp,
        cond_ids=[int(c.id) for c in conditions],
        embeddings=emb,
        data_dim=data_dim,
        n_time_freqs=n_time_freqs,
    )


def _model_inputs(model: DenoiserModel, X_t: np.ndarray, ts: np.ndarray,
                  rows: np.ndarray, T: int) -> np.ndarray:
    feats = time_features(ts, T, model.n_time_freqs)
    return np.hstack([X_t, feats, model.embeddings[rows]])


def predict_x0_batch(model: DenoiserModel, X_t, ts, conds, sched: NoiseSchedule) -> np.ndarray:
    """Vectorized clean-point prediction for a batch of noised points."""
    X_t = np.asarray(X_t, dtype=np.float64)
    ts = np.asarray(ts, dtype=np.int64)
    rows = model.cond_rows(conds)
    return mlp_forward_batch(model.mlp, _model_inputs(model, X_t, ts, rows, sched.T))


def predict_x0(model: DenoiserModel, x_t, t: int, c, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic d-dimensional prediction of the clean point."""
    t = sched.check_t(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    return predict_x0_batch(model, x_t[None, :], np.array([t]), [c], sched)[0]


# ---------------------------------------------------------------------------
# Training objective
# ---------------------------------------------------------------------------


@dataclass
class TrainExample:
    """One training point: clean sample, condition id, nonnegative weight."""

    x0: np.ndarray
    condition: int
    weight: float = 1.0

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        require_finite(self.x0, "x0")
        if self.weight < 0:
            raise ValueError("example weight must be nonnegative")


def _loss_terms(model: DenoiserModel, X0: np.ndarray, rows: np.ndarray,
                w: np.ndarray, ts: np.ndarray, eps: np.ndarray,
                sched: NoiseSchedule, weighted: bool):
    """Loss and gradients for pre-drawn (t, eps) pairs.

    Returns (loss, mlp grads, embedding grads). The weighted objective is
    mean_i w_i * ||pred_i - x0_i||^2; the unweighted one drops w_i.
    """
    ab = sched.alpha_bar[ts]
    X_t = np.sqrt(ab)[:, None] * X0 + np.sqrt(1.0 - ab)[:, None] * eps
    inputs = _model_inputs(model, X_t, ts, rows, sched.T)
    eff_w = w if weighted else np.ones_like(w)
    loss, mlp_grads, grad_in = weighted_mse_grads(model.mlp, inputs, X0, eff_w)
    emb_grads = np.zeros_like(model.embeddings)
    np.add.at(emb_grads, rows, grad_in[:, X0.shape[1] + 1 + 2 * model.n_time_freqs:])
    return loss, mlp_grads, emb_grads


def _draw_t_eps(rng: RngStream, T: int, d: int):
    """One example's (t, eps) pair from its own substream."""
    t = int(rng.integers(1, T + 1))
    return t, rng.normal(d)


def diffusion_loss(model: DenoiserModel, examples: list[TrainExample],
                   sched: NoiseSchedule, rng: RngStream, weighted: bool = True):
    """Monte-Carlo denoising objective over a list of examples.

    Each example draws its timestep and noise from the substream
    ``rng.child(i)`` keyed by its position, so the result is independent
    of how examples are batched or parallelized. Returns
    (loss, mlp grads, embedding grads).
    """
    if not examples:
        raise ValueError("empty example list")
    X0 = np.stack([e.x0 for e in examples])
    rows = model.cond_rows([e.condition for e in examples])
    w = np.array([e.weight for e in examples], dtype=np.float64)
    ts = np.empty(len(examples), dtype=np.int64)
    eps = np.empty_like(X0)
    for i in range(len(examples)):
        ts[i], eps[i] = _draw_t_eps(rng.child(i), sched.T, model.data_dim)
    return _loss_terms(model, X0, rows, w, ts, eps, sched, weighted)


def train(model: DenoiserModel, examples: list[TrainExample], sched: NoiseSchedule,
          epochs: int, batch_size: int, rng: RngStream, lr: float = 1e-3):
    """Adam fine-tuning on weighted examples.

    Per-example (t, eps) draws come from substreams keyed by
    (epoch, example index), so they do not depend on batch membership.
    Returns (updated model, per-epoch mean loss trace).
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if not examples:
        raise ValueError("empty example list")
    n = len(examples)
    X0 = np.stack([e.x0 for e in examples])
    rows = model.cond_rows([e.condition for e in examples])
    w = np.array([e.weight for e in examples], dtype=np.float64)

    model = model.copy()
    arrays = model.mlp.to_arrays() + [model.embeddings]
    state = init_opt(arrays, lr=lr)
    trace: list[float] = []
    for epoch in range(epochs):
        order = rng.child("order", epoch).permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            ts = np.empty(idx.size, dtype=np.int64)
            eps = np.empty((idx.size, model.data_dim))
            for j, i in enumerate(idx):
                ts[j], eps[j] = _draw_t_eps(
                    rng.child("draws", epoch, int(i)), sched.T, model.data_dim
                )
            loss, mlp_grads, emb_grads = _loss_terms(
                model, X0[idx], rows[idx], w[idx], ts, eps, sched, weighted=True
            )
            arrays, state = adam_step(
                arrays, mlp_grads.to_arrays() + [emb_grads], state
            )
            model = DenoiserModel(
                mlp=MlpParams.from_arrays(arrays[:-1]),
                cond_ids=model.cond_ids,
                embeddings=arrays[-1],
                data_dim=model.data_dim,
                n_time_freqs=model.n_time_freqs,
            )
            total += loss * idx.size
        trace.append(total / n)
    return model, trace


# ---------------------------------------------------------------------------
# Ancestral sampling
# ---------------------------------------------------------------------------


def generate_batch(model: DenoiserModel, conds, sched: NoiseSchedule,
                   rng: RngStream) -> np.ndarray:
    """Ancestral reverse-process sampling, one point per condition entry.

    Each sample's entire noise trajectory comes from its own substream
    ``rng.child(i)``, so output is independent of batching and worker
    count. Iterates t = T..1 with the x0-parameterized posterior mean
    and adds posterior noise at every step except the last.
    """
    rows = model.cond_rows(conds)
    n, d, T = rows.size, model.data_dim, sched.T
    if n < 1:
        raise ValueError("need at least one condition entry")
    draws = np.empty((n, T, d))
    for i in range(n):
        draws[i] = rng.child(i).normal((T, d))
    x = draws[:, 0, :].copy()
    for t in range(T, 0, -1):
        ts = np.full(n, t, dtype=np.int64)
        pred = mlp_forward_batch(model.mlp, _model_inputs(model, x, ts, rows, T))
        ab_t = sched.alpha_bar[t]
        ab_prev = sched.alpha_bar[t - 1]
        a_t = sched.alpha[t - 1]
        b_t = 1.0 - a_t
        mean = (
            (np.sqrt(ab_prev) * b_t / (1.0 - ab_t)) * pred
            + (np.sqrt(a_t) * (1.0 - ab_prev) / (1.0 - ab_t)) * x
        )
        if t > 1:
            var = (1.0 - ab_prev) / (1.0 - ab_t) * b_t
            x = mean + np.sqrt(var) * draws[:, T - t + 1, :]
        else:
            x = mean
    return x


def generate(model: DenoiserModel, c, n: int, sched: NoiseSchedule,
             rng: RngStream) -> np.ndarray:
    """Sample n points for one condition id. Shape (n, data_dim)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return generate_batch(model, [c] * n, sched, rng)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str, model: DenoiserModel, sched: NoiseSchedule) -> None:
    """Versioned JSON checkpoint: MLP, embedding table, and schedule."""
    blob = {
        "format_version": CHECKPOINT_VERSION,
        "activation": model.mlp.activation,
        "layer_sizes": model.mlp.layer_sizes,
        "weights": [w.tolist() for w in model.mlp.weights],
        "biases": [b.tolist() for b in model.mlp.biases],
        "cond_ids": model.cond_ids,
        "embeddings": model.embeddings.tolist(),
        "data_dim": model.data_dim,
        "n_time_freqs": model.n_time_freqs,
        "schedule": {"alpha": sched.alpha.tolist()},
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(blob, fh, sort_keys=True)
    os.replace(tmp, path)


def load_checkpoint(path: str):
    """Load a checkpoint written by save_checkpoint. Returns (model, sched)."""
    with open(path) as fh:
        blob = json.load(fh)
    version = blob.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    mlp = MlpParams(
        [np.asarray(w, dtype=np.float64) for w in blob["weights"]],
        [np.asarray(b, dtype=np.float64) for b in blob["biases"]],
        blob["activation"],
    )
    model = DenoiserModel(
        mlp=mlp,
        cond_ids=[int(c) for c in blob["cond_ids"]],
        embeddings=np.asarray(blob["embeddings"], dtype=np.float64),
        data_dim=int(blob["data_dim"]),
        n_time_freqs=int(blob["n_time_freqs"]),
    )
    sched = NoiseSchedule(alpha=np.asarray(blob["schedule"]["alpha"], dtype=np.float64))
    return model, sched
