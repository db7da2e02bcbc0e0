"""Deterministic numerical kernel.

Dense float64 vectors, a small tanh multilayer perceptron with
hand-written reverse-mode gradients, an Adam optimizer, and splittable
counter-based random streams. Every operation is pure: state goes in,
new state comes out, and a fixed seed gives bit-identical results no
matter how the work is scheduled across workers.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox, SeedSequence

__all__ = [
    "RngStream",
    "MlpParams",
    "OptState",
    "as_vec",
    "require_finite",
    "init_mlp",
    "mlp_forward",
    "mlp_forward_batch",
    "weighted_mse_grads",
    "loss_and_grad",
    "init_opt",
    "adam_step",
    "opt_step",
]


# ---------------------------------------------------------------------------
# Vectors
# ---------------------------------------------------------------------------


def as_vec(values, name: str = "vector") -> np.ndarray:
    """Coerce to a 1-D float64 array, rejecting NaN/Inf entries."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def require_finite(arr: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


def _key_u32(key) -> int:
    """Map an int or string key to a stable 32-bit stream id."""
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


class RngStream:
    """Splittable seeded random stream.

    A stream is addressed by ``(seed, path)``. ``child(*keys)`` derives a
    new stream by extending the path, so siblings are statistically
    independent and their outputs do not depend on the order in which any
    stream is consumed. Fan-out code assigns each unit of work its own
    pre-derived substream, which makes results independent of worker
    count and scheduling.
    """

    __slots__ = ("seed", "path", "n_draws", "_gen")

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) & 0xFFFFFFFF for p in path)
        self.n_draws = 0
        self._gen = Generator(
            Philox(SeedSequence(entropy=self.seed, spawn_key=self.path))
        )

    def child(self, *keys) -> "RngStream":
        """Derive the independent stream addressed by this path plus keys."""
        if not keys:
            raise ValueError("child() needs at least one key")
        return RngStream(self.seed, self.path + tuple(_key_u32(k) for k in keys))

    def normal(self, size=None):
        self.n_draws += 1
        return self._gen.standard_normal(size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        self.n_draws += 1
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        self.n_draws += 1
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        self.n_draws += 1
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path}, n_draws={self.n_draws})"


# ---------------------------------------------------------------------------
# MLP parameters
# ---------------------------------------------------------------------------


@dataclass
class MlpParams:
    """Weights and biases of an L-layer perceptron.

    ``weights[l]`` has shape (fan_out, fan_in). Hidden layers apply tanh,
    the final layer is linear. Shapes must chain and all entries must be
    finite; the constructor enforces both.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if not self.weights or len(self.weights) != len(self.biases):
            raise ValueError("weights/biases layer mismatch")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {l} shape mismatch: {w.shape} vs {b.shape}")
            if l > 0 and w.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l} fan-in {w.shape[1]} does not chain")
            require_finite(w, f"weights[{l}]")
            require_finite(b, f"biases[{l}]")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def to_arrays(self) -> list[np.ndarray]:
        """Flatten to an interleaved [W0, b0, W1, b1, ...] list."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    @classmethod
    def from_arrays(cls, arrays: list[np.ndarray], activation: str = "tanh") -> "MlpParams":
        return cls(list(arrays[0::2]), list(arrays[1::2]), activation)

    def copy(self) -> "MlpParams":
        return MlpParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )


def init_mlp(layer_sizes: list[int], rng: RngStream, activation: str = "tanh") -> MlpParams:
    """Scaled-uniform fan-in init: W ~ U(+-1/sqrt(fan_in)), zero biases."""
    if len(layer_sizes) < 2:
        raise ValueError("need at least input and output layer sizes")
    weights, biases = [], []
    for l, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.child("w", l).uniform(-bound, bound, (fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, activation)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _forward_stages(params: MlpParams, X: np.ndarray) -> list[np.ndarray]:
    """Per-layer activations for a batch X of shape (n, in_dim)."""
    stages = [X]
    a = X
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        a = z if l == last else np.tanh(z)
        stages.append(a)
    return stages


def _check_batch(params: MlpParams, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"batch must be 2-D, got shape {X.shape}")
    if X.shape[1] != params.in_dim:
        raise ValueError(f"input dim {X.shape[1]} != first layer fan-in {params.in_dim}")
    return X


def mlp_forward_batch(params: MlpParams, X) -> np.ndarray:
    """Deterministic forward pass over a batch, shape (n, out_dim)."""
    return _forward_stages(params, _check_batch(params, X))[-1]


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Forward pass for a single input vector."""
    v = as_vec(x, "input")
    return mlp_forward_batch(params, v[None, :])[0]


def _backward(params: MlpParams, stages: list[np.ndarray], grad_out: np.ndarray):
    """Reverse-mode pass from dL/d(output). Returns (param grads, dL/dX)."""
    L = len(params.weights)
    gw: list[np.ndarray] = [np.empty(0)] * L
    gb: list[np.ndarray] = [np.empty(0)] * L
    d = grad_out
    for l in range(L - 1, -1, -1):
        # hidden layers cached a = tanh(z), so dz = da * (1 - a^2)
        dz = d if l == L - 1 else d * (1.0 - stages[l + 1] ** 2)
        gw[l] = dz.T @ stages[l]
        gb[l] = dz.sum(axis=0)
        d = dz @ params.weights[l]
    return MlpParams(gw, gb, params.activation), d


def weighted_mse_grads(params: MlpParams, batch_inputs, batch_targets, batch_weights):
    """Weighted squared-error objective and its exact gradients.

    loss = mean_i w_i * ||f(x_i) - y_i||^2, squared norm over output dims.
    Returns (loss, param grads, input grads). Weights must be nonnegative
    and the batch nonempty.
    """
    X = _check_batch(params, batch_inputs)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    Y = np.asarray(batch_targets, dtype=np.float64)
    w = np.asarray(batch_weights, dtype=np.float64)
    if Y.shape != (X.shape[0], params.out_dim):
        raise ValueError(f"targets shape {Y.shape} mismatched")
    if w.shape != (X.shape[0],):
        raise ValueError(f"weights shape {w.shape} mismatched")
    if np.any(w < 0):
        raise ValueError("negative sample weight")
    stages = _forward_stages(params, X)
    diff = stages[-1] - Y
    loss = float(np.mean(w * np.sum(diff * diff, axis=1)))
    grad_out = (2.0 / X.shape[0]) * w[:, None] * diff
    grads, grad_in = _backward(params, stages, grad_out)
    return loss, grads, grad_in


def loss_and_grad(params: MlpParams, batch_inputs, batch_targets, batch_weights):
    """Weighted mean squared error and exact parameter gradients."""
    loss, grads, _ = weighted_mse_grads(params, batch_inputs, batch_targets, batch_weights)
    return loss, grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class OptState:
    """Adam moment accumulators for a list-of-arrays parameterization."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.step < 0:
            raise ValueError("step counter must be nonnegative")
        if len(self.m) != len(self.v):
            raise ValueError("moment list length mismatch")
        for a, b in zip(self.m, self.v):
            if a.shape != b.shape:
                raise ValueError("moment shape mismatch")


def init_opt(arrays, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
             eps: float = 1e-8) -> OptState:
    """Fresh zeroed optimizer state matching ``arrays`` (list or MlpParams)."""
    if isinstance(arrays, MlpParams):
        arrays = arrays.to_arrays()
    return OptState(
        m=[np.zeros_like(a) for a in arrays],
        v=[np.zeros_like(a) for a in arrays],
        step=0,
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(arrays: list[np.ndarray], grads: list[np.ndarray], state: OptState):
    """One Adam update over a list of arrays. Pure: returns new lists/state."""
    if len(arrays) != len(grads) or len(arrays) != len(state.m):
        raise ValueError("parameter/gradient/state length mismatch")
    for a, g in zip(arrays, grads):
        if a.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {a.shape}")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_arrays, new_m, new_v = [], [], []
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m2 = b1 * m + (1.0 - b1) * g
        v2 = b2 * v + (1.0 - b2) * (g * g)
        update = state.lr * (m2 / c1) / (np.sqrt(v2 / c2) + state.eps)
        new_arrays.append(a - update)
        new_m.append(m2)
        new_v.append(v2)
    new_state = OptState(new_m, new_v, step, state.lr, b1, b2, state.eps)
    return new_arrays, new_state


def opt_step(params: MlpParams, grads: MlpParams, state: OptState):
    """One Adam update over MLP parameters. Returns (params', state')."""
    arrays, new_state = adam_step(params.to_arrays(), grads.to_arrays(), state)
    return MlpParams.from_arrays(arrays, params.activation), new_state
