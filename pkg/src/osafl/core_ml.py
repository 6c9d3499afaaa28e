"""Flat-vector MLP kernel: softmax cross-entropy, exact gradients, mini-batch SGD.

Models are handled as a single 1-D parameter vector so that federated
protocols can add, scale and average them without knowing the architecture.
Layout per layer is ``W`` (fan_in x fan_out, row-major) followed by ``b``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ModelSpec:
    """Layer sizes ``[input, hidden..., classes]``; ReLU hidden, softmax output."""

    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ValueError("ModelSpec needs at least an input and an output layer")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be >= 1, got {sizes}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_params(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_features(self) -> int:
        return self.layer_sizes[0]

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, b)`` per layer into ``params`` (no copies)."""
        params = np.asarray(params)
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {params.shape}")
        layers = []
        offset = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            W = params[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = params[offset:offset + fan_out]
            offset += fan_out
            layers.append((W, b))
        return layers


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: int


def stack_samples(samples) -> tuple[np.ndarray, np.ndarray]:
    """Turn a sequence of :class:`Sample` into ``(X, y)`` arrays."""
    samples = list(samples)
    if not samples:
        raise ValueError("empty dataset")
    X = np.vstack([np.asarray(s.features, dtype=float) for s in samples])
    y = np.fromiter((s.label for s in samples), dtype=np.int64, count=len(samples))
    return X, y


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias of a layer."""
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=(fan_in + 1) * fan_out))
    return np.concatenate(chunks)


def _forward(spec: ModelSpec, params: np.ndarray, X: np.ndarray):
    layers = spec.unpack(params)
    activations = [X]
    h = X
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        if i < len(layers) - 1:
            h = np.maximum(z, 0.0)
            activations.append(h)
        else:
            h = z
    return h, activations, layers


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def logits(spec: ModelSpec, params: np.ndarray, X: np.ndarray) -> np.ndarray:
    return _forward(spec, params, np.atleast_2d(np.asarray(X, dtype=float)))[0]


def predict(spec: ModelSpec, params: np.ndarray, X: np.ndarray) -> np.ndarray:
    return logits(spec, params, X).argmax(axis=1)


def _check_xy(X, y):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if X.shape[0] == 0 or y.size == 0:
        raise ValueError("empty dataset")
    if X.shape[0] != y.size:
        raise ValueError(f"{X.shape[0]} feature rows but {y.size} labels")
    return X, y


def loss(spec: ModelSpec, params: np.ndarray, X, y) -> float:
    """Mean softmax cross-entropy over ``(X, y)``."""
    X, y = _check_xy(X, y)
    out = logits(spec, params, X)
    logp = _log_softmax(out)
    return float(-logp[np.arange(y.size), y].mean())


def accuracy(spec: ModelSpec, params: np.ndarray, X, y) -> float:
    X, y = _check_xy(X, y)
    return float((predict(spec, params, X) == y).mean())


def gradient(spec: ModelSpec, params: np.ndarray, X, y) -> np.ndarray:
    """Exact gradient of the mean cross-entropy over the batch, as a flat vector."""
    X, y = _check_xy(X, y)
    out, activations, layers = _forward(spec, params, X)
    m = y.size
    delta = np.exp(_log_softmax(out))
    delta[np.arange(m), y] -= 1.0
    delta /= m

    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        a_in = activations[i]
        grads[i] = ((a_in.T @ delta).ravel(), delta.sum(axis=0))
        if i > 0:
            delta = (delta @ W.T) * (activations[i] > 0.0)
    return np.concatenate([part for gW, gb in grads for part in (gW, gb)])


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if params.shape != grad.shape:
        raise ValueError(f"shape mismatch: params {params.shape} vs grad {grad.shape}")
    return params - lr * grad


def sgd_trajectory(spec, w_init, X, y, n_steps, lr, batch_size, rng, grad_fn=None):
    """Run ``n_steps`` SGD steps on batches drawn uniformly with replacement.

    ``grad_fn(w, Xb, yb)`` overrides the plain cross-entropy gradient; FedProx
    uses it to add its proximal term. Returns ``(w_final, sum_of_gradients)``.
    """
    X, y = _check_xy(X, y)
    if grad_fn is None:
        def grad_fn(w, Xb, yb):
            return gradient(spec, w, Xb, yb)
    w = np.array(w_init, dtype=float, copy=True)
    g_sum = np.zeros_like(w)
    m = y.size
    for _ in range(int(n_steps)):
        idx = rng.integers(0, m, size=batch_size)
        g = grad_fn(w, X[idx], y[idx])
        g_sum += g
        w = sgd_step(w, g, lr)
    return w, g_sum


def local_train(spec, w_init, X, y, kappa, lr, batch_size, rng):
    """``kappa`` local SGD steps; returns ``(w_final, d)`` with d the per-step mean gradient.

    ``d`` is computed as ``(w_init - w_final) / (lr * kappa)`` so that the
    model delta and the uploaded vector agree exactly.
    """
    if kappa < 1:
        raise ValueError("no local budget")
    w_init = np.asarray(w_init, dtype=float)
    w_final, _ = sgd_trajectory(spec, w_init, X, y, kappa, lr, batch_size, rng)
    d = (w_init - w_final) / (lr * kappa)
    return w_final, d
