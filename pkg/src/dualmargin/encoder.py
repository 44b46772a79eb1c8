"""Small MLP feature encoder with manual backpropagation.

Hidden layers use a smooth nonlinearity by default so finite-difference
gradient checks are well behaved; the final layer is linear so embedding
norms genuinely vary across samples. The parameter container carries a
version counter that the trainer bumps after every update, which lets
the sampler assert that selection norms came from the current encoder.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "relu")


@dataclass
class EncoderParams:
    weights: list[np.ndarray]  # layer l: (out_dim, in_dim)
    biases: list[np.ndarray]
    activation: str = "tanh"
    version: int = 0

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activation=self.activation,
            version=self.version,
        )


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each layer
    preacts: list[np.ndarray]  # pre-activation of each layer

    def subset(self, rows: np.ndarray) -> "ForwardCache":
        return ForwardCache(
            inputs=[a[rows] for a in self.inputs],
            preacts=[z[rows] for z in self.preacts],
        )


def init_params(dims: list[int], seed: int, activation: str = "tanh") -> EncoderParams:
    """Deterministic variance-scaled uniform init; biases zero."""
    if len(dims) < 2:
        raise ValueError("init_params: need at least input and output widths")
    if any(d <= 0 for d in dims):
        raise ValueError(f"init_params: widths must be positive, got {dims}")
    if activation not in ACTIVATIONS:
        raise ValueError(f"init_params: activation must be one of {ACTIVATIONS}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return EncoderParams(weights=weights, biases=biases, activation=activation)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _activate_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return (z > 0).astype(np.float64)


def forward(params: EncoderParams, features: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Map (n, input_dim) features to (n, d) raw embeddings."""
    features = np.asarray(features, dtype=np.float64)
    bad = ~np.all(np.isfinite(features), axis=1)
    if bad.any():
        raise ValueError(f"encoder.forward: non-finite input at sample {int(np.flatnonzero(bad)[0])}")
    if features.shape[1] != params.weights[0].shape[1]:
        raise ValueError(
            f"encoder.forward: feature width {features.shape[1]} != input dim {params.weights[0].shape[1]}"
        )
    num_layers = len(params.weights)
    a = features
    inputs, preacts = [], []
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(a)
        z = a @ w.T + b
        preacts.append(z)
        a = z if l == num_layers - 1 else _activate(z, params.activation)
    return a, ForwardCache(inputs=inputs, preacts=preacts)


def backward(
    params: EncoderParams, cache: ForwardCache, grad_embeddings: np.ndarray
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Exact gradients wrt parameters and inputs.

    Returns ``(param_grads, input_grads)`` where ``param_grads[l]`` is the
    ``(dW, db)`` pair of layer l.
    """
    grad_embeddings = np.asarray(grad_embeddings, dtype=np.float64)
    num_layers = len(params.weights)
    if grad_embeddings.shape != cache.preacts[-1].shape:
        raise ValueError("encoder.backward: upstream gradient shape mismatch")
    param_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * num_layers  # type: ignore[list-item]
    delta = grad_embeddings
    for l in range(num_layers - 1, -1, -1):
        if l != num_layers - 1:
            delta = delta * _activate_grad(cache.preacts[l], params.activation)
        param_grads[l] = (delta.T @ cache.inputs[l], delta.sum(axis=0))
        delta = delta @ params.weights[l]
    return param_grads, delta


def save_params(params: EncoderParams, path: str) -> None:
    """Atomic JSON checkpoint with explicit shapes."""
    payload = {
        "activation": params.activation,
        "dims": params.dims,
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh)
    os.replace(tmp, path)


def load_params(path: str) -> EncoderParams:
    with open(path) as fh:
        payload = json.load(fh)
    return EncoderParams(
        weights=[np.asarray(w, dtype=np.float64) for w in payload["weights"]],
        biases=[np.asarray(b, dtype=np.float64) for b in payload["biases"]],
        activation=payload["activation"],
    )
