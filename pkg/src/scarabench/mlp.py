"""Small dense networks with hand-written backpropagation.

Hidden layers use tanh, the output layer is linear. Everything is plain
numpy so the gradients can be checked against finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeMismatch(ValueError):
    """Input or upstream vector does not match the network's shape."""


@dataclass
class MlpParams:
    """Per-layer weight matrices (fan_out, fan_in) and bias vectors."""

    weights: list
    biases: list

    @property
    def layer_sizes(self) -> tuple:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self) -> list:
        """All parameter arrays in a fixed order (weights then bias, per layer)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


def init_mlp(layer_sizes, rng: np.random.Generator, out_scale: float = 1.0) -> MlpParams:
    """Scaled-normal init, std 1/sqrt(fan_in) per layer, zero biases.

    out_scale shrinks the final layer; starting a policy head near zero
    output keeps early actions small and exploration driven by the
    sampling noise instead of the untrained network.
    """
    if len(layer_sizes) < 2:
        raise ValueError("need at least an input and an output size")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        weights.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    weights[-1] *= out_scale
    return MlpParams(weights, biases)


def zeros_like_params(params: MlpParams) -> MlpParams:
    return MlpParams(
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
    )


def _check_input(params: MlpParams, x: np.ndarray) -> None:
    fan_in = params.weights[0].shape[1]
    if x.shape[-1] != fan_in:
        raise ShapeMismatch(f"input has {x.shape[-1]} features, network expects {fan_in}")


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Network output for a single (n_in,) vector or a (B, n_in) batch."""
    x = np.asarray(x, dtype=float)
    _check_input(params, x)
    h = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = np.tanh(h @ w.T + b)
    return h @ params.weights[-1].T + params.biases[-1]


def forward_cached(params: MlpParams, x):
    """Forward pass keeping the per-layer activations for backprop.

    Returns (output, activations) where activations[0] is the input batch
    and activations[l] the post-tanh output of hidden layer l.
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    h = np.atleast_2d(x)
    _check_input(params, h)
    acts = [h]
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = np.tanh(h @ w.T + b)
        acts.append(h)
    y = h @ params.weights[-1].T + params.biases[-1]
    if squeeze:
        y = y[0]
    return y, acts


def backward(params: MlpParams, acts, upstream):
    """Gradients of sum_i <upstream_i, f(x_i)> over the cached batch.

    upstream is (B, n_out); returns (grads, d_input) where grads mirrors
    the parameter structure and d_input is (B, n_in). tanh derivative is
    recovered from the cached activations as 1 - h^2.
    """
    d = np.atleast_2d(np.asarray(upstream, dtype=float))
    n_out = params.weights[-1].shape[0]
    if d.shape[-1] != n_out:
        raise ShapeMismatch(f"upstream has {d.shape[-1]} entries, output is {n_out}")
    n_layers = len(params.weights)
    grad_w = [None] * n_layers
    grad_b = [None] * n_layers
    grad_w[-1] = d.T @ acts[-1]
    grad_b[-1] = d.sum(axis=0)
    dh = d @ params.weights[-1]
    for layer in range(n_layers - 2, -1, -1):
        dz = dh * (1.0 - acts[layer + 1] ** 2)
        grad_w[layer] = dz.T @ acts[layer]
        grad_b[layer] = dz.sum(axis=0)
        dh = dz @ params.weights[layer]
    return MlpParams(grad_w, grad_b), dh


def mlp_gradient(params: MlpParams, x, upstream) -> MlpParams:
    """Exact reverse-mode gradients of <upstream, f(x)> for one sample."""
    x = np.asarray(x, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    _, acts = forward_cached(params, x)
    grads, _ = backward(params, acts, upstream[None, :] if upstream.ndim == 1 else upstream)
    return grads
