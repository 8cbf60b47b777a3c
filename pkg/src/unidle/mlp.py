"""Tiny fully connected net with hand-rolled backprop and Adam.

Layers are plain (weight, bias) numpy pairs; tanh on every hidden layer and a
linear output. Gradients are exact reverse-mode, checked against central
finite differences in the test suite.
"""

from __future__ import annotations

import math

import numpy as np

Layer = tuple[np.ndarray, np.ndarray]


def init_layers(sizes: list[int], rng: np.random.Generator) -> list[Layer]:
    """Xavier-uniform weights, zero biases."""
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = np.zeros(fan_out)
        layers.append((w, b))
    return layers


def forward(layers: list[Layer], x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Returns (output, activations); activations[i] is the input to layer i."""
    acts = [x]
    h = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        h = np.tanh(z) if i < last else z
        acts.append(h)
    return h, acts


def backward(layers: list[Layer], acts: list[np.ndarray], dout: np.ndarray) -> list[Layer]:
    """Gradient of sum(dout * output) w.r.t. every weight and bias."""
    grads: list[Layer] = [None] * len(layers)  # type: ignore[list-item]
    delta = dout
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        if i > 0:
            # acts[i] is the tanh output of layer i-1
            delta = (delta @ w.T) * (1.0 - acts[i] ** 2)
    return grads


def zeros_like_layers(layers: list[Layer]) -> list[Layer]:
    return [(np.zeros_like(w), np.zeros_like(b)) for w, b in layers]


def add_grads(a: list[Layer], b: list[Layer]) -> list[Layer]:
    return [(aw + bw, ab + bb) for (aw, ab), (bw, bb) in zip(a, b)]


class AdamOptimizer:
    """Standard Adam with bias correction; state is per-parameter arrays."""

    def __init__(self, layers: list[Layer], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = zeros_like_layers(layers)
        self.v = zeros_like_layers(layers)

    def step(self, layers: list[Layer], grads: list[Layer]) -> list[Layer]:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        new_layers = []
        for i, ((w, b), (gw, gb)) in enumerate(zip(layers, grads)):
            mw, mb = self.m[i]
            vw, vb = self.v[i]
            mw = self.beta1 * mw + (1 - self.beta1) * gw
            mb = self.beta1 * mb + (1 - self.beta1) * gb
            vw = self.beta2 * vw + (1 - self.beta2) * gw ** 2
            vb = self.beta2 * vb + (1 - self.beta2) * gb ** 2
            self.m[i] = (mw, mb)
            self.v[i] = (vw, vb)
            w = w - self.lr * (mw / b1t) / (np.sqrt(vw / b2t) + self.eps)
            b = b - self.lr * (mb / b1t) / (np.sqrt(vb / b2t) + self.eps)
            new_layers.append((w, b))
        return new_layers


def sgd_step(layers: list[Layer], grads: list[Layer], lr: float) -> list[Layer]:
    return [(w - lr * gw, b - lr * gb) for (w, b), (gw, gb) in zip(layers, grads)]
