"""A small MLP with hand-written backprop.

The fixed topology keeps gradients exact and lets the backward pass yield
per-tensor gradients in reverse layer order, which is what gradient release
needs: each (name, gradient) pair is produced from weights captured at
forward time, so applying optimizer updates eagerly while the backward pass
is still running cannot change any later gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

__all__ = ["MlpConfig", "MlpModel"]

ACTIVATIONS = ("tanh", "relu")
LOSSES = ("ce", "mse")


@dataclass(frozen=True)
class MlpConfig:
    """Layer widths from input to output, activation, and loss type."""

    layer_dims: tuple[int, ...]
    activation: str = "tanh"
    loss: str = "ce"

    def __post_init__(self) -> None:
        if len(self.layer_dims) < 2:
            raise ValueError("need at least input and output dims")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation: {self.activation}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss: {self.loss}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    def tensor_names(self) -> list[str]:
        names = []
        for layer in range(self.n_layers):
            names.extend([f"w{layer}", f"b{layer}"])
        return names


class MlpModel:
    """Weights live in a flat name -> array dict; all math stays in `dtype`."""

    def __init__(self, config: MlpConfig, weights: dict[str, np.ndarray]):
        self.config = config
        self.weights = dict(weights)

    @classmethod
    def init(cls, config: MlpConfig, seed: int, dtype=np.float32) -> "MlpModel":
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
        weights: dict[str, np.ndarray] = {}
        dims = config.layer_dims
        gain = 2.0 if config.activation == "relu" else 1.0
        for layer in range(config.n_layers):
            fan_in, fan_out = dims[layer], dims[layer + 1]
            std = np.sqrt(gain / fan_in)
            weights[f"w{layer}"] = (rng.normal(0.0, std, (fan_in, fan_out))).astype(dtype)
            weights[f"b{layer}"] = np.zeros(fan_out, dtype=dtype)
        return cls(config, weights)

    @property
    def dtype(self):
        return self.weights["w0"].dtype

    def n_params(self) -> int:
        return sum(w.size for w in self.weights.values())

    def set_weight(self, name: str, value: np.ndarray) -> None:
        self.weights[name] = value.reshape(self.weights[name].shape)

    def _activate(self, z: np.ndarray) -> np.ndarray:
        if self.config.activation == "tanh":
            return np.tanh(z)
        return np.maximum(z, 0)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Network output (logits for CE, predictions for MSE)."""
        a = np.asarray(x, dtype=self.dtype)
        for layer in range(self.config.n_layers):
            z = a @ self.weights[f"w{layer}"] + self.weights[f"b{layer}"]
            a = self._activate(z) if layer < self.config.n_layers - 1 else z
        return a

    def loss(self, x: np.ndarray, y: np.ndarray) -> float:
        return self._loss_from_output(self.forward(x), y)[0]

    def _loss_from_output(self, out: np.ndarray, y: np.ndarray):
        if self.config.loss == "ce":
            shifted = out - out.max(axis=1, keepdims=True)
            logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            logp = shifted - logsumexp
            n = out.shape[0]
            loss = float(-logp[np.arange(n), y].mean())
            dz = np.exp(logp)
            dz[np.arange(n), y] -= 1
            dz /= np.asarray(n, dtype=out.dtype)
            return loss, dz.astype(out.dtype)
        target = np.asarray(y, dtype=out.dtype).reshape(out.shape)
        diff = out - target
        loss = float((diff * diff).mean())
        dz = (2 * diff / np.asarray(diff.size, dtype=out.dtype)).astype(out.dtype)
        return loss, dz

    def loss_and_gradients(
        self, x: np.ndarray, y: np.ndarray
    ) -> tuple[float, Iterator[tuple[str, np.ndarray]]]:
        """Batch loss plus a lazy (name, gradient) stream in reverse layer order.

        The stream closes over the weight arrays in use right now; swapping
        self.weights while consuming it does not affect remaining gradients.
        """
        x = np.asarray(x, dtype=self.dtype)
        n_layers = self.config.n_layers
        w = [self.weights[f"w{i}"] for i in range(n_layers)]
        b = [self.weights[f"b{i}"] for i in range(n_layers)]
        acts = [x]  # a_0 .. a_{L-1}: layer inputs
        pre = []  # z_0 .. z_{L-2}: hidden preactivations
        a = x
        for layer in range(n_layers):
            z = a @ w[layer] + b[layer]
            if layer < n_layers - 1:
                pre.append(z)
                a = self._activate(z)
                acts.append(a)
            else:
                a = z
        loss, dz = self._loss_from_output(a, y)

        def gradients() -> Iterator[tuple[str, np.ndarray]]:
            delta = dz
            for layer in range(n_layers - 1, -1, -1):
                grad_w = acts[layer].T @ delta
                grad_b = delta.sum(axis=0)
                if layer > 0:
                    da = delta @ w[layer].T
                    if self.config.activation == "tanh":
                        h = acts[layer]  # tanh(z) was cached in the forward pass
                        delta = da * (1 - h * h)
                    else:
                        delta = da * (pre[layer - 1] > 0)
                yield f"w{layer}", grad_w
                yield f"b{layer}", grad_b

        return loss, gradients()

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        if self.config.loss != "ce":
            raise ValueError("accuracy is defined for classification models only")
        pred = self.forward(x).argmax(axis=1)
        return float((pred == y).mean())
