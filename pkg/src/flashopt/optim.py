"""SGD, AdamW and Lion in reference (FP32) and flash (compressed) forms.

The flash variants wrap the standard update with a prologue that
dequantizes optimizer state and reconstructs the master weight, and an
epilogue that re-quantizes the new state and re-splits the new weight.
All update arithmetic runs in FP32 on the decompressed values; only the
stored representation is compressed. Step functions are pure: they return
a fresh state and never mutate their inputs, so each parameter tensor can
be stepped independently (and eagerly, during backprop).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .formats import BF16, INT8_CORRECTION, SplitTensor
from .quantize import (
    GroupSpec,
    QuantizedState,
    dequantize,
    dequantize_momentum,
    dequantize_variance,
    quantize_linear,
    quantize_momentum,
    quantize_variance,
)

__all__ = [
    "SgdHyperParams",
    "AdamHyperParams",
    "LionHyperParams",
    "ReferenceState",
    "FlashState",
    "init_reference_state",
    "init_flash_state",
    "sgd_step",
    "adamw_step",
    "lion_step",
]

OPTIMIZERS = ("sgd", "adamw", "lion")


@dataclass(frozen=True)
class SgdHyperParams:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        if not math.isfinite(self.lr):
            raise ValueError("learning rate must be finite")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0.0:
            raise ValueError("weight decay must be >= 0")


@dataclass(frozen=True)
class AdamHyperParams:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        if not math.isfinite(self.lr):
            raise ValueError("learning rate must be finite")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0.0:
            raise ValueError("eps must be > 0")
        if self.weight_decay < 0.0:
            raise ValueError("weight decay must be >= 0")


@dataclass(frozen=True)
class LionHyperParams:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        if not math.isfinite(self.lr):
            raise ValueError("learning rate must be finite")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.weight_decay < 0.0:
            raise ValueError("weight decay must be >= 0")


@dataclass
class ReferenceState:
    """Full-precision optimizer state: FP32 weights and moments."""

    theta: np.ndarray
    m: np.ndarray
    v: np.ndarray | None  # Adam second moment; None for SGD/Lion
    t: int = 0

    @property
    def length(self) -> int:
        return int(self.theta.size)

    def weights_for_compute(self) -> np.ndarray:
        return self.theta


@dataclass
class FlashState:
    """Compressed optimizer state: split weights plus 8-bit moments."""

    weights: SplitTensor
    momentum: QuantizedState
    variance: QuantizedState | None  # Adam only
    t: int = 0
    variance_scheme: str = "companded"  # "companded" | "linear"

    @property
    def length(self) -> int:
        return self.weights.length

    def weights_for_compute(self) -> np.ndarray:
        """The low-precision weight component; training computes on this."""
        return self.weights.lp_float()


def init_reference_state(theta0, optimizer: str) -> ReferenceState:
    if optimizer not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer: {optimizer}")
    theta0 = np.asarray(theta0, dtype=np.float32).ravel()
    if not np.isfinite(theta0).all():
        raise ValueError("split-nonfinite: initial weights contain NaN/Inf")
    v = np.zeros_like(theta0) if optimizer == "adamw" else None
    return ReferenceState(theta0.copy(), np.zeros_like(theta0), v, t=0)


def init_flash_state(
    theta0,
    optimizer: str,
    spec: GroupSpec = GroupSpec(),
    variance_scheme: str = "companded",
) -> FlashState:
    """Split the initial weights and quantize zeroed moment buffers."""
    if optimizer not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer: {optimizer}")
    if variance_scheme not in ("companded", "linear"):
        raise ValueError(f"unknown variance scheme: {variance_scheme}")
    theta0 = np.asarray(theta0, dtype=np.float32).ravel()
    weights = SplitTensor.from_values(theta0, BF16, INT8_CORRECTION)
    zeros = np.zeros_like(theta0)
    momentum = quantize_momentum(zeros, spec)
    variance = None
    if optimizer == "adamw":
        variance = _quantize_variance_scheme(zeros, spec, variance_scheme)
    return FlashState(weights, momentum, variance, t=0, variance_scheme=variance_scheme)


def _quantize_variance_scheme(
    v: np.ndarray, spec: GroupSpec, scheme: str
) -> QuantizedState:
    if scheme == "companded":
        return quantize_variance(v, spec)
    return quantize_linear(v, spec, signed=False)


def _dequantize_variance_scheme(q: QuantizedState) -> np.ndarray:
    if q.kind == "variance":
        return dequantize_variance(q)
    return dequantize(q)  # linear-unsigned baseline


def _check_grad(grad, length: int) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float32).ravel()
    if grad.size != length:
        raise ValueError("gradient length does not match state")
    if not np.isfinite(grad).all():
        raise ValueError("gradient-nonfinite: gradient contains NaN/Inf")
    return grad


def sgd_step(state, grad, hp: SgdHyperParams):
    """One SGD-with-momentum step: m <- mu*m + g; theta <- theta - lr*(m + wd*theta)."""
    grad = _check_grad(grad, state.length)
    t = state.t + 1
    if isinstance(state, ReferenceState):
        m = hp.momentum * state.m + grad
        theta = state.theta - hp.lr * (m + hp.weight_decay * state.theta)
        return ReferenceState(theta, m, None, t)
    m = hp.momentum * dequantize_momentum(state.momentum) + grad
    m_q = quantize_momentum(m, state.momentum.spec)
    theta = state.weights.reconstruct()
    theta = theta - hp.lr * (m + hp.weight_decay * theta)
    return FlashState(
        SplitTensor.from_values(theta, state.weights.fmt, state.weights.width),
        m_q,
        None,
        t,
        state.variance_scheme,
    )


def adamw_step(state, grad, hp: AdamHyperParams):
    """One AdamW step with decoupled weight decay and exact-integer bias correction."""
    grad = _check_grad(grad, state.length)
    t = state.t + 1
    bc1 = np.float32(1.0 - hp.beta1**t)
    bc2 = np.float32(1.0 - hp.beta2**t)
    if isinstance(state, ReferenceState):
        theta, m, v = state.theta, state.m, state.v
    else:
        m = dequantize_momentum(state.momentum)
        v = _dequantize_variance_scheme(state.variance)
        theta = state.weights.reconstruct()
    m = hp.beta1 * m + (1.0 - hp.beta1) * grad
    v = hp.beta2 * v + (1.0 - hp.beta2) * (grad * grad)
    m_hat = m / bc1
    v_hat = v / bc2
    theta = theta - hp.lr * (
        m_hat / (np.sqrt(v_hat) + np.float32(hp.eps)) + hp.weight_decay * theta
    )
    if isinstance(state, ReferenceState):
        return ReferenceState(theta, m, v, t)
    return FlashState(
        SplitTensor.from_values(theta, state.weights.fmt, state.weights.width),
        quantize_momentum(m, state.momentum.spec),
        _quantize_variance_scheme(v, state.variance.spec, state.variance_scheme),
        t,
        state.variance_scheme,
    )


def lion_step(state, grad, hp: LionHyperParams):
    """One Lion step: sign update from the interpolated momentum, then EMA."""
    grad = _check_grad(grad, state.length)
    t = state.t + 1
    if isinstance(state, ReferenceState):
        m_prev, theta = state.m, state.theta
    else:
        m_prev = dequantize_momentum(state.momentum)
        theta = state.weights.reconstruct()
    update = np.sign(hp.beta1 * m_prev + (1.0 - hp.beta1) * grad)
    m = hp.beta2 * m_prev + (1.0 - hp.beta2) * grad
    theta = theta - hp.lr * (update + hp.weight_decay * theta)
    if isinstance(state, ReferenceState):
        return ReferenceState(theta, m, None, t)
    return FlashState(
        SplitTensor.from_values(theta, state.weights.fmt, state.weights.width),
        quantize_momentum(m, state.momentum.spec),
        None,
        t,
        state.variance_scheme,
    )


STEP_FUNCTIONS = {"sgd": sgd_step, "adamw": adamw_step, "lion": lion_step}
