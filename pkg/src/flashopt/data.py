"""Deterministic synthetic datasets for the desk-scale training harness."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["DatasetSpec", "Dataset", "gen_dataset"]

KINDS = ("moons", "linreg")


@dataclass(frozen=True)
class DatasetSpec:
    """What to generate; a (seed, spec) pair fully determines the data.

    moons: two interleaved half-circles with Gaussian jitter, 2 features,
    binary labels, not linearly separable.
    linreg: y = target_scale * (X @ w + b + noise) with a known optimal
    loss floor of (target_scale * noise_std)**2. feature_scale_spread
    stretches per-feature scales over 10**[-s/2, s/2] to make gradient
    magnitudes heavy-tailed; target_scale moves gradient and optimizer-state
    magnitudes into a realistic training range.
    """

    kind: str = "moons"
    n_samples: int = 1024
    n_features: int = 8  # linreg only; moons is always 2-d
    noise_std: float = 0.25
    feature_scale_spread: float = 0.0
    target_scale: float = 1.0  # linreg only; scales targets (and the loss floor)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind: {self.kind}")
        if self.n_samples <= 0:
            raise ValueError("n_samples must be > 0")
        if self.n_features <= 0:
            raise ValueError("n_features must be > 0")
        if self.noise_std < 0 or self.feature_scale_spread < 0:
            raise ValueError("noise_std and feature_scale_spread must be >= 0")
        if self.target_scale <= 0:
            raise ValueError("target_scale must be > 0")


@dataclass
class Dataset:
    inputs: np.ndarray  # float32 [n_samples, n_features]
    targets: np.ndarray  # int64 class labels or float32 regression targets
    kind: str
    seed: int

    @property
    def n_samples(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.inputs.shape[1])

    @property
    def n_outputs(self) -> int:
        return 2 if self.kind == "moons" else 1


def gen_dataset(seed: int, spec: DatasetSpec) -> Dataset:
    """Generate a dataset; bitwise deterministic in (seed, spec)."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
    if spec.kind == "moons":
        n1 = spec.n_samples // 2
        n0 = spec.n_samples - n1
        t0 = rng.uniform(0.0, np.pi, n0)
        t1 = rng.uniform(0.0, np.pi, n1)
        x0 = np.stack([np.cos(t0), np.sin(t0)], axis=1)
        x1 = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
        x = np.concatenate([x0, x1], axis=0)
        x += rng.normal(0.0, spec.noise_std, x.shape)
        y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
        order = rng.permutation(spec.n_samples)
        inputs = x[order].astype(np.float32)
        if spec.feature_scale_spread > 0:
            inputs = inputs * _feature_scales(rng, 2, spec.feature_scale_spread)
        return Dataset(inputs, y[order], spec.kind, seed)

    x = rng.normal(0.0, 1.0, (spec.n_samples, spec.n_features))
    w = rng.normal(0.0, 1.0, spec.n_features) / np.sqrt(spec.n_features)
    b = rng.normal(0.0, 0.5)
    # teacher acts on the unscaled features, so the optimal MSE stays
    # exactly noise_std**2; scaling only the observed inputs makes the
    # problem ill-conditioned without inflating the targets
    y = (x @ w + b + rng.normal(0.0, spec.noise_std, spec.n_samples)) * spec.target_scale
    if spec.feature_scale_spread > 0:
        x = x * _feature_scales(rng, spec.n_features, spec.feature_scale_spread)
    return Dataset(x.astype(np.float32), y.astype(np.float32), spec.kind, seed)


def _feature_scales(rng: np.random.Generator, d: int, spread: float) -> np.ndarray:
    exponents = rng.uniform(-spread / 2.0, spread / 2.0, d)
    return (10.0**exponents).astype(np.float32)
