"""Group-wise companded 8-bit quantization of optimizer state buffers.

Buffers are cut into fixed-size groups, each normalized by its own absmax
scale (stored in FP16, rounded up so no normalized value exceeds 1). A
one-line companding transform is applied before the integer rounding:
a softsign-like squash for momentum, a square root for variance. The
linear variants skip the transform and serve as the comparison baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "GroupSpec",
    "QuantizedState",
    "quantize_momentum",
    "dequantize_momentum",
    "quantize_variance",
    "dequantize_variance",
    "quantize_linear",
    "dequantize",
    "nmse",
]

_FP16_MAX = 65504.0

KINDS = ("momentum", "variance", "linear-signed", "linear-unsigned")


@dataclass(frozen=True)
class GroupSpec:
    """Grouping layout: contiguous groups of `group_size` elements, FP16 scales."""

    group_size: int = 32

    def __post_init__(self) -> None:
        if self.group_size < 1:
            raise ValueError("group size must be >= 1")

    def num_groups(self, length: int) -> int:
        return -(-length // self.group_size) if length else 0


@dataclass
class QuantizedState:
    """8-bit codes plus one FP16 scale per group for one state buffer."""

    codes: np.ndarray  # int8 (signed kinds) or uint8 (unsigned kinds)
    scales: np.ndarray  # float16, ceil(length / group_size) entries
    spec: GroupSpec
    kind: str

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown state kind: {self.kind}")
        if self.scales.size != self.spec.num_groups(self.codes.size):
            raise ValueError("scale count does not match group count")

    @property
    def length(self) -> int:
        return int(self.codes.size)


def _finite_or_raise(x: np.ndarray) -> None:
    if not np.isfinite(x).all():
        raise ValueError("quantize-nonfinite: state buffer contains NaN/Inf")


def _group_max(x: np.ndarray, group_size: int) -> np.ndarray:
    """Per-group maximum; a partial trailing group gets its own entry."""
    n = x.size
    full = (n // group_size) * group_size
    head = x[:full].reshape(-1, group_size).max(axis=1) if full else x[:0]
    if full == n:
        return head
    return np.concatenate([head, [x[full:].max()]]).astype(np.float32)


def _scales_round_up_fp16(group_max: np.ndarray) -> np.ndarray:
    """Round non-negative group maxima up to the nearest FP16 >= value."""
    if group_max.size and float(group_max.max()) > _FP16_MAX:
        raise ValueError("scale-overflow: group absmax exceeds FP16 range")
    with np.errstate(over="ignore"):
        s = group_max.astype(np.float16)
    low = s.astype(np.float32) < group_max
    if low.any():
        s = np.where(low, np.nextafter(s, np.float16(np.inf)), s)
    if np.isinf(s).any():
        raise ValueError("scale-overflow: group absmax exceeds FP16 range")
    return s


def _per_element_scales(scales: np.ndarray, length: int, group_size: int) -> np.ndarray:
    counts = np.full(scales.size, group_size, dtype=np.intp)
    if scales.size:
        counts[-1] = length - (scales.size - 1) * group_size
    return np.repeat(scales.astype(np.float32), counts)


def _normalize(x: np.ndarray, scales: np.ndarray, spec: GroupSpec) -> np.ndarray:
    s_el = _per_element_scales(scales, x.size, spec.group_size)
    denom = np.where(s_el == 0, np.float32(1), s_el)
    return x / denom


def quantize_momentum(m, spec: GroupSpec = GroupSpec()) -> QuantizedState:
    """Signed 8-bit momentum codes via absmax scaling and a softsign squash.

    Per group: scale = absmax rounded up to FP16, normalized values pushed
    through 2x/(1+|x|) and rounded half-to-even onto [-127, 127]. All-zero
    groups store scale 0 and codes 0.
    """
    m = np.asarray(m, dtype=np.float32).ravel()
    _finite_or_raise(m)
    scales = _scales_round_up_fp16(_group_max(np.abs(m), spec.group_size))
    mn = _normalize(m, scales, spec)
    z = np.float32(2) * mn / (np.float32(1) + np.abs(mn))
    codes = np.clip(np.rint(z * np.float32(127)), -127, 127).astype(np.int8)
    return QuantizedState(codes, scales, spec, "momentum")


def dequantize_momentum(q: QuantizedState) -> np.ndarray:
    """Invert the softsign squash and the per-group scaling."""
    if q.kind != "momentum":
        raise ValueError(f"kind-mismatch: expected momentum, got {q.kind}")
    z = q.codes.astype(np.float32) / np.float32(127)
    mn = z / (np.float32(2) - np.abs(z))
    return mn * _per_element_scales(q.scales, q.length, q.spec.group_size)


def quantize_variance(v, spec: GroupSpec = GroupSpec()) -> QuantizedState:
    """Unsigned 8-bit variance codes: elementwise sqrt first, then group absmax.

    The square root is applied to the whole buffer before grouping; groups
    are scaled by the max of the rooted values, rounded up to FP16, and
    rounded half-to-even onto [0, 255].
    """
    v = np.asarray(v, dtype=np.float32).ravel()
    _finite_or_raise(v)
    if (v < 0).any():
        raise ValueError("negative-variance: variance entries must be >= 0")
    root = np.sqrt(v)
    scales = _scales_round_up_fp16(_group_max(root, spec.group_size))
    vn = _normalize(root, scales, spec)
    codes = np.clip(np.rint(vn * np.float32(255)), 0, 255).astype(np.uint8)
    return QuantizedState(codes, scales, spec, "variance")


def dequantize_variance(q: QuantizedState) -> np.ndarray:
    """Rescale codes and square; outputs are always >= 0."""
    if q.kind != "variance":
        raise ValueError(f"kind-mismatch: expected variance, got {q.kind}")
    z = q.codes.astype(np.float32) / np.float32(255)
    root = z * _per_element_scales(q.scales, q.length, q.spec.group_size)
    return root * root


def quantize_linear(x, spec: GroupSpec = GroupSpec(), signed: bool = True) -> QuantizedState:
    """Plain absmax integer quantization with no companding transform."""
    x = np.asarray(x, dtype=np.float32).ravel()
    _finite_or_raise(x)
    if not signed and (x < 0).any():
        raise ValueError("negative-unsigned: unsigned buffer has negative entries")
    scales = _scales_round_up_fp16(_group_max(np.abs(x), spec.group_size))
    xn = _normalize(x, scales, spec)
    if signed:
        codes = np.clip(np.rint(xn * np.float32(127)), -127, 127).astype(np.int8)
        return QuantizedState(codes, scales, spec, "linear-signed")
    codes = np.clip(np.rint(xn * np.float32(255)), 0, 255).astype(np.uint8)
    return QuantizedState(codes, scales, spec, "linear-unsigned")


def dequantize(q: QuantizedState) -> np.ndarray:
    """Dequantize any state kind."""
    if q.kind == "momentum":
        return dequantize_momentum(q)
    if q.kind == "variance":
        return dequantize_variance(q)
    s_el = _per_element_scales(q.scales, q.length, q.spec.group_size)
    if q.kind == "linear-signed":
        return (q.codes.astype(np.float32) / np.float32(127)) * s_el
    return (q.codes.astype(np.float32) / np.float32(255)) * s_el


def nmse(x, xhat) -> float:
    """Normalized mean squared error: sum((x - xhat)^2) / sum(x^2)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    xhat = np.asarray(xhat, dtype=np.float64).ravel()
    if x.shape != xhat.shape:
        raise ValueError("nmse inputs must have equal length")
    denom = float(np.sum(x * x))
    if denom == 0.0:
        raise ValueError("nmse-undefined: reference buffer is all zeros")
    diff = x - xhat
    return float(np.sum(diff * diff) / denom)
