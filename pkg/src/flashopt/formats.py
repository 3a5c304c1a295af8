"""Bit-exact FP32/low-precision conversion and ULP-scaled weight splitting.

A 32-bit master weight is stored as a 16-bit low-precision value plus a
narrow integer correction code. The correction encodes where the rounding
residual falls inside the half-ULP interval around the downcast value, so
every exponent bit of the residual is implied by the low-precision value
itself and all correction bits go to the mantissa.

All functions are vectorized over numpy arrays and accept scalars. They are
pure: identical inputs give bitwise-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LowPrecisionFormat",
    "CorrectionWidth",
    "SplitTensor",
    "BF16",
    "FP16",
    "INT8_CORRECTION",
    "INT16_CORRECTION",
    "downcast",
    "upcast",
    "ulp_of",
    "split",
    "encode_correction",
    "reconstruct",
    "roundtrip_baseline",
]


@dataclass(frozen=True)
class LowPrecisionFormat:
    """A 16-bit storage float format (1 sign + exponent_bits + mantissa_bits)."""

    name: str
    exponent_bits: int
    mantissa_bits: int
    bias: int

    def __post_init__(self) -> None:
        if 1 + self.exponent_bits + self.mantissa_bits != 16:
            raise ValueError("format must occupy exactly 16 bits")

    @property
    def exponent_mask(self) -> int:
        return (1 << self.exponent_bits) - 1

    @property
    def mantissa_mask(self) -> int:
        return (1 << self.mantissa_bits) - 1

    @property
    def max_finite(self) -> float:
        m = self.mantissa_bits
        return float((2 - 2.0 ** (-m)) * 2.0 ** (self.exponent_mask - 1 - self.bias))

    @property
    def canonical_nan(self) -> int:
        # quiet NaN: exponent all ones, top mantissa bit set, sign clear
        return (self.exponent_mask << self.mantissa_bits) | (
            1 << (self.mantissa_bits - 1)
        )


BF16 = LowPrecisionFormat("bf16", exponent_bits=8, mantissa_bits=7, bias=127)
FP16 = LowPrecisionFormat("fp16", exponent_bits=5, mantissa_bits=10, bias=15)


@dataclass(frozen=True)
class CorrectionWidth:
    """Signed correction code width: 8 or 16 bits, symmetric range [-N, N]."""

    bits: int

    def __post_init__(self) -> None:
        if self.bits not in (8, 16):
            raise ValueError("correction width must be 8 or 16 bits")

    @property
    def n(self) -> int:
        return (1 << (self.bits - 1)) - 1

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.int8 if self.bits == 8 else np.int16)


INT8_CORRECTION = CorrectionWidth(8)
INT16_CORRECTION = CorrectionWidth(16)


def _as_f32(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32)


def _as_code(code) -> np.ndarray:
    return np.asarray(code, dtype=np.uint16)


def _exponent_field(code: np.ndarray, fmt: LowPrecisionFormat) -> np.ndarray:
    return (code >> np.uint16(fmt.mantissa_bits)) & np.uint16(fmt.exponent_mask)


def _nonfinite(code: np.ndarray, fmt: LowPrecisionFormat) -> np.ndarray:
    return _exponent_field(code, fmt) == np.uint16(fmt.exponent_mask)


def _pow2_normal(k: np.ndarray) -> np.ndarray:
    """2**k as float32 from the exponent field alone. Requires -126 <= k <= 127."""
    return ((k.astype(np.int32) + np.int32(127)) << np.int32(23)).view(np.float32)


def _pow2(k: np.ndarray) -> np.ndarray:
    """2**k as float32, allowing subnormal results (k >= -149)."""
    k = np.asarray(k, dtype=np.int32)
    normal = ((np.maximum(k, -126) + 127) << 23).astype(np.uint32)
    sub = (np.uint32(1) << (k + 149).clip(0, 22).astype(np.uint32)).astype(np.uint32)
    return np.where(k >= -126, normal, sub).view(np.float32)


def _ulp_exponent_scale(
    code: np.ndarray,
    fmt: LowPrecisionFormat,
    residual_negative: np.ndarray | None = None,
) -> np.ndarray:
    """ell = floor(log2 ULP(code)) - 1, computed from the exponent field.

    Normal codes: unbiased_exponent - mantissa_bits - 1. Zero and subnormal
    codes use the subnormal spacing, which coincides with the minimum normal
    binade, so clamping the field to 1 covers both cases.

    ``residual_negative`` marks lanes whose residual e (or correction code)
    is negative. At a normal binade bottom the spacing toward zero is half
    the spacing away from it; lanes whose residual points toward zero drop
    ell by one so the correction grid covers that narrower rounding interval
    at full resolution. Without this, every value that rounds up across a
    binade boundary in magnitude loses one bit of correction resolution and
    16-bit bitwise reconstruction caps out near 99.8%. The correction
    code's sign recovers the same choice at decode time.
    """
    expf = _exponent_field(code, fmt).astype(np.int32)
    ell = np.maximum(expf, np.int32(1)) - np.int32(fmt.bias + fmt.mantissa_bits + 1)
    if residual_negative is not None:
        negative_code = (code & np.uint16(0x8000)) != 0
        toward_zero = residual_negative != negative_code
        at_bottom = ((code & np.uint16(fmt.mantissa_mask)) == 0) & (expf >= 2)
        ell = ell - (at_bottom & toward_zero)
    return ell


def downcast(x, fmt: LowPrecisionFormat) -> np.ndarray:
    """Round FP32 values to the nearest representable 16-bit code.

    Round-to-nearest ties-to-even; overflow saturates to the format's
    infinity, NaN maps to the canonical quiet NaN, signed zero and exact
    subnormals are preserved. Total over all FP32 bit patterns.
    """
    x = _as_f32(x)
    if fmt == BF16:
        u = x.view(np.uint32)
        lower = u & np.uint32(0xFFFF)
        code = (u >> np.uint32(16)).astype(np.uint32)
        odd = (code & np.uint32(1)) == 1
        code = code + ((lower > 0x8000) | ((lower == 0x8000) & odd))
        code = code.astype(np.uint16)
    elif fmt == FP16:
        with np.errstate(over="ignore"):
            code = x.astype(np.float16).view(np.uint16)
    else:
        raise ValueError(f"unsupported low-precision format: {fmt.name}")
    nan = np.isnan(x)
    if nan.any():
        code = np.where(nan, np.uint16(fmt.canonical_nan), code)
    return code


def upcast(code, fmt: LowPrecisionFormat) -> np.ndarray:
    """Exact widening of a 16-bit code back to FP32."""
    code = _as_code(code)
    if fmt == BF16:
        return (code.astype(np.uint32) << np.uint32(16)).view(np.float32)
    if fmt == FP16:
        return code.view(np.float16).astype(np.float32)
    raise ValueError(f"unsupported low-precision format: {fmt.name}")


def ulp_of(code, fmt: LowPrecisionFormat) -> np.ndarray:
    """Power-of-two spacing of the format at the code's binade.

    Zero and subnormal codes return the subnormal spacing
    2**(1 - bias - mantissa_bits). Non-finite codes are rejected.
    """
    code = _as_code(code)
    if _nonfinite(code, fmt).any():
        raise ValueError("ulp-of-nonfinite: ULP undefined for Inf/NaN codes")
    return _pow2(_ulp_exponent_scale(code, fmt) + 1)


def encode_correction(
    theta, code, fmt: LowPrecisionFormat, width: CorrectionWidth
) -> np.ndarray:
    """Correction codes for finite theta given its precomputed downcast.

    The residual e = theta - upcast(code) is rescaled to [-1, 1] with the
    scale 2**-ell applied as two power-of-two multiplications (split at
    floor(-ell/2)) so neither factor over- or underflows, then rounded
    half-to-even onto the symmetric integer grid. Lanes whose downcast
    saturated to infinity get code 0.
    """
    theta = _as_f32(theta)
    code = _as_code(code)
    lp = upcast(code, fmt)
    with np.errstate(invalid="ignore"):
        e = theta - lp
        ell = _ulp_exponent_scale(code, fmt, residual_negative=e < 0)
        half = (-ell) // 2
        e_norm = (e * _pow2_normal(half)) * _pow2_normal(-ell - half)
        e_norm = np.clip(e_norm, np.float32(-1.0), np.float32(1.0))
        rho = np.rint(e_norm * np.float32(width.n))
    saturated = _nonfinite(code, fmt)
    if saturated.any():
        rho = np.where(saturated, np.float32(0), rho)
    return rho.astype(width.dtype)


def split(
    theta, fmt: LowPrecisionFormat = BF16, width: CorrectionWidth = INT8_CORRECTION
) -> tuple[np.ndarray, np.ndarray]:
    """Split finite FP32 values into (16-bit codes, correction codes).

    Correction codes always lie in [-N, N]. If the downcast overflows to
    infinity the correction is 0 and the saturation is visible in the code's
    exponent field. NaN input is rejected.
    """
    theta = _as_f32(theta)
    if not np.isfinite(theta).all():
        raise ValueError("split-nonfinite: cannot split NaN/Inf master weights")
    code = downcast(theta, fmt)
    return code, encode_correction(theta, code, fmt, width)


def reconstruct(
    code,
    rho,
    fmt: LowPrecisionFormat = BF16,
    width: CorrectionWidth = INT8_CORRECTION,
) -> np.ndarray:
    """Inverse of split: upcast(code) + (rho/N) * 2**ell in FP32.

    The power-of-two scale is split at floor(ell/2) so neither factor leaves
    the normal range. The second scale and the final add are evaluated with
    a single rounding (the fused multiply-add a GPU kernel performs): both
    operands are exact in float64, so one float64 product+sum followed by
    one cast gives FMA semantics. Rounding the tiny correction term to an
    FP32 subnormal first would double-round and lose bitwise exactness for
    small-magnitude weights.

    Non-finite codes pass through unchanged (rho ignored via Inf/NaN
    arithmetic). The asymmetric code -2**(bits-1) is never produced by split
    and is rejected here.
    """
    code = _as_code(code)
    rho = np.asarray(rho, dtype=width.dtype)
    if (rho.astype(np.int32) < -width.n).any():
        raise ValueError("invalid-correction-code: asymmetric minimum is forbidden")
    ell = _ulp_exponent_scale(code, fmt, residual_negative=rho < 0)
    half = ell // 2
    scaled = (rho.astype(np.float32) / np.float32(width.n)) * _pow2_normal(half)
    e64 = scaled.astype(np.float64) * _pow2_normal(ell - half).astype(np.float64)
    return (upcast(code, fmt).astype(np.float64) + e64).astype(np.float32)


def roundtrip_baseline(theta, fmt: LowPrecisionFormat = BF16) -> np.ndarray:
    """Kahan-style comparison baseline: store the residual in the same format.

    theta' = downcast(theta), residual downcast to a second 16-bit value,
    result is upcast(theta') + upcast(residual). Saturated lanes return the
    infinity unchanged, as in split.
    """
    theta = _as_f32(theta)
    if not np.isfinite(theta).all():
        raise ValueError("split-nonfinite: cannot split NaN/Inf master weights")
    code = downcast(theta, fmt)
    lp = upcast(code, fmt)
    with np.errstate(invalid="ignore"):
        residual = downcast(theta - lp, fmt)
        out = lp + upcast(residual, fmt)
    saturated = _nonfinite(code, fmt)
    if saturated.any():
        out = np.where(saturated, lp, out)
    return out


@dataclass
class SplitTensor:
    """Compressed master weights: 16-bit values plus integer corrections."""

    lp_values: np.ndarray
    corrections: np.ndarray
    fmt: LowPrecisionFormat
    width: CorrectionWidth

    def __post_init__(self) -> None:
        if self.lp_values.shape != self.corrections.shape:
            raise ValueError("lp_values and corrections must have identical shape")

    @property
    def length(self) -> int:
        return int(self.lp_values.size)

    @classmethod
    def from_values(
        cls,
        theta,
        fmt: LowPrecisionFormat = BF16,
        width: CorrectionWidth = INT8_CORRECTION,
    ) -> "SplitTensor":
        code, rho = split(theta, fmt, width)
        return cls(code, rho, fmt, width)

    def lp_float(self) -> np.ndarray:
        """The low-precision component as FP32 (what training computes on)."""
        return upcast(self.lp_values, self.fmt)

    def reconstruct(self) -> np.ndarray:
        """The master weights recovered from value + correction."""
        return reconstruct(self.lp_values, self.corrections, self.fmt, self.width)
