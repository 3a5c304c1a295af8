"""Exhaustive FP32 reconstruction-error sweep.

Every finite FP32 bit pattern (both signs, 4,278,190,080 values) is pushed
through a weight-compression scheme and compared with the original. Results
aggregate into per-exponent buckets: mean and max relative error plus the
bitwise-exact fraction.

The sweep walks blocks of 2**23 contiguous patterns, one block per
(sign, exponent-field) pair, so a block maps to exactly one bucket and the
inner loop needs no per-element bucket indexing. Blocks are a fixed grid
and partial results merge in block order, which makes the output bitwise
identical for any worker count. Error sums accumulate in float64.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .formats import (
    BF16,
    FP16,
    INT8_CORRECTION,
    INT16_CORRECTION,
    LowPrecisionFormat,
    downcast,
    encode_correction,
    reconstruct,
    roundtrip_baseline,
    upcast,
)

__all__ = [
    "SCHEMES",
    "SweepBucket",
    "SweepResult",
    "exhaustive_sweep",
    "exhaustive_sweep_multi",
    "write_buckets_csv",
    "write_summary_json",
    "default_workers",
]

SCHEMES = ("ulp8", "ulp16", "none", "baseline")

_BLOCK_LOG2 = 23  # one (sign, exponent-field) block
_CHUNK_LOG2 = 20  # sub-chunk size tuned for allocator behavior
_N_BUCKETS = 258  # 0 zero, 1 subnormal, 2..256 exponent fields 1..255, 257 overflow
_ZERO, _SUBNORMAL, _OVERFLOW = 0, 1, 257

_WIDTHS = {"ulp8": INT8_CORRECTION, "ulp16": INT16_CORRECTION}


@dataclass
class SweepBucket:
    """Aggregate over all swept values sharing one FP32 exponent."""

    exponent: int | str  # unbiased exponent, or "zero" / "subnormal" / "overflow"
    count: int
    exact_count: int
    mean_rel_err: float
    max_rel_err: float

    @property
    def exact_fraction(self) -> float:
        return self.exact_count / self.count if self.count else 0.0


@dataclass
class SweepResult:
    fmt: str
    scheme: str
    buckets: list[SweepBucket]
    total_count: int
    overflow_count: int
    exact_count: int
    rel_err_sum: float
    max_rel_err: float
    nonzero_count: int
    normal_count: int
    normal_exact_count: int
    elapsed_seconds: float
    workers: int

    @property
    def finite_downcast_count(self) -> int:
        return self.total_count - self.overflow_count

    @property
    def exact_fraction(self) -> float:
        """Bitwise-exact fraction over values with finite downcast."""
        return self.exact_count / self.finite_downcast_count

    @property
    def exact_fraction_normals_only(self) -> float:
        """Same, restricted to normal FP32 inputs."""
        return self.normal_exact_count / self.normal_count

    @property
    def mean_rel_err(self) -> float:
        """Mean of |rec - x| / |x| over nonzero values with finite downcast."""
        return self.rel_err_sum / self.nonzero_count

    def summary_dict(self) -> dict:
        return {
            "format": self.fmt,
            "scheme": self.scheme,
            "total_count": self.total_count,
            "finite_downcast_count": self.finite_downcast_count,
            "overflow_count": self.overflow_count,
            "exact_count": self.exact_count,
            "exact_fraction": self.exact_fraction,
            "exact_fraction_normals_only": self.exact_fraction_normals_only,
            "mean_rel_err": self.mean_rel_err,
            "max_rel_err": self.max_rel_err,
            "elapsed_seconds": self.elapsed_seconds,
            "workers": self.workers,
        }


def default_workers() -> int:
    env = os.environ.get("FLASHOPT_WORKERS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


_TEMPLATE_CACHE: dict[int, np.ndarray] = {}


def _pattern_chunk(base: int, n: int) -> np.ndarray:
    if n not in _TEMPLATE_CACHE:
        _TEMPLATE_CACHE[n] = np.arange(n, dtype=np.uint32)
    return _TEMPLATE_CACHE[n] | np.uint32(base)


def _fully_saturated(fmt: LowPrecisionFormat, expf: int) -> bool:
    """Whole exponent-field block overflows the target format."""
    # RNE overflow threshold: max finite + half the top-binade ULP
    threshold = fmt.max_finite * (1.0 + 2.0 ** (-fmt.mantissa_bits - 1))
    return 2.0**(expf - 127) >= threshold


def _reconstruct_scheme(
    theta: np.ndarray, code: np.ndarray, fmt: LowPrecisionFormat, scheme: str
) -> np.ndarray:
    if scheme == "none":
        return upcast(code, fmt)
    if scheme == "baseline":
        lp = upcast(code, fmt)
        with np.errstate(invalid="ignore"):
            residual = downcast(theta - lp, fmt)
            out = lp + upcast(residual, fmt)
        return out
    width = _WIDTHS[scheme]
    rho = encode_correction(theta, code, fmt, width)
    return reconstruct(code, rho, fmt, width)


def _sweep_block(args) -> tuple[int, dict]:
    """Aggregate one (sign, exponent-field) block for every scheme.

    Returns (block_index, {scheme: (count, exact, relsum, relmax,
    overflow_count, zero_count, zero_exact)}).
    """
    block_index, fmt_name, schemes = args
    fmt = BF16 if fmt_name == "bf16" else FP16
    sign = block_index // 255
    expf = block_index % 255
    base = (sign << 31) | (expf << 23)
    n_block = 1 << _BLOCK_LOG2

    if _fully_saturated(fmt, expf):
        out = {s: (0, 0, 0.0, 0.0, n_block, 0, 0) for s in schemes}
        return block_index, out

    totals = {s: [0, 0, 0.0, 0.0, 0, 0, 0] for s in schemes}
    n_chunk = 1 << _CHUNK_LOG2
    for off in range(0, n_block, n_chunk):
        u = _pattern_chunk(base + off, n_chunk)
        theta = u.view(np.float32)
        code = downcast(theta, fmt)
        finite = np.isfinite(upcast(code, fmt))
        any_saturated = not finite.all()
        sat_count = int(n_chunk - finite.sum()) if any_saturated else 0
        zero_lane = off == 0 and expf == 0  # lane 0 of the first chunk is +-0
        absth = np.abs(theta)
        for s in schemes:
            rec = _reconstruct_scheme(theta, code, fmt, s)
            exact = rec.view(np.uint32) == u
            with np.errstate(invalid="ignore", divide="ignore"):
                rel = np.abs(rec - theta) / absth
            t = totals[s]
            if zero_lane:
                t[5] += 1
                t[6] += int(exact[0])
                rel[0] = 0.0
                exact = exact.copy()
                exact[0] = False
            if any_saturated:
                rel = np.where(finite, rel, np.float32(0.0))
                valid_count = n_chunk - sat_count - (1 if zero_lane else 0)
                exact_count = int((exact & finite).sum())
            else:
                valid_count = n_chunk - (1 if zero_lane else 0)
                exact_count = int(exact.sum())
            t[0] += valid_count
            t[1] += exact_count
            t[2] += float(rel.sum(dtype=np.float64))
            t[3] = max(t[3], float(rel.max()))
            t[4] += sat_count
    return block_index, {s: tuple(t) for s, t in totals.items()}


def _bucket_label(index: int) -> int | str:
    if index == _ZERO:
        return "zero"
    if index == _SUBNORMAL:
        return "subnormal"
    if index == _OVERFLOW:
        return "overflow"
    return index - 1 - 127  # exponent field -> unbiased exponent


def exhaustive_sweep_multi(
    fmt: LowPrecisionFormat,
    schemes: tuple[str, ...] = SCHEMES,
    workers: int | None = None,
    _blocks: list[int] | None = None,
) -> dict[str, SweepResult]:
    """Sweep all finite FP32 patterns once, evaluating several schemes.

    The downcast and bucketing are shared across schemes; per-scheme work is
    the reconstruction and error accumulation. Output is bitwise identical
    for any worker count. `_blocks` restricts the sweep to a subset of the
    510 (sign, exponent-field) blocks; tests use it, full sweeps do not.
    """
    for s in schemes:
        if s not in SCHEMES:
            raise ValueError(f"unknown sweep scheme: {s}")
    workers = workers or default_workers()
    full = _blocks is None
    block_ids = range(510) if full else sorted(_blocks)
    t_start = time.perf_counter()
    block_args = [(i, fmt.name, tuple(schemes)) for i in block_ids]
    if workers == 1:
        partials = [_sweep_block(a) for a in block_args]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(_sweep_block, block_args, chunksize=4))
    partials.sort(key=lambda item: item[0])

    results: dict[str, SweepResult] = {}
    n_block = 1 << _BLOCK_LOG2
    for s in schemes:
        counts = np.zeros(_N_BUCKETS, dtype=np.int64)
        exacts = np.zeros(_N_BUCKETS, dtype=np.int64)
        relsums = np.zeros(_N_BUCKETS, dtype=np.float64)
        relmaxs = np.zeros(_N_BUCKETS, dtype=np.float64)
        for block_index, per_scheme in partials:
            expf = block_index % 255
            bucket = _SUBNORMAL if expf == 0 else expf + 1
            count, exact, relsum, relmax, overflow, zeros, zero_exact = per_scheme[s]
            counts[bucket] += count
            exacts[bucket] += exact
            relsums[bucket] += relsum
            relmaxs[bucket] = max(relmaxs[bucket], relmax)
            counts[_OVERFLOW] += overflow
            counts[_ZERO] += zeros
            exacts[_ZERO] += zero_exact
        buckets = []
        for i in range(_N_BUCKETS):
            if counts[i] == 0:
                continue
            nonzero = counts[i] if i not in (_ZERO, _OVERFLOW) else 0
            buckets.append(
                SweepBucket(
                    exponent=_bucket_label(i),
                    count=int(counts[i]),
                    exact_count=int(exacts[i]),
                    mean_rel_err=float(relsums[i] / nonzero) if nonzero else 0.0,
                    max_rel_err=float(relmaxs[i]),
                )
            )
        normal_sel = slice(2, _N_BUCKETS - 1)
        results[s] = SweepResult(
            fmt=fmt.name,
            scheme=s,
            buckets=buckets,
            total_count=int(counts.sum()),
            overflow_count=int(counts[_OVERFLOW]),
            exact_count=int(exacts.sum()),
            rel_err_sum=float(relsums.sum()),
            max_rel_err=float(relmaxs.max()),
            nonzero_count=int(counts[normal_sel].sum() + counts[_SUBNORMAL]),
            normal_count=int(counts[normal_sel].sum()),
            normal_exact_count=int(exacts[normal_sel].sum()),
            elapsed_seconds=time.perf_counter() - t_start,
            workers=workers,
        )
    assert all(r.total_count == 510 * n_block for r in results.values())
    return results


def exhaustive_sweep(
    fmt: LowPrecisionFormat, scheme: str, workers: int | None = None
) -> SweepResult:
    """Sweep every finite FP32 bit pattern under one compression scheme."""
    return exhaustive_sweep_multi(fmt, (scheme,), workers)[scheme]


def write_buckets_csv(result: SweepResult, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["exponent", "count", "mean_rel_err", "max_rel_err", "exact_fraction"])
        for b in result.buckets:
            writer.writerow(
                [b.exponent, b.count, repr(b.mean_rel_err), repr(b.max_rel_err),
                 repr(b.exact_fraction)]
            )


def write_summary_json(results: dict[str, SweepResult], path) -> None:
    payload = {s: r.summary_dict() for s, r in sorted(results.items())}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
