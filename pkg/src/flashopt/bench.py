"""Optimizer-state quantization error benchmark.

Replays a recorded full-precision training trajectory: at every snapshot,
each momentum/variance buffer is pushed through the companded and linear
8-bit pipelines and compared against the original via normalized MSE. The
same trajectory serves every scheme, so differences are attributable to
the quantizer alone.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .checkpoint import load_tensor_bundle, save_tensor_bundle
from .quantize import (
    GroupSpec,
    dequantize,
    dequantize_momentum,
    dequantize_variance,
    nmse,
    quantize_linear,
    quantize_momentum,
    quantize_variance,
)
from .training import RunReport, TrainConfig, train

__all__ = [
    "QuantBenchRecord",
    "SCHEMES",
    "record_trajectory",
    "load_trajectory",
    "quant_error_bench",
    "summarize",
    "write_records_csv",
    "write_summary_csv",
]

SCHEMES = ("companded", "linear")


@dataclass(frozen=True)
class QuantBenchRecord:
    step: int
    optimizer: str
    tensor: str
    buffer: str  # "m" | "v"
    scheme: str  # "companded" | "linear"
    nmse: float


def record_trajectory(config: TrainConfig, path) -> RunReport:
    """Run a reference-mode config with snapshots and persist them."""
    if not config.snapshot_every:
        raise ValueError("trajectory recording needs snapshot_every > 0")
    report = train(config)
    if report.status != "ok":
        raise ValueError(f"trajectory run ended with status {report.status}")
    tensors: dict[str, np.ndarray] = {}
    for step, snap in report.snapshots:
        for tname, buffers in snap.items():
            for buf, arr in buffers.items():
                tensors[f"s{step:06d}/{tname}/{buf}"] = arr
    save_tensor_bundle(tensors, path, optimizer=config.optimizer, step=report.steps_run)
    return report


def load_trajectory(path) -> dict:
    """Parse a trajectory file into {"optimizer", "snapshots": [(step, {...})]}."""
    bundle = load_tensor_bundle(path)
    snaps: dict[int, dict[str, dict[str, np.ndarray]]] = {}
    for key, arr in bundle["tensors"].items():
        stag, tname, buf = key.split("/")
        step = int(stag[1:])
        snaps.setdefault(step, {}).setdefault(tname, {})[buf] = arr
    return {
        "optimizer": bundle["optimizer"],
        "snapshots": sorted(snaps.items()),
    }


def _quantize_roundtrip(arr: np.ndarray, buffer: str, scheme: str, spec: GroupSpec) -> np.ndarray:
    if buffer == "m":
        if scheme == "companded":
            return dequantize_momentum(quantize_momentum(arr, spec))
        return dequantize(quantize_linear(arr, spec, signed=True))
    if scheme == "companded":
        return dequantize_variance(quantize_variance(arr, spec))
    return dequantize(quantize_linear(arr, spec, signed=False))


def quant_error_bench(
    trajectory: dict,
    schemes: tuple[str, ...] = SCHEMES,
    spec: GroupSpec = GroupSpec(),
) -> list[QuantBenchRecord]:
    """NMSE of each scheme against every recorded state buffer.

    All-zero buffers are skipped (their NMSE is undefined). Buffers that a
    scheme cannot represent at all (FP16 scale overflow) are skipped for
    that scheme only.
    """
    snapshots = trajectory["snapshots"]
    if not snapshots:
        raise ValueError("empty trajectory")
    optimizer = trajectory["optimizer"]
    records: list[QuantBenchRecord] = []
    for step, tensors in snapshots:
        for tname, buffers in sorted(tensors.items()):
            for buf, arr in sorted(buffers.items()):
                if not np.any(arr):
                    continue
                for scheme in schemes:
                    try:
                        restored = _quantize_roundtrip(arr, buf, scheme, spec)
                    except ValueError:
                        continue
                    records.append(
                        QuantBenchRecord(
                            step, optimizer, tname, buf, scheme, nmse(arr, restored)
                        )
                    )
    return records


def summarize(records: list[QuantBenchRecord]) -> list[dict]:
    """p10/p50/p90 NMSE per (optimizer, buffer, scheme)."""
    groups: dict[tuple, list[float]] = {}
    for rec in records:
        groups.setdefault((rec.optimizer, rec.buffer, rec.scheme), []).append(rec.nmse)
    rows = []
    for (optimizer, buf, scheme), values in sorted(groups.items()):
        p10, p50, p90 = np.percentile(values, [10, 50, 90])
        rows.append(
            {
                "optimizer": optimizer,
                "buffer": buf,
                "scheme": scheme,
                "count": len(values),
                "p10": float(p10),
                "p50": float(p50),
                "p90": float(p90),
            }
        )
    return rows


def write_records_csv(records: list[QuantBenchRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "optimizer", "tensor", "buffer", "scheme", "nmse"])
        for r in records:
            writer.writerow([r.step, r.optimizer, r.tensor, r.buffer, r.scheme, repr(r.nmse)])


def write_summary_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["optimizer", "buffer", "scheme", "count", "p10", "p50", "p90"])
        for row in rows:
            writer.writerow(
                [
                    row["optimizer"],
                    row["buffer"],
                    row["scheme"],
                    row["count"],
                    repr(row["p10"]),
                    repr(row["p50"]),
                    repr(row["p90"]),
                ]
            )
