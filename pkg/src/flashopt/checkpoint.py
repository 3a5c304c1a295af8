"""Bit-exact binary serialization of optimizer states and tensor bundles.

Layout (all integers little-endian, independent of host byte order):

    offset  size  field
    0       4     magic b"FLOP"
    4       2     version (u16) = 1
    6       1     payload kind (u8): 0 reference state, 1 flash state,
                  2 tensor bundle (e.g. recorded state trajectories)
    7       1     optimizer (u8): 0 sgd, 1 adamw, 2 lion, 255 n/a
    8       8     step counter t (u64)
    16      4     quantization group size (u32; 0 when not applicable)
    20      4     tensor count (u32)
    24      ...   tensor records, each:
                    name length (u16) + UTF-8 name
                    + dtype tag (u8) + rank (u8) + dims (u64 each)
                    + raw little-endian payload
    end-4   4     CRC32 (u32) over every preceding byte

dtype tags: f32=0, bf16=1, f16=2, i8=3, u8=4, i16=5. bf16 payloads are the
raw 16-bit codes. Loading a file written on any machine reproduces the
saved state bit for bit.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .formats import BF16, CorrectionWidth, INT8_CORRECTION, INT16_CORRECTION, SplitTensor
from .optim import FlashState, ReferenceState
from .quantize import GroupSpec, QuantizedState

__all__ = [
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "save_tensor_bundle",
    "load_tensor_bundle",
    "inspect_checkpoint",
    "payload_bytes",
]

MAGIC = b"FLOP"
VERSION = 1

KIND_REFERENCE = 0
KIND_FLASH = 1
KIND_BUNDLE = 2
KIND_NAMES = {KIND_REFERENCE: "reference", KIND_FLASH: "flash", KIND_BUNDLE: "bundle"}

OPTIMIZER_TAGS = {"sgd": 0, "adamw": 1, "lion": 2, None: 255}
OPTIMIZER_NAMES = {v: k for k, v in OPTIMIZER_TAGS.items()}

# dtype tag <-> numpy dtype; bf16 codes travel as uint16
DTYPE_TAGS: dict[int, np.dtype] = {
    0: np.dtype("<f4"),
    1: np.dtype("<u2"),  # bf16 raw codes
    2: np.dtype("<f2"),
    3: np.dtype("i1"),
    4: np.dtype("u1"),
    5: np.dtype("<i2"),
}
TAG_F32, TAG_BF16, TAG_F16, TAG_I8, TAG_U8, TAG_I16 = range(6)


class CheckpointError(ValueError):
    """Raised for malformed, truncated or corrupt checkpoint files."""


def _tensor_record(name: str, tag: int, array: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    dims = array.shape
    header = struct.pack("<H", len(encoded)) + encoded
    header += struct.pack("<BB", tag, len(dims))
    header += b"".join(struct.pack("<Q", d) for d in dims)
    payload = np.ascontiguousarray(array).astype(DTYPE_TAGS[tag], copy=False)
    return header + payload.tobytes()


def _serialize(
    kind: int, optimizer: str | None, step: int, group_size: int,
    tensors: list[tuple[str, int, np.ndarray]],
) -> bytes:
    body = MAGIC
    body += struct.pack("<H", VERSION)
    body += struct.pack("<BB", kind, OPTIMIZER_TAGS[optimizer])
    body += struct.pack("<Q", step)
    body += struct.pack("<I", group_size)
    body += struct.pack("<I", len(tensors))
    for name, tag, array in tensors:
        body += _tensor_record(name, tag, array)
    return body + struct.pack("<I", zlib.crc32(body))


def _state_tensors(state) -> tuple[int, int, list[tuple[str, int, np.ndarray]]]:
    if isinstance(state, ReferenceState):
        tensors = [("theta", TAG_F32, state.theta), ("m", TAG_F32, state.m)]
        if state.v is not None:
            tensors.append(("v", TAG_F32, state.v))
        return KIND_REFERENCE, 0, tensors
    if isinstance(state, FlashState):
        if state.variance is not None and state.variance.kind != "variance":
            raise CheckpointError(
                "unserializable state: linear-variance baseline states are not checkpointable"
            )
        rho_tag = TAG_I8 if state.weights.width.bits == 8 else TAG_I16
        mom_tag = TAG_I8 if state.momentum.codes.dtype == np.int8 else TAG_U8
        tensors = [
            ("weights.lp", TAG_BF16, state.weights.lp_values),
            ("weights.rho", rho_tag, state.weights.corrections),
            ("momentum.codes", mom_tag, state.momentum.codes),
            ("momentum.scales", TAG_F16, state.momentum.scales),
        ]
        if state.variance is not None:
            tensors.extend(
                [
                    ("variance.codes", TAG_U8, state.variance.codes),
                    ("variance.scales", TAG_F16, state.variance.scales),
                ]
            )
        return KIND_FLASH, state.momentum.spec.group_size, tensors
    raise CheckpointError(f"unserializable state type: {type(state)!r}")


def _optimizer_of(state) -> str:
    if isinstance(state, ReferenceState):
        return "adamw" if state.v is not None else "sgd"
    return "adamw" if state.variance is not None else "sgd"


def save_checkpoint(state, path, optimizer: str | None = None) -> int:
    """Write one optimizer state; returns the byte count written.

    `optimizer` disambiguates sgd vs lion (their states are shaped alike);
    omitted, it is inferred from the state's buffers.
    """
    kind, group, tensors = _state_tensors(state)
    blob = _serialize(kind, optimizer or _optimizer_of(state), state.t, group, tensors)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def save_tensor_bundle(
    tensors: dict[str, np.ndarray], path, optimizer: str | None = None, step: int = 0
) -> int:
    """Write named float32 tensors (state snapshots, trajectories)."""
    records = [(name, TAG_F32, np.asarray(arr, dtype=np.float32)) for name, arr in tensors.items()]
    blob = _serialize(KIND_BUNDLE, optimizer, step, 0, records)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated: file ends inside a record")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _parse(blob: bytes) -> dict:
    if len(blob) < 28:
        raise CheckpointError("truncated: shorter than the fixed header")
    crc_stored = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) != crc_stored:
        raise CheckpointError("crc-mismatch: checkpoint is corrupt or truncated")
    r = _Reader(blob[:-4])
    if r.take(4) != MAGIC:
        raise CheckpointError("bad-magic: not a checkpoint file")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"unsupported-version: {version}")
    kind, opt_tag = r.unpack("<BB")
    if kind not in KIND_NAMES:
        raise CheckpointError(f"unknown payload kind: {kind}")
    if opt_tag not in OPTIMIZER_NAMES:
        raise CheckpointError(f"unknown optimizer tag: {opt_tag}")
    (step,) = r.unpack("<Q")
    (group_size,) = r.unpack("<I")
    (count,) = r.unpack("<I")
    tensors: list[tuple[str, int, np.ndarray]] = []
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        tag, rank = r.unpack("<BB")
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"unknown dtype tag: {tag}")
        dims = tuple(r.unpack("<Q" * rank)) if rank else ()
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        dtype = DTYPE_TAGS[tag]
        raw = r.take(n * dtype.itemsize)
        array = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
        tensors.append((name, tag, array))
    if r.pos != len(r.blob):
        raise CheckpointError("trailing bytes after the last tensor record")
    return {
        "kind": kind,
        "optimizer": OPTIMIZER_NAMES[opt_tag],
        "step": step,
        "group_size": group_size,
        "tensors": tensors,
    }


def _read(path) -> dict:
    with open(path, "rb") as fh:
        return _parse(fh.read())


def _validate_codes(name: str, tag: int, array: np.ndarray) -> None:
    if tag == TAG_I8 and (array.view(np.uint8) == 0x80).any():
        raise CheckpointError(f"invalid-correction-code: {name} contains -128")
    if tag == TAG_I16 and (array.view(np.uint16) == 0x8000).any():
        raise CheckpointError(f"invalid-correction-code: {name} contains -32768")


def load_checkpoint(path):
    """Load a state checkpoint, bitwise equal to what was saved."""
    parsed = _read(path)
    if parsed["kind"] == KIND_BUNDLE:
        raise CheckpointError("not a state checkpoint (tensor bundle); use load_tensor_bundle")
    tensors = {name: (tag, arr) for name, tag, arr in parsed["tensors"]}
    step = int(parsed["step"])
    if parsed["kind"] == KIND_REFERENCE:
        missing = {"theta", "m"} - tensors.keys()
        if missing:
            raise CheckpointError(f"reference state missing tensors: {sorted(missing)}")
        v = tensors["v"][1] if "v" in tensors else None
        return ReferenceState(tensors["theta"][1], tensors["m"][1], v, step)
    missing = {"weights.lp", "weights.rho", "momentum.codes", "momentum.scales"} - tensors.keys()
    if missing:
        raise CheckpointError(f"flash state missing tensors: {sorted(missing)}")
    for name, tag, arr in parsed["tensors"]:
        _validate_codes(name, tag, arr)
    rho_tag, rho = tensors["weights.rho"]
    width = INT8_CORRECTION if rho_tag == TAG_I8 else INT16_CORRECTION
    spec = GroupSpec(parsed["group_size"] or 32)
    weights = SplitTensor(tensors["weights.lp"][1], rho, BF16, width)
    mom_tag, mom_codes = tensors["momentum.codes"]
    momentum = QuantizedState(mom_codes, tensors["momentum.scales"][1], spec, "momentum")
    variance = None
    scheme = "companded"
    if "variance.codes" in tensors:
        variance = QuantizedState(
            tensors["variance.codes"][1], tensors["variance.scales"][1], spec, "variance"
        )
    return FlashState(weights, momentum, variance, step, scheme)


def load_tensor_bundle(path) -> dict:
    """Load a tensor bundle: {"optimizer", "step", "tensors": {name: array}}."""
    parsed = _read(path)
    if parsed["kind"] != KIND_BUNDLE:
        raise CheckpointError("not a tensor bundle; use load_checkpoint")
    return {
        "optimizer": parsed["optimizer"],
        "step": int(parsed["step"]),
        "tensors": {name: arr for name, _, arr in parsed["tensors"]},
    }


def payload_bytes(path) -> dict:
    """Byte accounting: per-tensor and total payload sizes (header excluded)."""
    parsed = _read(path)
    rows = []
    total = 0
    for name, tag, arr in parsed["tensors"]:
        nbytes = arr.size * DTYPE_TAGS[tag].itemsize
        total += nbytes
        rows.append({"name": name, "dtype_tag": tag, "elements": int(arr.size), "bytes": nbytes})
    return {"tensors": rows, "payload_bytes": total}


_TAG_LABELS = {0: "f32", 1: "bf16", 2: "f16", 3: "i8", 4: "u8", 5: "i16"}


def inspect_checkpoint(path) -> dict:
    """Header plus a tensor table, for `ckpt inspect`."""
    parsed = _read(path)
    rows = []
    total = 0
    weight_elements = 0
    for name, tag, arr in parsed["tensors"]:
        nbytes = arr.size * DTYPE_TAGS[tag].itemsize
        total += nbytes
        if name in ("theta", "weights.lp"):
            weight_elements = int(arr.size)
        rows.append(
            {
                "name": name,
                "dtype": _TAG_LABELS[tag],
                "elements": int(arr.size),
                "bytes": int(nbytes),
            }
        )
    return {
        "kind": KIND_NAMES[parsed["kind"]],
        "optimizer": parsed["optimizer"],
        "step": int(parsed["step"]),
        "group_size": int(parsed["group_size"]),
        "tensor_count": len(rows),
        "tensors": rows,
        "payload_bytes": int(total),
        "params": weight_elements,
    }
