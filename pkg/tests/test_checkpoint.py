"""Tests for the bit-exact checkpoint container."""

import struct
import zlib

import numpy as np
import pytest

from flashopt.checkpoint import (
    CheckpointError,
    inspect_checkpoint,
    load_checkpoint,
    load_tensor_bundle,
    payload_bytes,
    save_checkpoint,
    save_tensor_bundle,
)
from flashopt.formats import BF16, INT8_CORRECTION, INT16_CORRECTION, SplitTensor
from flashopt.optim import (
    AdamHyperParams,
    FlashState,
    ReferenceState,
    adamw_step,
    init_flash_state,
    init_reference_state,
)


def random_flash_state(rng, n, optimizer="adamw", steps=3):
    theta = rng.standard_normal(n).astype(np.float32)
    st = init_flash_state(theta, optimizer)
    if optimizer == "adamw":
        hp = AdamHyperParams(lr=0.01)
        for _ in range(steps):
            st = adamw_step(st, rng.standard_normal(n).astype(np.float32), hp)
    return st


def assert_flash_equal(a: FlashState, b: FlashState):
    assert np.array_equal(a.weights.lp_values, b.weights.lp_values)
    assert np.array_equal(a.weights.corrections, b.weights.corrections)
    assert a.weights.corrections.dtype == b.weights.corrections.dtype
    assert np.array_equal(a.momentum.codes, b.momentum.codes)
    assert np.array_equal(
        a.momentum.scales.view(np.uint16), b.momentum.scales.view(np.uint16)
    )
    if a.variance is None:
        assert b.variance is None
    else:
        assert np.array_equal(a.variance.codes, b.variance.codes)
        assert np.array_equal(
            a.variance.scales.view(np.uint16), b.variance.scales.view(np.uint16)
        )
    assert a.t == b.t


class TestRoundtrip:
    def test_reference_state_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        st = init_reference_state(rng.standard_normal(257).astype(np.float32), "adamw")
        st.m[:] = rng.standard_normal(257)
        st.v[:] = rng.standard_normal(257) ** 2
        st.t = 41
        path = tmp_path / "ref.ckpt"
        save_checkpoint(st, path)
        loaded = load_checkpoint(path)
        assert isinstance(loaded, ReferenceState)
        assert np.array_equal(st.theta.view(np.uint32), loaded.theta.view(np.uint32))
        assert np.array_equal(st.m.view(np.uint32), loaded.m.view(np.uint32))
        assert np.array_equal(st.v.view(np.uint32), loaded.v.view(np.uint32))
        assert loaded.t == 41

    def test_flash_state_bitwise_over_random_states(self, tmp_path):
        rng = np.random.default_rng(1)
        for case in range(100):
            n = int(rng.integers(1, 200))
            optimizer = ("adamw", "sgd")[case % 2]
            st = random_flash_state(rng, n, optimizer, steps=1 + case % 3)
            path = tmp_path / f"s{case}.ckpt"
            save_checkpoint(st, path)
            assert_flash_equal(st, load_checkpoint(path))

    def test_16bit_corrections_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        theta = rng.standard_normal(64).astype(np.float32)
        st = init_flash_state(theta, "sgd")
        st.weights = SplitTensor.from_values(theta, BF16, INT16_CORRECTION)
        path = tmp_path / "w16.ckpt"
        save_checkpoint(st, path)
        loaded = load_checkpoint(path)
        assert loaded.weights.width == INT16_CORRECTION
        assert_flash_equal(st, loaded)

    def test_step_counter_survives(self, tmp_path):
        st = random_flash_state(np.random.default_rng(3), 32)
        st.t = 123456789012
        path = tmp_path / "t.ckpt"
        save_checkpoint(st, path)
        assert load_checkpoint(path).t == 123456789012

    def test_tensor_bundle_roundtrip(self, tmp_path):
        rng = np.random.default_rng(4)
        tensors = {
            "s000100/w0/m": rng.standard_normal(33).astype(np.float32),
            "s000100/w0/v": (rng.standard_normal(33) ** 2).astype(np.float32),
        }
        path = tmp_path / "traj.snap"
        save_tensor_bundle(tensors, path, optimizer="adamw", step=100)
        loaded = load_tensor_bundle(path)
        assert loaded["optimizer"] == "adamw" and loaded["step"] == 100
        for name, arr in tensors.items():
            assert np.array_equal(arr.view(np.uint32), loaded["tensors"][name].view(np.uint32))

    def test_empty_state(self, tmp_path):
        st = init_reference_state(np.zeros(0, dtype=np.float32), "sgd")
        path = tmp_path / "empty.ckpt"
        nbytes = save_checkpoint(st, path)
        loaded = load_checkpoint(path)
        assert loaded.theta.size == 0
        # fixed header + two empty tensor records + crc only
        assert nbytes < 100


class TestCorruption:
    def test_flipped_payload_byte_fails_crc(self, tmp_path):
        st = random_flash_state(np.random.default_rng(5), 64)
        path = tmp_path / "c.ckpt"
        save_checkpoint(st, path)
        blob = bytearray(path.read_bytes())
        blob[40] ^= 0x01
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="crc-mismatch"):
            load_checkpoint(path)

    def test_truncated_file_rejected(self, tmp_path):
        st = random_flash_state(np.random.default_rng(6), 64)
        path = tmp_path / "t.ckpt"
        save_checkpoint(st, path)
        path.write_bytes(path.read_bytes()[:-9])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        st = random_flash_state(np.random.default_rng(7), 16)
        path = tmp_path / "m.ckpt"
        save_checkpoint(st, path)
        blob = bytearray(path.read_bytes())
        blob[0:4] = b"NOPE"
        blob[-4:] = struct.pack("<I", zlib.crc32(bytes(blob[:-4])))
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="bad-magic"):
            load_checkpoint(path)

    def test_unsupported_version(self, tmp_path):
        st = random_flash_state(np.random.default_rng(8), 16)
        path = tmp_path / "v.ckpt"
        save_checkpoint(st, path)
        blob = bytearray(path.read_bytes())
        blob[4:6] = struct.pack("<H", 99)
        blob[-4:] = struct.pack("<I", zlib.crc32(bytes(blob[:-4])))
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="unsupported-version"):
            load_checkpoint(path)

    def test_correction_code_minus_128_rejected(self, tmp_path):
        st = random_flash_state(np.random.default_rng(9), 16)
        path = tmp_path / "r.ckpt"
        save_checkpoint(st, path)
        blob = bytearray(path.read_bytes())
        # find the weights.rho record payload and plant 0x80 (-128)
        idx = blob.find(b"weights.rho")
        payload_start = idx + len(b"weights.rho") + 2 + 8  # tag, rank, one u64 dim
        blob[payload_start] = 0x80
        blob[-4:] = struct.pack("<I", zlib.crc32(bytes(blob[:-4])))
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="invalid-correction-code"):
            load_checkpoint(path)


class TestSizeAccounting:
    def test_flash_adam_payload_per_param(self, tmp_path):
        n = 1 << 16  # divisible by the group size
        st = random_flash_state(np.random.default_rng(10), n, steps=1)
        path = tmp_path / "f.ckpt"
        save_checkpoint(st, path)
        info = payload_bytes(path)
        # 2 (bf16) + 1 (rho) + 1 (m codes) + 1 (v codes) + 2*2/32 scales
        assert info["payload_bytes"] == n * 2 + n + n + n + 2 * (n // 32) * 2

    def test_reference_adam_payload_per_param(self, tmp_path):
        n = 1000
        st = init_reference_state(np.ones(n, dtype=np.float32), "adamw")
        path = tmp_path / "r.ckpt"
        save_checkpoint(st, path)
        assert payload_bytes(path)["payload_bytes"] == 12 * n

    def test_flash_to_reference_ratio_at_scale(self, tmp_path):
        n = 1 << 17
        flash = random_flash_state(np.random.default_rng(11), n, steps=1)
        ref = init_reference_state(np.ones(n, dtype=np.float32), "adamw")
        fp = tmp_path / "f.ckpt"
        rp = tmp_path / "r.ckpt"
        save_checkpoint(flash, fp)
        save_checkpoint(ref, rp)
        ratio = payload_bytes(fp)["payload_bytes"] / payload_bytes(rp)["payload_bytes"]
        assert ratio <= 0.45

    def test_inspect_reports_table(self, tmp_path):
        st = random_flash_state(np.random.default_rng(12), 96)
        path = tmp_path / "i.ckpt"
        save_checkpoint(st, path)
        info = inspect_checkpoint(path)
        assert info["kind"] == "flash"
        assert info["optimizer"] == "adamw"
        assert info["params"] == 96
        names = {row["name"] for row in info["tensors"]}
        assert "weights.lp" in names and "variance.scales" in names
