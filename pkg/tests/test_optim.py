"""Tests for reference and flash optimizer steps."""

import numpy as np
import pytest

from flashopt.formats import upcast, BF16
from flashopt.optim import (
    AdamHyperParams,
    FlashState,
    LionHyperParams,
    ReferenceState,
    SgdHyperParams,
    adamw_step,
    init_flash_state,
    init_reference_state,
    lion_step,
    sgd_step,
)
from flashopt.quantize import dequantize_momentum, dequantize_variance


def f32(*vals):
    return np.array(vals, dtype=np.float32)


class TestHyperParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            SgdHyperParams(lr=0.1, momentum=1.0)
        with pytest.raises(ValueError):
            AdamHyperParams(lr=0.1, eps=0.0)
        with pytest.raises(ValueError):
            LionHyperParams(lr=0.1, beta2=1.5)
        with pytest.raises(ValueError):
            SgdHyperParams(lr=float("nan"))


class TestInit:
    def test_flash_init_splits_and_zeroes(self):
        st = init_flash_state(f32(1.0), "adamw")
        assert upcast(st.weights.lp_values, BF16) == 1.0
        assert st.weights.corrections.tolist() == [0]
        assert (st.momentum.codes == 0).all() and st.momentum.scales.tolist() == [0.0]
        assert (st.variance.codes == 0).all()
        assert st.t == 0

    def test_flash_init_records_correction(self):
        st = init_flash_state(f32(1.001953125), "sgd")
        assert upcast(st.weights.lp_values, BF16) == 1.0
        assert st.weights.corrections.tolist() == [64]
        assert st.variance is None

    def test_rejects_nan(self):
        with pytest.raises(ValueError, match="nonfinite"):
            init_flash_state(f32(np.nan), "adamw")
        with pytest.raises(ValueError, match="nonfinite"):
            init_reference_state(f32(np.inf), "sgd")

    def test_unknown_optimizer(self):
        with pytest.raises(ValueError, match="unknown optimizer"):
            init_flash_state(f32(1.0), "adagrad")


class TestAdamW:
    def test_first_step_hand_trace(self):
        hp = AdamHyperParams(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0)
        st = adamw_step(init_reference_state(f32(0.0), "adamw"), f32(1.0), hp)
        assert st.t == 1
        assert abs(st.m[0] - 0.1) < 1e-7
        assert abs(st.v[0] - 0.001) < 1e-9
        # bias-corrected m_hat = 1, v_hat = 1 -> theta ~ -0.1/(1 + 1e-8)
        assert abs(st.theta[0] + 0.1) < 1e-7

    def test_zero_gradient_is_identity(self):
        hp = AdamHyperParams(lr=0.1)
        st = adamw_step(init_reference_state(f32(0.5, -2.0), "adamw"), f32(0.0, 0.0), hp)
        assert st.theta.tolist() == [0.5, -2.0]

    def test_decoupled_decay_only(self):
        hp = AdamHyperParams(lr=0.1, weight_decay=0.1)
        st = adamw_step(init_reference_state(f32(1.0), "adamw"), f32(0.0), hp)
        assert abs(st.theta[0] - 0.99) < 1e-7

    def test_step_counter_increments(self):
        hp = AdamHyperParams(lr=0.01)
        st = init_reference_state(f32(1.0), "adamw")
        for expected in (1, 2, 3):
            st = adamw_step(st, f32(0.1), hp)
            assert st.t == expected

    def test_variance_stays_nonnegative_through_flash_cycles(self):
        hp = AdamHyperParams(lr=0.01)
        rng = np.random.default_rng(0)
        st = init_flash_state(rng.standard_normal(64).astype(np.float32), "adamw")
        for _ in range(5):
            st = adamw_step(st, rng.standard_normal(64).astype(np.float32), hp)
            assert (dequantize_variance(st.variance) >= 0).all()


class TestSgd:
    def test_hand_trace_two_steps(self):
        hp = SgdHyperParams(lr=0.1, momentum=0.9, weight_decay=0.0)
        st = sgd_step(init_reference_state(f32(0.0), "sgd"), f32(1.0), hp)
        assert st.m[0] == 1.0 and abs(st.theta[0] + 0.1) < 1e-7
        st = sgd_step(st, f32(1.0), hp)
        assert abs(st.m[0] - 1.9) < 1e-6
        assert abs(st.theta[0] + 0.29) < 1e-6  # -0.1 - 0.19

    def test_zero_gradient_fixed_point(self):
        hp = SgdHyperParams(lr=0.1, momentum=0.9)
        st = sgd_step(init_reference_state(f32(3.0), "sgd"), f32(0.0), hp)
        assert st.theta[0] == 3.0


class TestLion:
    def test_first_step_hand_trace(self):
        hp = LionHyperParams(lr=0.01, beta1=0.9, beta2=0.99, weight_decay=0.0)
        st = lion_step(init_reference_state(f32(0.0), "lion"), f32(1.0), hp)
        assert abs(st.theta[0] + 0.01) < 1e-9
        assert abs(st.m[0] - 0.01) < 1e-7  # (1 - beta2) * g

    def test_sign_zero_is_zero(self):
        hp = LionHyperParams(lr=0.01)
        st = lion_step(init_reference_state(f32(5.0), "lion"), f32(0.0), hp)
        assert st.theta[0] == 5.0

    def test_sign_symmetry(self):
        hp = LionHyperParams(lr=0.01)
        st = lion_step(init_reference_state(f32(0.0), "lion"), f32(-1.0), hp)
        assert abs(st.theta[0] - 0.01) < 1e-9

    def test_update_magnitude_is_exactly_lr(self):
        hp = LionHyperParams(lr=0.004, weight_decay=0.0)
        rng = np.random.default_rng(4)
        theta0 = rng.standard_normal(128).astype(np.float32)
        st = lion_step(init_reference_state(theta0, "lion"), rng.standard_normal(128).astype(np.float32), hp)
        delta = np.abs(st.theta - theta0)
        assert set(np.unique(np.round(delta / np.float32(0.004)).astype(int))) <= {0, 1}


class TestFlashVsReference:
    def test_zero_gradient_leaves_flash_weights_bitwise_unchanged(self):
        rng = np.random.default_rng(8)
        theta0 = rng.standard_normal(256).astype(np.float32)
        for name, step, hp in [
            ("sgd", sgd_step, SgdHyperParams(lr=0.1, weight_decay=0.0)),
            ("adamw", adamw_step, AdamHyperParams(lr=0.1, weight_decay=0.0)),
            ("lion", lion_step, LionHyperParams(lr=0.1, weight_decay=0.0)),
        ]:
            st0 = init_flash_state(theta0, name)
            st1 = step(st0, np.zeros_like(theta0), hp)
            assert np.array_equal(st0.weights.lp_values, st1.weights.lp_values), name
            assert np.array_equal(st0.weights.corrections, st1.weights.corrections), name

    def test_zero_gradient_step_matches_reference_exactly(self):
        rng = np.random.default_rng(9)
        theta0 = rng.standard_normal(64).astype(np.float32)
        hp = AdamHyperParams(lr=0.1, weight_decay=0.0)
        ref = adamw_step(init_reference_state(theta0, "adamw"), np.zeros_like(theta0), hp)
        fl = adamw_step(init_flash_state(theta0, "adamw"), np.zeros_like(theta0), hp)
        # with all-zero states both leave weights untouched; flash holds the
        # split representation of theta0
        assert np.array_equal(ref.theta, theta0)
        assert np.abs(fl.weights.reconstruct() - theta0).max() <= (
            np.spacing(np.abs(theta0)).astype(np.float64) * 0
            + np.abs(theta0) * 2.0**-15
        ).max()

    def test_single_step_drift_is_bounded(self):
        rng = np.random.default_rng(10)
        theta0 = rng.standard_normal(1024).astype(np.float32)
        grad = rng.standard_normal(1024).astype(np.float32)
        for name, step, hp in [
            ("sgd", sgd_step, SgdHyperParams(lr=0.01)),
            ("adamw", adamw_step, AdamHyperParams(lr=0.01)),
            ("lion", lion_step, LionHyperParams(lr=0.01)),
        ]:
            ref = step(init_reference_state(theta0, name), grad, hp)
            fl = step(init_flash_state(theta0, name), grad, hp)
            drift = np.abs(fl.weights.reconstruct() - ref.theta)
            # initial split error is <= ulp/508; one step adds state
            # quantization error ~ lr * code-step; generous envelope
            assert drift.max() < 1e-3, name

    def test_epilogue_matches_next_prologue_bitwise(self):
        rng = np.random.default_rng(11)
        theta0 = rng.standard_normal(96).astype(np.float32)
        hp = AdamHyperParams(lr=0.05)
        st1 = adamw_step(init_flash_state(theta0, "adamw"), rng.standard_normal(96).astype(np.float32), hp)
        m_read = dequantize_momentum(st1.momentum)
        v_read = dequantize_variance(st1.variance)
        assert np.array_equal(m_read, dequantize_momentum(st1.momentum))
        assert np.array_equal(v_read, dequantize_variance(st1.variance))

    def test_gradient_errors(self):
        hp = SgdHyperParams(lr=0.1)
        st = init_reference_state(f32(1.0, 2.0), "sgd")
        with pytest.raises(ValueError, match="length"):
            sgd_step(st, f32(1.0), hp)
        with pytest.raises(ValueError, match="nonfinite"):
            sgd_step(st, f32(np.nan, 0.0), hp)

    def test_linear_variance_scheme_roundtrips(self):
        rng = np.random.default_rng(13)
        theta0 = rng.standard_normal(64).astype(np.float32)
        hp = AdamHyperParams(lr=0.01)
        st = init_flash_state(theta0, "adamw", variance_scheme="linear")
        st = adamw_step(st, rng.standard_normal(64).astype(np.float32), hp)
        assert st.variance.kind == "linear-unsigned"
        assert st.variance_scheme == "linear"

    def test_bias_correction_uses_exact_integer_t(self):
        hp = AdamHyperParams(lr=0.1, beta1=0.9, beta2=0.999)
        st = init_reference_state(f32(0.0), "adamw")
        for _ in range(10):
            st = adamw_step(st, f32(1.0), hp)
        assert st.t == 10
        # after 10 unit-gradient steps, m == 1 - beta1**10 exactly in fp32 terms,
        # so m_hat must be ~1
        m_hat = st.m[0] / np.float32(1.0 - 0.9**10)
        assert abs(m_hat - 1.0) < 1e-5
