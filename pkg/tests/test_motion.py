import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skipdet.motion import (Frame, GatingPolicy, MotionProbabilityMap, decide,
                            motion_map, stack_frames)
from skipdet.tensor import ShapeError, Tensor


def frame(index, values):
    return Frame(index, Tensor(np.asarray(values, np.float32)))


def const_frame(index, value, channels=3, size=4):
    return frame(index, np.full((channels, size, size), value, np.float32))


def random_frame(seed, channels=3, size=6):
    rng = np.random.default_rng(seed)
    return frame(0, rng.random((channels, size, size)).astype(np.float32))


class TestFrame:
    def test_rejects_out_of_range_pixels(self):
        with pytest.raises(ValueError, match=r"\[0,1\]"):
            frame(0, np.full((1, 2, 2), 1.5, np.float32))

    def test_rejects_bad_channel_count(self):
        with pytest.raises(ShapeError, match="channels"):
            frame(0, np.zeros((2, 2, 2), np.float32))

    def test_rejects_negative_index(self):
        with pytest.raises(ValueError, match="index"):
            const_frame(-1, 0.5)


class TestStackFrames:
    def test_current_first_reference_second(self):
        cur, ref = const_frame(1, 0.25), const_frame(0, 0.75)
        stack = stack_frames(cur, ref)
        assert stack.shape == (6, 4, 4)
        assert np.all(stack.data[:3] == np.float32(0.25))
        assert np.all(stack.data[3:] == np.float32(0.75))

    def test_self_stack_mirrors_channels(self):
        f = random_frame(3)
        stack = stack_frames(f, f)
        c = f.pixels.shape[0]
        for ch in range(c):
            assert np.array_equal(stack.data[ch], stack.data[ch + c])

    def test_white_current_black_reference(self):
        stack = stack_frames(const_frame(1, 1.0), const_frame(0, 0.0))
        assert np.all(stack.data[:3] == 1.0)
        assert np.all(stack.data[3:] == 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError, match="mismatch"):
            stack_frames(const_frame(0, 0.5, size=4), const_frame(0, 0.5, size=6))


class TestMotionMap:
    def test_identical_frames_zero_map(self):
        f = random_frame(0)
        m = motion_map(stack_frames(f, f), GatingPolicy.default(3))
        assert np.all(m.values.data == 0.0)

    def test_single_channel_difference(self):
        cur = const_frame(1, 0.8, channels=1)
        ref = const_frame(0, 0.5, channels=1)
        m = motion_map(stack_frames(cur, ref), GatingPolicy.default(1))
        expected = np.float32(0.8) - np.float32(0.5)
        assert np.all(m.values.data == expected)

    def test_full_swing_saturates(self):
        m = motion_map(stack_frames(const_frame(1, 1.0), const_frame(0, 0.0)),
                       GatingPolicy.default(3))
        assert np.all(m.values.data == 1.0)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            motion_map(Tensor.zeros((2, 4, 4)), GatingPolicy.default(3))

    def test_custom_gate_weights(self):
        w = np.zeros((1, 2, 1, 1), np.float32)
        w[0, 0] = 2.0  # only the current frame, doubled
        policy = GatingPolicy(kernel=Tensor(w), bias=Tensor.zeros((1,)))
        m = motion_map(stack_frames(const_frame(1, 0.4, channels=1),
                                    const_frame(0, 0.9, channels=1)), policy)
        assert np.all(m.values.data == np.float32(0.8))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_zero_for_any_self_stack(self, seed):
        f = random_frame(seed)
        m = motion_map(stack_frames(f, f), GatingPolicy.default(3))
        assert np.all(m.values.data == 0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_swap_antisymmetry(self, seed):
        a, b = random_frame(seed), random_frame(seed + 1)
        policy = GatingPolicy.default(3)
        ab = motion_map(stack_frames(a, b), policy)
        ba = motion_map(stack_frames(b, a), policy)
        np.testing.assert_array_equal(ab.values.data, ba.values.data)


def mmap(values):
    return MotionProbabilityMap(Tensor(np.asarray(values, np.float32)[None]))


class TestDecide:
    def test_zero_map_never_fires(self):
        policy = GatingPolicy.default(3, pixel_threshold=0.1, area_threshold=0.0)
        assert decide(mmap(np.zeros((10, 10))), policy, 0) is False

    def test_full_map_fires(self):
        policy = GatingPolicy.default(3, pixel_threshold=0.5, area_threshold=0.5)
        assert decide(mmap(np.ones((10, 10))), policy, 0) is True

    def test_area_fraction_thresholding(self):
        values = np.zeros((10, 10), np.float32)
        values[:3] = 0.9  # exactly 30% of pixels
        fired = GatingPolicy.default(3, pixel_threshold=0.5, area_threshold=0.25)
        quiet = GatingPolicy.default(3, pixel_threshold=0.5, area_threshold=0.35)
        assert decide(mmap(values), fired, 0) is True
        assert decide(mmap(values), quiet, 0) is False

    def test_force_every(self):
        policy = GatingPolicy.default(3, pixel_threshold=0.5, area_threshold=0.5,
                                      force_every=3)
        zero = mmap(np.zeros((4, 4)))
        assert decide(zero, policy, 2) is False
        assert decide(zero, policy, 3) is True
        assert decide(zero, policy, 7) is True

    def test_force_disabled_by_default(self):
        policy = GatingPolicy.default(3, pixel_threshold=0.5, area_threshold=0.5)
        assert decide(mmap(np.zeros((4, 4))), policy, 10 ** 6) is False

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31), st.floats(0, 1), st.floats(0, 1))
    def test_monotone_in_area_threshold(self, seed, tau_lo, tau_hi):
        tau_lo, tau_hi = sorted((tau_lo, tau_hi))
        rng = np.random.default_rng(seed)
        m = mmap(rng.random((8, 8)).astype(np.float32))
        lo = GatingPolicy.default(3, pixel_threshold=0.3, area_threshold=tau_lo)
        hi = GatingPolicy.default(3, pixel_threshold=0.3, area_threshold=tau_hi)
        if not decide(m, lo, 0):
            assert not decide(m, hi, 0)

    def test_pure_function(self):
        m = mmap(np.random.default_rng(0).random((6, 6)).astype(np.float32))
        policy = GatingPolicy.default(3, pixel_threshold=0.4, area_threshold=0.2)
        first = decide(m, policy, 5)
        assert all(decide(m, policy, 5) == first for _ in range(5))

    def test_negative_counter_rejected(self):
        with pytest.raises(ValueError):
            decide(mmap(np.zeros((2, 2))), GatingPolicy.default(3), -1)


class TestGatingPolicy:
    def test_threshold_range_enforced(self):
        with pytest.raises(ValueError, match="thresholds"):
            GatingPolicy.default(3, area_threshold=-1.0)
        with pytest.raises(ValueError, match="thresholds"):
            GatingPolicy.default(3, pixel_threshold=1.5)

    def test_default_weights_antisymmetric(self):
        policy = GatingPolicy.default(3)
        w = policy.kernel.data[0, :, 0, 0]
        np.testing.assert_allclose(w[:3], 1.0 / 3.0, rtol=1e-6)
        np.testing.assert_allclose(w[3:], -1.0 / 3.0, rtol=1e-6)

    def test_kernel_shape_enforced(self):
        with pytest.raises(ShapeError):
            GatingPolicy(kernel=Tensor.zeros((1, 3, 1, 1)), bias=Tensor.zeros((1,)))

    def test_map_range_enforced(self):
        with pytest.raises(ValueError):
            MotionProbabilityMap(Tensor(np.full((1, 2, 2), 1.5, np.float32)))
