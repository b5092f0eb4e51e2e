import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hoifuse.filters import (
    FilterMode,
    KernelSchedule,
    ScheduleMode,
    build_kernel,
    eval_schedule,
    high_pass,
    kernel_size_from_mask,
    low_pass,
)
from oracles import direct_conv2d, gaussian_table_mp

# (area, alpha) -> size, worked by hand from round(alpha * sqrt(area)) forced odd, floor 1
KERNEL_SIZE_TABLE = [
    (64, 0.0, 1), (64, 0.5, 5), (64, 1.5, 13), (64, 2.5, 21), (64, 3.5, 29),
    (0, 2.5, 1), (1, 1.0, 1), (4, 1.0, 3), (9, 1.0, 3), (16, 1.0, 5),
    (100, 0.5, 5), (100, 1.5, 15), (100, 2.5, 25), (100, 3.5, 35), (25, 0.5, 3),
    (49, 0.5, 5), (10, 2.5, 9), (2, 1.0, 1), (3, 1.0, 3), (400, 0.5, 11),
    (400, 1.0, 21), (144, 2.5, 31), (36, 1.5, 9), (50, 1.0, 7),
]


@pytest.mark.parametrize("area,alpha,size", KERNEL_SIZE_TABLE)
def test_kernel_size_table(area, alpha, size):
    assert kernel_size_from_mask(area, alpha) == size


@pytest.mark.parametrize("area,alpha", [(-1, 1.0), (4, -0.5)])
def test_kernel_size_rejects_negative(area, alpha):
    with pytest.raises(ValueError):
        kernel_size_from_mask(area, alpha)


@given(st.floats(0, 1e5), st.floats(0, 10))
def test_kernel_size_always_odd(area, alpha):
    k = kernel_size_from_mask(area, alpha)
    assert k >= 1 and k % 2 == 1


class TestBuildKernel:
    def test_size_one(self):
        k = build_kernel(1)
        assert k.weights.tolist() == [[1.0]]
        assert k.sigma == 0.3

    def test_size_three_shape(self):
        w = build_kernel(3).weights
        assert w[1, 1] == w.max() and np.sum(w == w.max()) == 1
        np.testing.assert_array_equal(w, w.T)
        np.testing.assert_array_equal(w, w[::-1])
        np.testing.assert_array_equal(w, w[:, ::-1])

    def test_size_five_matches_mpmath(self):
        np.testing.assert_allclose(build_kernel(5).weights, gaussian_table_mp(5), atol=1e-9, rtol=0)

    @pytest.mark.parametrize("size", [1, 3, 7, 21, 51])
    def test_normalized_and_symmetric(self, size):
        k = build_kernel(size)
        assert abs(k.weights.sum() - 1.0) < 1e-9
        assert k.sigma == max(size / 6, 0.3)
        np.testing.assert_array_equal(k.weights, k.weights.T)
        np.testing.assert_array_equal(k.weights, k.weights[::-1, ::-1])

    @pytest.mark.parametrize("size", [0, -3, 2, 4, 3.0])
    def test_bad_size(self, size):
        with pytest.raises(ValueError):
            build_kernel(size)


class TestLowPass:
    def test_constant(self):
        for c in (0.0, 1.0, -3.7, 0.1, 1e-7):
            for size in (1, 3, 5, 9, 21):
                x = np.full((2, 7, 5), c)
                assert np.all(low_pass(x, build_kernel(size)) == c)

    def test_impulse(self):
        x = np.zeros((11, 11))
        x[5, 5] = 1.0
        k = build_kernel(3)
        out = low_pass(x, k)
        np.testing.assert_allclose(out[4:7, 4:7], k.weights, atol=1e-15)
        out[4:7, 4:7] = 0
        assert np.all(out == 0)

    def test_random_16x16_matches_direct(self, rng):
        x = rng.standard_normal((16, 16))
        k = build_kernel(5)
        np.testing.assert_allclose(low_pass(x, k), direct_conv2d(x, k.weights), atol=1e-6, rtol=0)

    def test_kernel_larger_than_field(self, rng):
        x = rng.standard_normal((3, 2, 3))
        k = build_kernel(9)
        np.testing.assert_allclose(low_pass(x, k), direct_conv2d(x, k.weights), atol=1e-12)

    def test_size_one_identity(self, rng):
        x = rng.standard_normal((3, 6, 6))
        np.testing.assert_array_equal(low_pass(x, build_kernel(1)), x)

    def test_non_finite(self):
        x = np.zeros((4, 4))
        x[1, 1] = np.nan
        with pytest.raises(ValueError):
            low_pass(x, build_kernel(3))
        with pytest.raises(ValueError):
            high_pass(x, build_kernel(3))

    def test_linear(self, rng):
        k = build_kernel(7)
        for _ in range(20):
            x, y = rng.standard_normal((2, 2, 9, 9))
            a, b = rng.standard_normal(2)
            np.testing.assert_allclose(low_pass(a * x + b * y, k), a * low_pass(x, k) + b * low_pass(y, k),
                                       atol=1e-6)

    @settings(max_examples=60)
    @given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 8), st.integers(1, 8)),
                  elements=st.floats(-100, 100)),
           st.sampled_from([1, 3, 5, 7, 11]))
    def test_output_range(self, x, size):
        out = low_pass(x, build_kernel(size))
        lo = x.min(axis=(1, 2), keepdims=True)
        hi = x.max(axis=(1, 2), keepdims=True)
        slack = 1e-12 * (1 + np.abs(x).max())
        assert np.all(out >= lo - slack) and np.all(out <= hi + slack)


class TestHighPass:
    def test_constant_to_zero(self):
        assert np.all(high_pass(np.full((3, 5, 5), 2.5), build_kernel(5)) == 0)

    def test_size_one_zero(self, rng):
        assert np.all(high_pass(rng.standard_normal((6, 6)), build_kernel(1)) == 0)

    def test_is_exact_complement(self, rng):
        x = rng.standard_normal((8, 8))
        k = build_kernel(3)
        np.testing.assert_array_equal(high_pass(x, k), x - low_pass(x, k))

    def test_reconstruction_exact_within_a_binade(self, rng):
        # values in [1.25, 1.75) keep x, LP(x) and x - LP(x) exactly representable
        for size in (3, 5, 9):
            k = build_kernel(size)
            x = 1.25 + 0.5 * rng.random((3, 12, 12))
            assert np.array_equal(high_pass(x, k) + low_pass(x, k), x)

    def test_reconstruction_within_rounding(self, rng):
        x = rng.standard_normal((4, 10, 10))
        k = build_kernel(5)
        lp = low_pass(x, k)
        err = np.abs(high_pass(x, k) + lp - x)
        assert np.all(err <= np.spacing(np.maximum(np.abs(x), np.abs(lp))) * 2)


class TestSchedule:
    def test_adopted_endpoints(self):
        s = KernelSchedule(2.5, 0.5, 50, ScheduleMode.LINEAR_DECREMENTAL)
        assert eval_schedule(s, 0) == 2.5
        assert eval_schedule(s, 49) == 0.5

    def test_constant(self):
        s = KernelSchedule.constant(1.5, 50)
        assert {eval_schedule(s, i) for i in range(50)} == {1.5}

    def test_monotone(self):
        s = KernelSchedule(2.5, 0.5, 50)
        vals = [eval_schedule(s, i) for i in range(50)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_incremental(self):
        s = KernelSchedule.linear(0.5, 2.5, 11)
        assert s.mode is ScheduleMode.LINEAR_INCREMENTAL
        vals = [eval_schedule(s, i) for i in range(11)]
        assert vals[0] == 0.5 and vals[-1] == 2.5
        assert vals[5] == pytest.approx(1.5)
        assert all(a <= b for a, b in zip(vals, vals[1:]))

    @pytest.mark.parametrize("step", [-1, 50, 100])
    def test_out_of_range(self, step):
        with pytest.raises(ValueError):
            eval_schedule(KernelSchedule(), step)

    def test_single_step(self):
        assert eval_schedule(KernelSchedule(2.5, 0.5, 1), 0) == 0.5

    @given(st.floats(0, 5), st.floats(0, 5), st.integers(2, 200))
    def test_decremental_property(self, a, b, T):
        hi, lo = max(a, b), min(a, b)
        s = KernelSchedule(hi, lo, T, ScheduleMode.LINEAR_DECREMENTAL)
        vals = [eval_schedule(s, i) for i in range(T)]
        assert vals[0] == hi and vals[-1] == lo
        assert all(x >= y for x, y in zip(vals, vals[1:]))


@pytest.mark.parametrize("name,mode", [("LowHigh", FilterMode.LOW_HIGH), ("low-high", FilterMode.LOW_HIGH),
                                       ("nofilter", FilterMode.NO_FILTER), ("Replace", FilterMode.REPLACE)])
def test_filter_mode_parse(name, mode):
    assert FilterMode.parse(name) is mode


def test_filter_mode_unknown():
    with pytest.raises(ValueError):
        FilterMode.parse("BandPass")
