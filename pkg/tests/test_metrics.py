import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fibrelens.errors import DimensionError, UndefinedMetricError
from fibrelens.metrics import MetricParams, mse, pcc, ssim

images = arrays(np.float64, (4, 4), elements=st.floats(0.0, 1.0, allow_nan=False))


def non_constant(x):
    return np.ptp(x) > 1e-6


class TestSsim:
    def test_identity(self):
        x = np.random.default_rng(0).random((8, 8))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-9)

    def test_equal_constants(self):
        assert ssim(np.full((3, 3), 0.4), np.full((3, 3), 0.4)) == 1.0

    def test_zeros_vs_ones(self):
        c1 = 1e-4
        assert ssim(np.zeros((4, 4)), np.ones((4, 4))) == pytest.approx(c1 / (1 + c1), rel=1e-12)
        assert ssim(np.zeros((4, 4)), np.ones((4, 4))) == pytest.approx(9.999e-5, rel=1e-4)

    def test_constants(self):
        p = MetricParams()
        assert p.C1 == pytest.approx(1e-4) and p.C2 == pytest.approx(9e-4)
        assert MetricParams(L=255).C1 == pytest.approx((0.01 * 255) ** 2)

    def test_literal_variant_differs(self):
        rng = np.random.default_rng(1)
        x, y = rng.random((5, 5)), rng.random((5, 5))
        mx, my = x.mean(), y.mean()
        vx, vy = x.var(), y.var()
        cov = np.mean((x - mx) * (y - my))
        want = (2 * mx * my + 1e-4) * (2 * cov + 9e-4) / ((mx**2 * my**2 + 1e-4) * (vx * vy + 9e-4))
        assert ssim(x, y, literal=True) == pytest.approx(want, rel=1e-12)
        assert ssim(x, y, literal=True) != pytest.approx(ssim(x, y))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ssim(np.zeros((2, 2)), np.zeros((2, 3)))

    @given(images)
    def test_self_similarity_exact(self, x):
        assert ssim(x, x) == 1.0

    @given(images, images)
    def test_symmetric_and_bounded(self, x, y):
        assert ssim(x, y) == ssim(y, x)
        assert -1.0 <= ssim(x, y) <= 1.0


class TestPcc:
    def test_positive_affine(self):
        x = np.random.default_rng(2).random(20)
        assert pcc(x, 2 * x + 0.1) == pytest.approx(1.0, abs=1e-9)

    def test_reversed(self):
        assert pcc([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-12)

    def test_hand_value(self):
        # 3 / sqrt(2 * 42/9)
        assert pcc([1, 2, 3], [1, 2, 4]) == pytest.approx(0.98198, abs=1e-5)
        assert pcc([1, 2, 3], [1, 2, 4]) == pytest.approx(3 / np.sqrt(2 * 42 / 9), rel=1e-12)

    def test_constant_undefined(self):
        with pytest.raises(UndefinedMetricError):
            pcc([1, 1, 1], [1, 2, 3])

    @given(images, images)
    def test_symmetric_and_bounded(self, x, y):
        assume(non_constant(x) and non_constant(y))
        assert pcc(x, y) == pytest.approx(pcc(y, x), abs=1e-12)
        assert -1.0 <= pcc(x, y) <= 1.0

    @given(images, images, st.floats(0.1, 10), st.floats(-5, 5))
    def test_affine_invariance(self, x, y, a, b):
        assume(non_constant(x) and non_constant(y))
        r = pcc(x, y)
        assert pcc(a * x + b, y) == pytest.approx(r, abs=1e-9)
        assert pcc(-a * x + b, y) == pytest.approx(-r, abs=1e-9)


class TestMse:
    def test_values(self):
        assert mse(np.ones((3, 3)), np.ones((3, 3))) == 0
        assert mse(np.zeros((3, 3)), np.ones((3, 3))) == 1.0
        assert mse([0, 0.5], [0.5, 0.5]) == 0.125

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            mse(np.zeros(3), np.zeros(4))
