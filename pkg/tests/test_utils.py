import math

import numpy as np
import pytest

from tamba._utils import fit_loglog_slope, normalize_angle, rotation, split_counts


@pytest.mark.parametrize(
    "angle, expected",
    [
        (0.0, 0.0),
        (math.pi, -math.pi),
        (-math.pi, -math.pi),
        (3 * math.pi / 2, -math.pi / 2),
        (-3 * math.pi / 2, math.pi / 2),
        (5 * math.pi / 2, math.pi / 2),
    ],
)
def test_normalize_angle(angle, expected):
    wrapped = normalize_angle(angle)

    assert -math.pi <= wrapped < math.pi
    assert wrapped == pytest.approx(expected, abs=1e-9)


def test_rotation_is_orthonormal():
    matrix = rotation(0.7)

    np.testing.assert_allclose(matrix @ matrix.T, np.eye(2), atol=1e-15)
    np.testing.assert_allclose(matrix @ np.array([1.0, 0.0]), [math.cos(0.7), math.sin(0.7)])


def test_fit_loglog_slope_recovers_power():
    xs = [64, 128, 256, 512]

    assert fit_loglog_slope(xs, [3.0 * x**2 for x in xs]) == pytest.approx(2.0)
    assert fit_loglog_slope(xs, [5.0 * x for x in xs]) == pytest.approx(1.0)


def test_fit_loglog_slope_needs_two_points():
    assert math.isnan(fit_loglog_slope([64], [1.0]))


@pytest.mark.parametrize(
    "total, fraction, expected",
    [
        (10, 0.2, (2, 8)),
        (5, 0.5, (2, 3)),
        (1, 0.2, (0, 1)),
    ],
)
def test_split_counts(total, fraction, expected):
    assert split_counts(total, fraction) == expected
