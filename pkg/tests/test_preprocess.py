import numpy as np
import pytest

from viptt.errors import AlreadyNormalized, BadChannelCount, QueryOutOfRange, TooFewSamples
from viptt.preprocess import (
    AUGMENT_ANGLES,
    ResizeSpec,
    SplineOrder,
    align_corners_coords,
    hu_normalize,
    interpolation_matrix,
    natural_second_derivatives,
    rgb_to_gray,
    rotate_axial,
    siz_resize,
    spline_interp_1d,
)
from viptt.volume_io import Domain, Volume

import oracles

LIN, CUB = SplineOrder.LINEAR, SplineOrder.CUBIC


def test_linear_midpoint():
    assert spline_interp_1d([0, 2, 4], [0.5], LIN)[0] == 1.0


def test_cubic_reproduces_affine():
    assert spline_interp_1d([1, 2, 3, 4], [1.5], CUB)[0] == pytest.approx(2.5, abs=1e-15)


def test_cubic_node_exact():
    assert spline_interp_1d([0, 1, 0], [1.0], CUB)[0] == 1.0


def test_three_point_natural_spline_against_hand_solution():
    expected = oracles.natural_three_point((0.0, 1.0, 0.0), 0.5)
    assert expected == pytest.approx(0.6875)
    assert spline_interp_1d([0, 1, 0], [0.5], CUB)[0] == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("order", [LIN, CUB])
def test_matches_scipy_on_random_data(order):
    rng = np.random.default_rng(5)
    for n in range(2, 9):
        y = rng.normal(size=n)
        q = rng.uniform(0, n - 1, size=17)
        assert np.max(np.abs(spline_interp_1d(y, q, order) - oracles.spline_1d(y, q, int(order)))) < 1e-12


def test_second_derivatives_natural_ends():
    m = natural_second_derivatives(np.array([3.0, -1.0, 4.0, 1.0, 5.0]))
    assert m[0] == 0.0 and m[-1] == 0.0


def test_polynomial_reproduction():
    q = np.linspace(0, 6, 41)
    nodes = np.arange(7.0)
    assert np.allclose(spline_interp_1d(2 * nodes - 3, q, LIN), 2 * q - 3, atol=1e-12)
    assert np.allclose(spline_interp_1d(-0.5 * nodes + 1, q, CUB), -0.5 * q + 1, atol=1e-12)


def test_trailing_axes_are_independent_series():
    rng = np.random.default_rng(1)
    y = rng.normal(size=(5, 3))
    q = np.array([0.3, 2.2, 3.9])
    out = spline_interp_1d(y, q, CUB)
    for c in range(3):
        assert np.allclose(out[:, c], oracles.spline_1d(y[:, c], q, 3), atol=1e-12)


def test_spline_errors():
    with pytest.raises(TooFewSamples):
        spline_interp_1d([1.0], [0.0], CUB)
    with pytest.raises(QueryOutOfRange):
        spline_interp_1d([0, 1, 2], [2.0001], LIN)
    with pytest.raises(QueryOutOfRange):
        spline_interp_1d([0, 1, 2], [-1e-9], CUB)


def test_interpolation_matrix_rows_sum_to_one():
    for order in (LIN, CUB):
        mat = interpolation_matrix(6, np.linspace(0, 5, 11), order)
        assert np.allclose(mat.sum(axis=1), 1.0, atol=1e-13)


def test_align_corners():
    assert align_corners_coords(5, 3).tolist() == [0.0, 2.0, 4.0]
    assert align_corners_coords(4, 1).tolist() == [1.5]


def _unit(a):
    return Volume(a, Domain.UNIT_NORMALIZED)


@pytest.mark.parametrize("order", [LIN, CUB])
def test_identity_size_is_exact(order):
    data = np.random.default_rng(0).random((3, 4, 5))
    out = siz_resize(_unit(data), ResizeSpec((3, 4, 5), order))
    assert np.array_equal(out.data, data)


def test_constant_volume_stays_constant():
    vol = Volume(np.full((3, 4, 2), 7.0))
    for order in (LIN, CUB):
        out = siz_resize(vol, ResizeSpec((5, 2, 6), order))
        assert np.allclose(out.data, 7.0, atol=1e-12)


def test_linear_depth_profile():
    vol = Volume(np.array([0.0, 10.0]).reshape(2, 1, 1))
    out = siz_resize(vol, ResizeSpec((3, 1, 1), LIN))
    assert out.data.ravel().tolist() == [0.0, 5.0, 10.0]


@pytest.mark.parametrize("order", [LIN, CUB])
def test_matches_brute_force_oracle(order):
    rng = np.random.default_rng(int(order))
    data = rng.normal(size=(5, 7, 6))
    out = siz_resize(Volume(data), ResizeSpec((3, 4, 5), order))
    assert np.max(np.abs(out.data - oracles.separable_spline(data, (3, 4, 5), int(order)))) < 1e-9


def test_cubic_on_singleton_axis_is_an_error():
    vol = Volume(np.zeros((1, 4, 4)))
    with pytest.raises(TooFewSamples):
        siz_resize(vol, ResizeSpec((2, 4, 4), CUB))
    # an axis that keeps its size is not resized, so extent 1 is fine there
    assert siz_resize(vol, ResizeSpec((1, 3, 5), CUB)).dims == (1, 3, 5)
    assert siz_resize(vol, ResizeSpec((3, 4, 4), LIN)).dims == (3, 4, 4)


def test_resize_is_idempotent_at_fixed_size():
    data = np.random.default_rng(2).random((4, 5, 6))
    spec = ResizeSpec((6, 3, 4), CUB)
    once = siz_resize(_unit(data), spec)
    assert np.array_equal(siz_resize(once, spec).data, once.data)


def test_linear_stays_in_input_range():
    data = np.random.default_rng(3).normal(size=(4, 6, 5))
    out = siz_resize(Volume(data), ResizeSpec((7, 4, 9), LIN)).data
    assert out.min() >= data.min() - 1e-12 and out.max() <= data.max() + 1e-12


def test_unit_domain_clipped_after_cubic_overshoot():
    data = np.zeros((2, 1, 6))
    data[:, 0, 2] = 1.0
    out = siz_resize(_unit(data), ResizeSpec((2, 1, 11), CUB))
    assert out.domain is Domain.UNIT_NORMALIZED
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0


def test_resize_spec_validation():
    with pytest.raises(ValueError):
        ResizeSpec((0, 2, 2))


def test_hu_window_examples():
    vol = Volume(np.array([-1000.0, -300.0, 1500.0, -2000.0]).reshape(1, 1, 4))
    out = hu_normalize(vol)
    assert out.domain is Domain.UNIT_NORMALIZED
    assert out.data.ravel().tolist() == [0.0, 0.5, 1.0, 0.0]


def test_hu_normalize_monotone():
    x = np.sort(np.random.default_rng(4).uniform(-3000, 3000, 200))
    out = hu_normalize(Volume(x.reshape(1, 1, -1))).data.ravel()
    assert np.all(np.diff(out) >= 0)


def test_hu_normalize_twice():
    with pytest.raises(AlreadyNormalized):
        hu_normalize(_unit(np.zeros((1, 1, 1))))
    with pytest.raises(ValueError):
        hu_normalize(Volume(np.zeros((1, 1, 1))), (10, 10))


def test_rotation_zero_is_exact_copy():
    data = np.random.default_rng(0).random((2, 5, 5))
    out = rotate_axial(_unit(data), 0)
    assert np.array_equal(out.data, data) and out.data is not data


def test_rotation_fixes_center_of_constant_slice():
    out = rotate_axial(Volume(np.full((2, 7, 7), 3.5)), 10)
    assert out.data[:, 3, 3].tolist() == [3.5, 3.5]


def test_hot_center_voxel():
    data = np.zeros((1, 9, 9))
    data[0, 4, 4] = 1.0
    out = rotate_axial(_unit(data), 20).data[0]
    assert out[4, 4] == pytest.approx(1.0, abs=1e-12)
    # bilinear weights spill into the 8-neighbourhood; everything further out stays 0
    yy, xx = np.mgrid[0:9, 0:9]
    far = np.hypot(yy - 4, xx - 4) > np.sqrt(2)
    assert np.all(out[far] == 0.0)


def test_rotation_zero_fill():
    out = rotate_axial(Volume(np.full((1, 6, 6), 5.0)), 45).data[0]
    assert out[0, 0] == 0.0 and out[-1, -1] == 0.0


def test_rotation_direction_quarter_turn():
    data = np.zeros((1, 5, 5))
    data[0, 2, 4] = 1.0  # right of centre
    out = rotate_axial(_unit(data), 90).data[0]
    assert np.isclose(out.max(), 1.0)
    # positive angles turn +x towards +y (row index grows downwards)
    assert np.unravel_index(out.argmax(), out.shape) == (4, 2)
    assert np.isclose(out.sum(), 1.0)


def test_rotation_round_trip_of_smooth_volume():
    yy, xx = np.mgrid[0:33, 0:33] / 32.0
    slice_ = 0.5 + 0.25 * np.sin(2 * np.pi * xx) * np.cos(np.pi * yy)
    vol = _unit(np.stack([slice_, slice_[::-1]]))
    for angle in AUGMENT_ANGLES:
        back = rotate_axial(rotate_axial(vol, angle), -angle).data
        assert np.max(np.abs(back[:, 8:25, 8:25] - vol.data[:, 8:25, 8:25])) < 0.05


def test_rgb_to_gray():
    frame = np.array([[[0.3, 0.3, 0.3], [1, 0, 0], [0, 0, 1]]])
    gray = rgb_to_gray(frame)
    assert gray.shape == (1, 3)
    assert gray[0].tolist() == pytest.approx([0.3, 0.299, 0.114], abs=1e-15)
    with pytest.raises(BadChannelCount):
        rgb_to_gray(np.zeros((2, 2, 4)))
