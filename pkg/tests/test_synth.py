import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffkillr.diffeo_gen import DiffeoSpec, WarpField, apply_warp
from diffkillr.errors import ParameterError
from diffkillr.synth import (ShapeSpec, angular_error, centroid, dice, gen_pair, gen_scene, gen_shape, iou, l1_field,
                             l1_image, mean_direction, ncc_field, rotate_vectors)


def test_square_area_is_side_squared():
    _, labels = gen_shape(ShapeSpec("square", a=12.0), 32)
    assert abs(labels.mask().sum() - 144) <= 0.02 * 144


def test_circle_has_no_orientation_channel():
    _, labels = gen_shape(ShapeSpec("ellipse", a=7.0, b=7.0), 32)
    assert labels.orientation() is None and "orientation" not in labels


def test_ellipse_orientation_follows_major_axis():
    _, labels = gen_shape(ShapeSpec("ellipse", a=10.0, b=4.0, angle=0.5), 32)
    assert abs(mean_direction(labels.orientation(), labels.mask()) - 0.5) < 1e-6
    _, labels = gen_shape(ShapeSpec("ellipse", a=4.0, b=10.0, angle=0.5), 32)
    assert abs(mean_direction(labels.orientation(), labels.mask()) - (0.5 + math.pi / 2)) < 1e-6


def test_same_seed_same_patch():
    spec = ShapeSpec("star", a=10.0, b=5.0, texture=0.1)
    assert gen_shape(spec, 32, 4)[0] == gen_shape(spec, 32, 4)[0]
    assert not np.array_equal(gen_shape(spec, 32, 4)[0].intensities, gen_shape(spec, 32, 5)[0].intensities)


def test_oversized_shape_is_rejected():
    with pytest.raises(ParameterError):
        gen_shape(ShapeSpec("ellipse", a=15.0, b=4.0), 32)


def test_identity_pair_is_unchanged():
    pair = gen_pair(ShapeSpec("square", a=10.0), DiffeoSpec("rotation", (15.5, 15.5)))
    np.testing.assert_array_equal(pair.fixed.intensities, pair.moving.intensities)


def test_quarter_turn_of_square_keeps_mask_but_not_field():
    pair = gen_pair(ShapeSpec("square", a=12.0), DiffeoSpec("rotation", (15.5, 15.5), angle=math.pi / 2))
    assert np.array_equal(pair.fixed_labels.mask(), pair.moving_labels.mask())
    assert pair.field.magnitude().max() > 5.0


def test_ground_truth_inverse_recovers_fixed_mask():
    spec = DiffeoSpec("directional_stretch", (15.5, 15.5), factor=1.3, direction=(0.6, 0.8))
    pair = gen_pair(ShapeSpec("ellipse", a=9.0, b=5.0), spec)
    back = apply_warp(pair.gt_forward, pair.moving_labels)
    assert dice(pair.fixed_labels.mask(), back.mask()) >= 0.98


# metrics ----------------------------------------------------------------


def test_ncc_of_field_with_itself_and_negation(rng):
    w = WarpField(rng.standard_normal((8, 8, 2)))
    assert ncc_field(w, w) == pytest.approx(1.0)
    assert ncc_field(w, -w) == pytest.approx(-1.0)


def test_overlap_examples():
    a, b = np.zeros((4, 4)), np.zeros((4, 4))
    a[:, :2], b[:, 1:3] = 1, 1
    assert dice(a, b) == pytest.approx(0.5) and iou(a, b) == pytest.approx(1 / 3)
    a, b = np.array([1, 1, 1, 0]), np.array([0, 1, 1, 1])
    assert dice(a, b) == pytest.approx(2 / 3) and iou(a, b) == pytest.approx(1 / 2)


def test_empty_masks():
    z = np.zeros((3, 3))
    with pytest.warns(RuntimeWarning):
        assert dice(z, z) == 1.0
    with pytest.warns(RuntimeWarning):
        assert iou(z, np.ones((3, 3))) == 0.0


def test_angular_error_of_rotated_field():
    v = np.tile([[1.0, 0.0]], (5, 1)).reshape(5, 1, 2)
    assert angular_error(v, rotate_vectors(v, math.radians(30))) == pytest.approx(30.0)
    assert angular_error(v, rotate_vectors(v, math.radians(170))) == pytest.approx(170.0)
    assert angular_error(v, rotate_vectors(v, math.radians(170)), axial=True) == pytest.approx(10.0)


def test_axial_mean_direction_ignores_sign():
    v = np.array([[1.0, 0.1], [-1.0, -0.1]])
    assert abs(mean_direction(v, axial=True) - math.atan2(0.1, 1.0)) < 1e-9


def test_l1_metrics(rng):
    a, b = rng.random((4, 4)), rng.random((4, 4))
    assert l1_image(a, b) == pytest.approx(np.mean(np.abs(a - b)))
    assert l1_field(WarpField.zeros(3, 3), WarpField(np.ones((3, 3, 2)))) == pytest.approx(1.0)


masks = st.lists(st.booleans(), min_size=16, max_size=16).map(lambda v: np.array(v, float).reshape(4, 4))


@settings(max_examples=100, deadline=None)
@given(a=masks, b=masks)
def test_overlap_metric_properties(a, b):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        d, j = dice(a, b), iou(a, b)
        assert 0.0 <= j <= d <= 1.0
        assert d == dice(b, a) and j == iou(b, a)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_field_metric_properties(seed):
    r = np.random.default_rng(seed)
    wa, wb = WarpField(r.standard_normal((5, 5, 2))), WarpField(r.standard_normal((5, 5, 2)))
    n = ncc_field(wa, wb)
    assert -1.0 - 1e-12 <= n <= 1.0 + 1e-12 and n == pytest.approx(ncc_field(wb, wa))
    assert l1_field(wa, wb) == pytest.approx(l1_field(wb, wa))
    va, vb = r.standard_normal((6, 2)), r.standard_normal((6, 2))
    assert 0.0 <= angular_error(va, vb) <= 180.0


# scenes -----------------------------------------------------------------


def test_grid_scene_has_separated_instances():
    shapes = [ShapeSpec("square", a=10.0), ShapeSpec("ellipse", a=9.0, b=4.0)]
    scene = gen_scene(shapes, 9, "grid", seed=0)
    img = scene.image
    assert img.shape == (192, 192) and len(img.centroids) == 9
    assert sorted(np.unique(img.instances)) == list(range(10))
    for k, c in enumerate(img.centroids, start=1):
        np.testing.assert_allclose(centroid(img.instances == k), c)


def test_random_scene_respects_spacing():
    scene = gen_scene([ShapeSpec("square", a=10.0)], 25, "random", seed=3, spacing=1.5)
    c = scene.image.centroids
    d = np.linalg.norm(c[:, None] - c[None], axis=-1) + np.eye(len(c)) * 1e9
    assert d.min() >= 1.5 * 32 - 4  # centroids drift from the paste centre by the warp
