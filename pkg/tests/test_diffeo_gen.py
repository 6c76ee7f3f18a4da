import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffkillr.diffeo_gen import (KINDS, AugmentationConfig, DiffeoSpec, InterpPolicy, WarpField, apply_warp,
                                  compose, interior_mask, invert, jacobian_det, load_warp, make_warp, sample_diffeo,
                                  save_warp, warp_array)
from diffkillr.errors import ConfigError, DimensionError, FormatError, ParameterError
from diffkillr.patch_bank import mask_labels


def rot(angle, size=64):
    c = (size - 1) / 2.0
    return make_warp(DiffeoSpec("rotation", (c, c), angle=angle), size, size)


def interior_max(field, margin=None):
    return float(field.magnitude()[interior_mask(field.shape, margin)].max())


# make_warp --------------------------------------------------------------


def test_rotation_zero_is_identity():
    assert np.array_equal(rot(0.0, 16).displacement, np.zeros((16, 16, 2)))


def test_rotation_pi_maps_p_to_reflection_through_center():
    f = make_warp(DiffeoSpec("rotation", (2.0, 2.0), angle=math.pi), 5, 5)
    for y in range(5):
        for x in range(5):
            target = (4 - x, 4 - y)  # 2c - p
            np.testing.assert_allclose(f.displacement[y, x], (target[0] - x, target[1] - y), atol=1e-12)


def test_volume_preserving_stretch_has_unit_determinant():
    f = make_warp(DiffeoSpec("volume_preserving_stretch", (31.5, 31.5), factor=2.0,
                             direction=(math.cos(0.4), math.sin(0.4))), 64, 64)
    np.testing.assert_allclose(jacobian_det(f), 1.0, atol=1e-2)


def test_partial_stretch_is_identity_outside_region():
    spec = DiffeoSpec("partial_stretch", (31.5, 31.5), factor=1.3, direction=(1.0, 0.0),
                      region_center=(31.5, 31.5), radius=10.0, blend_width=10.0)
    f = make_warp(spec, 64, 64)
    y, x = np.mgrid[0:64, 0:64]
    outside = np.hypot(x - 31.5, y - 31.5) >= 20.0
    assert np.all(f.displacement[outside] == 0.0)
    assert np.all(jacobian_det(f) > 0)


@pytest.mark.parametrize("bad", [
    DiffeoSpec("rotation", (0, 0), angle=4.0),
    DiffeoSpec("uniform_stretch", (0, 0), factor=0.0),
    DiffeoSpec("directional_stretch", (0, 0), factor=1.2, direction=(1.0, 1.0)),
    DiffeoSpec("shear", (0, 0)),
    DiffeoSpec("partial_stretch", (0, 0), factor=1.2, direction=(1.0, 0.0)),
])
def test_illegal_specs_raise(bad):
    with pytest.raises(ParameterError):
        make_warp(bad, 8, 8)


def test_make_warp_rejects_tiny_grid():
    with pytest.raises(ParameterError):
        make_warp(DiffeoSpec("rotation", (0, 0)), 1, 5)


# apply_warp -------------------------------------------------------------


def test_zero_field_reproduces_input_exactly(rng):
    img = rng.random((7, 7))
    assert np.array_equal(apply_warp(WarpField.zeros(7, 7), img), img)


def test_unit_shift_on_ramp_matches_index_arithmetic():
    ramp = np.arange(16, dtype=float).reshape(4, 4)
    disp = np.zeros((4, 4, 2))
    disp[..., 0] = 1.0
    out = apply_warp(WarpField(disp), ramp)
    expected = np.array([[ramp[y, min(x + 1, 3)] for x in range(4)] for y in range(4)])
    assert np.array_equal(out, expected)


def test_quarter_turn_of_3x3_is_a_permutation():
    patch = np.arange(9, dtype=float).reshape(3, 3) ** 1.5  # no symmetry
    out = apply_warp(make_warp(DiffeoSpec("rotation", (1.0, 1.0), angle=math.pi / 2), 3, 3), patch)
    np.testing.assert_allclose(out, np.rot90(patch, 1), atol=1e-12)
    assert sorted(out.ravel().round(9)) == sorted(patch.ravel().round(9))


def test_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        apply_warp(WarpField.zeros(4, 4), np.zeros((5, 5)))


def test_masks_are_rebinarized():
    mask = np.zeros((16, 16))
    mask[4:12, 5:11] = 1
    out = apply_warp(rot(0.3, 16), mask_labels(mask))
    assert set(np.unique(out.mask())) <= {0.0, 1.0}


def test_label_padding_defaults_to_zeros():
    disp = np.zeros((6, 6, 2))
    disp[..., 0] = 3.0
    out = apply_warp(WarpField(disp), mask_labels(np.ones((6, 6))))
    assert out.mask()[:, -3:].sum() == 0 and out.mask()[:, :3].all()


def test_policy_threshold_must_be_open_interval():
    with pytest.raises(ParameterError):
        InterpPolicy(mask_threshold=1.0)


# compose / invert -------------------------------------------------------


def test_compose_with_zero_returns_field(rng):
    f = rot(0.5)
    assert compose(WarpField.zeros(64, 64), f) == f


def test_compose_of_rotations_adds_angles():
    err = compose(rot(0.3), rot(0.5)).displacement - rot(0.8).displacement
    assert np.hypot(err[..., 0], err[..., 1])[interior_mask((64, 64))].max() < 0.1


def test_compose_order_matches_sequential_warps():
    y, x = np.mgrid[0:64, 0:64]
    img = np.sin(x / 7.0) * np.cos(y / 9.0)
    a = rot(0.2)
    b = make_warp(DiffeoSpec("directional_stretch", (31.5, 31.5), factor=1.2, direction=(0.6, 0.8)), 64, 64)
    one = warp_array(compose(a, b), img)
    two = warp_array(a, warp_array(b, img))
    assert np.abs(one - two)[interior_mask((64, 64))].max() < 0.02


def test_invert_zero_is_zero():
    assert np.array_equal(invert(WarpField.zeros(8, 8)).displacement, np.zeros((8, 8, 2)))


@pytest.mark.parametrize("angle", [0.3, -1.2, 2.5, math.pi])
def test_invert_rotation_matches_closed_form(angle):
    err = invert(rot(angle)).displacement - rot(-angle if angle != math.pi else math.pi).displacement
    assert np.hypot(err[..., 0], err[..., 1])[interior_mask((64, 64))].max() < 0.1


def test_invert_uniform_stretch_matches_reciprocal():
    spec = DiffeoSpec("uniform_stretch", (31.5, 31.5), factor=1.3)
    err = invert(make_warp(spec, 64, 64)).displacement - make_warp(spec.inverse(), 64, 64).displacement
    assert np.hypot(err[..., 0], err[..., 1])[interior_mask((64, 64))].max() < 0.1


@pytest.mark.parametrize("kind", ["rotation", "uniform_stretch", "directional_stretch", "volume_preserving_stretch"])
def test_closed_form_inverse_cancels(kind):
    spec = DiffeoSpec(kind, (31.5, 31.5), angle=0.7 if kind == "rotation" else 0.0,
                      factor=1.0 if kind == "rotation" else 1.25, direction=(0.8, 0.6))
    cyc = compose(make_warp(spec, 64, 64), make_warp(spec.inverse(), 64, 64))
    assert interior_max(cyc) < 0.1


def test_invert_reports_residual():
    f = rot(1.0)
    inv, info = invert(f, full_output=True)
    assert info.converged and info.residual < 0.25
    assert interior_max(compose(f, inv)) <= info.residual + 1e-9


def test_invert_unknown_method():
    with pytest.raises(ParameterError):
        invert(WarpField.zeros(4, 4), method="magic")


# jacobian_det -----------------------------------------------------------


def test_jacobian_of_zero_field_is_one():
    np.testing.assert_array_equal(jacobian_det(WarpField.zeros(6, 6)), np.ones((4, 4)))


def test_jacobian_of_uniform_stretch_is_square_of_factor():
    f = make_warp(DiffeoSpec("uniform_stretch", (31.5, 31.5), factor=1.3), 64, 64)
    np.testing.assert_allclose(jacobian_det(f), 1.69, atol=1e-2)


def test_jacobian_of_rotation_is_one():
    np.testing.assert_allclose(jacobian_det(rot(1.1)), 1.0, atol=1e-2)


def test_jacobian_needs_3x3():
    with pytest.raises(DimensionError):
        jacobian_det(WarpField.zeros(2, 5))


# sample_diffeo ----------------------------------------------------------


def test_rotation_only_weights_give_rotation():
    assert sample_diffeo(3, AugmentationConfig(kinds={"rotation": 1.0})).kind == "rotation"


def test_sampling_is_deterministic():
    assert sample_diffeo(11) == sample_diffeo(11)


def test_empty_kind_set_is_a_config_error():
    with pytest.raises(ConfigError):
        sample_diffeo(0, AugmentationConfig(kinds={"rotation": 0.0}))
    with pytest.raises(ConfigError):
        AugmentationConfig(kinds={"twirl": 1.0})


def test_kind_frequencies_are_multinomial():
    rng = np.random.default_rng(1)
    n = 10_000
    counts = {k: 0 for k in KINDS}
    for _ in range(n):
        counts[sample_diffeo(rng).kind] += 1
    sigma = math.sqrt(n * 0.2 * 0.8)
    for k in KINDS:
        assert abs(counts[k] - 0.2 * n) < 5 * sigma, counts


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), size=st.sampled_from([16, 32, 64]))
def test_sampled_specs_are_legal_diffeomorphisms(seed, size):
    spec = sample_diffeo(seed, AugmentationConfig(patch_size=size))
    spec.validate((0.7, 1.4))
    assert -math.pi < spec.angle <= math.pi
    assert np.all(jacobian_det(make_warp(spec, size, size)) > 0)


@settings(max_examples=30, deadline=None)
@given(dx=st.integers(-3, 3), dy=st.integers(-3, 3), seed=st.integers(0, 1000))
def test_integer_translations_shift_exactly(dx, dy, seed):
    img = np.random.default_rng(seed).random((9, 9))
    disp = np.zeros((9, 9, 2))
    disp[..., 0], disp[..., 1] = dx, dy
    out = apply_warp(WarpField(disp), img)
    y, x = np.mgrid[0:9, 0:9]
    assert np.array_equal(out, img[np.clip(y + dy, 0, 8), np.clip(x + dx, 0, 8)])


# serialization ----------------------------------------------------------


def test_warp_round_trip(tmp_path):
    f = rot(0.4, 16)
    save_warp(tmp_path / "w.warp", f, {"kind": "rotation", "seed": 3})
    g, meta = load_warp(tmp_path / "w.warp")
    np.testing.assert_array_equal(g.displacement, f.displacement.astype(np.float32))
    assert meta == {"kind": "rotation", "seed": 3}


def test_corrupted_warp_raises(tmp_path):
    (tmp_path / "bad.warp").write_bytes(b"WARP" + b"\x00" * 5)
    with pytest.raises(FormatError):
        load_warp(tmp_path / "bad.warp")


def test_fields_reject_nonfinite():
    d = np.zeros((3, 3, 2))
    d[1, 1, 0] = np.nan
    with pytest.raises(ParameterError):
        WarpField(d)
