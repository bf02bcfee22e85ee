import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpmotion import autodiff as ad
from gpmotion.deformation import (GridSpec, SmoothingSpec, compose, exponentiate, field_gradients,
                                  gaussian_smooth_spatial, gaussian_smooth_temporal,
                                  gaussian_weights, identity_grid, jacobian_determinant,
                                  read_fields, smoothing_matrix, steps_for, warp, write_fields)
from conftest import gradcheck

GRID = GridSpec(16, 16, 1.5)


def smooth_field(rng, h=24, w=24, amplitude=3.0):
    """Random smooth displacement with max |v| = amplitude."""
    raw = rng.normal(size=(h, w, 2))
    v = gaussian_smooth_spatial(raw, SmoothingSpec(sigma_g=6.0, sigma_t=0.0), GridSpec(h, w, 1.0))
    return v * amplitude / np.max(np.linalg.norm(v, axis=-1))


def test_grid_spec_validation():
    with pytest.raises(ValueError):
        GridSpec(3, 8)
    with pytest.raises(ValueError):
        GridSpec(8, 8, 0.0)
    with pytest.raises(ValueError):
        SmoothingSpec(sigma_g=-1.0)


# ---------------------------------------------------------------- smoothing

def test_gaussian_weights_tabulated_sigma2():
    offsets = np.arange(-6, 7)
    raw = np.exp(-offsets ** 2 / 8.0)
    w = gaussian_weights(2.0)
    assert w.size == 13
    np.testing.assert_allclose(w, raw / raw.sum(), rtol=1e-15)
    assert w[6] == pytest.approx(0.19967562749792112, rel=1e-14)  # 1 / sum_k exp(-k^2/8), |k| <= 6


def test_spatial_smoothing_zero_sigma_identity():
    v = np.random.default_rng(0).normal(size=(16, 16, 2))
    assert gaussian_smooth_spatial(v, SmoothingSpec(0.0, 1.0), GRID) is v


def test_spatial_smoothing_keeps_constants():
    v = np.full((16, 16, 2), 0.7)
    np.testing.assert_allclose(gaussian_smooth_spatial(v, SmoothingSpec(), GRID), v, atol=1e-14)


def test_spatial_smoothing_impulse_centre_weight():
    v = np.zeros((16, 16, 2))
    v[8, 8, 0] = 1.0
    out = gaussian_smooth_spatial(v, SmoothingSpec(sigma_g=3.0), GRID)
    # sigma 3 mm at 1.5 mm spacing is 2 px; radius 6; separable, so centre = w0^2
    assert out[8, 8, 0] == pytest.approx(gaussian_weights(2.0)[6] ** 2, rel=1e-14)
    assert out[8, 8, 0] == pytest.approx(0.03987035621668855, rel=1e-13)
    assert out[..., 1].max() == 0.0


def test_temporal_smoothing_impulse_weights():
    stack = np.zeros((5, 4, 4, 2))
    stack[2] = 1.0
    out = gaussian_smooth_temporal(stack, SmoothingSpec(sigma_t=1.5))
    w = gaussian_weights(1.5)  # radius 5, the sequence sees offsets -2..2
    np.testing.assert_allclose(out[:, 0, 0, 0], w[5 - 2:5 + 3], rtol=1e-14)
    np.testing.assert_allclose(out[:, 0, 0, 0], [0.10936068950970002, 0.2130055377112537,
                                                 0.26601172486179436, 0.2130055377112537,
                                                 0.10936068950970002], rtol=1e-13)


def test_temporal_smoothing_identity_cases():
    stack = np.random.default_rng(1).normal(size=(4, 3, 3, 2))
    assert gaussian_smooth_temporal(stack, SmoothingSpec(sigma_t=0.0)) is stack
    const = np.broadcast_to(stack[0], stack.shape).copy()
    np.testing.assert_allclose(gaussian_smooth_temporal(const, SmoothingSpec()), const, atol=1e-14)


def test_smoothing_matrix_rows_sum_to_one():
    for n, sigma in [(5, 1.5), (16, 2.0), (3, 4.0)]:
        np.testing.assert_allclose(smoothing_matrix(n, sigma).sum(axis=1), 1.0, atol=1e-15)


def test_smoothing_gradients():
    rng = np.random.default_rng(2)
    v, w = rng.normal(size=(3, 8, 8, 2)), rng.normal(size=(3, 8, 8, 2))
    spec = SmoothingSpec(3.0, 1.5)
    grid = GridSpec(8, 8, 1.5)
    fn = lambda v: ad.sum_all(ad.mul(gaussian_smooth_spatial(gaussian_smooth_temporal(v, spec), spec, grid), w))  # noqa: E731
    assert gradcheck(fn, [v], max_entries=60) < 1e-4


# ----------------------------------------------------------- exponentiation

def test_exponentiate_zero():
    assert np.all(exponentiate(np.zeros((8, 8, 2))) == 0)


def test_exponentiate_constant_is_translation():
    v = np.zeros((20, 20, 2))
    v[..., 0] = 2.4
    u = exponentiate(v, 6)
    # clamping at the far border breaks exactness only within ~2.4 px of it
    np.testing.assert_allclose(u[3:-4, 3:-4], v[3:-4, 3:-4], atol=1e-6)


def test_exponentiate_inverse_consistency():
    rng = np.random.default_rng(4)
    v = smooth_field(rng, amplitude=3.0)
    resid = compose(exponentiate(v), exponentiate(-v))
    assert np.max(np.linalg.norm(resid[4:-4, 4:-4], axis=-1)) < 0.05


def test_exponentiate_rejects_zero_steps():
    with pytest.raises(ValueError):
        exponentiate(np.zeros((4, 4, 2)), 0)


def test_steps_rule():
    v = np.zeros((4, 4, 2))
    v[0, 0, 0] = 5.0
    assert steps_for(v) == 4  # 5/16 < 0.5 <= 5/8
    assert steps_for(np.zeros((4, 4, 2))) == 1


def test_exponentiate_gradient():
    rng = np.random.default_rng(6)
    v = smooth_field(rng, 8, 8, amplitude=1.5)
    w = rng.normal(size=(8, 8, 2))
    assert gradcheck(lambda v: ad.sum_all(ad.mul(exponentiate(v, 3), w)), [v], max_entries=40) < 1e-4


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.2, 2.5))
def test_property_exponentiated_fields_are_invertible(seed, amplitude):
    v = smooth_field(np.random.default_rng(seed), 16, 16, amplitude)
    u = exponentiate(v)
    assert np.all(jacobian_determinant(u)[1:-1, 1:-1] > 0)


# ------------------------------------------------------------- composition

def test_compose_with_identity():
    u = smooth_field(np.random.default_rng(9), 12, 12, 1.0)
    np.testing.assert_array_equal(compose(np.zeros_like(u), u), u)


def test_compose_integer_translations():
    a = np.zeros((10, 10, 2))
    a[..., 0] = 1.0
    b = np.zeros((10, 10, 2))
    b[..., 1] = 2.0
    out = compose(a, b)
    np.testing.assert_allclose(out[2:-3, 2:-3], np.broadcast_to([1.0, 2.0], out[2:-3, 2:-3].shape))


def test_compose_associative_for_small_smooth_fields():
    rng = np.random.default_rng(10)
    a, b, c = (smooth_field(rng, 20, 20, 0.8) for _ in range(3))
    left = compose(compose(a, b), c)
    right = compose(a, compose(b, c))
    assert np.max(np.abs(left - right)[4:-4, 4:-4]) < 1e-3


def test_compose_grid_mismatch():
    with pytest.raises(ValueError):
        compose(np.zeros((4, 4, 2)), np.zeros((5, 4, 2)))


# ------------------------------------------------------------------ warping

def test_warp_identity_both_modes():
    img = np.random.default_rng(0).random((6, 7))
    zero = np.zeros((6, 7, 2))
    np.testing.assert_array_equal(warp(img, zero), img)
    np.testing.assert_array_equal(warp(img, zero, mode="nearest"), img)


def test_warp_integer_shift_replicates_border():
    img = np.arange(12.0).reshape(3, 4)
    u = np.zeros((3, 4, 2))
    u[..., 1] = 1.0
    out = warp(img, u)
    np.testing.assert_array_equal(out[:, :-1], img[:, 1:])
    np.testing.assert_array_equal(out[:, -1], img[:, -1])


def test_warp_subpixel_ramp_exact():
    img = np.tile(np.arange(10.0), (5, 1)) * 0.3 + 1.0
    u = np.zeros((5, 10, 2))
    u[..., 1] = 0.25
    expected = np.broadcast_to((np.arange(9.0) + 0.25) * 0.3 + 1.0, (5, 9))
    np.testing.assert_allclose(warp(img, u)[:, :-1], expected, atol=1e-14)


def test_warp_nearest_offset_invariance():
    mask = (np.random.default_rng(3).random((8, 8)) > 0.5).astype(np.uint8)
    u = smooth_field(np.random.default_rng(4), 8, 8, 1.5)
    np.testing.assert_array_equal(warp(mask + 3, u, "nearest"), warp(mask, u, "nearest") + 3)


def test_warp_errors():
    with pytest.raises(ValueError):
        warp(np.zeros((4, 4)), np.zeros((5, 4, 2)))
    with pytest.raises(ValueError):
        warp(np.zeros((4, 4)), np.zeros((4, 4, 2)), mode="cubic")


def test_warp_gradient():
    rng = np.random.default_rng(12)
    img = rng.random((8, 8))
    u = smooth_field(rng, 8, 8, 1.2) + 0.13
    w = rng.normal(size=(8, 8))
    fn = lambda i, u: ad.sum_all(ad.mul(warp(i, u), w))  # noqa: E731
    assert gradcheck(fn, [img, u], max_entries=60) < 1e-4


# ------------------------------------------------------------- diagnostics

def test_jacobian_identity_and_dilation():
    np.testing.assert_array_equal(jacobian_determinant(np.zeros((6, 6, 2))), 1.0)
    u = 0.1 * identity_grid(9, 9)
    np.testing.assert_allclose(jacobian_determinant(u)[1:-1, 1:-1], 1.21, atol=1e-12)


def test_field_gradients_examples():
    assert field_gradients(np.zeros((4, 6, 6, 2))) == (0.0, 0.0)
    static = np.broadcast_to(smooth_field(np.random.default_rng(1), 6, 6, 1.0), (3, 6, 6, 2))
    assert field_gradients(static)[1] == 0.0
    ramp = np.zeros((5, 6, 6, 2))
    ramp[..., 0] = 0.1 * np.arange(5)[:, None, None]
    spatial, temporal = field_gradients(ramp)
    assert spatial == 0.0
    assert temporal == pytest.approx(0.1, abs=1e-15)


def test_field_file_round_trip(tmp_path):
    u = np.random.default_rng(0).normal(size=(3, 5, 7, 2)).astype(np.float32)
    write_fields(tmp_path / "f.f32", u)
    raw = (tmp_path / "f.f32").read_bytes()
    assert raw[:6] == np.array([5, 7, 3], dtype="<u2").tobytes()
    assert len(raw) == 6 + u.size * 4
    np.testing.assert_array_equal(read_fields(tmp_path / "f.f32"), u)
    (tmp_path / "bad.f32").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        read_fields(tmp_path / "bad.f32")
