import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from darkflash.core import demosaic_malvar, luma
from darkflash.errors import DimensionError, DomainError, FormatError
from darkflash.fusion import (
    AffineBilateralGrid,
    ScaleMapParams,
    constant_grid,
    forward_gradients,
    fuse_pipeline,
    identity_grid,
    load_grid,
    replace_luma,
    save_grid,
    scale_map_fuse,
    screened_poisson_solve,
    slice_apply,
)
from darkflash.metrics import psnr, ssim
from darkflash.sim import ExposureSettings, gain_to_db, make_demo_scene, make_rig, render_frame


def dense_gradient_matrix(h, w):
    """Forward-difference operator as an explicit (2hw, hw) matrix; boundary rows are zero."""
    n = h * w
    D = np.zeros((2 * n, n))
    idx = np.arange(n).reshape(h, w)
    for y in range(h):
        for x in range(w):
            if x + 1 < w:
                D[idx[y, x], idx[y, x + 1]] = 1.0
                D[idx[y, x], idx[y, x]] = -1.0
            if y + 1 < h:
                D[n + idx[y, x], idx[y + 1, x]] = 1.0
                D[n + idx[y, x], idx[y, x]] = -1.0
    return D


def dense_poisson(data, gx, gy, alpha):
    h, w = data.shape
    D = dense_gradient_matrix(h, w)
    A = alpha * np.eye(h * w) + D.T @ D
    # entries outside the domain have no matching row in D
    g = np.concatenate([np.where(np.arange(w) < w - 1, gx, 0).ravel(),
                        np.where(np.arange(h)[:, None] < h - 1, gy, 0).ravel()])
    b = alpha * data.ravel() + D.T @ g
    return np.linalg.solve(A, b).reshape(h, w)


def textured(h, w, amp=0.3, period=8):
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    y = 0.5 + amp * np.sin(2 * np.pi * xx / period) * np.cos(2 * np.pi * yy / (period + 3))
    return np.stack([0.9 * y, y, 0.7 * y + 0.1], axis=-1)


# ---------------------------------------------------------------- screened Poisson


@pytest.mark.parametrize("alpha", [0.05, 1.0, 30.0])
def test_poisson_matches_dense_oracle(rng, alpha):
    for _ in range(5):
        data, gx, gy = rng.normal(size=(3, 8, 8))
        got = screened_poisson_solve(data, gx, gy, alpha)
        assert np.max(np.abs(got - dense_poisson(data, gx, gy, alpha))) < 1e-6


def test_poisson_nonsquare_oracle(rng):
    data, gx, gy = rng.normal(size=(3, 5, 9))
    assert np.max(np.abs(screened_poisson_solve(data, gx, gy, 0.3) - dense_poisson(data, gx, gy, 0.3))) < 1e-9


def test_poisson_normal_equation_residual(rng):
    data, gx, gy = rng.normal(size=(3, 12, 10))
    alpha = 0.05
    out = screened_poisson_solve(data, gx, gy, alpha)
    D = dense_gradient_matrix(12, 10)
    lhs = alpha * out.ravel() + D.T @ (D @ out.ravel())
    g = np.concatenate([gx.ravel(), gy.ravel()])
    g[:120].reshape(12, 10)[:, -1] = 0
    g[120:].reshape(12, 10)[-1, :] = 0
    rhs = alpha * data.ravel() + D.T @ g
    assert np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs) < 1e-8


def test_poisson_consistent_gradients_fixed_point(rng):
    data = rng.normal(size=(16, 24))
    out = screened_poisson_solve(data, *forward_gradients(data), 0.05)
    np.testing.assert_allclose(out, data, rtol=0, atol=1e-12)


def test_poisson_zero_gradients_on_constant_data():
    data = np.full((9, 7), 0.37)
    out = screened_poisson_solve(data, np.zeros_like(data), np.zeros_like(data), 0.05)
    np.testing.assert_allclose(out, data, rtol=0, atol=1e-14)


def test_poisson_zero_gradients_smooth_textured_data(rng):
    # with zero target gradients the minimizer trades data fidelity for
    # smoothness, so non-constant data is not reproduced
    data = rng.normal(size=(8, 8))
    zero = np.zeros_like(data)
    out = screened_poisson_solve(data, zero, zero, 0.05)
    np.testing.assert_allclose(out, dense_poisson(data, zero, zero, 0.05), atol=1e-9)
    assert np.abs(out - data).max() > 0.1
    assert out.mean() == pytest.approx(data.mean(), abs=1e-12)


def test_poisson_large_alpha_pins_mean(rng):
    data, gx, gy = rng.normal(size=(3, 32, 32))
    out = screened_poisson_solve(data, gx, gy, 1e6)
    assert abs(out.mean() - data.mean()) < 1e-4
    assert np.abs(out - data).max() < 1e-4


def test_poisson_errors():
    z = np.zeros((4, 4))
    for alpha in (0.0, -1.0):
        with pytest.raises(DomainError):
            screened_poisson_solve(z, z, z, alpha)
    with pytest.raises(DimensionError):
        screened_poisson_solve(z, np.zeros((4, 5)), z, 1.0)


# ---------------------------------------------------------------- scale map


def test_self_guide_recovers_input():
    rgb = textured(96, 96)
    out = scale_map_fuse(rgb, luma(rgb))
    assert np.sqrt(np.mean((out - rgb) ** 2)) < 1e-3


def test_constant_noisy_stays_constant(rng):
    noisy = np.full((40, 40, 3), [0.2, 0.4, 0.6])
    out = scale_map_fuse(noisy, rng.uniform(size=(40, 40)))
    np.testing.assert_allclose(out, noisy, atol=1e-12)


def test_flat_guide_suppresses_gradients(rng):
    h, w = 64, 96
    flash = np.zeros((h, w))
    flash[:, 48:] = textured(h, 48)[..., 1]
    noisy = 0.5 + 0.05 * rng.normal(size=(h, w, 3))
    out = scale_map_fuse(noisy, flash)
    for c in range(3):
        nx, ny = forward_gradients(noisy[..., c])
        ox, oy = forward_gradients(out[..., c])
        flat = (slice(4, h - 4), slice(4, 28))  # 20 px clear of the textured half
        g_in = np.hypot(nx, ny)[flat]
        g_out = np.hypot(ox, oy)[flat]
        assert g_out.mean() < 0.5 * g_in.mean()


def test_scale_map_fuse_errors():
    with pytest.raises(DimensionError):
        scale_map_fuse(np.zeros((8, 8, 3)), np.zeros((8, 9)))
    with pytest.raises(ValueError):
        ScaleMapParams(eps=0.0)


@pytest.fixture(scope="module")
def sim_fixture():
    """128 px demo scene, noisy clean_rgb and a noiseless NIR-flash cam2 guide."""
    scene = make_demo_scene(128, 128, seed=0)
    rig = make_rig("ideal")
    raw = render_frame(scene, rig.cam2, ExposureSettings(0.1438, gain_to_db(15.0), "NIR"), rig.flashes["NIR"])
    flash = luma(demosaic_malvar(raw))
    clean = scene.clean_rgb
    noisy = clean + np.random.default_rng(1).normal(0, 0.05, clean.shape)
    return clean, noisy, flash


def test_scale_map_denoises(sim_fixture):
    clean, noisy, flash = sim_fixture
    out = scale_map_fuse(noisy, flash)
    assert np.mean((out - clean) ** 2) < np.mean((noisy - clean) ** 2)


def test_pipeline_ssim_improves(sim_fixture):
    clean, noisy, flash = sim_fixture
    assert ssim(fuse_pipeline(noisy, flash), clean) > ssim(noisy, clean)
    assert psnr(fuse_pipeline(noisy, flash), clean) > psnr(noisy, clean)


# ---------------------------------------------------------------- grid slicing


def test_identity_grid_bit_exact(rng):
    img = rng.uniform(-0.2, 1.3, size=(37, 53, 3))
    for sm in (rng.uniform(size=(37, 53)), np.zeros((37, 53)), np.ones((37, 53))):
        assert np.array_equal(slice_apply(identity_grid(53, 37), img, sm), img)


def test_constant_grid_matches_direct_affine(rng):
    A = rng.normal(size=(3, 4))
    img = rng.uniform(size=(20, 30, 3))
    out = slice_apply(constant_grid(A, 30, 20), img, rng.uniform(size=(20, 30)))
    direct = img @ A[:, :3].T + A[:, 3]
    np.testing.assert_allclose(out, direct, rtol=0, atol=1e-12)


def test_one_cell_two_depth_interpolation():
    o0, o1 = np.array([0.1, -0.2, 0.3]), np.array([0.5, 0.4, -0.1])
    cells = np.zeros((1, 1, 2, 3, 4))
    cells[..., :3] = np.eye(3)
    cells[0, 0, 0, :, 3] = o0
    cells[0, 0, 1, :, 3] = o1
    grid = AffineBilateralGrid(cells, spatial_scale=4.0)
    img = np.array([[[0.2, 0.5, 0.7], [0.9, 0.1, 0.3]]])
    out = slice_apply(grid, img, np.full((1, 2), 0.5))
    np.testing.assert_allclose(out, img + (o0 + o1) / 2, rtol=0, atol=1e-9)
    np.testing.assert_allclose(slice_apply(grid, img, np.array([[0.0, 1.0]]))[0],
                               [img[0, 0] + o0, img[0, 1] + o1], atol=1e-12)


def test_slice_spatial_interpolation():
    # offsets vary along x only: the output follows the linear blend between cells
    cells = np.zeros((1, 2, 2, 3, 4))
    cells[..., :3] = np.eye(3)
    cells[0, 1, :, :, 3] = 1.0
    grid = AffineBilateralGrid(cells, spatial_scale=4.0)
    out = slice_apply(grid, np.zeros((1, 6, 3)), np.zeros((1, 6)))
    np.testing.assert_allclose(out[0, :, 0], [0.0, 0.25, 0.5, 0.75, 1.0, 1.0])


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**32 - 1))
def test_slicing_is_linear_in_grid(a, b, seed):
    r = np.random.default_rng(seed)
    g1 = AffineBilateralGrid(r.normal(size=(3, 4, 3, 3, 4)), spatial_scale=5.0)
    g2 = AffineBilateralGrid(r.normal(size=(3, 4, 3, 3, 4)), spatial_scale=5.0)
    img, sm = r.uniform(size=(12, 17, 3)), r.uniform(size=(12, 17))
    combo = AffineBilateralGrid(a * g1.cells + b * g2.cells, spatial_scale=5.0)
    expected = a * slice_apply(g1, img, sm) + b * slice_apply(g2, img, sm)
    np.testing.assert_allclose(slice_apply(combo, img, sm), expected, atol=1e-6)


def test_chunking_does_not_change_result(rng):
    grid = AffineBilateralGrid(rng.normal(size=(4, 4, 3, 3, 4)), spatial_scale=9.0)
    img, sm = rng.uniform(size=(30, 30, 3)), rng.uniform(size=(30, 30))
    assert np.array_equal(slice_apply(grid, img, sm, chunk_rows=7), slice_apply(grid, img, sm))


def test_grid_validation():
    with pytest.raises(ValueError):
        AffineBilateralGrid(np.zeros((2, 2, 1, 3, 4)), 1.0)
    with pytest.raises(ValueError):
        AffineBilateralGrid(np.full((2, 2, 2, 3, 4), np.nan), 1.0)
    with pytest.raises(ValueError):
        AffineBilateralGrid(np.zeros((2, 2, 2, 3, 3)), 1.0)


# ---------------------------------------------------------------- luma replacement


finite_rgb = arrays(np.float64, (4, 5, 3), elements=st.floats(-1, 2))
finite_luma = arrays(np.float64, (4, 5), elements=st.floats(-1, 2))


@given(finite_rgb)
def test_replace_luma_self_identity(img):
    np.testing.assert_allclose(replace_luma(img, luma(img)), img, atol=1e-6)


@given(finite_rgb, finite_luma)
def test_replace_luma_sets_luma_and_is_idempotent(img, L):
    once = replace_luma(img, L)
    np.testing.assert_allclose(luma(once), L, atol=1e-6)
    np.testing.assert_allclose(replace_luma(once, L), once, atol=1e-6)


def test_replace_luma_keeps_chroma(rng):
    img, L = rng.uniform(size=(6, 6, 3)), rng.uniform(size=(6, 6))
    out = replace_luma(img, L)
    chroma = lambda x: x - luma(x)[..., None]  # noqa: E731
    np.testing.assert_allclose(chroma(out), chroma(img), atol=1e-12)


def test_replace_luma_gray():
    gray = np.full((3, 4, 3), 0.3)
    np.testing.assert_allclose(replace_luma(gray, np.full((3, 4), 0.8)), 0.8, atol=1e-12)
    with pytest.raises(DimensionError):
        replace_luma(gray, np.zeros((4, 3)))


# ---------------------------------------------------------------- pipeline and files


def test_pipeline_identity_equals_scale_map(rng):
    rgb = textured(48, 64) + 0.02 * rng.normal(size=(48, 64, 3))
    flash = luma(textured(48, 64))
    np.testing.assert_allclose(fuse_pipeline(rgb, flash), scale_map_fuse(rgb, flash), atol=1e-12)


def test_pipeline_with_loaded_scaling_grid(tmp_path, rng):
    rgb = textured(48, 64) + 0.02 * rng.normal(size=(48, 64, 3))
    flash = luma(textured(48, 64))
    A = np.hstack([1.2 * np.eye(3), np.zeros((3, 1))])
    save_grid(tmp_path / "g.json", constant_grid(A, 64, 48))
    grid, slice_map = load_grid(tmp_path / "g.json")
    assert slice_map is None
    out = fuse_pipeline(rgb, flash, grid)
    base = scale_map_fuse(rgb, flash)
    np.testing.assert_allclose(luma(out), luma(base), atol=1e-6)
    chroma = lambda x: x - luma(x)[..., None]  # noqa: E731
    np.testing.assert_allclose(chroma(out), 1.2 * chroma(base), atol=1e-6)


def test_grid_file_roundtrip(tmp_path, rng):
    grid = AffineBilateralGrid(rng.normal(size=(3, 5, 4, 3, 4)).astype(np.float32), 7.5, 0.25)
    sm = rng.uniform(size=(10, 12)).astype(np.float32)
    save_grid(tmp_path / "grid.json", grid, sm)
    loaded, sm2 = load_grid(tmp_path / "grid.json")
    assert loaded.dims == (5, 3, 4)
    assert np.array_equal(loaded.cells, grid.cells)
    assert loaded.spatial_scale == 7.5 and loaded.range_scale == 0.25
    assert np.array_equal(sm2, sm)


def test_grid_file_errors(tmp_path):
    (tmp_path / "bad.json").write_text('{"dims": [2, 2, 2]}')
    with pytest.raises(FormatError):
        load_grid(tmp_path / "bad.json")
    save_grid(tmp_path / "g.json", identity_grid(8, 8, (2, 2, 2)))
    (tmp_path / "g.json").write_text((tmp_path / "g.json").read_text().replace("[\n    2,", "[\n    3,"))
    with pytest.raises(FormatError):
        load_grid(tmp_path / "g.json")
