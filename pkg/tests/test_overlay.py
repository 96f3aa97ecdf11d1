"""Heat-map baking, blending, and the UV pixel conventions.

The interpolation path is checked against scipy's RegularGridInterpolator,
which implements the same bilinear rule independently. Byte-level promises
(opacity 0 is a no-op, pixels outside the ROI never change, bakes are
deterministic) are asserted on raw buffers, not through tolerances.
"""

import io

import numpy as np
import pytest
from PIL import Image
from scipy.interpolate import RegularGridInterpolator

from palpation_lab import (
    DARK_BLUE_RAMP,
    ColorRamp,
    ROI,
    SearchGrid,
    bake_heatmap,
    blend_textures,
    update_confidence,
    uv_to_surface_patch,
)
from palpation_lab.errors import ConfigError, UvOffSurfaceError
from palpation_lab.overlay import flat_base_texture

ROI_MID = ROI(kind="circle", center_uv=(0.5, 0.5), radius_uv=0.25, resolution=25)


def _grid_with_mu(mu_fn, roi=ROI_MID):
    """A SearchGrid whose posterior mean is mu_fn(u, v), via one interval update."""
    grid = SearchGrid(roi)
    mu = mu_fn(grid.uv[:, 0], grid.uv[:, 1])
    update_confidence(grid, np.asarray(mu, dtype=float), np.full(len(grid), 0.1), beta=4.0)
    return grid


# --- color ramp -------------------------------------------------------------


def test_ramp_darkens_monotonically():
    s = np.linspace(0.0, 1.0, 101)
    rgb = DARK_BLUE_RAMP(s).astype(int)
    assert np.all(np.diff(rgb, axis=0) <= 0)  # every channel non-increasing
    assert rgb[0].sum() > rgb[-1].sum()  # and the ends actually differ


def test_ramp_clips_out_of_range_input():
    ramp = DARK_BLUE_RAMP
    np.testing.assert_array_equal(ramp(np.array([-3.0])), ramp(np.array([0.0])))
    np.testing.assert_array_equal(ramp(np.array([7.0])), ramp(np.array([1.0])))


def test_ramp_stop_validation():
    with pytest.raises(ConfigError):
        ColorRamp(stops=((0.2, (0, 0, 0)), (1.0, (255, 255, 255))))
    with pytest.raises(ConfigError):
        ColorRamp(stops=((0.0, (0, 0, 0)), (0.8, (9, 9, 9))))
    with pytest.raises(ConfigError):
        ColorRamp(stops=((0.0, (0, 0, 0)), (0.7, (1, 1, 1)), (0.3, (2, 2, 2)), (1.0, (3, 3, 3))))


# --- baking -----------------------------------------------------------------


def test_bake_requires_a_posterior():
    with pytest.raises(ConfigError, match="no posterior"):
        bake_heatmap(SearchGrid(ROI_MID))


def test_bake_rejects_coarser_texture_than_grid():
    grid = _grid_with_mu(lambda u, v: u)
    with pytest.raises(ConfigError, match="resolution"):
        bake_heatmap(grid, resolution=(16, 16))


def test_bake_rejects_bad_opacity_and_range():
    grid = _grid_with_mu(lambda u, v: u)
    with pytest.raises(ConfigError):
        bake_heatmap(grid, opacity=1.2)
    with pytest.raises(ConfigError):
        bake_heatmap(grid, normalization=(1.0, 0.0))


def test_bilinear_against_scipy_oracle():
    grid = _grid_with_mu(lambda u, v: np.sin(9 * u) * np.cos(7 * v) * 0.5 + 0.5)
    tex = bake_heatmap(grid, resolution=(128, 128), normalization=(0.0, 1.0))

    r = grid.roi.resolution
    lo, hi = grid.lattice_extent()
    us = np.linspace(lo[0], hi[0], r)
    vs = np.linspace(lo[1], hi[1], r)
    lattice = grid.to_lattice(grid.mu)
    node_ok = np.isfinite(lattice)

    interp = RegularGridInterpolator(
        (vs, us), np.nan_to_num(lattice), method="linear", bounds_error=False, fill_value=np.nan
    )

    w = h = 128
    u_px = np.arange(w) / (w - 1)
    v_px = (h - 1 - np.arange(h)) / (h - 1)
    uu, vv = np.meshgrid(u_px, v_px)

    # only judge pixels whose whole interpolation cell is made of real grid nodes
    gx = (uu - lo[0]) / (hi[0] - lo[0]) * (r - 1)
    gy = (vv - lo[1]) / (hi[1] - lo[1]) * (r - 1)
    inside = (gx >= 0) & (gx <= r - 1) & (gy >= 0) & (gy <= r - 1)
    x0 = np.clip(np.floor(gx).astype(int), 0, r - 2)
    y0 = np.clip(np.floor(gy).astype(int), 0, r - 2)
    clean_cell = node_ok[y0, x0] & node_ok[y0, x0 + 1] & node_ok[y0 + 1, x0] & node_ok[y0 + 1, x0 + 1]
    judge = tex.mask & inside & clean_cell
    assert judge.sum() > 1200  # the oracle actually covers most of the ROI

    expect = interp(np.stack([vv[judge], uu[judge]], axis=1))
    np.testing.assert_allclose(tex.values[judge], expect, atol=1e-9)


def test_darkest_pixel_sits_at_the_stiffest_grid_point():
    grid = SearchGrid(ROI_MID)
    mu = np.zeros(len(grid))
    # deep-interior peak: edge cells borrow values from their nearest in-ROI
    # node, so a boundary peak would leak outside the mask
    peak = int(np.argmin(np.hypot(grid.uv[:, 0] - 0.52, grid.uv[:, 1] - 0.55)))
    mu[peak] = 1.0
    update_confidence(grid, mu, np.full(len(grid), 0.1), beta=4.0)

    w = h = 512
    tex = bake_heatmap(grid, resolution=(w, h), normalization=(0.0, 1.0))
    vals = np.where(tex.mask, tex.values, -1.0)
    row, col = np.unravel_index(np.argmax(vals), vals.shape)

    u, v = grid.uv[peak]
    assert abs(col - u * (w - 1)) <= 1.0
    assert abs(row - ((h - 1) - v * (h - 1))) <= 1.0


def test_v_axis_points_up_the_image():
    # stiff at high v must darken the TOP of the texture
    grid = _grid_with_mu(lambda u, v: v)
    tex = bake_heatmap(grid, resolution=(64, 64), normalization=(0.0, 1.0))
    top = tex.values[:32][tex.mask[:32]]
    bottom = tex.values[32:][tex.mask[32:]]
    assert top.mean() > bottom.mean()


def test_uniform_posterior_normalizes_to_midscale():
    grid = _grid_with_mu(lambda u, v: np.full_like(u, 0.7))
    tex = bake_heatmap(grid)
    np.testing.assert_array_equal(tex.values[tex.mask], 0.5)
    np.testing.assert_array_equal(tex.rgba[tex.mask][:, :3], DARK_BLUE_RAMP(np.array([0.5])))
    assert tex.value_range == (0.7, 0.7)


def test_fixed_normalization_is_used_verbatim():
    grid = _grid_with_mu(lambda u, v: np.full_like(u, 1.0))
    tex = bake_heatmap(grid, normalization=(0.0, 2.0))
    assert tex.value_range == (0.0, 2.0)
    np.testing.assert_array_equal(tex.values[tex.mask], 0.5)
    # and values outside the pinned range clip instead of wrapping
    grid2 = _grid_with_mu(lambda u, v: u)  # spans ~[0.25, 0.75]
    tex2 = bake_heatmap(grid2, normalization=(0.4, 0.6))
    assert tex2.values.max() == 1.0 and tex2.values[tex2.mask].min() == 0.0


def test_alpha_channel_follows_mask_and_opacity():
    grid = _grid_with_mu(lambda u, v: u)
    tex = bake_heatmap(grid, opacity=0.4)
    assert np.all(tex.rgba[tex.mask][:, 3] == round(255 * 0.4))
    assert np.all(tex.rgba[~tex.mask] == 0)  # rgb and alpha both zeroed outside


def test_bake_is_deterministic_to_the_byte():
    grid = _grid_with_mu(lambda u, v: np.hypot(u - 0.5, v - 0.5))
    a = bake_heatmap(grid, resolution=(256, 256))
    b = bake_heatmap(grid, resolution=(256, 256))
    assert a.rgba.tobytes() == b.rgba.tobytes()
    assert a.to_png_bytes() == b.to_png_bytes()


def test_png_bytes_decode_back_to_the_same_pixels():
    grid = _grid_with_mu(lambda u, v: u * v)
    tex = bake_heatmap(grid, resolution=(64, 64))
    decoded = np.asarray(Image.open(io.BytesIO(tex.to_png_bytes())).convert("RGBA"))
    np.testing.assert_array_equal(decoded, tex.rgba)


# --- blending -----------------------------------------------------------------


def _random_base(rng, w=512, h=512, channels=4):
    return rng.integers(0, 256, size=(h, w, channels), dtype=np.uint8)


def test_opacity_zero_is_byte_identical():
    rng = np.random.default_rng(3)
    base = _random_base(rng)
    grid = _grid_with_mu(lambda u, v: u)
    tex = bake_heatmap(grid)
    out = blend_textures(base, tex, opacity=0.0)
    assert out.tobytes() == base.tobytes()


@pytest.mark.parametrize("opacity", [0.3, 0.7, 1.0])
def test_pixels_outside_the_roi_never_change(opacity):
    rng = np.random.default_rng(11)
    base = _random_base(rng)
    grid = _grid_with_mu(lambda u, v: np.hypot(u - 0.5, v - 0.5))
    tex = bake_heatmap(grid)
    out = blend_textures(base, tex, opacity=opacity)
    np.testing.assert_array_equal(out[~tex.mask], base[~tex.mask])


def test_blend_matches_the_stated_formula():
    rng = np.random.default_rng(5)
    base = _random_base(rng)
    grid = _grid_with_mu(lambda u, v: u)
    tex = bake_heatmap(grid, normalization=(0.0, 1.0))
    out = blend_textures(base, tex, opacity=0.7)
    factor = 1.0 - 0.7 * tex.mask * np.clip(tex.values, 0, 1)
    expect = np.clip(np.rint(base[..., :3] * factor[..., None]), 0, 255).astype(np.uint8)
    np.testing.assert_array_equal(out[..., :3], expect)
    np.testing.assert_array_equal(out[..., 3], base[..., 3])


def test_full_opacity_max_stiffness_blacks_out():
    base = flat_base_texture(64, 64)
    grid = _grid_with_mu(lambda u, v: np.full_like(u, 1.0))
    tex = bake_heatmap(grid, resolution=(64, 64), normalization=(0.0, 0.5))  # s clips to 1
    out = blend_textures(base, tex, opacity=1.0)
    assert np.all(out[tex.mask][:, :3] == 0)


def test_blend_resamples_smaller_heatmaps():
    rng = np.random.default_rng(7)
    base = _random_base(rng, w=512, h=512)
    grid = _grid_with_mu(lambda u, v: u)
    tex = bake_heatmap(grid, resolution=(256, 256))
    out = blend_textures(base, tex, opacity=1.0)
    assert out.shape == (512, 512, 4)
    # far corner is well outside the circular ROI at any resampling
    np.testing.assert_array_equal(out[:32, :32], base[:32, :32])
    # and the ROI interior did darken
    assert out[256, 256, :3].astype(int).sum() < base[256, 256, :3].astype(int).sum()


def test_blend_accepts_rgb_base_and_validates_input():
    rng = np.random.default_rng(9)
    grid = _grid_with_mu(lambda u, v: u)
    tex = bake_heatmap(grid)
    out = blend_textures(_random_base(rng, channels=3), tex, opacity=0.5)
    assert out.shape[2] == 4 and np.all(out[..., 3] == 255)
    with pytest.raises(ConfigError):
        blend_textures(_random_base(rng), tex, opacity=1.5)
    with pytest.raises(ConfigError):
        blend_textures(np.zeros((4, 4), dtype=np.uint8), tex, opacity=0.5)
    with pytest.raises(ConfigError):
        blend_textures(np.zeros((4, 4, 3), dtype=np.float32), tex, opacity=0.5)


def test_flat_base_texture_shape_and_fill():
    base = flat_base_texture(40, 20, rgb=(10, 20, 30))
    assert base.shape == (20, 40, 4) and base.dtype == np.uint8
    assert np.all(base[..., 0] == 10) and np.all(base[..., 3] == 255)


def test_heatmap_texture_is_immutable():
    grid = _grid_with_mu(lambda u, v: u)
    tex = bake_heatmap(grid, resolution=(64, 64))
    with pytest.raises(ValueError):
        tex.rgba[0, 0, 0] = 9


# --- surface patch lookup -------------------------------------------------------


def test_surface_patch_covers_every_grid_point(organ_mesh):
    patch = uv_to_surface_patch(ROI_MID, organ_mesh)
    grid = SearchGrid(ROI_MID)
    assert len(patch) == len(grid)
    uv_tris = organ_mesh.uv[organ_mesh.faces]
    for (face, bary), uv in zip(patch, grid.uv):
        assert bary.shape == (3,)
        assert np.all(bary >= -1e-12) and bary.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(bary @ uv_tris[face], uv, atol=1e-6)


def test_surface_patch_rejects_off_atlas_rois(organ_mesh):
    corner = ROI(kind="circle", center_uv=(0.08, 0.08), radius_uv=0.05, resolution=5)
    with pytest.raises(UvOffSurfaceError):
        uv_to_surface_patch(corner, organ_mesh)
