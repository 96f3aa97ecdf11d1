"""Heat-map baking and texture blending in UV space.

Pixel convention: column = u·(W−1), row = (H−1) − v·(H−1) — v points *up* the
image, so v=0 is the bottom pixel row. Stiffness is normalized to [0,1] over
the ROI per bake ("relative stiffness") unless a fixed range is supplied, then
run through a monotone light-to-dark-blue ramp: darker means stiffer. Blending
is multiplicative darkening, which keeps base texture detail visible under the
mark.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy.ndimage import distance_transform_edt

from .errors import ConfigError
from .mesh import TriMesh
from .search import ROI, SearchGrid

DEFAULT_TEXTURE_SIZE = (512, 512)  # (width, height)


@dataclass(frozen=True)
class ColorRamp:
    """Piecewise-linear RGB ramp over s ∈ [0,1]; stops must cover 0 and 1."""

    stops: tuple[tuple[float, tuple[int, int, int]], ...]

    def __post_init__(self):
        pos = [p for p, _ in self.stops]
        if len(pos) < 2 or pos[0] != 0.0 or pos[-1] != 1.0 or sorted(pos) != pos:
            raise ConfigError("ramp stops must ascend from 0.0 to 1.0")

    def __call__(self, s: np.ndarray) -> np.ndarray:
        s = np.clip(np.asarray(s, dtype=float), 0.0, 1.0)
        pos = np.array([p for p, _ in self.stops])
        rgb = np.array([c for _, c in self.stops], dtype=float)  # (K,3)
        out = np.empty(s.shape + (3,), dtype=float)
        for ch in range(3):
            out[..., ch] = np.interp(s, pos, rgb[:, ch])
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# light blue -> dark navy; every channel non-increasing in s, so darkness is
# monotone in stiffness
DARK_BLUE_RAMP = ColorRamp(
    stops=(
        (0.0, (247, 251, 255)),
        (0.5, (107, 174, 214)),
        (1.0, (8, 48, 107)),
    )
)


@dataclass(frozen=True)
class HeatmapTexture:
    width: int
    height: int
    rgba: np.ndarray  # (H, W, 4) uint8; alpha 0 outside ROI
    values: np.ndarray  # (H, W) float, normalized stiffness s (0 outside ROI)
    mask: np.ndarray  # (H, W) bool, ROI membership
    value_range: tuple[float, float]  # the (lo, hi) used for normalization

    def __post_init__(self):
        for name in ("rgba", "values", "mask"):
            arr = np.ascontiguousarray(getattr(self, name))
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.rgba.shape != (self.height, self.width, 4) or self.rgba.dtype != np.uint8:
            raise ConfigError("rgba must be (H, W, 4) uint8")

    def to_png_bytes(self) -> bytes:
        buf = io.BytesIO()
        Image.fromarray(self.rgba, "RGBA").save(buf, format="PNG")
        return buf.getvalue()


def _pixel_uv_axes(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    u = np.arange(width) / (width - 1)
    v = (height - 1 - np.arange(height)) / (height - 1)
    return u, v


def _fill_nearest(lattice: np.ndarray) -> np.ndarray:
    """Replace NaN lattice nodes by their nearest finite node (for edge cells)."""
    bad = ~np.isfinite(lattice)
    if not bad.any():
        return lattice
    idx = distance_transform_edt(bad, return_distances=False, return_indices=True)
    return lattice[tuple(idx)]


def _bilinear(lattice: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample lattice (R,R) at fractional coordinates (y rows, x cols), clamped."""
    r = lattice.shape[0]
    x = np.clip(x, 0.0, r - 1.0)
    y = np.clip(y, 0.0, r - 1.0)
    x0 = np.clip(np.floor(x).astype(int), 0, r - 2)
    y0 = np.clip(np.floor(y).astype(int), 0, r - 2)
    fx = x - x0
    fy = y - y0
    top = lattice[y0, x0] * (1 - fx) + lattice[y0, x0 + 1] * fx
    bot = lattice[y0 + 1, x0] * (1 - fx) + lattice[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def bake_heatmap(
    grid: SearchGrid,
    resolution: tuple[int, int] = DEFAULT_TEXTURE_SIZE,
    normalization: tuple[float, float] | None = None,
    ramp: ColorRamp = DARK_BLUE_RAMP,
    opacity: float = 1.0,
) -> HeatmapTexture:
    """Rasterize the posterior mean over the ROI into an RGBA heat map.

    ``normalization`` pins a fixed (lo, hi) stiffness range; by default the
    range is the min/max of μ over the in-ROI grid points of *this* bake.
    """
    width, height = resolution
    if grid.updates < 1:
        raise ConfigError("no posterior to bake (run at least one update)")
    if width < grid.roi.resolution or height < grid.roi.resolution:
        raise ConfigError("texture resolution must be >= grid resolution")
    if not (0.0 <= opacity <= 1.0):
        raise ConfigError("opacity must lie in [0,1]")

    if normalization is None:
        lo, hi = float(grid.mu.min()), float(grid.mu.max())
    else:
        lo, hi = float(normalization[0]), float(normalization[1])
        if hi < lo:
            raise ConfigError("normalization range must have hi >= lo")

    lattice = _fill_nearest(grid.to_lattice(grid.mu))
    (bb_lo, bb_hi) = grid.lattice_extent()
    u_ax, v_ax = _pixel_uv_axes(width, height)
    uu, vv = np.meshgrid(u_ax, v_ax)  # (H, W) uv per pixel

    r = grid.roi.resolution
    span = np.maximum(bb_hi - bb_lo, 1e-12)
    gx = (uu - bb_lo[0]) / span[0] * (r - 1)
    gy = (vv - bb_lo[1]) / span[1] * (r - 1)
    mu_px = _bilinear(lattice, gx, gy)

    if hi - lo <= 1e-12:
        s = np.full((height, width), 0.5)
    else:
        s = np.clip((mu_px - lo) / (hi - lo), 0.0, 1.0)

    pix_uv = np.stack([uu.ravel(), vv.ravel()], axis=1)
    mask = grid.roi.contains(pix_uv).reshape(height, width)

    rgba = np.zeros((height, width, 4), dtype=np.uint8)
    rgba[..., :3] = ramp(s)
    rgba[..., 3] = np.where(mask, int(round(255 * opacity)), 0)
    rgba[~mask, :3] = 0
    s = np.where(mask, s, 0.0)

    return HeatmapTexture(
        width=width,
        height=height,
        rgba=rgba,
        values=s,
        mask=mask,
        value_range=(lo, hi),
    )


def blend_textures(base: np.ndarray, heatmap: HeatmapTexture, opacity: float) -> np.ndarray:
    """out = base · (1 − opacity·α·s): multiplicative darkening inside the ROI.

    α is the ROI mask, s the normalized stiffness. Outside the ROI (and at
    opacity 0) the output is byte-identical to the base. The heatmap is
    resampled (bilinear values, nearest mask) if dimensions differ.
    """
    if not (0.0 <= opacity <= 1.0):
        raise ConfigError("opacity must lie in [0,1]")
    base = np.asarray(base)
    if base.ndim != 3 or base.shape[2] not in (3, 4) or base.dtype != np.uint8:
        raise ConfigError("base texture must be (H, W, 3|4) uint8")
    h, w = base.shape[:2]

    s = heatmap.values
    mask = heatmap.mask
    if (heatmap.height, heatmap.width) != (h, w):
        s_img = Image.fromarray(s.astype(np.float32), mode="F").resize((w, h), Image.BILINEAR)
        m_img = Image.fromarray(mask.astype(np.uint8) * 255, mode="L").resize((w, h), Image.NEAREST)
        s = np.asarray(s_img, dtype=float)
        mask = np.asarray(m_img) > 127
    if s.shape != (h, w) or mask.shape != (h, w):
        raise ConfigError("heatmap/base dimension mismatch after resampling")

    alpha = mask.astype(float)
    factor = 1.0 - opacity * alpha * np.clip(s, 0.0, 1.0)

    out = np.empty((h, w, 4), dtype=np.uint8)
    rgb = base[..., :3].astype(float) * factor[..., None]
    out[..., :3] = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    out[..., 3] = base[..., 3] if base.shape[2] == 4 else 255
    return out


def uv_to_surface_patch(roi: ROI, mesh: TriMesh) -> list[tuple[int, np.ndarray]]:
    """(face, barycentric) for every in-ROI grid point; errors if any point is off-atlas."""
    grid = SearchGrid(roi)
    index = mesh.uv_index()
    return [index.locate(uv) for uv in grid.uv]


def flat_base_texture(
    width: int = DEFAULT_TEXTURE_SIZE[0],
    height: int = DEFAULT_TEXTURE_SIZE[1],
    rgb: tuple[int, int, int] = (222, 202, 186),
) -> np.ndarray:
    """A plain organ-ish base texture for sessions without a real one."""
    base = np.empty((height, width, 4), dtype=np.uint8)
    base[..., 0], base[..., 1], base[..., 2] = rgb
    base[..., 3] = 255
    return base
