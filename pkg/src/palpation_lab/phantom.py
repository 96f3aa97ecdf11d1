"""Organ phantom: mesh + UV atlas + analytic ground-truth stiffness.

The stiffness field lives in UV space: a background value plus disc inclusions
whose edges fall off with a smoothstep ramp, so the field is smooth wherever a
nonzero smoothing width is configured. ``synthesize_cloud`` stands in for a
stereo reconstruction pipeline: surface samples, single-viewpoint visibility
cropping, a rigid pose, and isotropic sensor noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, MeshError
from .mesh import TriMesh, load_obj
from .transforms import RigidTransform


@dataclass(frozen=True)
class Inclusion:
    center_uv: tuple[float, float]
    radius_uv: float
    stiffness: float  # N/mm
    smoothing_uv: float = 0.0

    def __post_init__(self):
        u, v = self.center_uv
        if not (0.0 <= u <= 1.0 and 0.0 <= v <= 1.0):
            raise ConfigError(f"inclusion outside [0,1]^2: center {self.center_uv}")
        if self.radius_uv <= 0:
            raise ConfigError("inclusion radius must be positive")
        if self.stiffness <= 0:
            raise ConfigError("stiffness values must be positive")
        if self.smoothing_uv < 0:
            raise ConfigError("smoothing width must be non-negative")


@dataclass(frozen=True)
class StiffnessField:
    background: float  # N/mm
    inclusions: tuple[Inclusion, ...] = ()

    def __post_init__(self):
        if self.background <= 0:
            raise ConfigError("stiffness values must be positive")
        object.__setattr__(self, "inclusions", tuple(self.inclusions))
        for inc in self.inclusions:
            if inc.stiffness <= self.background:
                raise ConfigError("inclusion not stiffer than background")

    @classmethod
    def from_json_dict(cls, cfg: dict) -> "StiffnessField":
        try:
            background = float(cfg["background_stiffness_n_per_mm"])
            inclusions = tuple(
                Inclusion(
                    center_uv=(float(item["center_uv"][0]), float(item["center_uv"][1])),
                    radius_uv=float(item["radius_uv"]),
                    stiffness=float(item["stiffness_n_per_mm"]),
                    smoothing_uv=float(item.get("smoothing_uv", 0.0)),
                )
                for item in cfg.get("inclusions", [])
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise ConfigError(f"malformed stiffness config: {exc!r}") from exc
        return cls(background, inclusions)

    def to_json_dict(self) -> dict:
        return {
            "background_stiffness_n_per_mm": self.background,
            "inclusions": [
                {
                    "center_uv": list(inc.center_uv),
                    "radius_uv": inc.radius_uv,
                    "stiffness_n_per_mm": inc.stiffness,
                    "smoothing_uv": inc.smoothing_uv,
                }
                for inc in self.inclusions
            ],
        }


@dataclass
class PointCloud:
    """Bag of finite 3D points (mm) tagged with the frame they live in."""

    points: np.ndarray  # (N, 3)
    frame: str = "camera"

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) == 0:
            raise ConfigError("point cloud must be a non-empty (N,3) array")
        if not np.all(np.isfinite(self.points)):
            raise ConfigError("point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class PhantomModel:
    """Immutable after load; safe to share across threads."""

    mesh: TriMesh
    stiffness: StiffnessField


def load_phantom(mesh_source, stiffness_config) -> PhantomModel:
    """Build a phantom from an OBJ path (or TriMesh) and a stiffness config (path or dict)."""
    if isinstance(mesh_source, TriMesh):
        mesh = mesh_source
        mesh.validate()
    elif isinstance(mesh_source, (str, Path)):
        mesh = load_obj(mesh_source)
    else:
        raise MeshError(f"unsupported mesh source: {type(mesh_source).__name__}")

    if isinstance(stiffness_config, StiffnessField):
        stiffness = stiffness_config
    else:
        if isinstance(stiffness_config, (str, Path)):
            stiffness_config = json.loads(Path(stiffness_config).read_text())
        stiffness = StiffnessField.from_json_dict(stiffness_config)
    return PhantomModel(mesh=mesh, stiffness=stiffness)


def surface_point(phantom: PhantomModel, uv) -> tuple[np.ndarray, np.ndarray]:
    """3D point and unit normal at a uv location (barycentric over the containing face)."""
    mesh = phantom.mesh
    face, bary = mesh.locate_uv(uv)
    idx = mesh.faces[face]
    point = bary @ mesh.vertices[idx]
    normal = bary @ mesh.normals[idx]
    normal = normal / np.linalg.norm(normal)
    return point, normal


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def true_stiffness(phantom: PhantomModel, uv) -> float:
    """Ground-truth stiffness (N/mm) at uv; total on [0,1]^2, deterministic."""
    uv = np.asarray(uv, dtype=float).reshape(2)
    f = phantom.stiffness
    value = f.background
    for inc in f.inclusions:
        r = float(np.hypot(uv[0] - inc.center_uv[0], uv[1] - inc.center_uv[1]))
        if r <= inc.radius_uv:
            contrib = inc.stiffness
        elif inc.smoothing_uv > 0 and r < inc.radius_uv + inc.smoothing_uv:
            t = (r - inc.radius_uv) / inc.smoothing_uv
            contrib = inc.stiffness + (f.background - inc.stiffness) * _smoothstep(t)
        else:
            contrib = f.background
        value = max(value, contrib)
    return float(value)


def stiffness_on_grid(phantom: PhantomModel, uvs: np.ndarray) -> np.ndarray:
    """Vectorized convenience over many uv rows (same field as true_stiffness)."""
    uvs = np.asarray(uvs, dtype=float)
    out = np.full(len(uvs), phantom.stiffness.background)
    for inc in phantom.stiffness.inclusions:
        r = np.hypot(uvs[:, 0] - inc.center_uv[0], uvs[:, 1] - inc.center_uv[1])
        contrib = np.full(len(uvs), phantom.stiffness.background)
        if inc.smoothing_uv > 0:
            t = (r - inc.radius_uv) / inc.smoothing_uv
            ramp = inc.stiffness + (phantom.stiffness.background - inc.stiffness) * _smoothstep(t)
            contrib = np.where(r < inc.radius_uv + inc.smoothing_uv, ramp, contrib)
        contrib = np.where(r <= inc.radius_uv, inc.stiffness, contrib)
        out = np.maximum(out, contrib)
    return out


def synthesize_cloud(
    phantom: PhantomModel,
    true_pose: RigidTransform,
    noise_sigma: float,
    visibility_fraction: float,
    n_points: int = 5000,
    rng: np.random.Generator | int | None = None,
) -> PointCloud:
    """Synthetic "intraoperative" cloud: visible-sector surface samples, posed and noised.

    Visibility is a contiguous azimuthal sector (about the mesh centroid) whose
    angular width is ``visibility_fraction`` of a full turn, with a seeded start
    angle — one side of the organ, as a single stereo viewpoint would see.
    """
    if not (0.0 < visibility_fraction <= 1.0):
        raise ConfigError("visibility_fraction must lie in (0, 1]")
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be non-negative")
    rng = np.random.default_rng(rng)

    mesh = phantom.mesh
    if visibility_fraction >= 1.0:
        points, _, _ = mesh.sample_surface(n_points, rng)
    else:
        theta0 = rng.uniform(0.0, 2.0 * np.pi)
        width = 2.0 * np.pi * visibility_fraction
        centroid = mesh.vertices.mean(axis=0)
        raw_n = int(np.ceil(4.0 * n_points / visibility_fraction))
        raw, _, _ = mesh.sample_surface(raw_n, rng)
        theta = np.arctan2(raw[:, 1] - centroid[1], raw[:, 0] - centroid[0])
        rel = np.mod(theta - theta0, 2.0 * np.pi)
        keep = raw[rel <= width]
        if len(keep) < n_points:  # pragma: no cover - 4x oversampling covers our geometries
            raise ConfigError("visibility sector too small for requested point count")
        points = keep[:n_points]

    points = true_pose.apply(points)
    if noise_sigma > 0:
        points = points + rng.normal(0.0, noise_sigma, size=points.shape)
    return PointCloud(points=points, frame="camera")
