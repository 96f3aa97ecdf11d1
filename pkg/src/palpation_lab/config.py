"""JSON config file formats for the CLI and the HTTP service.

Two documents drive a run. The phantom config describes the organ and the
synthetic cloud:

    {"mesh": "builtin" | "path/to/organ.obj",
     "stiffness": {"background_stiffness_n_per_mm": 0.3,
                   "inclusions": [{"center_uv": [0.62, 0.55], "radius_uv": 0.1,
                                   "stiffness_n_per_mm": 1.0, "smoothing_uv": 0.03}]},
     "cloud": {"noise_sigma_mm": 1.5, "visibility_fraction": 0.6, "n_points": 5000,
               "seed": 7,
               "true_pose": {"rotation_wxyz": [1,0,0,0], "translation_mm": [0,0,0]}
               # or: "random_pose": {"angle_deg": 10, "translation_mm": 10}
              }}

The search config holds ROI, threshold, GP hyperparameters, probe and sensor
settings, budget, and seed; see ``parse_search_config``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .mesh import make_organ_mesh
from .phantom import PhantomModel, PointCloud, StiffnessField, load_phantom, synthesize_cloud
from .probing import ProbeParams, SensorModel
from .search import ROI, GpHyperParams, SearchConfig, ThresholdRule
from .stiffness import RansacParams
from .transforms import RigidTransform


@dataclass(frozen=True)
class CloudParams:
    noise_sigma: float = 1.5
    visibility_fraction: float = 0.6
    n_points: int = 5000
    seed: int = 0
    true_pose: RigidTransform | None = None  # None -> random within the caps below
    random_angle_deg: float = 10.0
    random_translation_mm: float = 10.0

    def resolve_pose(self, rng: np.random.Generator) -> RigidTransform:
        if self.true_pose is not None:
            return self.true_pose
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = np.deg2rad(rng.uniform(0.0, self.random_angle_deg))
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        shift = rng.uniform(0.0, self.random_translation_mm) * direction
        return RigidTransform.from_axis_angle(axis, angle, shift)


@dataclass(frozen=True)
class PhantomSpec:
    mesh_source: str  # "builtin" or an OBJ path
    stiffness: StiffnessField
    cloud: CloudParams

    def build(self) -> PhantomModel:
        if self.mesh_source == "builtin":
            return load_phantom(make_organ_mesh(), self.stiffness)
        return load_phantom(self.mesh_source, self.stiffness)

    def make_cloud(self, phantom: PhantomModel) -> tuple[PointCloud, RigidTransform]:
        rng = np.random.default_rng(self.cloud.seed)
        pose = self.cloud.resolve_pose(rng)
        cloud = synthesize_cloud(
            phantom,
            pose,
            noise_sigma=self.cloud.noise_sigma,
            visibility_fraction=self.cloud.visibility_fraction,
            n_points=self.cloud.n_points,
            rng=rng,
        )
        return cloud, pose


def _as_dict(source) -> dict:
    if isinstance(source, (str, Path)):
        try:
            return json.loads(Path(source).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {source}: {exc}") from exc
    if isinstance(source, dict):
        return source
    raise ConfigError(f"config must be a path or dict, got {type(source).__name__}")


def parse_cloud_params(d: dict) -> CloudParams:
    pose = None
    angle_cap, shift_cap = 10.0, 10.0
    if "true_pose" in d:
        p = d["true_pose"]
        pose = RigidTransform(
            rotation=np.asarray(p["rotation_wxyz"], dtype=float),
            translation=np.asarray(p["translation_mm"], dtype=float),
        )
    elif "random_pose" in d:
        angle_cap = float(d["random_pose"].get("angle_deg", 10.0))
        shift_cap = float(d["random_pose"].get("translation_mm", 10.0))
    return CloudParams(
        noise_sigma=float(d.get("noise_sigma_mm", 1.5)),
        visibility_fraction=float(d.get("visibility_fraction", 0.6)),
        n_points=int(d.get("n_points", 5000)),
        seed=int(d.get("seed", 0)),
        true_pose=pose,
        random_angle_deg=angle_cap,
        random_translation_mm=shift_cap,
    )


def parse_phantom_config(source) -> PhantomSpec:
    d = _as_dict(source)
    try:
        stiffness = StiffnessField.from_json_dict(d["stiffness"])
    except KeyError as exc:
        raise ConfigError("phantom config needs a 'stiffness' section") from exc
    return PhantomSpec(
        mesh_source=str(d.get("mesh", "builtin")),
        stiffness=stiffness,
        cloud=parse_cloud_params(d.get("cloud", {})),
    )


def parse_search_config(source, roi: ROI | None = None) -> SearchConfig:
    d = _as_dict(source)
    if "roi" in d:
        roi = ROI.from_json_dict(d["roi"])
    if roi is None:
        raise ConfigError("search config needs an 'roi' section (or one set separately)")

    th = d.get("threshold", {})
    threshold = ThresholdRule(
        explicit=float(th["h"]) if "h" in th and th["h"] is not None else None,
        omega=float(th.get("omega", 0.6)),
    )
    gp_d = d.get("gp", {})
    gp = GpHyperParams(
        lengthscale=float(gp_d.get("lengthscale", 0.1)),
        signal_variance=(
            float(gp_d["signal_variance"]) if gp_d.get("signal_variance") is not None else None
        ),
        noise_variance=float(gp_d.get("noise_variance", 0.01)),
        prior_mean=float(gp_d.get("prior_mean", 0.0)),
    )
    pr = d.get("probe", {})
    probe = ProbeParams(
        lam=float(pr.get("lambda_mm", 10.0)),
        d_max=float(pr.get("d_max_mm", 8.0)),
        f_max=float(pr.get("f_max_n", 10.0)),
        z_safe=float(pr.get("z_safe_mm", 30.0)),
    )
    se = d.get("sensor", {})
    sensor = SensorModel(
        noise_sigma=float(se.get("noise_sigma_n", 0.05)),
        baseline=float(se["baseline_n"]) if se.get("baseline_n") is not None else None,
        outlier_rate=float(se.get("outlier_rate", 0.05)),
        outlier_scale=float(se.get("outlier_scale", 0.5)),
    )
    ra = d.get("ransac", {})
    ransac = RansacParams(
        iterations=int(ra.get("iterations", 200)),
        inlier_tol=float(ra.get("inlier_tol_n", 0.15)),
        min_inliers=int(ra["min_inliers"]) if ra.get("min_inliers") is not None else None,
        seed=int(ra.get("seed", 0)),
    )
    epsilon = d.get("epsilon")
    return SearchConfig(
        roi=roi,
        beta=float(d.get("beta", 9.0)),
        epsilon=float(epsilon) if epsilon is not None else None,
        threshold=threshold,
        gp=gp,
        probe=probe,
        sensor=sensor,
        ransac=ransac,
        budget=int(d.get("budget", 50)),
        seed=int(d.get("seed", 0)),
    )


def search_config_to_dict(cfg: SearchConfig) -> dict:
    """Inverse of parse_search_config (round-trips through JSON)."""
    return {
        "roi": cfg.roi.to_json_dict(),
        "beta": cfg.beta,
        "epsilon": cfg.epsilon,
        "threshold": {"h": cfg.threshold.explicit, "omega": cfg.threshold.omega},
        "gp": {
            "lengthscale": cfg.gp.lengthscale,
            "signal_variance": cfg.gp.signal_variance,
            "noise_variance": cfg.gp.noise_variance,
            "prior_mean": cfg.gp.prior_mean,
        },
        "probe": {
            "lambda_mm": cfg.probe.lam,
            "d_max_mm": cfg.probe.d_max,
            "f_max_n": cfg.probe.f_max,
            "z_safe_mm": cfg.probe.z_safe,
        },
        "sensor": {
            "noise_sigma_n": cfg.sensor.noise_sigma,
            "baseline_n": cfg.sensor.baseline,
            "outlier_rate": cfg.sensor.outlier_rate,
            "outlier_scale": cfg.sensor.outlier_scale,
        },
        "ransac": {
            "iterations": cfg.ransac.iterations,
            "inlier_tol_n": cfg.ransac.inlier_tol,
            "min_inliers": cfg.ransac.min_inliers,
            "seed": cfg.ransac.seed,
        },
        "budget": cfg.budget,
        "seed": cfg.seed,
    }


def phantom_spec_to_dict(spec: PhantomSpec) -> dict:
    cloud: dict = {
        "noise_sigma_mm": spec.cloud.noise_sigma,
        "visibility_fraction": spec.cloud.visibility_fraction,
        "n_points": spec.cloud.n_points,
        "seed": spec.cloud.seed,
    }
    if spec.cloud.true_pose is not None:
        cloud["true_pose"] = spec.cloud.true_pose.to_json_dict()
    else:
        cloud["random_pose"] = {
            "angle_deg": spec.cloud.random_angle_deg,
            "translation_mm": spec.cloud.random_translation_mm,
        }
    return {
        "mesh": spec.mesh_source,
        "stiffness": spec.stiffness.to_json_dict(),
        "cloud": cloud,
    }
