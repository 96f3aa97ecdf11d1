"""Virtual palpation probe: plan a descent, execute it against ground truth.

A probe run is a straight-line descent along the inward surface normal: hover
at the approach point, step downward recording (displacement, force) pairs,
and halt the moment either safety limit would be crossed. The force-limit
check happens *before* a sample is recorded, so a run can never log a reading
at or beyond the configured maximum force; the depth limit logs its final
on-limit sample and then stops. Only the descent is recorded — retraction
produces no data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ProbeParamError
from .phantom import PhantomModel, surface_point, true_stiffness

MAX_FORCE_N = 10.0  # admissible contact force
MAX_DEFORMATION_MM = 8.0  # admissible tissue deformation
DEFAULT_STEP_MM = 0.1

GEOM_TOL = 1e-9


@dataclass(frozen=True)
class ProbeParams:
    lam: float = 10.0  # approach offset above the surface, mm
    d_max: float = 8.0  # max penetration, mm
    f_max: float = 10.0  # max contact force, N
    z_safe: float = 30.0  # clearance above the organ bounding box for p1, mm

    def __post_init__(self):
        if self.lam <= 0:
            raise ProbeParamError("approach offset must be positive")
        if not (0.0 < self.d_max <= MAX_DEFORMATION_MM):
            raise ProbeParamError("exceeds admissible deformation")
        if not (0.0 < self.f_max <= MAX_FORCE_N):
            raise ProbeParamError("exceeds admissible force")
        if self.z_safe < 0:
            raise ProbeParamError("z_safe must be non-negative")


@dataclass(frozen=True)
class ProbePlan:
    target_uv: tuple[float, float]
    p0: np.ndarray  # surface point, mm
    n: np.ndarray  # unit outward normal
    p1: np.ndarray  # safe position
    p2: np.ndarray  # approach point = p0 + lam*n
    p3: np.ndarray  # deepest commanded point = p2 - (lam + d_max)*n
    lam: float
    d_max: float
    f_max: float

    def __post_init__(self):
        for name in ("p0", "n", "p1", "p2", "p3"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if abs(np.linalg.norm(self.n) - 1.0) > 1e-6:
            raise ProbeParamError("normal must be unit length")
        if abs(np.linalg.norm(self.p2 - self.p0) - self.lam) > GEOM_TOL:
            raise ProbeParamError("approach point must sit lam above the surface point")
        expected_p3 = self.p2 - (self.lam + self.d_max) * self.n
        if np.max(np.abs(self.p3 - expected_p3)) > GEOM_TOL:
            raise ProbeParamError("descent endpoint inconsistent with lam + d_max")
        if self.d_max > MAX_DEFORMATION_MM:
            raise ProbeParamError("exceeds admissible deformation")
        if self.f_max > MAX_FORCE_N:
            raise ProbeParamError("exceeds admissible force")


@dataclass(frozen=True)
class ProbeRecord:
    plan: ProbePlan
    samples: np.ndarray  # (S, 2): displacement from p2 (mm), force (N)
    termination: str  # "force_limited" | "depth_limited"
    baseline_offset: float = 0.0  # total force already subtracted from samples, N
    stop_penetration: float = 0.0  # where the tool actually halted, mm
    seed: int | None = None

    def __post_init__(self):
        samples = np.ascontiguousarray(self.samples, dtype=float).reshape(-1, 2)
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)
        if self.termination not in ("force_limited", "depth_limited"):
            raise ProbeParamError(f"unknown termination {self.termination!r}")
        d = samples[:, 0]
        if len(d) and (np.any(np.diff(d) <= 0) or d[0] < 0):
            raise ProbeParamError("displacements must be strictly increasing from 0")
        if len(d) and d[-1] > self.plan.lam + self.plan.d_max + GEOM_TOL:
            raise ProbeParamError("displacement beyond commanded descent")

    @property
    def displacements(self) -> np.ndarray:
        return self.samples[:, 0]

    @property
    def forces(self) -> np.ndarray:
        return self.samples[:, 1]

    def to_json_dict(self) -> dict:
        return {
            "target_uv": list(self.plan.target_uv),
            "p0": self.plan.p0.tolist(),
            "n": self.plan.n.tolist(),
            "lambda_mm": self.plan.lam,
            "d_max_mm": self.plan.d_max,
            "f_max_n": self.plan.f_max,
            "samples": self.samples.tolist(),
            "termination": self.termination,
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ProbeRecord":
        p0 = np.asarray(d["p0"], dtype=float)
        n = np.asarray(d["n"], dtype=float)
        lam = float(d["lambda_mm"])
        d_max = float(d["d_max_mm"])
        p2 = p0 + lam * n
        samples = np.asarray(d["samples"], dtype=float).reshape(-1, 2)
        plan = ProbePlan(
            target_uv=tuple(d["target_uv"]),
            p0=p0,
            n=n,
            # p1 is not part of the wire format; rebuild a plausible hover point
            p1=p0 + (lam + d_max + 10.0) * n,
            p2=p2,
            p3=p2 - (lam + d_max) * n,
            lam=lam,
            d_max=d_max,
            f_max=float(d["f_max_n"]),
        )
        stop_pen = float(samples[-1, 0] - lam) if len(samples) else 0.0
        return cls(
            plan=plan,
            samples=samples,
            termination=str(d["termination"]),
            stop_penetration=max(0.0, stop_pen),
            seed=d.get("seed"),
        )


def plan_probe(phantom: PhantomModel, uv, params: ProbeParams = ProbeParams()) -> ProbePlan:
    """Geometry of one probe: surface point, approach point, deepest commanded point."""
    uv = np.asarray(uv, dtype=float).reshape(2)
    p0, n = surface_point(phantom, uv)  # raises UvOffSurfaceError off-atlas
    z_top = phantom.mesh.bbox[1][2]
    p1 = np.array([p0[0], p0[1], z_top + params.z_safe])
    p2 = p0 + params.lam * n
    p3 = p2 - (params.lam + params.d_max) * n
    return ProbePlan(
        target_uv=(float(uv[0]), float(uv[1])),
        p0=p0,
        n=n,
        p1=p1,
        p2=p2,
        p3=p3,
        lam=params.lam,
        d_max=params.d_max,
        f_max=params.f_max,
    )


@dataclass(frozen=True)
class SensorModel:
    noise_sigma: float = 0.05  # N
    baseline: float | None = None  # None -> drawn once per probe from U(0, 0.5) N
    outlier_rate: float = 0.0
    outlier_scale: float = 0.5  # outliers drawn from U(0, outlier_scale * f_max)

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ProbeParamError("noise_sigma must be non-negative")
        if not (0.0 <= self.outlier_rate < 0.5):
            raise ProbeParamError("outlier_rate must lie in [0, 0.5)")
        if not (0.0 < self.outlier_scale <= 1.0):
            raise ProbeParamError("outlier_scale must lie in (0, 1]")
        if self.baseline is not None and self.baseline < 0:
            raise ProbeParamError("baseline must be non-negative")


def execute_probe(
    phantom: PhantomModel,
    plan: ProbePlan,
    sensor: SensorModel = SensorModel(),
    seed: int | None = None,
    step_mm: float = DEFAULT_STEP_MM,
) -> ProbeRecord:
    """Run the descent from p2 toward p3 against the phantom's true stiffness.

    Contact is linear: force = k_true(uv) * penetration, plus baseline and
    sensor noise, with occasional outlier readings replacing the measurement.
    The run halts the first time the *measured* force would reach f_max
    (that reading is acted on, not recorded) or the commanded penetration
    reaches d_max (that on-limit sample is recorded, then motion stops).
    """
    if step_mm <= 0:
        raise ProbeParamError("step_mm must be positive")
    rng = np.random.default_rng(seed)
    k_true = true_stiffness(phantom, plan.target_uv)

    baseline = sensor.baseline if sensor.baseline is not None else rng.uniform(0.0, 0.5)

    total = plan.lam + plan.d_max
    n_steps = int(np.floor(total / step_mm + 1e-9))
    disp = step_mm * np.arange(n_steps + 1)
    if disp[-1] < total - 1e-12:
        disp = np.append(disp, total)
    penetration = np.maximum(0.0, disp - plan.lam)

    noise = rng.normal(0.0, sensor.noise_sigma, size=len(disp)) if sensor.noise_sigma > 0 else np.zeros(len(disp))
    outlier_u = rng.random(len(disp))
    outlier_val = rng.uniform(0.0, sensor.outlier_scale * plan.f_max, size=len(disp))

    force = baseline + k_true * penetration + noise
    is_outlier = outlier_u < sensor.outlier_rate
    force = np.where(is_outlier, outlier_val, force)

    over_force = np.nonzero(force >= plan.f_max)[0]
    trip = int(over_force[0]) if len(over_force) else None
    if trip is not None:
        samples = np.stack([disp[:trip], force[:trip]], axis=1)
        termination = "force_limited"
        stop_pen = float(penetration[trip])
    else:
        samples = np.stack([disp, force], axis=1)
        termination = "depth_limited"
        stop_pen = float(penetration[-1])

    return ProbeRecord(
        plan=plan,
        samples=samples,
        termination=termination,
        baseline_offset=0.0,
        stop_penetration=stop_pen,
        seed=seed,
    )
