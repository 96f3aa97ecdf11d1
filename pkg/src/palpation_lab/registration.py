"""Rigid registration: closed-form absolute orientation plus trimmed ICP.

``horn_fit`` solves the correspondence problem exactly (quaternion eigenvector
formulation), and ``icp_register`` alternates nearest-point-on-surface lookups
with that closed form, discarding the worst fraction of matches each round so a
partial-view cloud doesn't drag the fit toward unseen regions.

Conventions: the returned transform maps *model* coordinates into the *camera*
frame (the frame the point cloud lives in). RMSE is point-to-surface, mm.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateGeometryError, RegistrationError
from .mesh import TriMesh
from .phantom import PointCloud
from .transforms import RigidTransform, quat_to_matrix

COLLINEAR_REL_TOL = 1e-9


def horn_fit(src, dst) -> tuple[RigidTransform, float]:
    """Least-squares rigid transform T minimizing sum ||T(src_i) - dst_i||^2, with its rmse.

    Closed form: the optimal rotation is the eigenvector of the 4x4 profile
    matrix built from the centered cross-covariance, taken at the largest
    eigenvalue; translation then aligns the centroids.
    """
    src = np.atleast_2d(np.asarray(src, dtype=float))
    dst = np.atleast_2d(np.asarray(dst, dtype=float))
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise RegistrationError("src and dst must be equal-length (N,3) arrays")
    n = len(src)
    if n < 3:
        raise RegistrationError("fewer than 3 correspondences")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise RegistrationError("non-finite points")

    src_centroid = src.mean(axis=0)
    dst_centroid = dst.mean(axis=0)
    p = src - src_centroid
    q = dst - dst_centroid

    sv = np.linalg.svd(p, compute_uv=False)
    if sv[1] <= COLLINEAR_REL_TOL * max(sv[0], 1.0):
        raise DegenerateGeometryError("degenerate (collinear) point configuration")

    s = p.T @ q  # s[a, b] = sum_i p[i, a] * q[i, b]
    sxx, sxy, sxz = s[0]
    syx, syy, syz = s[1]
    szx, szy, szz = s[2]
    profile = np.array(
        [
            [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
            [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
            [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
            [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
        ]
    )
    eigvals, eigvecs = np.linalg.eigh(profile)
    quat = eigvecs[:, -1]  # wxyz, unit by construction
    rot = quat_to_matrix(quat)
    translation = dst_centroid - rot @ src_centroid
    transform = RigidTransform(rotation=quat, translation=translation)
    return transform, rmse(transform, src, dst)


def rmse(transform: RigidTransform, src, dst) -> float:
    """Root-mean-square residual of T(src) against dst, mm."""
    src = np.atleast_2d(np.asarray(src, dtype=float))
    dst = np.atleast_2d(np.asarray(dst, dtype=float))
    if src.shape != dst.shape or len(src) < 1:
        raise RegistrationError("src and dst must be equal-length, non-empty")
    residual = transform.apply(src) - dst
    return float(np.sqrt(np.mean(np.sum(residual * residual, axis=1))))


@dataclass(frozen=True)
class IcpParams:
    max_iterations: int = 100
    convergence_tol_mm: float = 1e-4
    trim_fraction: float = 0.1
    # fit each round on at most this many evenly-strided points (0 = all);
    # the reported rmse always re-scores the full cloud at the final pose
    max_fit_points: int = 3000

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if not (0.0 <= self.trim_fraction < 1.0):
            raise ConfigError("trim_fraction must lie in [0, 1)")
        if self.convergence_tol_mm < 0:
            raise ConfigError("convergence_tol_mm must be non-negative")
        if self.max_fit_points < 0:
            raise ConfigError("max_fit_points must be >= 0 (0 keeps every point)")


@dataclass(frozen=True)
class RegistrationResult:
    transform: RigidTransform  # model -> camera
    rmse: float  # trimmed point-to-surface, mm
    iterations: int
    elapsed: float  # seconds
    converged: bool
    rmse_history: tuple = ()  # trimmed rmse after each accepted iterate

    def __post_init__(self):
        if self.rmse < 0 or self.iterations < 1:
            raise RegistrationError("rmse must be >= 0 and iterations >= 1")

    def to_json_dict(self) -> dict:
        return {
            "rotation_wxyz": self.transform.rotation.tolist(),
            "translation_mm": self.transform.translation.tolist(),
            "rmse": self.rmse,
            "iterations": self.iterations,
            "elapsed_s": self.elapsed,
            "converged": self.converged,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "RegistrationResult":
        return cls(
            transform=RigidTransform(
                rotation=np.asarray(d["rotation_wxyz"], dtype=float),
                translation=np.asarray(d["translation_mm"], dtype=float),
            ),
            rmse=float(d["rmse"]),
            iterations=int(d["iterations"]),
            elapsed=float(d["elapsed_s"]),
            converged=bool(d["converged"]),
        )


def _principal_axes(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    centroid = points.mean(axis=0)
    cov = np.cov((points - centroid).T)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    axes = eigvecs[:, order]
    if np.linalg.det(axes) < 0:
        axes[:, 2] = -axes[:, 2]
    return centroid, axes


_AXIS_FLIPS = (
    np.diag([1.0, 1.0, 1.0]),
    np.diag([1.0, -1.0, -1.0]),
    np.diag([-1.0, 1.0, -1.0]),
    np.diag([-1.0, -1.0, 1.0]),
)


def _pca_init(cloud_pts: np.ndarray, model: TriMesh) -> RigidTransform:
    """Centroid + principal-axes alignment (cloud -> model), best of the 4 proper flips."""
    c_cloud, a_cloud = _principal_axes(cloud_pts)
    c_model, a_model = _principal_axes(model.vertices)
    stride = max(1, len(cloud_pts) // 500)
    probe = cloud_pts[::stride]
    index = model.surface_index()
    best: RigidTransform | None = None
    best_score = np.inf
    for flip in _AXIS_FLIPS:
        rot = a_model @ flip @ a_cloud.T
        t = RigidTransform.from_matrix(rot, c_model - rot @ c_cloud)
        d, _, _ = index.query(t.apply(probe))
        score = float(np.sqrt(np.mean(d * d)))
        if score < best_score:
            best, best_score = t, score
    return best


def _vec7(t: RigidTransform, ref: np.ndarray | None = None) -> np.ndarray:
    """Pose as a 7-vector (quat wxyz + translation), sign-aligned to ref."""
    q = t.rotation
    if ref is not None and float(q @ ref[:4]) < 0.0:
        q = -q
    return np.concatenate([q, t.translation])


def _from_vec7(v: np.ndarray) -> RigidTransform:
    return RigidTransform(rotation=v[:4] / np.linalg.norm(v[:4]), translation=v[4:])


_EXTRAP_ANGLE_COS = np.cos(np.deg2rad(10.0))
_EXTRAP_STEP_CAP = 25.0


def _extrapolate(hist_v: list, hist_r: list) -> np.ndarray | None:
    """Extrapolation along the recent update direction (when aligned).

    Point-to-point refits slide tangentially along smooth surfaces in tiny,
    nearly collinear steps; fitting rmse against arc length over the last three
    iterates and jumping to the parabola's minimum (or, when the decay is still
    linear, the line's zero crossing) skips most of that walk. Callers validate
    the jump against the measured rmse, so an overshoot costs one evaluation.
    """
    d1 = hist_v[2] - hist_v[1]
    d2 = hist_v[1] - hist_v[0]
    n1 = float(np.linalg.norm(d1))
    n2 = float(np.linalg.norm(d2))
    if n1 < 1e-12 or n2 < 1e-12 or float(d1 @ d2) < _EXTRAP_ANGLE_COS * n1 * n2:
        return None
    x1, x2 = -n1, -(n1 + n2)
    r0, rm1, rm2 = hist_r[2], hist_r[1], hist_r[0]
    denom = x1 * x2 * (x1 - x2)
    a = (x2 * (rm1 - r0) - x1 * (rm2 - r0)) / denom
    b = (x1 * x1 * (rm2 - r0) - x2 * x2 * (rm1 - r0)) / denom
    step = 0.0
    if a > 0.0:
        step = -b / (2.0 * a)
    elif rm1 > r0:
        step = n1 * r0 / (rm1 - r0)
    if step <= 0.0:
        return None
    return hist_v[2] + min(step, _EXTRAP_STEP_CAP * n1) * (d1 / n1)


def icp_register(
    cloud: PointCloud,
    model: TriMesh,
    init: RigidTransform | None = None,
    params: IcpParams = IcpParams(),
) -> RegistrationResult:
    """Trimmed point-to-surface ICP of a camera-frame cloud onto a model mesh.

    ``init`` (like the result) is a model->camera guess. Each iteration scores
    the current pose by trimmed point-to-surface RMSE, refits on the kept
    matches, and stops once the improvement drops below the tolerance. That
    score sequence is non-increasing: the refit can only lower the residual on
    the kept pairs, re-trimming keeps the best subset of the new residuals, and
    extrapolated poses are adopted only when their measured score improves.
    """
    start = time.perf_counter()
    pts = cloud.points
    if len(pts) < 3:
        raise RegistrationError("fewer than 3 cloud points")
    index = model.surface_index()

    fit_pts = pts
    if params.max_fit_points and len(pts) > params.max_fit_points:
        stride_idx = np.unique(
            np.round(np.linspace(0, len(pts) - 1, params.max_fit_points)).astype(np.int64)
        )
        fit_pts = pts[stride_idx]
    n_keep = max(3, int(np.ceil((1.0 - params.trim_fraction) * len(fit_pts))))

    def evaluate(t: RigidTransform):
        dists, closest, _ = index.query(t.apply(fit_pts))
        keep = np.argpartition(dists, n_keep - 1)[:n_keep]
        return float(np.sqrt(np.mean(dists[keep] ** 2))), keep, closest

    to_model = init.invert() if init is not None else _pca_init(pts, model)
    r_cur, keep, closest = evaluate(to_model)
    hist_v = [_vec7(to_model)]
    hist_r = [r_cur]
    history = [r_cur]
    prev = np.inf
    converged = False
    iterations = 0
    while True:
        if prev - r_cur < params.convergence_tol_mm:
            converged = True
            break
        if iterations >= params.max_iterations:
            break
        prev = r_cur
        to_model, _ = horn_fit(fit_pts[keep], closest[keep])
        iterations += 1
        r_cur, keep, closest = evaluate(to_model)
        hist_v.append(_vec7(to_model, hist_v[-1]))
        hist_r.append(r_cur)
        if len(hist_v) > 3:
            hist_v.pop(0)
            hist_r.pop(0)
        if len(hist_v) == 3:
            jump = _extrapolate(hist_v, hist_r)
            if jump is not None:
                cand = _from_vec7(jump)
                r_ext, keep_ext, closest_ext = evaluate(cand)
                if r_ext < r_cur:
                    to_model, r_cur = cand, r_ext
                    keep, closest = keep_ext, closest_ext
                    hist_v.append(_vec7(cand, hist_v[-1]))
                    hist_r.append(r_ext)
                    hist_v.pop(0)
                    hist_r.pop(0)
        history.append(r_cur)

    final_rmse = r_cur
    if len(fit_pts) != len(pts):
        dists, _, _ = index.query(to_model.apply(pts))
        n_keep_full = max(3, int(np.ceil((1.0 - params.trim_fraction) * len(pts))))
        kept = np.partition(dists, n_keep_full - 1)[:n_keep_full]
        final_rmse = float(np.sqrt(np.mean(kept**2)))

    return RegistrationResult(
        transform=to_model.invert(),
        rmse=final_rmse,
        iterations=max(iterations, 1),
        elapsed=time.perf_counter() - start,
        converged=converged,
        rmse_history=tuple(history),
    )


# ---------------------------------------------------------------------------
# ascii PLY point cloud I/O (x y z, mm)


def save_ply(cloud: PointCloud, path) -> None:
    lines = [
        "ply",
        "format ascii 1.0",
        f"comment frame {cloud.frame}, units mm",
        f"element vertex {len(cloud)}",
        "property double x",
        "property double y",
        "property double z",
        "end_header",
    ]
    lines.extend(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}" for p in cloud.points)
    Path(path).write_text("\n".join(lines) + "\n")


def load_ply(path, frame: str = "camera") -> PointCloud:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ConfigError("malformed PLY: missing magic")
    n_vertices = None
    body_at = None
    for i, line in enumerate(lines[1:], 1):
        token = line.strip().split()
        if not token:
            continue
        if token[0] == "format" and token[1] != "ascii":
            raise ConfigError("malformed PLY: only ascii supported")
        if token[0] == "element" and token[1] == "vertex":
            n_vertices = int(token[2])
        if token[0] == "end_header":
            body_at = i + 1
            break
    if n_vertices is None or body_at is None:
        raise ConfigError("malformed PLY: incomplete header")
    rows = [ln.split() for ln in lines[body_at : body_at + n_vertices] if ln.strip()]
    if len(rows) != n_vertices:
        raise ConfigError("malformed PLY: vertex count mismatch")
    try:
        points = np.array([[float(r[0]), float(r[1]), float(r[2])] for r in rows])
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"malformed PLY: {exc!r}") from exc
    return PointCloud(points=points, frame=frame)
