"""Turn one probe record into one stiffness scalar.

Two-step recipe: subtract the sensor's resting offset (mean force over the
early, surely-contact-free part of the descent), then fit a line to the
loading region with RANSAC and read the slope off as stiffness. RANSAC keeps
the estimate honest when a fraction of the readings are garbage.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import BaselineError, LineFitError
from .probing import ProbeRecord

# Fraction of the approach offset treated as guaranteed pre-contact.
BASELINE_WINDOW_FRACTION = 0.5
# Contact onset: this many consecutive samples above 3x the pre-contact noise
# scale. Long enough that bursts of high outlier readings rarely fake an onset.
CONTACT_RUN = 7


@dataclass(frozen=True)
class StiffnessSample:
    uv: tuple[float, float]
    stiffness: float  # N/mm, >= 0
    inlier_count: int
    inlier_fraction: float
    intercept: float  # N, in displacement coordinates
    clamped: bool = False  # true when a negative slope was clamped to 0

    def __post_init__(self):
        if self.stiffness < 0 or not (0.0 <= self.inlier_fraction <= 1.0):
            raise LineFitError("invalid stiffness sample")

    def to_json_dict(self) -> dict:
        return {
            "uv": list(self.uv),
            "k_n_per_mm": self.stiffness,
            "inlier_fraction": self.inlier_fraction,
            "intercept_n": self.intercept,
        }


def _pre_contact_mask(record: ProbeRecord) -> np.ndarray:
    return record.displacements <= BASELINE_WINDOW_FRACTION * record.plan.lam


def remove_baseline(record: ProbeRecord) -> ProbeRecord:
    """Subtract the mean pre-contact force from every sample (new record)."""
    mask = _pre_contact_mask(record)
    if not np.any(mask):
        raise BaselineError("cannot estimate baseline")
    offset = float(record.forces[mask].mean())
    samples = record.samples.copy()
    samples[:, 1] -= offset
    return replace(record, samples=samples, baseline_offset=record.baseline_offset + offset)


@dataclass(frozen=True)
class RansacParams:
    iterations: int = 200
    inlier_tol: float = 0.15  # N
    min_inliers: int | None = None  # None -> 40% of the samples
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise LineFitError("iterations must be >= 1")
        if self.inlier_tol <= 0:
            raise LineFitError("inlier_tol must be positive")


def ransac_line_fit(
    samples, params: RansacParams = RansacParams()
) -> tuple[float, float, np.ndarray]:
    """Robust line fit -> (slope, intercept, inlier mask of the winning consensus).

    Two-point seeds, consensus counting, then a least-squares refinement over
    the winning consensus set. Deterministic for a fixed seed.
    """
    samples = np.asarray(samples, dtype=float).reshape(-1, 2)
    n = len(samples)
    if n < 2:
        raise LineFitError("fewer than 2 samples")
    d, f = samples[:, 0], samples[:, 1]
    min_inliers = params.min_inliers if params.min_inliers is not None else int(np.ceil(0.4 * n))

    rng = np.random.default_rng(params.seed)
    best_mask: np.ndarray | None = None
    best_count = 0
    for _ in range(params.iterations):
        i, j = rng.choice(n, size=2, replace=False)
        dx = d[j] - d[i]
        if dx == 0.0:
            continue
        slope = (f[j] - f[i]) / dx
        intercept = f[i] - slope * d[i]
        mask = np.abs(f - (slope * d + intercept)) <= params.inlier_tol
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask

    if best_mask is None or best_count < max(2, min_inliers):
        raise LineFitError("no consistent linear trend")

    a = np.stack([d[best_mask], np.ones(best_count)], axis=1)
    coeff, *_ = np.linalg.lstsq(a, f[best_mask], rcond=None)
    return float(coeff[0]), float(coeff[1]), best_mask


def _contact_onset(record: ProbeRecord) -> int:
    """Index of the first sample of the loading region, or -1 if none found."""
    pre = _pre_contact_mask(record)
    forces = record.forces
    resting = forces[pre]
    # robust noise scale: median absolute deviation, normal-consistent
    mad = float(np.median(np.abs(resting - np.median(resting))))
    threshold = max(3.0 * 1.4826 * mad, 1e-9)
    above = forces > threshold
    if len(above) < CONTACT_RUN:
        return -1
    windows = np.lib.stride_tricks.sliding_window_view(above, CONTACT_RUN)
    hits = np.nonzero(windows.all(axis=1))[0]
    return int(hits[0]) if len(hits) else -1


def estimate_stiffness(
    record: ProbeRecord, ransac: RansacParams | None = None
) -> "StiffnessSample":
    """Baseline removal, contact-onset extraction, RANSAC slope -> stiffness sample."""
    rb = remove_baseline(record)
    onset = _contact_onset(rb)
    if onset < 0 or len(rb.samples) - onset < 2:
        raise LineFitError("no consistent linear trend")
    loading = rb.samples[onset:]
    params = ransac or RansacParams()
    slope, intercept, mask = ransac_line_fit(loading, params)
    clamped = slope < 0
    return StiffnessSample(
        uv=rb.plan.target_uv,
        stiffness=max(slope, 0.0),
        inlier_count=int(mask.sum()),
        inlier_fraction=float(mask.mean()),
        intercept=intercept,
        clamped=clamped,
    )
