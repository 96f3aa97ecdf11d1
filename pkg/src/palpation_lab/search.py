"""Active stiffness mapping over a UV region of interest.

A Gaussian process models stiffness as a function of uv; the acquisition rule
maintains, per grid point, the running intersection of confidence intervals
C_t = C_{t-1} ∩ [μ_t ± β^½σ_t] and probes wherever the classification
ambiguity a_t = min(hi − h, h − lo) is largest among still-unknown points.
Points whose interval has cleared the threshold band get a permanent
above/below label; the search is done when nothing is left unknown.

A plain upper-confidence-bound selector is included as a comparison baseline.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import BudgetExhausted, ConfigError, IllConditionedKernelError, SearchComplete
from .phantom import PhantomModel
from .probing import ProbeParams, SensorModel, execute_probe, plan_probe
from .stiffness import RansacParams, StiffnessSample, estimate_stiffness

log = logging.getLogger(__name__)

LABEL_UNKNOWN, LABEL_ABOVE, LABEL_BELOW = 0, 1, 2
LABEL_NAMES = {LABEL_UNKNOWN: "unknown", LABEL_ABOVE: "above", LABEL_BELOW: "below"}

DUPLICATE_UV_TOL = 1e-9


# ---------------------------------------------------------------------------
# Gaussian process (squared-exponential kernel, exact solves)


@dataclass(frozen=True)
class GpHyperParams:
    lengthscale: float = 0.1  # UV units
    signal_variance: float | None = None  # None -> 1.0 until 5 obs, then var of first 5
    noise_variance: float = 0.01
    prior_mean: float = 0.0  # N/mm

    def __post_init__(self):
        if self.lengthscale <= 0 or self.noise_variance <= 0:
            raise ConfigError("lengthscale and noise_variance must be positive")
        if self.signal_variance is not None and self.signal_variance <= 0:
            raise ConfigError("signal_variance must be positive")


@dataclass(frozen=True)
class GPState:
    hyper: GpHyperParams
    x: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))  # (n,2) uv
    y: np.ndarray = field(default_factory=lambda: np.zeros(0))  # (n,) N/mm
    counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        for name in ("x", "y", "counts"):
            arr = np.ascontiguousarray(getattr(self, name))
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def n_obs(self) -> int:
        return len(self.y)

    def signal_variance(self) -> float:
        """Effective σ_f²: configured, else 1.0 until 5 observations, then frozen
        at the sample variance of the first 5."""
        if self.hyper.signal_variance is not None:
            return self.hyper.signal_variance
        if self.n_obs < 5:
            return 1.0
        return max(float(np.var(self.y[:5], ddof=1)), 1e-6)


def _se_kernel(a: np.ndarray, b: np.ndarray, lengthscale: float, sf2: float) -> np.ndarray:
    d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
    return sf2 * np.exp(-0.5 * d2 / (lengthscale**2))


def gp_update(state: GPState, sample) -> GPState:
    """Append one (uv, stiffness) observation; duplicates merge by running mean."""
    if isinstance(sample, StiffnessSample):
        uv, value = np.asarray(sample.uv, dtype=float), float(sample.stiffness)
    else:
        uv, value = np.asarray(sample[0], dtype=float).reshape(2), float(sample[1])
    if not np.isfinite(value) or not np.all(np.isfinite(uv)):
        raise ConfigError("observation must be finite")

    if state.n_obs:
        d = np.linalg.norm(state.x - uv, axis=1)
        hit = int(np.argmin(d))
        if d[hit] <= DUPLICATE_UV_TOL:
            log.info("merging duplicate observation at uv=%s", uv.tolist())
            y = state.y.copy()
            counts = state.counts.copy()
            y[hit] = (y[hit] * counts[hit] + value) / (counts[hit] + 1)
            counts[hit] += 1
            return replace(state, y=y, counts=counts)

    return replace(
        state,
        x=np.vstack([state.x, uv[None, :]]),
        y=np.append(state.y, value),
        counts=np.append(state.counts, 1),
    )


def gp_predict(state: GPState, grid_uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact posterior (μ, σ) of the GP at each row of grid_uv."""
    grid_uv = np.atleast_2d(np.asarray(grid_uv, dtype=float))
    sf2 = state.signal_variance()
    m0 = state.hyper.prior_mean
    if state.n_obs == 0:
        return np.full(len(grid_uv), m0), np.full(len(grid_uv), np.sqrt(sf2))

    k_xx = _se_kernel(state.x, state.x, state.hyper.lengthscale, sf2)
    k_xx[np.diag_indices_from(k_xx)] += state.hyper.noise_variance
    try:
        chol = cho_factor(k_xx, lower=True)
    except np.linalg.LinAlgError as exc:
        raise IllConditionedKernelError("ill-conditioned kernel matrix") from exc
    k_star = _se_kernel(grid_uv, state.x, state.hyper.lengthscale, sf2)  # (G, n)
    alpha = cho_solve(chol, state.y - m0)
    mu = m0 + k_star @ alpha
    v = cho_solve(chol, k_star.T)  # (n, G)
    var = sf2 - np.einsum("gn,ng->g", k_star, v)
    var = np.clip(var, 0.0, sf2)
    return mu, np.sqrt(var)


# ---------------------------------------------------------------------------
# Region of interest and search grid


@dataclass(frozen=True)
class ROI:
    """Circle (center + radius) or polygon, in UV coordinates."""

    kind: str  # "circle" | "polygon"
    center_uv: tuple[float, float] | None = None
    radius_uv: float | None = None
    vertices_uv: np.ndarray | None = None
    resolution: int = 25

    def __post_init__(self):
        if self.resolution < 2:
            raise ConfigError("grid resolution must be >= 2")
        if self.kind == "circle":
            if self.center_uv is None or self.radius_uv is None or self.radius_uv <= 0:
                raise ConfigError("circle ROI needs center_uv and positive radius_uv")
            u, v = self.center_uv
            r = self.radius_uv
            if u - r < 0 or u + r > 1 or v - r < 0 or v + r > 1:
                raise ConfigError("ROI must be contained in [0,1]^2")
        elif self.kind == "polygon":
            verts = np.asarray(self.vertices_uv, dtype=float)
            if verts.ndim != 2 or verts.shape[1] != 2 or len(verts) < 3:
                raise ConfigError("polygon ROI needs >= 3 uv vertices")
            if verts.min() < 0 or verts.max() > 1:
                raise ConfigError("ROI must be contained in [0,1]^2")
            area2 = np.sum(
                verts[:, 0] * np.roll(verts[:, 1], -1) - np.roll(verts[:, 0], -1) * verts[:, 1]
            )
            if abs(area2) <= 1e-12:
                raise ConfigError("ROI must have nonzero area")
            verts = np.ascontiguousarray(verts)
            verts.flags.writeable = False
            object.__setattr__(self, "vertices_uv", verts)
        else:
            raise ConfigError(f"unknown ROI kind {self.kind!r}")

    def contains(self, uvs: np.ndarray) -> np.ndarray:
        uvs = np.atleast_2d(np.asarray(uvs, dtype=float))
        if self.kind == "circle":
            d = np.hypot(uvs[:, 0] - self.center_uv[0], uvs[:, 1] - self.center_uv[1])
            return d <= self.radius_uv
        # even-odd crossing number, vectorized over points
        x, y = uvs[:, 0], uvs[:, 1]
        inside = np.zeros(len(uvs), dtype=bool)
        verts = self.vertices_uv
        j = len(verts) - 1
        for i in range(len(verts)):
            xi, yi = verts[i]
            xj, yj = verts[j]
            crosses = (yi > y) != (yj > y)
            with np.errstate(divide="ignore", invalid="ignore"):
                x_at = (xj - xi) * (y - yi) / (yj - yi) + xi
            inside ^= crosses & (x < x_at)
            j = i
        return inside

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "circle":
            c = np.asarray(self.center_uv)
            return c - self.radius_uv, c + self.radius_uv
        return self.vertices_uv.min(axis=0), self.vertices_uv.max(axis=0)

    def to_json_dict(self) -> dict:
        if self.kind == "circle":
            return {
                "type": "circle",
                "center_uv": list(self.center_uv),
                "radius_uv": self.radius_uv,
                "resolution": self.resolution,
            }
        return {
            "type": "polygon",
            "vertices_uv": self.vertices_uv.tolist(),
            "resolution": self.resolution,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ROI":
        kind = d.get("type")
        if kind == "circle":
            return cls(
                kind="circle",
                center_uv=tuple(d["center_uv"]),
                radius_uv=float(d["radius_uv"]),
                resolution=int(d.get("resolution", 25)),
            )
        if kind == "polygon":
            return cls(
                kind="polygon",
                vertices_uv=np.asarray(d["vertices_uv"], dtype=float),
                resolution=int(d.get("resolution", 25)),
            )
        raise ConfigError(f"unknown ROI type {kind!r}")


class SearchGrid:
    """Mutable per-point search state over the in-ROI lattice points.

    The lattice is resolution x resolution over the ROI bounding box, row-major
    (v varies slowest); only points inside the ROI are kept. Intervals start at
    (-inf, +inf) so the first confidence update yields C_1 = Q_1 exactly.
    """

    def __init__(self, roi: ROI):
        self.roi = roi
        r = roi.resolution
        lo, hi = roi.bbox()
        us = np.linspace(lo[0], hi[0], r)
        vs = np.linspace(lo[1], hi[1], r)
        vv, uu = np.meshgrid(vs, us, indexing="ij")  # row-major over (v, u)
        lattice = np.stack([uu.ravel(), vv.ravel()], axis=1)
        self.mask = roi.contains(lattice)
        if not np.any(self.mask):
            raise ConfigError("ROI contains no grid points")
        self.uv = lattice[self.mask]
        g = len(self.uv)
        self.mu = np.zeros(g)
        self.sigma = np.zeros(g)
        self.c_lo = np.full(g, -np.inf)
        self.c_hi = np.full(g, np.inf)
        self.ambiguity = np.full(g, np.inf)
        self.label = np.full(g, LABEL_UNKNOWN, dtype=np.int8)
        self.updates = 0

    def __len__(self) -> int:
        return len(self.uv)

    def to_lattice(self, values: np.ndarray, fill: float = np.nan) -> np.ndarray:
        """Scatter per-point values back onto the full (R, R) lattice."""
        r = self.roi.resolution
        out = np.full(r * r, fill, dtype=float)
        out[self.mask] = values
        return out.reshape(r, r)

    def lattice_extent(self) -> tuple[np.ndarray, np.ndarray]:
        return self.roi.bbox()


def update_confidence(grid: SearchGrid, mu: np.ndarray, sigma: np.ndarray, beta: float) -> SearchGrid:
    """Intersect each point's running interval with [μ ± β^½σ]; never widens.

    An empty intersection collapses to the endpoint of the previous interval
    nearest the new one, preserving lo-nondecreasing / hi-nonincreasing.
    """
    if beta <= 0:
        raise ConfigError("beta must be positive")
    half = np.sqrt(beta) * sigma
    q_lo, q_hi = mu - half, mu + half
    new_lo = np.maximum(grid.c_lo, q_lo)
    new_hi = np.minimum(grid.c_hi, q_hi)
    empty = new_lo > new_hi
    if np.any(empty):
        log.info("confidence intersection empty at %d points; collapsing", int(empty.sum()))
        collapse = np.where(q_lo > grid.c_hi, grid.c_hi, grid.c_lo)
        new_lo[empty] = collapse[empty]
        new_hi[empty] = collapse[empty]
    grid.mu = np.asarray(mu, dtype=float).copy()
    grid.sigma = np.asarray(sigma, dtype=float).copy()
    grid.c_lo = new_lo
    grid.c_hi = new_hi
    grid.updates += 1
    return grid


def ambiguity(c_lo, c_hi, h: float):
    """a = min(hi − h, h − lo); negative once an interval clears the threshold."""
    return np.minimum(np.asarray(c_hi) - h, h - np.asarray(c_lo))


def classify(grid: SearchGrid, h: float, epsilon: float) -> dict:
    """Refresh ambiguity and promote unknown points to above/below; labels are sticky."""
    if epsilon < 0:
        raise ConfigError("epsilon must be non-negative")
    grid.ambiguity = ambiguity(grid.c_lo, grid.c_hi, h)
    unknown = grid.label == LABEL_UNKNOWN
    above = unknown & (grid.c_lo > h - epsilon)
    below = unknown & ~above & (grid.c_hi < h + epsilon)
    grid.label[above] = LABEL_ABOVE
    grid.label[below] = LABEL_BELOW
    return {
        "n_above": int(np.sum(grid.label == LABEL_ABOVE)),
        "n_below": int(np.sum(grid.label == LABEL_BELOW)),
        "n_unknown": int(np.sum(grid.label == LABEL_UNKNOWN)),
    }


def _select_index(grid: SearchGrid) -> int:
    unknown = np.nonzero(grid.label == LABEL_UNKNOWN)[0]
    if len(unknown) == 0:
        raise SearchComplete("search complete")
    return int(unknown[np.argmax(grid.ambiguity[unknown])])


def select_next(grid: SearchGrid) -> np.ndarray:
    """uv of the most ambiguous still-unknown point (ties -> lowest row-major index)."""
    return grid.uv[_select_index(grid)].copy()


def ucb_select(grid: SearchGrid, mu: np.ndarray, sigma: np.ndarray, beta: float) -> np.ndarray:
    """Baseline acquisition: argmax of μ + β^½σ over the whole ROI grid."""
    score = np.asarray(mu) + np.sqrt(beta) * np.asarray(sigma)
    return grid.uv[int(np.argmax(score))].copy()


# ---------------------------------------------------------------------------
# The search session: probe -> estimate -> GP -> intervals -> labels, in a loop


@dataclass(frozen=True)
class ThresholdRule:
    """Explicit level h, or the implicit rule h = ω · max(posterior mean)."""

    explicit: float | None = None
    omega: float = 0.6

    def __post_init__(self):
        if self.explicit is None and not (0.0 < self.omega < 1.0):
            raise ConfigError("omega must lie in (0, 1)")

    def value(self, mu: np.ndarray) -> float:
        if self.explicit is not None:
            return self.explicit
        return self.omega * float(np.max(mu))


@dataclass(frozen=True)
class SearchConfig:
    roi: ROI
    beta: float = 9.0
    epsilon: float | None = None  # None -> 0.05 * effective σ_f
    threshold: ThresholdRule = ThresholdRule()
    gp: GpHyperParams = GpHyperParams()
    probe: ProbeParams = ProbeParams()
    sensor: SensorModel = SensorModel()
    ransac: RansacParams = RansacParams()
    budget: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.beta <= 0:
            raise ConfigError("beta must be positive")
        if self.epsilon is not None and self.epsilon < 0:
            raise ConfigError("epsilon must be non-negative")
        if self.budget < 0:
            raise ConfigError("budget must be non-negative")


@dataclass(frozen=True)
class StepReport:
    step: int
    probed_uv: tuple[float, float]
    probed_index: int
    sample: StiffnessSample
    termination: str
    h: float
    epsilon: float
    n_above: int
    n_below: int
    n_unknown: int
    probe_seed: int

    def to_json_dict(self) -> dict:
        return {
            "step": self.step,
            "probed_uv": list(self.probed_uv),
            "probed_index": self.probed_index,
            "sample": self.sample.to_json_dict(),
            "termination": self.termination,
            "h": self.h,
            "epsilon": self.epsilon,
            "n_above": self.n_above,
            "n_below": self.n_below,
            "n_unknown": self.n_unknown,
            "probe_seed": self.probe_seed,
        }


class SearchSession:
    """Serialized probe-and-update loop over one phantom and ROI."""

    def __init__(self, phantom: PhantomModel, config: SearchConfig):
        self.phantom = phantom
        self.config = config
        self.grid = SearchGrid(config.roi)
        self.gp = GPState(hyper=config.gp)
        self.steps_taken = 0
        self.reports: list[StepReport] = []
        # every grid point must be probe-able up front, not at step 40
        index = phantom.mesh.uv_index()
        for uv in self.grid.uv:
            index.locate(uv)

    def _probe_seed(self, step: int) -> int:
        return int(np.random.SeedSequence((self.config.seed, step)).generate_state(1)[0])

    def current_threshold(self) -> float:
        return self.config.threshold.value(self.grid.mu if self.gp.n_obs else np.array([self.gp.hyper.prior_mean]))

    def current_epsilon(self) -> float:
        if self.config.epsilon is not None:
            return self.config.epsilon
        return 0.05 * np.sqrt(self.gp.signal_variance())

    @property
    def complete(self) -> bool:
        return not np.any(self.grid.label == LABEL_UNKNOWN)

    def step(self) -> StepReport:
        """One acquisition round; raises SearchComplete / BudgetExhausted."""
        if self.complete:
            raise SearchComplete("search complete")
        if self.steps_taken >= self.config.budget:
            raise BudgetExhausted("budget exhausted")
        idx = _select_index(self.grid)
        uv = self.grid.uv[idx]

        seed = self._probe_seed(self.steps_taken)
        plan = plan_probe(self.phantom, uv, self.config.probe)
        record = execute_probe(self.phantom, plan, self.config.sensor, seed=seed)
        sample = estimate_stiffness(record, self.config.ransac)

        self.gp = gp_update(self.gp, sample)
        mu, sigma = gp_predict(self.gp, self.grid.uv)
        update_confidence(self.grid, mu, sigma, self.config.beta)
        h = self.config.threshold.value(mu)
        eps = self.current_epsilon()
        summary = classify(self.grid, h, eps)

        report = StepReport(
            step=self.steps_taken,
            probed_uv=(float(uv[0]), float(uv[1])),
            probed_index=idx,
            sample=sample,
            termination=record.termination,
            h=h,
            epsilon=eps,
            probe_seed=seed,
            **summary,
        )
        self.steps_taken += 1
        self.reports.append(report)
        return report

    def run(self, max_steps: int | None = None) -> list[StepReport]:
        """Step until complete, budget exhausted, or max_steps reached."""
        done: list[StepReport] = []
        while max_steps is None or len(done) < max_steps:
            try:
                done.append(self.step())
            except (SearchComplete, BudgetExhausted):
                break
        return done

    def export_grid(self) -> dict:
        g = self.grid

        def seal(arr):
            return [None if not np.isfinite(x) else float(x) for x in arr]

        return {
            "grid_res": g.roi.resolution,
            "uv": [[float(u), float(v)] for u, v in g.uv],
            "mu": seal(g.mu),
            "sigma": seal(g.sigma),
            "c_lo": seal(g.c_lo),
            "c_hi": seal(g.c_hi),
            "ambiguity": seal(g.ambiguity),
            "label": [LABEL_NAMES[int(code)] for code in g.label],
        }


def superlevel_prediction(grid: SearchGrid, h: float) -> np.ndarray:
    """Point-estimate superlevel set: labeled above, plus unknowns with μ ≥ h."""
    return (grid.label == LABEL_ABOVE) | ((grid.label == LABEL_UNKNOWN) & (grid.mu >= h))


def f1_score(predicted: np.ndarray, truth: np.ndarray) -> float:
    predicted = np.asarray(predicted, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    tp = int(np.sum(predicted & truth))
    fp = int(np.sum(predicted & ~truth))
    fn = int(np.sum(~predicted & truth))
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2.0 * precision * recall / (precision + recall)


def raster_indices(n_points: int, n_probes: int) -> np.ndarray:
    """Evenly spaced sweep over the grid, the non-adaptive comparison baseline."""
    n_probes = min(n_probes, n_points)
    return np.unique(np.round(np.linspace(0, n_points - 1, n_probes)).astype(int))
