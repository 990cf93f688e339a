"""
Sample Quality Metrics and Chain Diagnostics

Metrics:
- Density / coverage from k-nearest-neighbour balls around real points
- Unbiased RBF-kernel MMD^2 (median-heuristic bandwidth by default)

Diagnostics:
- PCA projection of a Langevin trajectory with a -log p(x, z) landscape grid
- Per-step trace summaries (mean and quantiles across chains)
- Integrated autocorrelation time
- Exact posterior of the linear-Gaussian model, used as a test oracle

All functions are pure; writers at the bottom export CSV/JSON/PGM/HTML.
"""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import plotly.graph_objects as go
from scipy import linalg
from sklearn.metrics import pairwise_distances

from datasets import to_gray_levels, write_pgm
from models import GenerativeModel
from sampler import StepTrace

logger = logging.getLogger(__name__)

RADIUS_FLOOR = 1e-12
MAX_CONDITION = 1e12


class IllConditionedError(ValueError):
    """Linear system too ill-conditioned to solve reliably"""


# ============================================================================
# SAMPLE QUALITY
# ============================================================================

@dataclass
class MetricReport:
    """Quality of a generated sample set against real data"""
    density: float
    coverage: float
    mmd: float
    n_real: int
    n_fake: int
    k: int

    def __post_init__(self):
        values = (self.density, self.coverage, self.mmd)
        if not all(np.isfinite(v) for v in values):
            raise ValueError(f"metric report has non-finite values: {values}")
        if not 0.0 <= self.coverage <= 1.0:
            raise ValueError(f"coverage must be in [0, 1], got {self.coverage}")
        if self.density < 0 or self.mmd < 0:
            raise ValueError("density and mmd must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


def _as_points(values: np.ndarray, what: str) -> np.ndarray:
    points = np.asarray(values, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if points.ndim != 2:
        raise ValueError(f"{what}: expected (points, features), got shape {points.shape}")
    return points


def knn_radii_sq(real: np.ndarray, k: int) -> np.ndarray:
    """Squared distance from each real point to its k-th nearest other real point"""
    sq = pairwise_distances(real, real, metric="sqeuclidean")
    radii = np.partition(sq, k, axis=1)[:, k]   # column 0 of the partition is the point itself
    floored = radii < RADIUS_FLOOR ** 2
    if floored.any():
        logger.warning("density/coverage: %d zero k-NN radii (duplicate points) floored at %g",
                       int(floored.sum()), RADIUS_FLOOR)
        radii = np.where(floored, RADIUS_FLOOR ** 2, radii)
    return radii


def density_coverage(real: np.ndarray, fake: np.ndarray, k: int = 5) -> Tuple[float, float]:
    """
    density  = (1 / (k M)) * sum over fake j, real i of 1[d(f_j, r_i) < radius_i]
    coverage = fraction of real points whose k-NN ball holds at least one fake point
    """
    real = _as_points(real, "real")
    fake = _as_points(fake, "fake")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if real.shape[0] < k + 1:
        raise ValueError(f"density_coverage needs at least k+1 = {k + 1} real points, got {real.shape[0]}")
    if fake.shape[0] == 0:
        raise ValueError("density_coverage: no fake points")

    radii = knn_radii_sq(real, k)
    inside = pairwise_distances(real, fake, metric="sqeuclidean") < radii[:, None]
    density = float(inside.sum()) / (k * fake.shape[0])
    coverage = float(inside.any(axis=1).mean())
    return density, coverage


def median_bandwidth(real: np.ndarray, fake: Optional[np.ndarray] = None) -> float:
    """Median pairwise distance over the pooled sample (or `real` alone)"""
    pooled = _as_points(real, "real")
    if fake is not None:
        pooled = np.concatenate([pooled, _as_points(fake, "fake")])
    sq = pairwise_distances(pooled, pooled, metric="sqeuclidean")
    off_diagonal = sq[~np.eye(len(pooled), dtype=bool)]
    median = float(np.sqrt(np.median(off_diagonal))) if off_diagonal.size else 0.0
    return median if median > 0 else 1.0


def mmd_rbf_unbiased(real: np.ndarray, fake: np.ndarray, bandwidth: Optional[float] = None) -> float:
    """Unbiased MMD^2 with kernel exp(-|x - y|^2 / (2 h^2)); may be negative"""
    real = _as_points(real, "real")
    fake = _as_points(fake, "fake")
    m, n = real.shape[0], fake.shape[0]
    if m < 2 or n < 2:
        raise ValueError(f"mmd needs at least 2 points per sample, got {m} and {n}")
    h = median_bandwidth(real, fake) if bandwidth is None else bandwidth
    if h <= 0:
        raise ValueError(f"bandwidth must be positive, got {h}")

    def kernel(a, b):
        return np.exp(-pairwise_distances(a, b, metric="sqeuclidean") / (2.0 * h * h))

    k_xx, k_yy, k_xy = kernel(real, real), kernel(fake, fake), kernel(real, fake)
    return float((k_xx.sum() - np.trace(k_xx)) / (m * (m - 1))
                 + (k_yy.sum() - np.trace(k_yy)) / (n * (n - 1))
                 - 2.0 * k_xy.mean())


def mmd_rbf(real: np.ndarray, fake: np.ndarray, bandwidth: Optional[float] = None) -> float:
    """Reported MMD^2: the unbiased estimate clamped at zero"""
    return max(0.0, mmd_rbf_unbiased(real, fake, bandwidth))


def metric_report(real: np.ndarray, fake: np.ndarray, k: int = 5, bandwidth: Optional[float] = None) -> MetricReport:
    density, coverage = density_coverage(real, fake, k)
    return MetricReport(density=density, coverage=coverage, mmd=mmd_rbf(real, fake, bandwidth),
                        n_real=len(real), n_fake=len(fake), k=k)


# ============================================================================
# TRAJECTORY PROJECTION
# ============================================================================

@dataclass
class TrajectoryProjection:
    """
    A Langevin trajectory seen in the plane of its two leading directions

    `points` (T, 2) are the states relative to the final state, so the last
    row is the origin. `grid[i, j]` is -log p(x, z) at
    z_final + axis_a[j] * components[0] + axis_b[i] * components[1]
    (coordinates divided by `scales` when unit-variance scaling is on).
    """
    points: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    axis_a: np.ndarray
    axis_b: np.ndarray
    grid: np.ndarray
    scales: np.ndarray

    def trajectory_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"step": np.arange(1, len(self.points) + 1),
                             "pc1": self.points[:, 0], "pc2": self.points[:, 1]})


def _grid_axis(values: np.ndarray, resolution: int, margin: float = 0.2) -> np.ndarray:
    low, high = float(values.min()), float(values.max())
    span = high - low if high > low else 1.0
    return np.linspace(low - margin * span, high + margin * span, resolution)


def pca_trajectory_projection(trajectory: Sequence[np.ndarray],
                              model: GenerativeModel,
                              x: np.ndarray,
                              grid_res: int = 50,
                              unit_variance: bool = False) -> TrajectoryProjection:
    """
    PCA of the differences z(t) - z(T) without re-centering

    The components are the leading eigenvectors of D^T D, D stacking the
    difference vectors. The landscape is evaluated over the projected
    bounding box widened by 20% on every side.
    """
    states = np.stack([np.asarray(z, dtype=np.float64).reshape(-1) for z in trajectory])
    if states.shape[0] < 3:
        raise ValueError(f"trajectory needs at least 3 states, got {states.shape[0]}")
    if states.shape[1] < 2:
        raise ValueError(f"latent dimension must be >= 2, got {states.shape[1]}")
    if grid_res < 2:
        raise ValueError(f"grid_res must be >= 2, got {grid_res}")

    final = states[-1]
    diffs = states[:-1] - final
    eigvals, eigvecs = np.linalg.eigh(diffs.T @ diffs)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order]

    total = float(eigvals.sum())
    rank = int(np.sum(eigvals > 1e-12 * max(total, 1e-300)))
    if rank < 2:
        logger.warning("Trajectory differences have rank %d < 2; unused components are zero", rank)
    components = np.zeros((2, states.shape[1]))
    components[:min(rank, 2)] = eigvecs[:, :min(rank, 2)].T
    ratios = eigvals[:2] / total if total > 0 else np.zeros(2)
    ratios[min(rank, 2):] = 0.0

    points = (states - final) @ components.T
    scales = np.ones(2)
    if unit_variance:
        std = points.std(axis=0)
        scales = np.where(std > 0, std, 1.0)
        points = points / scales

    axis_a = _grid_axis(points[:, 0], grid_res)
    axis_b = _grid_axis(points[:, 1], grid_res)
    aa, bb = np.meshgrid(axis_a * scales[0], axis_b * scales[1])
    z_grid = final + aa.reshape(-1, 1) * components[0] + bb.reshape(-1, 1) * components[1]
    x_rows = np.repeat(np.atleast_2d(np.asarray(x, dtype=np.float64)), z_grid.shape[0], axis=0)
    grid = -model.log_joint_terms(x_rows, z_grid).data.reshape(grid_res, grid_res)

    return TrajectoryProjection(points=points, components=components, explained_variance=ratios,
                                axis_a=axis_a, axis_b=axis_b, grid=grid, scales=scales)


# ============================================================================
# TRACE DIAGNOSTICS
# ============================================================================

TRACE_QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


def trace_summary(traces: Sequence[StepTrace], quantiles: Sequence[float] = TRACE_QUANTILES) -> pd.DataFrame:
    """Per-step mean and quantiles of log p, delta log p and gradient norm across all chains"""
    if not traces:
        raise ValueError("trace_summary: no traces")
    lengths = {len(t) for t in traces}
    if len(lengths) != 1:
        raise ValueError(f"trace_summary: traces have different lengths {sorted(lengths)}")

    frame = pd.concat([t.to_frame() for t in traces], ignore_index=True)
    grouped = frame.groupby("step")
    summary = pd.DataFrame({
        "n_chains": grouped["logp"].size(),
        "logp_mean": grouped["logp"].mean(),
        "delta_logp_mean": grouped["delta_logp"].mean(),
        "grad_norm_mean": grouped["grad_norm"].mean(),
    })
    for q in quantiles:
        tag = f"q{int(round(q * 100)):02d}"
        summary[f"delta_logp_{tag}"] = grouped["delta_logp"].quantile(q)
        summary[f"grad_norm_{tag}"] = grouped["grad_norm"].quantile(q)
    return summary.reset_index()


def integrated_autocorrelation_time(chain: np.ndarray, window_factor: float = 5.0) -> Union[float, np.ndarray]:
    """
    tau = 1 + 2 * sum of autocorrelations, truncated at the first lag M with
    M >= window_factor * tau(M). Columns of a 2-D input are separate series.
    """
    series = np.asarray(chain, dtype=np.float64)
    if series.ndim == 1:
        return float(integrated_autocorrelation_time(series[:, None], window_factor)[0])
    n = series.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")

    centered = series - series.mean(axis=0)
    size = 1 << (2 * n - 1).bit_length()
    spectrum = np.fft.rfft(centered, n=size, axis=0)
    acov = np.fft.irfft(spectrum * np.conj(spectrum), n=size, axis=0)[:n]
    taus = np.ones(series.shape[1])
    for j in range(series.shape[1]):
        if acov[0, j] <= 0:
            continue
        rho = acov[:, j] / acov[0, j]
        tau_m = 2.0 * np.cumsum(rho) - 1.0
        window = np.arange(n) >= window_factor * tau_m
        m = int(np.argmax(window)) if window.any() else n - 1
        taus[j] = tau_m[m]
    return taus


# ============================================================================
# LINEAR-GAUSSIAN ORACLE
# ============================================================================

def linear_gaussian_posterior(weight: np.ndarray,
                              bias: np.ndarray,
                              sigma: float,
                              prior_variance: float,
                              x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Exact posterior of z ~ N(0, prior_variance I), x | z ~ N(W z + b, sigma^2 I)

    Sigma_post = (I / prior_variance + W^T W / sigma^2)^-1
    mu_post    = Sigma_post W^T (x - b) / sigma^2   (one row per row of x)
    """
    weight = np.asarray(weight, dtype=np.float64)
    if weight.ndim != 2:
        raise ValueError(f"weight must be (obs_dim, latent_dim), got {weight.shape}")
    obs_dim, latent_dim = weight.shape
    bias = np.asarray(bias, dtype=np.float64).reshape(obs_dim)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != obs_dim:
        raise ValueError(f"x has {x.shape[-1]} features, weight expects {obs_dim}")
    if sigma <= 0 or prior_variance <= 0:
        raise ValueError("sigma and prior_variance must be positive")

    precision = np.eye(latent_dim) / prior_variance + weight.T @ weight / sigma ** 2
    condition = np.linalg.cond(precision)
    if not np.isfinite(condition) or condition > MAX_CONDITION:
        raise IllConditionedError(f"posterior precision has condition number {condition:.3g}")
    factor = linalg.cho_factor(precision)
    covariance = linalg.cho_solve(factor, np.eye(latent_dim))
    mean = linalg.cho_solve(factor, ((x - bias) @ weight).T / sigma ** 2).T
    return mean, covariance


# ============================================================================
# WRITERS
# ============================================================================

def write_report(report: MetricReport, out_dir: Union[str, Path], extra: Optional[dict] = None) -> Tuple[Path, Path]:
    """report.csv (one row) and report.json"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {**report.to_dict(), **(extra or {})}
    csv_path, json_path = out_dir / "report.csv", out_dir / "report.json"
    try:
        pd.DataFrame([payload]).to_csv(csv_path, index=False)
        json_path.write_text(json.dumps(payload, indent=2, default=str))
    except OSError as exc:
        raise OSError(f"could not write report under {out_dir}: {exc}") from exc
    return csv_path, json_path


def landscape_figure(projection: TrajectoryProjection, title: str = "Langevin trajectory") -> go.Figure:
    fig = go.Figure()
    fig.add_trace(go.Contour(
        x=projection.axis_a,
        y=projection.axis_b,
        z=projection.grid,
        colorscale="Viridis",
        colorbar=dict(title="-log p(x, z)"),
        name="-log p",
    ))
    fig.add_trace(go.Scatter(
        x=projection.points[:, 0],
        y=projection.points[:, 1],
        mode="lines+markers",
        name="trajectory",
        line=dict(color="#ef4444", width=2),
        marker=dict(size=4),
    ))
    fig.update_layout(
        title=title,
        xaxis_title=f"PC1 ({projection.explained_variance[0]:.1%})",
        yaxis_title=f"PC2 ({projection.explained_variance[1]:.1%})",
        height=600,
    )
    return fig


def write_projection(projection: TrajectoryProjection, out_dir: Union[str, Path], html: bool = True) -> dict:
    """grid.csv, trajectory.csv, landscape.pgm and (optionally) landscape.html"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "grid": out_dir / "grid.csv",
        "trajectory": out_dir / "trajectory.csv",
        "components": out_dir / "components.csv",
        "heatmap": out_dir / "landscape.pgm",
    }
    try:
        pd.DataFrame(projection.grid, index=projection.axis_b, columns=projection.axis_a).to_csv(paths["grid"])
        projection.trajectory_frame().to_csv(paths["trajectory"], index=False)
        pd.DataFrame(projection.components, index=["pc1", "pc2"]).assign(
            explained_variance=projection.explained_variance).to_csv(paths["components"])
    except OSError as exc:
        raise OSError(f"could not write projection under {out_dir}: {exc}") from exc
    # low energy rendered dark, top row of the image is the largest pc2
    write_pgm(paths["heatmap"], to_gray_levels(projection.grid[::-1]))
    if html:
        paths["html"] = out_dir / "landscape.html"
        landscape_figure(projection).write_html(str(paths["html"]), include_plotlyjs="cdn")
    return paths
