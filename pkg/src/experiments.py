"""
Comparison Sweeps

- step-size: MMD against step size, preconditioned (per decay) vs plain chains
- objective: warm-start objectives forward / reverse / jeffreys / none (+ VAE)
- convergence: per-epoch MMD of LPC against the VAE baseline

Every cell trains from the same base ExperimentConfig with only the swept
fields changed, writes into its own directory and echoes its full config in
its result row. Cells run in worker processes, capped by LPC_NUM_THREADS.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import plotly.graph_objects as go

from config import ExperimentConfig, num_workers
from datasets import Dataset
from evaluation import density_coverage, median_bandwidth, mmd_rbf
from random_streams import EVALUATION, stream_generator
from trainer import TrainingMethod, WarmStartObjective, fit

logger = logging.getLogger(__name__)

STEP_SIZES = (0.001, 0.01, 0.1, 0.5)
PRECOND_DECAYS = (0.0, 0.25, 0.9, 0.99)
OBJECTIVES = ("forward", "reverse", "jeffreys", "none")


@dataclass
class SweepCell:
    """One training run of a sweep"""
    tag: str
    config: ExperimentConfig
    labels: Dict[str, object] = field(default_factory=dict)


def _flatten(prefix: str, values: dict) -> dict:
    return {f"{prefix}.{k}": (", ".join(map(str, v)) if isinstance(v, (list, tuple)) else v)
            for k, v in values.items()}


def config_echo(config: ExperimentConfig) -> dict:
    """Every hyperparameter of a cell as flat `section.key` columns"""
    echo = {}
    echo.update(_flatten("train", config.train.to_dict()))
    echo.update(_flatten("model", config.model.to_dict()))
    echo.update(_flatten("dataset", config.dataset.to_dict()))
    return echo


def run_cell(cell: SweepCell, data: np.ndarray, output_dir: Optional[str], bandwidth: float) -> dict:
    """Train one cell and score its ancestral samples against the data"""
    config = replace(cell.config, output_dir=str(Path(output_dir) / cell.tag) if output_dir else "")
    artifacts = fit(data, config)
    count = min(config.eval_samples, data.shape[0])
    real = data[:count]
    fake = artifacts.state.gen.ancestral_sample(count, stream_generator(config.train.seed, EVALUATION))

    row = {"tag": cell.tag, **cell.labels}
    metrics = artifacts.metrics
    row["final_elbo"] = float(metrics["elbo"].iloc[-1]) if len(metrics) else float("nan")
    row["diverged_batches"] = int(metrics["diverged"].sum()) if len(metrics) else 0
    first = metrics[metrics["epoch"] == metrics["epoch"].min()] if len(metrics) else metrics
    last = metrics[metrics["epoch"] == metrics["epoch"].max()] if len(metrics) else metrics
    row["grad_norm_init_first"] = float(first["grad_norm_init"].mean()) if len(first) else float("nan")
    row["grad_norm_init_last"] = float(last["grad_norm_init"].mean()) if len(last) else float("nan")
    if np.isfinite(fake).all():
        row["mmd"] = mmd_rbf(real, fake, bandwidth)
        if count > config.density_k:
            row["density"], row["coverage"] = density_coverage(real, fake, config.density_k)
    else:
        logger.warning("Cell %s produced non-finite samples", cell.tag)
        row["mmd"] = float("nan")
    if not artifacts.evaluations.empty:
        row["eval_curve"] = artifacts.evaluations.to_dict("records")
    row.update(config_echo(config))
    return row


def run_cells(cells: Sequence[SweepCell],
              data: np.ndarray,
              output_dir: Optional[Union[str, Path]] = None,
              workers: Optional[int] = None) -> List[dict]:
    """Run cells serially or in a process pool; rows come back in cell order"""
    workers = workers or num_workers()
    out = str(output_dir) if output_dir else None
    bandwidth = median_bandwidth(data[:max(c.config.eval_samples for c in cells)])
    logger.info("Running %d sweep cells on %d worker(s)", len(cells), workers)
    if workers == 1:
        return [run_cell(cell, data, out, bandwidth) for cell in cells]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_cell, cell, data, out, bandwidth) for cell in cells]
        return [f.result() for f in futures]


def _as_array(dataset: Union[Dataset, np.ndarray]) -> np.ndarray:
    return dataset.data if isinstance(dataset, Dataset) else np.asarray(dataset, dtype=np.float64)


# ============================================================================
# SWEEPS
# ============================================================================

def step_size_cells(base: ExperimentConfig,
                    step_sizes: Sequence[float] = STEP_SIZES,
                    decays: Sequence[float] = PRECOND_DECAYS,
                    seeds: Optional[Sequence[int]] = None) -> List[SweepCell]:
    """(step size x {plain, preconditioned per decay} x seed) cells"""
    cells = []
    for seed in seeds or [base.train.seed]:
        for gamma in step_sizes:
            arms = [(False, None)] + [(True, beta) for beta in decays]
            for precond, beta in arms:
                train = replace(base.train, step_size=gamma, precond_enabled=precond, seed=seed,
                                precond_decay=beta if precond else base.train.precond_decay)
                tag = f"gamma{gamma:g}_{'beta' + format(beta, 'g') if precond else 'plain'}_seed{seed}"
                cells.append(SweepCell(tag=tag, config=replace(base, train=train),
                                       labels={"gamma": gamma, "precond": precond,
                                               "beta": beta if precond else float("nan"), "seed": seed}))
    return cells


def step_size_sweep(base: ExperimentConfig,
                    dataset: Union[Dataset, np.ndarray],
                    output_dir: Optional[Union[str, Path]] = None,
                    step_sizes: Sequence[float] = STEP_SIZES,
                    decays: Sequence[float] = PRECOND_DECAYS,
                    seeds: Optional[Sequence[int]] = None,
                    workers: Optional[int] = None) -> pd.DataFrame:
    """One row per (step size, decay, preconditioning, seed) cell"""
    cells = step_size_cells(base, step_sizes, decays, seeds)
    rows = run_cells(cells, _as_array(dataset), output_dir, workers)
    frame = pd.DataFrame(rows).drop(columns=["eval_curve"], errors="ignore")
    if output_dir:
        _write_sweep(frame, Path(output_dir), "step_size", step_size_figure(frame))
    return frame


def objective_cells(base: ExperimentConfig,
                    objectives: Sequence[str] = OBJECTIVES,
                    include_vae: bool = False,
                    seeds: Optional[Sequence[int]] = None) -> List[SweepCell]:
    cells = []
    for seed in seeds or [base.train.seed]:
        for name in objectives:
            train = replace(base.train, objective=WarmStartObjective(name), method=TrainingMethod.LPC, seed=seed)
            cells.append(SweepCell(tag=f"{name}_seed{seed}", config=replace(base, train=train),
                                   labels={"objective": name, "method": "lpc", "seed": seed}))
        if include_vae:
            train = replace(base.train, method=TrainingMethod.VAE, seed=seed)
            cells.append(SweepCell(tag=f"vae_seed{seed}", config=replace(base, train=train),
                                   labels={"objective": "vae", "method": "vae", "seed": seed}))
    return cells


def objective_sweep(base: ExperimentConfig,
                    dataset: Union[Dataset, np.ndarray],
                    output_dir: Optional[Union[str, Path]] = None,
                    objectives: Sequence[str] = OBJECTIVES,
                    include_vae: bool = False,
                    seeds: Optional[Sequence[int]] = None,
                    workers: Optional[int] = None) -> pd.DataFrame:
    """One row per warm-start objective (and seed)"""
    cells = objective_cells(base, objectives, include_vae, seeds)
    rows = run_cells(cells, _as_array(dataset), output_dir, workers)
    frame = pd.DataFrame(rows).drop(columns=["eval_curve"], errors="ignore")
    if output_dir:
        _write_sweep(frame, Path(output_dir), "objective", None)
    return frame


def convergence_comparison(base: ExperimentConfig,
                           dataset: Union[Dataset, np.ndarray],
                           output_dir: Optional[Union[str, Path]] = None,
                           seeds: Optional[Sequence[int]] = None,
                           workers: Optional[int] = None) -> pd.DataFrame:
    """
    Per-epoch MMD curves of LPC (jeffreys) and the VAE baseline

    The returned frame has one row per (method, seed, epoch). Its attrs hold,
    per seed, the first SGD iteration at which LPC matches the VAE's final MMD.
    """
    base = replace(base, eval_every=1, metrics=("mmd",))
    cells = []
    for seed in seeds or [base.train.seed]:
        lpc = replace(base.train, method=TrainingMethod.LPC, objective=WarmStartObjective.JEFFREYS, seed=seed)
        vae = replace(base.train, method=TrainingMethod.VAE, seed=seed)
        cells.append(SweepCell(tag=f"lpc_seed{seed}", config=replace(base, train=lpc),
                               labels={"method": "lpc", "seed": seed}))
        cells.append(SweepCell(tag=f"vae_seed{seed}", config=replace(base, train=vae),
                               labels={"method": "vae", "seed": seed}))
    rows = run_cells(cells, _as_array(dataset), output_dir, workers)

    curve_rows = []
    for row in rows:
        for point in row.get("eval_curve", []):
            curve_rows.append({"method": row["method"], "seed": row["seed"], "epoch": point["epoch"],
                               "step": point["step"], "mmd": point["mmd"]})
    curves = pd.DataFrame(curve_rows, columns=["method", "seed", "epoch", "step", "mmd"])
    curves.attrs["lpc_matches_vae_at"] = iterations_to_match(curves)
    if output_dir:
        _write_sweep(curves, Path(output_dir), "convergence", convergence_figure(curves))
    return curves


def iterations_to_match(curves: pd.DataFrame) -> Dict[int, Optional[int]]:
    """Per seed, the first LPC step whose MMD is at or below the VAE's final MMD"""
    result = {}
    for seed, group in curves.groupby("seed"):
        vae = group[group["method"] == "vae"].sort_values("step")
        lpc = group[group["method"] == "lpc"].sort_values("step")
        if vae.empty or lpc.empty:
            result[int(seed)] = None
            continue
        target = float(vae["mmd"].iloc[-1])
        reached = lpc[lpc["mmd"] <= target]
        result[int(seed)] = int(reached["step"].iloc[0]) if len(reached) else None
    return result


# ============================================================================
# OUTPUT
# ============================================================================

def step_size_figure(frame: pd.DataFrame) -> go.Figure:
    fig = go.Figure()
    for (precond, beta), group in frame.groupby(["precond", "beta"], dropna=False):
        summary = group.groupby("gamma")["mmd"].mean().sort_index()
        name = f"preconditioned, beta={beta:g}" if precond else "plain ULA"
        fig.add_trace(go.Scatter(x=summary.index, y=summary.values, mode="lines+markers", name=name))
    fig.update_layout(
        title="Sample quality against Langevin step size",
        xaxis_title="Step size",
        yaxis_title="MMD^2",
        xaxis_type="log",
        height=500,
    )
    return fig


def convergence_figure(curves: pd.DataFrame) -> go.Figure:
    fig = go.Figure()
    for (method, seed), group in curves.groupby(["method", "seed"]):
        fig.add_trace(go.Scatter(x=group["step"], y=group["mmd"], mode="lines",
                                 name=f"{method.upper()} (seed {seed})"))
    fig.update_layout(
        title="MMD during training",
        xaxis_title="SGD iterations",
        yaxis_title="MMD^2",
        height=500,
    )
    return fig


def _write_sweep(frame: pd.DataFrame, out: Path, name: str, figure: Optional[go.Figure]):
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.csv"
    try:
        frame.to_csv(path, index=False)
        if figure is not None:
            figure.write_html(str(out / f"{name}.html"), include_plotlyjs="cdn")
    except OSError as exc:
        raise OSError(f"could not write sweep results under {out}: {exc}") from exc
    logger.info("Sweep results written: %s (%d rows)", path, len(frame))
