#!/usr/bin/env python
"""
Command-line interface for the Langevin predictive coding toolkit

Subcommands:
    train     fit a model from an experiment config
    sample    ancestral samples from a checkpoint (PGM grid or CSV)
    eval      density / coverage / MMD of samples against a dataset
    trace     run Langevin chains and export per-step traces
    project   PCA landscape of one chain trajectory
    compare   step-size, objective and convergence sweeps

Every randomized command takes --seed and is bit-reproducible under it.
Exit code 0 on success, 1 on any failure; a PARTIAL marker file is left in
the output directory when a command fails after writing there.
"""

import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from colorama import Fore, Style, init

from config import ConfigManager, ExperimentConfig
from datasets import (
    Dataset,
    image_grid,
    load_dataset,
    load_vectors_csv,
    write_pgm,
    write_vectors_csv,
)
from evaluation import (
    integrated_autocorrelation_time,
    metric_report,
    pca_trajectory_projection,
    trace_summary,
    write_projection,
    write_report,
)
from experiments import (
    PRECOND_DECAYS,
    STEP_SIZES,
    convergence_comparison,
    objective_sweep,
    step_size_sweep,
)
from models import Likelihood
from random_streams import ANCESTRAL, CHAIN_NOISE, WARM_START, ChainNoise, stream_generator
from sampler import SamplerConfig, run_chain
from trainer import TrainState, fit, load_training_state

logger = logging.getLogger("lpc")

PARTIAL_MARKER = "PARTIAL"


def print_success(text):
    print(f"{Fore.GREEN}✓ {text}{Style.RESET_ALL}")


def print_warning(text):
    print(f"{Fore.YELLOW}⚠ {text}{Style.RESET_ALL}")


def print_error(text):
    print(f"{Fore.RED}✗ {text}{Style.RESET_ALL}", file=sys.stderr)


# ============================================================================
# SHARED HELPERS
# ============================================================================

def _load_config(args) -> ExperimentConfig:
    manager = ConfigManager()
    if getattr(args, "config", None):
        config = manager.load_config(args.config)
    elif getattr(args, "preset", None):
        config = manager.get_preset(args.preset)
    else:
        config = ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        config = replace(config, train=replace(config.train, seed=args.seed))
    return config


def _load_data(args, config: ExperimentConfig) -> Dataset:
    if getattr(args, "data", None):
        dataset = load_vectors_csv(args.data)
    else:
        dataset = load_dataset(config.dataset, config.model.likelihood)
    return dataset


def _load_state(path: str) -> TrainState:
    state, meta = load_training_state(path)
    logger.info("Loaded checkpoint %s (batch %d, epoch %s)", path, state.batch_index, meta.get("epoch"))
    return state


def _image_shape(args, obs_dim: int, likelihood: Likelihood) -> Optional[tuple]:
    if getattr(args, "image_shape", None):
        height, width = (int(v) for v in args.image_shape.lower().split("x"))
        if height * width != obs_dim:
            raise ValueError(f"image shape {height}x{width} does not match {obs_dim} dimensions")
        return height, width
    side = math.isqrt(obs_dim)
    if likelihood == Likelihood.DISCRETIZED_GAUSSIAN and side * side == obs_dim:
        return side, side
    return None


def _output_dir(args) -> Path:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _float_list(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _int_list(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v.strip()]


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_train(args) -> int:
    config = _load_config(args)
    if args.epochs is not None:
        config = replace(config, train=replace(config.train, epochs=args.epochs))
    out = Path(args.output or config.output_dir)
    args.output = str(out)
    config = replace(config, output_dir=str(out))
    dataset = _load_data(args, config)
    out.mkdir(parents=True, exist_ok=True)
    ConfigManager().save_config(config, out / "config.ini")

    artifacts = fit(dataset, config, resume_from=args.resume)
    print_success(f"Trained {len(artifacts.metrics)} batches; checkpoint {artifacts.final_checkpoint}")
    if artifacts.metrics["diverged"].any():
        print_warning(f"{int(artifacts.metrics['diverged'].sum())} batches skipped after chain divergence")
    return 0


def cmd_sample(args) -> int:
    state = _load_state(args.checkpoint)
    out = _output_dir(args)
    rng = stream_generator(args.seed, ANCESTRAL)
    samples = state.gen.ancestral_sample(args.count, rng, return_mean=args.means)
    shape = _image_shape(args, state.gen.obs_dim, state.gen.likelihood)
    if shape is not None and len(samples):
        path = write_pgm(out / "samples.pgm", image_grid(samples, shape, columns=args.columns))
    else:
        path = write_vectors_csv(out / "samples.csv", samples)
    print_success(f"Wrote {len(samples)} samples to {path}")
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    real = _load_data(args, config).data
    if args.fake:
        fake = load_vectors_csv(args.fake).data
    elif args.checkpoint:
        state = _load_state(args.checkpoint)
        fake = state.gen.ancestral_sample(args.count or len(real), stream_generator(args.seed, ANCESTRAL))
    else:
        raise ValueError("eval needs --checkpoint or --fake")
    if args.count:
        real, fake = real[:args.count], fake[:args.count]

    report = metric_report(real, fake, k=args.k, bandwidth=args.bandwidth)
    out = _output_dir(args)
    csv_path, _ = write_report(report, out, extra={"seed": args.seed})
    print_success(f"density {report.density:.4f}  coverage {report.coverage:.4f}  mmd {report.mmd:.6f}  ({csv_path})")
    return 0


def _chain_inputs(args, state: TrainState, x: np.ndarray, batch: int):
    if args.warm_start == "model":
        mu, sigma = state.warm.encode(x)
        eps = stream_generator(args.seed, WARM_START, batch).standard_normal(mu.shape)
        z0 = mu.data + sigma.data * eps
    else:
        z0 = state.gen.sample_prior(x.shape[0], stream_generator(args.seed, WARM_START, batch))
    noise = ChainNoise(args.seed, (CHAIN_NOISE, batch), np.arange(batch * x.shape[0], (batch + 1) * x.shape[0]))
    return z0, noise


def _sampler_config(args, meta_train: dict) -> SamplerConfig:
    return SamplerConfig(
        step_size=args.step_size if args.step_size is not None else meta_train.get("step_size", 0.1),
        steps=args.steps if args.steps is not None else meta_train.get("steps", 300),
        precond_decay=args.decay if args.decay is not None else meta_train.get("precond_decay", 0.99),
        precond_enabled=not args.no_precond,
        noise_scale=0.0 if args.no_noise else 1.0,
        noise_cov=meta_train.get("noise_cov", "inverse_mhat"),
    )


def cmd_trace(args) -> int:
    config = _load_config(args)
    state, meta = load_training_state(args.checkpoint)
    data = _load_data(args, config).data
    sampler = _sampler_config(args, meta.get("train", {}))
    out = _output_dir(args)

    traces = []
    for batch in range(args.batches):
        x = data[batch * args.batch_size:(batch + 1) * args.batch_size]
        if len(x) == 0:
            break
        z0, noise = _chain_inputs(args, state, x, batch)
        _, trace = run_chain(state.gen, x, z0, sampler, noise)
        trace.to_csv(out / f"trace_batch{batch:03d}.csv")
        traces.append(trace)

    summary = trace_summary(traces)
    summary.to_csv(out / "trace_summary.csv", index=False)
    iat = integrated_autocorrelation_time(np.concatenate([t.logp for t in traces], axis=1))
    print_success(f"Traced {sum(t.logp.shape[1] for t in traces)} chains x {sampler.steps} steps; "
                  f"median log p autocorrelation time {float(np.median(iat)):.1f}")
    return 0


def cmd_project(args) -> int:
    config = _load_config(args)
    state, meta = load_training_state(args.checkpoint)
    data = _load_data(args, config).data
    if not 0 <= args.index < len(data):
        raise IndexError(f"--index {args.index} outside dataset of {len(data)} rows")
    x = data[args.index:args.index + 1]
    sampler = _sampler_config(args, meta.get("train", {}))
    z0, noise = _chain_inputs(args, state, x, args.index)
    samples, _ = run_chain(state.gen, x, z0, sampler, noise)

    projection = pca_trajectory_projection(samples, state.gen, x, grid_res=args.grid_res,
                                           unit_variance=args.unit_variance)
    paths = write_projection(projection, _output_dir(args), html=not args.no_html)
    ratio = projection.explained_variance
    print_success(f"Projection written ({ratio[0]:.1%} + {ratio[1]:.1%} explained): {paths['grid']}")
    return 0


def cmd_compare(args) -> int:
    config = _load_config(args)
    if args.epochs is not None:
        config = replace(config, train=replace(config.train, epochs=args.epochs))
    dataset = _load_data(args, config)
    out = _output_dir(args)
    seeds = _int_list(args.seeds) if args.seeds else [config.train.seed]

    if args.sweep == "step-size":
        frame = step_size_sweep(config, dataset, out, step_sizes=_float_list(args.step_sizes),
                                decays=_float_list(args.decays), seeds=seeds, workers=args.workers)
    elif args.sweep == "objective":
        frame = objective_sweep(config, dataset, out, include_vae=args.include_vae, seeds=seeds,
                                workers=args.workers)
    else:
        frame = convergence_comparison(config, dataset, out, seeds=seeds, workers=args.workers)
        for seed, step in frame.attrs["lpc_matches_vae_at"].items():
            if step is None:
                print_warning(f"seed {seed}: LPC never reached the VAE's final MMD")
            else:
                print_success(f"seed {seed}: LPC reached the VAE's final MMD at iteration {step}")
    print_success(f"{args.sweep} sweep: {len(frame)} rows written to {out}")
    return 0


# ============================================================================
# ARGUMENTS
# ============================================================================

def _add_config_args(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="experiment file (INI)")
    parser.add_argument("--preset", help="named preset: " + ", ".join(ConfigManager().list_presets()))
    parser.add_argument("--data", help="numeric CSV used instead of the config's dataset")


def _add_chain_args(parser: argparse.ArgumentParser):
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--steps", type=int)
    parser.add_argument("--step-size", type=float)
    parser.add_argument("--decay", type=float)
    parser.add_argument("--no-precond", action="store_true")
    parser.add_argument("--no-noise", action="store_true", help="noise-free chains (classic inference)")
    parser.add_argument("--warm-start", choices=["model", "prior"], default="model")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lpc", description="Langevin predictive coding toolkit")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _add_config_args(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--output", help="run directory (default: config output_dir)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("sample", help="ancestral samples from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--means", action="store_true", help="decoder means instead of draws")
    p.add_argument("--image-shape", help="HxW for image output")
    p.add_argument("--columns", type=int, default=8)
    p.add_argument("--output", required=True)
    p.set_defaults(handler=cmd_sample)

    p = sub.add_parser("eval", help="sample quality metrics")
    _add_config_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--fake", help="CSV of generated samples")
    p.add_argument("--count", type=int, default=0, help="points per side (0: dataset size)")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--bandwidth", type=float, help="RBF bandwidth (default: median heuristic)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("trace", help="per-step chain traces")
    _add_config_args(p)
    _add_chain_args(p)
    p.add_argument("--batches", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(handler=cmd_trace)

    p = sub.add_parser("project", help="PCA landscape of a chain trajectory")
    _add_config_args(p)
    _add_chain_args(p)
    p.add_argument("--index", type=int, default=0, help="dataset row to infer")
    p.add_argument("--grid-res", type=int, default=50)
    p.add_argument("--unit-variance", action="store_true")
    p.add_argument("--no-html", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(handler=cmd_project)

    p = sub.add_parser("compare", help="comparison sweeps")
    _add_config_args(p)
    p.add_argument("--sweep", choices=["step-size", "objective", "convergence"], required=True)
    p.add_argument("--step-sizes", default=",".join(format(g, "g") for g in STEP_SIZES))
    p.add_argument("--decays", default=",".join(format(b, "g") for b in PRECOND_DECAYS))
    p.add_argument("--include-vae", action="store_true")
    p.add_argument("--seeds", help="comma-separated seeds (default: config seed)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--workers", type=int, help="worker processes (default: LPC_NUM_THREADS or 1)")
    p.add_argument("--output", required=True)
    p.set_defaults(handler=cmd_compare)
    return parser


def _flag_partial(args):
    out = getattr(args, "output", None)
    if out and Path(out).is_dir() and any(Path(out).iterdir()):
        (Path(out) / PARTIAL_MARKER).write_text(f"{args.command} did not complete\n")
        print_warning(f"partial outputs left in {out}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    init()
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except Exception as exc:
        logger.debug("%s failed", args.command, exc_info=True)
        print_error(f"{args.command} failed: {exc}")
        _flag_partial(args)
        return 1


if __name__ == "__main__":
    sys.exit(main())
