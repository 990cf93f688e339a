"""
Experiment configuration for the Langevin predictive coding toolkit
Typed configs, named presets and the INI-style experiment file format
"""

import configparser
import logging
import os
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union, get_args, get_origin, get_type_hints

from datasets import DatasetKind, DatasetSpec, Normalization
from models import DecoderScale, Likelihood, ModelConfig
from trainer import TrainConfig, WarmStartObjective

logger = logging.getLogger(__name__)

METRICS = ("mmd", "density", "coverage")
THREADS_ENV = "LPC_NUM_THREADS"


class ConfigError(ValueError):
    """Unknown key, unparseable value or violated config invariant"""


@dataclass
class ExperimentConfig:
    """One training / evaluation run: what to fit, on what, and where to write it"""
    name: str = "experiment"
    output_dir: str = "runs/experiment"
    eval_every: int = 0                        # epochs between evaluations, 0 disables
    eval_samples: int = 500
    metrics: Tuple[str, ...] = METRICS
    density_k: int = 5
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)

    def __post_init__(self):
        self.metrics = tuple(self.metrics)
        unknown = set(self.metrics) - set(METRICS)
        if unknown:
            raise ConfigError(f"unknown metrics {sorted(unknown)}; choose from {METRICS}")
        if self.eval_every < 0 or self.eval_samples < 2 or self.density_k < 1:
            raise ConfigError("eval_every must be >= 0, eval_samples >= 2 and density_k >= 1")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "output_dir": self.output_dir,
            "eval_every": self.eval_every,
            "eval_samples": self.eval_samples,
            "metrics": list(self.metrics),
            "density_k": self.density_k,
            "train": self.train.to_dict(),
            "model": self.model.to_dict(),
            "dataset": self.dataset.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        try:
            train = TrainConfig.from_dict(data.pop("train", {}))
            model = ModelConfig.from_dict(data.pop("model", {}))
            dataset = DatasetSpec.from_dict(data.pop("dataset", {}))
            return cls(train=train, model=model, dataset=dataset, **data)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc


# ============================================================================
# FILE FORMAT
# ============================================================================

SECTIONS = {"train": TrainConfig, "model": ModelConfig, "dataset": DatasetSpec}


def format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, (tuple, list)):
        return ", ".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(text: str, hint: Any) -> Any:
    """Convert the text of one config entry to the annotated field type"""
    text = text.strip()
    origin = get_origin(hint)
    if origin is Union:
        inner = [a for a in get_args(hint) if a is not type(None)]
        if text.lower() == "none":
            return None
        return parse_value(text, inner[0])
    if origin in (tuple, Tuple):
        item = get_args(hint)[0] if get_args(hint) else str
        return tuple(parse_value(part, item) for part in text.split(",") if part.strip())
    if hint is bool:
        states = configparser.ConfigParser.BOOLEAN_STATES
        if text.lower() not in states:
            raise ValueError(f"not a boolean: {text!r}")
        return states[text.lower()]
    if isinstance(hint, type) and issubclass(hint, Enum):
        return hint(text)
    if hint in (int, float, str):
        return hint(text)
    raise ValueError(f"unsupported field type {hint}")


def _section_values(section: configparser.SectionProxy, cls: type) -> Dict[str, Any]:
    hints = get_type_hints(cls)
    names = {f.name for f in fields(cls)} - set(SECTIONS)
    values = {}
    for key, text in section.items():
        if key not in names:
            raise ConfigError(f"[{section.name}] unknown key '{key}'")
        try:
            values[key] = parse_value(text, hints[key])
        except ValueError as exc:
            raise ConfigError(f"[{section.name}] {key} = {text!r}: {exc}") from exc
    return values


def to_ini(config: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser["experiment"] = {f.name: format_value(getattr(config, f.name))
                            for f in fields(ExperimentConfig) if f.name not in SECTIONS}
    for section in SECTIONS:
        obj = getattr(config, section)
        parser[section] = {f.name: format_value(getattr(obj, f.name)) for f in fields(obj)}
    lines = []
    for name in parser.sections():
        lines.append(f"[{name}]")
        lines.extend(f"{key} = {value}" for key, value in parser[name].items())
        lines.append("")
    return "\n".join(lines)


def from_ini(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc

    unknown = set(parser.sections()) - {"experiment", *SECTIONS}
    if unknown:
        raise ConfigError(f"{source}: unknown sections {sorted(unknown)}")

    top = _section_values(parser["experiment"], ExperimentConfig) if parser.has_section("experiment") else {}
    try:
        parts = {name: cls(**(_section_values(parser[name], cls) if parser.has_section(name) else {}))
                 for name, cls in SECTIONS.items()}
        return ExperimentConfig(**top, **parts)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc


# ============================================================================
# PRESETS & FILES
# ============================================================================

class ConfigManager:
    """Named experiment presets plus loading and saving of experiment files"""

    def __init__(self, config_dir: Union[str, Path] = "configs"):
        self.config_dir = Path(config_dir)
        self.presets = self._load_presets()

    def _load_presets(self) -> Dict[str, ExperimentConfig]:
        return {
            # Full-scale image settings: discretized likelihood, 40 latents, 300 steps
            "full": ExperimentConfig(
                name="full",
                output_dir="runs/full",
                eval_every=1,
                eval_samples=1000,
                train=TrainConfig(
                    learning_rate=1e-3,
                    batch_size=64,
                    steps=300,
                    step_size=0.1,
                    precond_decay=0.99,
                    objective=WarmStartObjective.JEFFREYS,
                    prior_init_batches=50,
                    epochs=50,
                ),
                model=ModelConfig(
                    latent_dim=40,
                    hidden=(256, 256),
                    likelihood=Likelihood.DISCRETIZED_GAUSSIAN,
                    decoder_scale=DecoderScale.GLOBAL,
                ),
                dataset=DatasetSpec(kind=DatasetKind.IDX_IMAGES, path="data/train-images-idx3-ubyte"),
            ),
            # Desk-scale image runs on a subset of the same files
            "images": ExperimentConfig(
                name="images",
                output_dir="runs/images",
                eval_every=1,
                eval_samples=500,
                train=TrainConfig(
                    learning_rate=1e-3,
                    batch_size=64,
                    steps=50,
                    step_size=0.1,
                    precond_decay=0.99,
                    prior_init_batches=50,
                    epochs=5,
                ),
                model=ModelConfig(
                    latent_dim=16,
                    hidden=(128, 128),
                    likelihood=Likelihood.DISCRETIZED_GAUSSIAN,
                ),
                dataset=DatasetSpec(kind=DatasetKind.IDX_IMAGES, path="data/train-images-idx3-ubyte",
                                    max_items=5000),
            ),
            # 2-D eight-component mixture; step size and learning rate from small grid sweeps
            "mixture": ExperimentConfig(
                name="mixture",
                output_dir="runs/mixture",
                eval_every=1,
                eval_samples=500,
                train=TrainConfig(
                    learning_rate=3e-3,
                    batch_size=64,
                    steps=30,
                    step_size=0.05,
                    precond_decay=0.99,
                    prior_init_batches=50,
                    epochs=20,
                ),
                model=ModelConfig(latent_dim=2, hidden=(64, 64)),
                dataset=DatasetSpec(kind=DatasetKind.GAUSSIAN_MIXTURE, n_samples=2000, n_components=8,
                                    radius=2.0, noise=0.2),
            ),
            # Conjugate model with known weights; linear decoder and encoder
            "linear_gaussian": ExperimentConfig(
                name="linear_gaussian",
                output_dir="runs/linear_gaussian",
                train=TrainConfig(
                    learning_rate=1e-2,
                    batch_size=64,
                    steps=50,
                    step_size=0.05,
                    prior_init_batches=10,
                    epochs=10,
                ),
                model=ModelConfig(latent_dim=4, hidden=()),
                dataset=DatasetSpec(kind=DatasetKind.LINEAR_GAUSSIAN, n_samples=2000, latent_dim=4,
                                    obs_dim=8, obs_noise=0.5, normalization=Normalization.NONE),
            ),
        }

    def get_preset(self, name: str) -> ExperimentConfig:
        """Fresh copy of a preset"""
        if name not in self.presets:
            raise ConfigError(f"unknown preset '{name}'; available: {', '.join(self.list_presets())}")
        return ExperimentConfig.from_dict(self.presets[name].to_dict())

    def list_presets(self) -> list:
        return list(self.presets.keys())

    def save_config(self, config: ExperimentConfig, path: Optional[Union[str, Path]] = None) -> Path:
        """Write an experiment file; defaults to <config_dir>/<name>.ini"""
        path = Path(path) if path else self.config_dir / f"{config.name}.ini"
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(to_ini(config))
        except OSError as exc:
            raise OSError(f"could not write config {path}: {exc}") from exc
        return path

    def load_config(self, path: Union[str, Path]) -> ExperimentConfig:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise OSError(f"could not read config {path}: {exc}") from exc
        config = from_ini(text, source=str(path))
        logger.debug("Loaded config %s from %s", config.name, path)
        return config


def num_workers(default: int = 1) -> int:
    """Worker cap for sweeps, from LPC_NUM_THREADS"""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return default
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if value < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {value}")
    return value
