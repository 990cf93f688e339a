"""
Datasets: Synthetic Generators, IDX Ingestion and Image Output

Kinds:
- gaussian-mixture: components evenly spaced on a circle
- pinwheel: curved spiral arms
- two-moons: interleaved half circles (scikit-learn generator)
- linear-gaussian: x = W z + b + sigma * eps from a drawn ground truth
- idx-images: big-endian IDX files (MNIST layout), optionally gzipped

Every generator is deterministic in `spec.seed`. Batches are reshuffled per
epoch from a stream keyed by (seed, epoch).
"""

import gzip
import logging
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, Optional, Union

import numpy as np
import pandas as pd
from sklearn.datasets import make_moons

from models import Likelihood, quantize_to_grid
from random_streams import DATA, SHUFFLE, stream_generator

logger = logging.getLogger(__name__)


class DatasetKind(Enum):
    GAUSSIAN_MIXTURE = "gaussian-mixture"
    PINWHEEL = "pinwheel"
    TWO_MOONS = "two-moons"
    LINEAR_GAUSSIAN = "linear-gaussian"
    IDX_IMAGES = "idx-images"


class Normalization(Enum):
    NONE = "none"
    STANDARDIZE = "standardize"          # zero mean, unit variance per dimension
    UNIT_INTERVAL = "unit-interval"      # min-max to [0, 1] per dimension


class DatasetFormatError(ValueError):
    """Malformed data file; `offset` is the byte position of the problem"""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class EmptyDatasetError(ValueError):
    """Dataset has no rows"""


@dataclass
class DatasetSpec:
    """What to load or generate; unused fields are ignored by the other kinds"""
    kind: DatasetKind = DatasetKind.GAUSSIAN_MIXTURE
    n_samples: int = 2000
    seed: int = 0
    normalization: Normalization = Normalization.NONE

    # gaussian-mixture / pinwheel / two-moons
    n_components: int = 8
    radius: float = 2.0
    noise: float = 0.2

    # linear-gaussian
    latent_dim: int = 4
    obs_dim: int = 8
    obs_noise: float = 0.5

    # idx-images
    path: str = ""
    max_items: int = 0                   # 0 keeps every item

    def __post_init__(self):
        if isinstance(self.kind, str):
            self.kind = DatasetKind(self.kind)
        if isinstance(self.normalization, str):
            self.normalization = Normalization(self.normalization)
        if self.n_samples < 0 or self.max_items < 0:
            raise ValueError("n_samples and max_items must be >= 0")
        if self.n_components < 1 or self.latent_dim < 1 or self.obs_dim < 1:
            raise ValueError("n_components, latent_dim and obs_dim must be >= 1")
        if self.noise < 0 or self.obs_noise <= 0 or self.radius <= 0:
            raise ValueError("noise must be >= 0, obs_noise and radius positive")
        if self.kind == DatasetKind.IDX_IMAGES and not self.path:
            raise ValueError("idx-images datasets need a path")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "normalization": self.normalization.value,
            "n_components": self.n_components,
            "radius": self.radius,
            "noise": self.noise,
            "latent_dim": self.latent_dim,
            "obs_dim": self.obs_dim,
            "obs_noise": self.obs_noise,
            "path": self.path,
            "max_items": self.max_items,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetSpec":
        return cls(**data)


@dataclass
class Dataset:
    """Observation matrix (rows, obs_dim) plus any known generating parameters"""
    data: np.ndarray
    spec: Optional[DatasetSpec] = None
    truth: Dict[str, np.ndarray] = field(default_factory=dict)
    image_shape: Optional[tuple] = None

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.data.shape[1]

    def num_batches(self, batch_size: int) -> int:
        return math.ceil(len(self) / batch_size)

    def batches(self, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
        return iterate_batches(self.data, batch_size, seed, epoch)


def iterate_batches(data: np.ndarray, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Shuffled mini-batches; the permutation depends only on (seed, epoch)"""
    order = stream_generator(seed, SHUFFLE, epoch).permutation(data.shape[0])
    for start in range(0, data.shape[0], batch_size):
        yield data[order[start:start + batch_size]]


# ============================================================================
# SYNTHETIC GENERATORS
# ============================================================================

def gaussian_mixture(n: int, n_components: int, radius: float, noise: float, rng: np.random.Generator) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(n_components) / n_components
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    labels = rng.integers(0, n_components, size=n)
    return centers[labels] + noise * rng.standard_normal((n, 2))


def pinwheel(n: int, n_arms: int, noise: float, rng: np.random.Generator,
             tangential_std: float = 0.05, rate: float = 0.25) -> np.ndarray:
    """Arms bent by an angle growing exponentially with distance from the origin"""
    labels = rng.integers(0, n_arms, size=n)
    features = rng.standard_normal((n, 2)) * np.array([noise, tangential_std])
    features[:, 0] += 1.0
    angles = 2.0 * np.pi * labels / n_arms + rate * np.exp(features[:, 0])
    cos, sin = np.cos(angles), np.sin(angles)
    x = cos * features[:, 0] - sin * features[:, 1]
    y = sin * features[:, 0] + cos * features[:, 1]
    return 2.0 * np.stack([x, y], axis=1)


def linear_gaussian(n: int, latent_dim: int, obs_dim: int, obs_noise: float,
                    rng: np.random.Generator) -> Dataset:
    weight = rng.standard_normal((obs_dim, latent_dim))
    bias = rng.standard_normal(obs_dim)
    z = rng.standard_normal((n, latent_dim))
    x = z @ weight.T + bias + obs_noise * rng.standard_normal((n, obs_dim))
    truth = {"weight": weight, "bias": bias, "sigma": np.array(obs_noise)}
    return Dataset(data=x, truth=truth)


def normalize(data: np.ndarray, mode: Normalization) -> np.ndarray:
    if mode == Normalization.STANDARDIZE:
        std = data.std(axis=0)
        return (data - data.mean(axis=0)) / np.where(std > 0, std, 1.0)
    if mode == Normalization.UNIT_INTERVAL:
        low, high = data.min(axis=0), data.max(axis=0)
        return (data - low) / np.where(high > low, high - low, 1.0)
    return data


# ============================================================================
# IDX FILES
# ============================================================================

_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def parse_idx(raw: bytes) -> np.ndarray:
    """
    Decode an IDX byte string

    Header: two zero bytes, a type code, the number of dimensions, then one
    big-endian uint32 per dimension. The payload follows in row-major order.
    """
    if len(raw) < 4:
        raise DatasetFormatError(f"IDX header truncated: {len(raw)} bytes", len(raw))
    if raw[0] != 0 or raw[1] != 0:
        raise DatasetFormatError(f"bad IDX magic {raw[:4].hex()}: first two bytes must be zero", 0)
    type_code, ndim = raw[2], raw[3]
    if type_code not in _IDX_TYPES:
        raise DatasetFormatError(f"unknown IDX type code 0x{type_code:02x}", 2)
    if ndim == 0:
        raise DatasetFormatError("IDX file declares zero dimensions", 3)

    dims = []
    for i in range(ndim):
        offset = 4 + 4 * i
        if len(raw) < offset + 4:
            raise DatasetFormatError(f"IDX dimension {i} truncated", offset)
        (size,) = struct.unpack_from(">I", raw, offset)
        dims.append(size)

    dtype = _IDX_TYPES[type_code]
    data_start = 4 + 4 * ndim
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    actual = len(raw) - data_start
    if actual != expected:
        raise DatasetFormatError(f"IDX payload is {actual} bytes, dims {tuple(dims)} need {expected}", data_start)
    return np.frombuffer(raw, dtype=dtype, offset=data_start).reshape(dims)


def read_idx(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise OSError(f"could not read IDX file {path}: {exc}") from exc
    return parse_idx(raw)


def write_idx(path: Union[str, Path], array: np.ndarray) -> Path:
    """Write a uint8 array as an IDX file"""
    path = Path(path)
    array = np.asarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    path.write_bytes(header + array.tobytes())
    return path


def load_idx_images(path: Union[str, Path], max_items: int = 0) -> Dataset:
    """Images flattened to rows; uint8 pixels scaled to k/255"""
    array = read_idx(path)
    if array.ndim < 2:
        raise DatasetFormatError(f"IDX images need >= 2 dimensions, got {array.ndim}", 3)
    if max_items:
        array = array[:max_items]
    image_shape = tuple(array.shape[1:])
    flat = array.reshape(array.shape[0], -1).astype(np.float64)
    if array.dtype == np.dtype(">u1"):
        flat /= 255.0
    return Dataset(data=flat, image_shape=image_shape)


# ============================================================================
# LOADING
# ============================================================================

def load_dataset(spec: DatasetSpec, likelihood: Optional[Likelihood] = None) -> Dataset:
    """
    Materialize `spec` as a Dataset in its deterministic pre-shuffle order

    Under the discretized-Gaussian likelihood the values are snapped to the
    256-level grid on [0, 1].
    """
    rng = stream_generator(spec.seed, DATA)
    kind = spec.kind

    if kind == DatasetKind.IDX_IMAGES:
        dataset = load_idx_images(spec.path, spec.max_items)
    elif kind == DatasetKind.LINEAR_GAUSSIAN:
        dataset = linear_gaussian(spec.n_samples, spec.latent_dim, spec.obs_dim, spec.obs_noise, rng)
    elif kind == DatasetKind.GAUSSIAN_MIXTURE:
        dataset = Dataset(data=gaussian_mixture(spec.n_samples, spec.n_components, spec.radius, spec.noise, rng))
    elif kind == DatasetKind.PINWHEEL:
        dataset = Dataset(data=pinwheel(spec.n_samples, spec.n_components, spec.noise, rng))
    elif spec.n_samples == 0:
        dataset = Dataset(data=np.zeros((0, 2)))
    else:
        x, _ = make_moons(n_samples=spec.n_samples, noise=spec.noise, random_state=spec.seed)
        dataset = Dataset(data=np.asarray(x, dtype=np.float64))

    if len(dataset) == 0:
        raise EmptyDatasetError(f"{kind.value} dataset has no rows")

    data = normalize(dataset.data, spec.normalization)
    if likelihood == Likelihood.DISCRETIZED_GAUSSIAN:
        outside = int(np.sum((data < 0.0) | (data > 1.0)))
        if outside:
            logger.warning("%d values outside [0, 1] clipped onto the pixel grid", outside)
        data = quantize_to_grid(data)
    dataset.data = np.ascontiguousarray(data, dtype=np.float64)
    dataset.spec = spec
    logger.info("Loaded %s dataset: %d rows x %d dims", kind.value, *dataset.data.shape)
    return dataset


def load_vectors_csv(path: Union[str, Path]) -> Dataset:
    """Numeric CSV with a header row, one observation per row"""
    try:
        frame = pd.read_csv(path)
    except OSError as exc:
        raise OSError(f"could not read {path}: {exc}") from exc
    if frame.empty:
        raise EmptyDatasetError(f"{path} has no rows")
    return Dataset(data=frame.to_numpy(dtype=np.float64))


# ============================================================================
# OUTPUT
# ============================================================================

def write_vectors_csv(path: Union[str, Path], samples: np.ndarray) -> Path:
    path = Path(path)
    samples = np.atleast_2d(samples)
    columns = [f"x{i}" for i in range(samples.shape[1])]
    try:
        pd.DataFrame(samples, columns=columns).to_csv(path, index=False)
    except OSError as exc:
        raise OSError(f"could not write {path}: {exc}") from exc
    return path


def to_gray_levels(values: np.ndarray, low: Optional[float] = None, high: Optional[float] = None) -> np.ndarray:
    """Linear map onto 0..255; defaults to the array's own range"""
    values = np.asarray(values, dtype=np.float64)
    low = float(np.min(values)) if low is None else low
    high = float(np.max(values)) if high is None else high
    scaled = (values - low) / (high - low) if high > low else np.zeros_like(values)
    return np.round(np.clip(scaled, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path: Union[str, Path], image: np.ndarray) -> Path:
    """Binary (P5) 8-bit grayscale image"""
    path = Path(path)
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"PGM images are 2-D, got shape {image.shape}")
    if image.dtype != np.uint8:
        image = to_gray_levels(image)
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    try:
        path.write_bytes(header + image.tobytes())
    except OSError as exc:
        raise OSError(f"could not write {path}: {exc}") from exc
    return path


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise DatasetFormatError("not a binary PGM file", 0)
    width, height = int(parts[1]), int(parts[2])
    pixels = raw[len(raw) - width * height:]
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width)


def image_grid(samples: np.ndarray, image_shape: tuple, columns: int = 8, padding: int = 1) -> np.ndarray:
    """Tile flattened images in [0, 1] into one uint8 mosaic"""
    height, width = image_shape[0], image_shape[1]
    count = samples.shape[0]
    columns = max(1, min(columns, count))
    rows = max(1, math.ceil(count / columns))
    grid = np.zeros((rows * (height + padding) + padding, columns * (width + padding) + padding), dtype=np.uint8)
    for i, sample in enumerate(samples):
        r, c = divmod(i, columns)
        top, left = padding + r * (height + padding), padding + c * (width + padding)
        grid[top:top + height, left:left + width] = to_gray_levels(sample.reshape(height, width), 0.0, 1.0)
    return grid
