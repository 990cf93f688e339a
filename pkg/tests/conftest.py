"""Shared fixtures; puts src/ on the import path"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from datasets import DatasetKind, DatasetSpec, load_dataset  # noqa: E402
from models import GenerativeModel  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def linear_gaussian_parts():
    """Weight (8, 4), bias, noise scale and prior variance of a conjugate model"""
    gen = np.random.default_rng(7)
    weight = gen.standard_normal((8, 4)) / 2.0
    bias = gen.standard_normal(8) / 4.0
    return weight, bias, 0.7, 1.0


@pytest.fixture
def linear_gaussian_model(linear_gaussian_parts):
    weight, bias, sigma, prior_variance = linear_gaussian_parts
    return GenerativeModel.linear_gaussian(weight, bias, sigma, prior_variance)


@pytest.fixture
def mixture_data():
    spec = DatasetSpec(kind=DatasetKind.GAUSSIAN_MIXTURE, n_samples=256, n_components=8, seed=3)
    return load_dataset(spec).data
