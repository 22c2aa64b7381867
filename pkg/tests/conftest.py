import os

# Must run before anything under src is imported: config reads the environment once.
os.environ["LOG_ENABLE_FILE"] = "False"
os.environ.setdefault("LOG_LEVEL", "WARNING")
os.environ.setdefault("LOG_COLOR", "False")

import numpy as np
import pytest

from src.core.config import settings
from src.services.gaussian_model import GaussianModel
from src.services.harness import gen_covariance


@pytest.fixture
def identity6() -> GaussianModel:
    return GaussianModel(np.eye(6))


def well_conditioned(n: int, seed: int, ridge: float = 0.5) -> GaussianModel:
    """A^T A + ridge * I: the generated family, kept away from singular blocks."""
    return GaussianModel(gen_covariance(n, seed).covariance + ridge * np.eye(n))


@pytest.fixture
def model6() -> GaussianModel:
    return well_conditioned(6, 11)


@pytest.fixture
def rank_one() -> GaussianModel:
    return GaussianModel(np.ones((3, 3)))


@pytest.fixture
def no_jitter(monkeypatch):
    """Jitter ladder that gives up immediately."""
    monkeypatch.setattr(settings, "MMSE_JITTER_MAX", 1e-12)
