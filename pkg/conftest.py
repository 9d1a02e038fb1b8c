"""
Общие фикстуры тестов: синтетические модели поз и генераторы выборок.
"""
import math

import numpy as np
import pytest

from align import GaussianPoseModel, rotate
from config import DEFAULT_TOPOLOGY_PATH
from mixture import MixtureModel
from skeleton import chain_topology, load_topology


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: приёмочные прогоны в масштабе настольной машины")


def make_model(rng: np.random.Generator, L: int = 8, J: int = 3, sigma_top: float = 0.3,
               noise_var: float = 1e-4, mean_scale: float = 1.0) -> GaussianPoseModel:
    """Случайная корректная модель: нулевой центроид, ортонормированный базис, убывающие sigma"""
    mean = rng.normal(size=(3, L)) * mean_scale
    mean -= mean.mean(axis=1, keepdims=True)
    # Базис ортогонален постоянным сдвигам, чтобы сэмплы сохраняли нулевой центроид
    shifts = np.kron(np.eye(3), np.ones((1, L))).T / math.sqrt(L)  # (3L, 3)
    raw = rng.normal(size=(3 * L, J))
    raw -= shifts @ (shifts.T @ raw)
    q, _ = np.linalg.qr(raw)
    basis = q.T.reshape(J, 3, L)
    sigma = sigma_top * np.linspace(1.0, 0.5, J)
    return GaussianPoseModel(mean=mean, basis=basis, sigma=sigma, noise_var=noise_var)


def sample_poses(model: GaussianPoseModel, n: int, rng: np.random.Generator, noise_std: float = 0.0,
                 rotate_poses: bool = True):
    """Позы из модели, повёрнутые на случайные углы вокруг y; возвращает (позы, углы, коэффициенты)"""
    coeffs = rng.normal(size=(n, model.J)) * model.sigma
    poses = model.reconstruct(coeffs)
    if noise_std > 0:
        poses = poses + rng.normal(scale=noise_std, size=poses.shape)
    thetas = rng.uniform(0.0, 2.0 * math.pi, size=n) if rotate_poses else np.zeros(n)
    return rotate(poses, thetas), thetas, coeffs


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def h36m():
    return load_topology(DEFAULT_TOPOLOGY_PATH)


@pytest.fixture
def chain8():
    return chain_topology(8, lr_pairs=[(2, 3), (4, 5)])


@pytest.fixture
def small_model(rng):
    return make_model(rng, L=8, J=3)


@pytest.fixture
def small_mixture(small_model):
    return MixtureModel(components=(small_model,), weights=np.array([1.0]))
