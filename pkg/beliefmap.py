"""
Карты уверенности: извлечение ориентиров по argmax, рендер проекции позы,
слияние с картами детектора и поэтапная функция потерь.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from errors import DimensionMismatchError, FlatMapError
from lift import LiftResult
from skeleton import CameraModel, Pose2D, as_pose2d

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BeliefStack:
    """channels: (L+1, H, W); последний канал - фон"""
    channels: np.ndarray

    def __post_init__(self):
        channels = np.asarray(self.channels, dtype=float)
        if channels.ndim != 3 or channels.shape[0] < 2:
            raise DimensionMismatchError(f"ожидался массив (L+1, H, W), получено {channels.shape}")
        if not np.all(np.isfinite(channels)) or np.any(channels < 0):
            raise DimensionMismatchError("карты должны быть конечными и неотрицательными")
        object.__setattr__(self, "channels", channels)

    @property
    def landmarks(self) -> int:
        return self.channels.shape[0] - 1

    @property
    def height(self) -> int:
        return self.channels.shape[1]

    @property
    def width(self) -> int:
        return self.channels.shape[2]

    @property
    def background(self) -> np.ndarray:
        return self.channels[-1]


def check_fusion_weight(w: float) -> float:
    w = float(w)
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"вес слияния {w} вне [0, 1]")
    return w


def extract_landmarks(stack: BeliefStack) -> Pose2D:
    """(u, v) максимума каждого канала ориентира; при равенстве - первый в построчном обходе"""
    maps = stack.channels[:-1].reshape(stack.landmarks, -1)
    peaks = maps.max(axis=1)
    flat = np.flatnonzero(peaks <= 0.0)
    if flat.size:
        raise FlatMapError(f"канал {int(flat[0])} пуст", channel=int(flat[0]))
    index = np.argmax(maps, axis=1)
    v, u = np.divmod(index, stack.width)
    return np.vstack([u, v]).astype(float)


def project_pose(result: LiftResult, camera: CameraModel) -> Pose2D:
    """s Pi E R (mu + a.e) с возвратом центроида, снятого при подъёме"""
    return camera.project(result.pose3d, result.scale) + np.asarray(result.center, dtype=float)[:, None]


def gaussian_kernel(blur_sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * blur_sigma))
    offsets = np.arange(-radius, radius + 1, dtype=float)
    kernel = np.exp(-0.5 * (offsets / blur_sigma) ** 2)
    return kernel / kernel.sum()


def pixel_positions(y2d: Pose2D, width: int, height: int) -> np.ndarray:
    """round(y) с половинами вверх и прижатием к границе сетки"""
    pixels = np.floor(as_pose2d(y2d) + 0.5).astype(int)
    pixels[0] = np.clip(pixels[0], 0, width - 1)
    pixels[1] = np.clip(pixels[1], 0, height - 1)
    return pixels


def _blur_axis(kernel: np.ndarray, center: int, size: int) -> np.ndarray:
    # Усечённое ядро вокруг center; значения за краем сетки теряются
    radius = len(kernel) // 2
    profile = np.zeros(size)
    lo, hi = max(0, center - radius), min(size, center + radius + 1)
    profile[lo:hi] = kernel[lo - center + radius: hi - center + radius]
    return profile


def render_beliefs(y2d: Pose2D, width: int, height: int, blur_sigma: float = 1.0) -> BeliefStack:
    if width < 1 or height < 1 or not blur_sigma > 0:
        raise DimensionMismatchError(f"некорректные параметры карты: {width}x{height}, sigma={blur_sigma}")
    pixels = pixel_positions(y2d, width, height)
    kernel = gaussian_kernel(blur_sigma)
    L = pixels.shape[1]
    channels = np.zeros((L + 1, height, width))
    for p in range(L):
        u, v = pixels[:, p]
        channels[p] = np.outer(_blur_axis(kernel, v, height), _blur_axis(kernel, u, width))
    channels[L] = np.maximum(0.0, 1.0 - channels[:L].sum(axis=0))
    return BeliefStack(channels)


def _check_same_shape(a: BeliefStack, b: BeliefStack):
    if a.channels.shape != b.channels.shape:
        raise DimensionMismatchError(f"размеры карт не совпадают: {a.channels.shape} и {b.channels.shape}")


def fuse(b: BeliefStack, b_hat: BeliefStack, w: float) -> BeliefStack:
    _check_same_shape(b, b_hat)
    w = check_fusion_weight(w)
    if w == 1.0:
        return BeliefStack(b.channels.copy())
    if w == 0.0:
        return BeliefStack(b_hat.channels.copy())
    return BeliefStack(w * b.channels + (1.0 - w) * b_hat.channels)


def stage_loss(f: BeliefStack, gt: BeliefStack) -> float:
    """Сумма квадратов разностей по всем L+1 каналам и пикселям"""
    _check_same_shape(f, gt)
    diff = f.channels - gt.channels
    return float(np.sum(diff * diff))
