"""
Предобработка mocap-поз перед обучением:
нормировка (сумма квадратов длин костей = 1, центроид в нуле) и зеркальная аугментация.
"""
import logging
from typing import List, Sequence

import numpy as np

from errors import DegeneratePoseError
from skeleton import Pose3D, SkeletonTopology, as_pose3d

logger = logging.getLogger(__name__)


def limb_length_sq_sum(pose: np.ndarray, topology: SkeletonTopology) -> float:
    parents, children = topology.limb_arrays
    diff = pose[:, children] - pose[:, parents]
    return float(np.sum(diff * diff))


def normalize_pose(pose: Pose3D, topology: SkeletonTopology) -> Pose3D:
    """Центрирует позу по центроиду и масштабирует так, чтобы сумма квадратов длин костей была 1"""
    pose = as_pose3d(pose)
    if pose.shape[1] != topology.L:
        raise DegeneratePoseError(f"ожидалось {topology.L} суставов, получено {pose.shape[1]}")
    centered = pose - pose.mean(axis=1, keepdims=True)
    total = limb_length_sq_sum(centered, topology)
    if not total > 0.0:
        raise DegeneratePoseError("все кости нулевой длины")
    return centered / np.sqrt(total)


def mirror_pose(pose: Pose3D, topology: SkeletonTopology) -> Pose3D:
    """Отражение по оси x с переименованием левых суставов в правые и наоборот"""
    mirrored = np.array(pose, dtype=float)[:, topology.mirror_permutation()]
    mirrored[0] = -mirrored[0]
    return mirrored


def build_training_set(poses: Sequence[Pose3D], topology: SkeletonTopology, augment: bool = True) -> List[Pose3D]:
    """Нормированные позы; при augment зеркальные копии добавляются после оригиналов"""
    if len(poses) == 0:
        raise DegeneratePoseError("пустой набор поз")

    normalized = []
    for index, pose in enumerate(poses):
        try:
            normalized.append(normalize_pose(pose, topology))
        except DegeneratePoseError as e:
            raise DegeneratePoseError(f"кадр {index}: {e}", frame=index) from e

    if augment:
        # Повторная нормировка нужна только для несимметричных топологий
        normalized.extend(normalize_pose(mirror_pose(pose, topology), topology) for pose in normalized[: len(poses)])

    logger.info(f"🦴 Обучающий набор: {len(poses)} поз -> {len(normalized)} (аугментация: {augment})")
    return normalized
