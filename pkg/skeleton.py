"""
Базовые типы: топология скелета, позы, камера слабой перспективы, повороты в плоскости земли.

Поза 3D - массив (3, L), ось y направлена вверх.
Поза 2D - массив (2, L): (u, v) в пикселях карты уверенности или в единицах модели.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from errors import CycleError, DimensionMismatchError, DuplicateLRPairError, OrphanJointError, ParseError

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi

# Ортографическая проекция: первые две строки после внешней калибровки E
PROJECTOR = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])

Pose3D = np.ndarray
Pose2D = np.ndarray


@dataclass(frozen=True)
class SkeletonTopology:
    joint_names: Tuple[str, ...]
    parent: Tuple[int, ...]
    lr_pairs: Tuple[Tuple[int, int], ...] = ()
    root: int = 0
    eval_subset: Optional[Tuple[int, ...]] = None

    @property
    def L(self) -> int:
        return len(self.joint_names)

    @property
    def limbs(self) -> List[Tuple[int, int]]:
        return [(p, j) for j, p in enumerate(self.parent) if j != self.root and p >= 0]

    @property
    def limb_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        limbs = self.limbs
        parents = np.array([p for p, _ in limbs], dtype=int)
        children = np.array([c for _, c in limbs], dtype=int)
        return parents, children

    def mirror_permutation(self) -> np.ndarray:
        perm = np.arange(self.L)
        for left, right in self.lr_pairs:
            perm[left], perm[right] = right, left
        return perm

    def to_dict(self) -> dict:
        data = {
            "joints": list(self.joint_names),
            "parents": [int(p) for p in self.parent],
            "lr_pairs": [[int(a), int(b)] for a, b in self.lr_pairs],
            "root": int(self.root),
        }
        if self.eval_subset is not None:
            data["eval_subset"] = [int(i) for i in self.eval_subset]
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "SkeletonTopology":
        try:
            topology = cls(
                joint_names=tuple(str(n) for n in data["joints"]),
                parent=tuple(int(p) for p in data["parents"]),
                lr_pairs=tuple((int(a), int(b)) for a, b in data.get("lr_pairs", [])),
                root=int(data.get("root", 0)),
                eval_subset=tuple(int(i) for i in data["eval_subset"]) if data.get("eval_subset") is not None else None,
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"некорректный файл топологии: {e}") from e
        validate_topology(topology)
        return topology


def load_topology(path: str) -> SkeletonTopology:
    """Загрузка топологии из JSON {"joints", "parents", "lr_pairs", "root"}"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ParseError(f"не удалось прочитать топологию {path}: {e}") from e
    topology = SkeletonTopology.from_dict(data)
    logger.debug(f"🦴 Топология загружена: {path}, суставов: {topology.L}")
    return topology


def save_topology(topology: SkeletonTopology, path: str):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(topology.to_dict(), f, indent=2)


def validate_topology(topology: SkeletonTopology) -> None:
    """Проверяет, что родительские связи образуют одно дерево, а пары L/R корректны"""
    L = topology.L
    parent = topology.parent
    if len(parent) != L:
        raise OrphanJointError(f"ожидалось {L} родителей, получено {len(parent)}")
    if not 0 <= topology.root < L:
        raise OrphanJointError(f"корень {topology.root} вне диапазона", joint=topology.root)
    if parent[topology.root] != -1:
        raise CycleError(f"у корня {topology.joint_names[topology.root]} есть родитель", joint=topology.root)

    for j in range(L):
        p = parent[j]
        if j != topology.root and not 0 <= p < L:
            raise OrphanJointError(f"сустав {topology.joint_names[j]} не связан с деревом (родитель {p})", joint=j)

    # Подъём к корню от каждого сустава; повтор означает цикл
    for j in range(L):
        seen = set()
        node = j
        while node != topology.root:
            if node in seen:
                raise CycleError(f"цикл через сустав {topology.joint_names[node]}", joint=node)
            seen.add(node)
            node = parent[node]

    used = set()
    for left, right in topology.lr_pairs:
        for idx in (left, right):
            if not 0 <= idx < L:
                raise DuplicateLRPairError(f"индекс {idx} в lr_pairs вне диапазона", joint=idx)
        if left == right or left in used or right in used:
            dup = left if (left == right or left in used) else right
            raise DuplicateLRPairError(f"сустав {topology.joint_names[dup]} встречается в нескольких парах", joint=dup)
        used.update((left, right))

    if topology.eval_subset is not None:
        for idx in topology.eval_subset:
            if not 0 <= idx < L:
                raise OrphanJointError(f"индекс {idx} подмножества оценки вне диапазона", joint=idx)

    assert len(topology.limbs) == L - 1


def wrap_angle(theta: float) -> float:
    wrapped = math.fmod(float(theta), TWO_PI)
    if wrapped < 0.0:
        wrapped += TWO_PI
    # fmod(-tiny) + 2pi может округлиться ровно до 2pi
    return 0.0 if wrapped >= TWO_PI else wrapped


def rotation_matrix(theta: float) -> np.ndarray:
    """Поворот вокруг оси y: (x, y, z) -> (c x + s z, y, -s x + c z)"""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_matrices(thetas: np.ndarray) -> np.ndarray:
    """Пакетная версия rotation_matrix: (n,) -> (n, 3, 3)"""
    c, s = np.cos(thetas), np.sin(thetas)
    R = np.zeros((len(thetas), 3, 3))
    R[:, 0, 0] = c
    R[:, 0, 2] = s
    R[:, 1, 1] = 1.0
    R[:, 2, 0] = -s
    R[:, 2, 2] = c
    return R


@dataclass(frozen=True)
class PlanarRotation:
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def matrix(self) -> np.ndarray:
        return rotation_matrix(self.theta)

    def apply(self, pose: Pose3D) -> Pose3D:
        return self.matrix @ pose


@dataclass(frozen=True)
class CameraModel:
    """Слабая перспектива: Y = s * PROJECTOR @ E @ X; масштаб s оценивается на кадр"""
    external: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        E = np.asarray(self.external, dtype=float)
        if E.shape != (3, 3) or not np.all(np.isfinite(E)):
            raise DimensionMismatchError(f"матрица E должна быть 3x3, получено {E.shape}")
        if np.max(np.abs(E @ E.T - np.eye(3))) > 1e-10:
            raise DimensionMismatchError("матрица E не ортонормирована")
        E.setflags(write=False)
        object.__setattr__(self, "external", E)

    @property
    def projector(self) -> np.ndarray:
        return PROJECTOR

    @property
    def PE(self) -> np.ndarray:
        return PROJECTOR @ self.external

    def project(self, pose: Pose3D, scale: float = 1.0) -> Pose2D:
        return scale * (self.PE @ pose)


def image_camera() -> CameraModel:
    """Камера для пиксельных координат: ось v направлена вниз (поворот на pi вокруг x)"""
    return CameraModel(np.diag([1.0, -1.0, -1.0]))


def as_pose(coords, rows: int) -> np.ndarray:
    pose = np.asarray(coords, dtype=float)
    if pose.ndim != 2 or pose.shape[0] != rows:
        raise DimensionMismatchError(f"поза должна иметь форму ({rows}, L), получено {pose.shape}")
    if not np.all(np.isfinite(pose)):
        raise DimensionMismatchError("поза содержит нечисловые значения")
    return pose


def as_pose3d(coords) -> Pose3D:
    return as_pose(coords, 3)


def as_pose2d(coords) -> Pose2D:
    return as_pose(coords, 2)


def center(pose: np.ndarray) -> np.ndarray:
    return pose - pose.mean(axis=1, keepdims=True)


def chain_topology(L: int, lr_pairs: Sequence[Tuple[int, int]] = ()) -> SkeletonTopology:
    """Простая цепочка 0-1-...-(L-1); удобна для синтетических данных"""
    return SkeletonTopology(
        joint_names=tuple(f"j{i}" for i in range(L)),
        parent=tuple([-1] + list(range(L - 1))),
        lr_pairs=tuple(tuple(p) for p in lr_pairs),
        root=0,
    )
