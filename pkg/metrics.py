"""
Метрики оценки 3D-поз: MPJPE без выравнивания и ошибка после выравнивания Прокруста по подмножеству суставов.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from align import optimal_angles
from errors import DegenerateConfigurationError, DimensionMismatchError
from skeleton import Pose3D, rotation_matrix

logger = logging.getLogger(__name__)

COLLINEAR_TOLERANCE = 1e-10


@dataclass(frozen=True)
class SimilarityTransform:
    """s R x + t, отображает pred в систему координат gt"""
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, pose: Pose3D) -> Pose3D:
        return self.scale * (self.rotation @ pose) + self.translation[:, None]


def _check_pair(pred: Pose3D, gt: Pose3D):
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[0] != 3:
        raise DimensionMismatchError(f"формы поз не совпадают: {pred.shape} и {gt.shape}")
    return pred, gt


def mpjpe(pred: Pose3D, gt: Pose3D) -> float:
    pred, gt = _check_pair(pred, gt)
    return float(np.mean(np.linalg.norm(pred - gt, axis=0)))


def _check_spread(points: np.ndarray, name: str):
    singular = np.linalg.svd(points, compute_uv=False)
    if singular[0] <= 0.0 or singular[1] <= COLLINEAR_TOLERANCE * singular[0]:
        raise DegenerateConfigurationError(f"суставы {name} совпадают или лежат на одной прямой")


def procrustes_align(pred: Pose3D, gt: Pose3D):
    """Подобие (s > 0, det R = +1, t), минимизирующее sum ||s R pred_j + t - gt_j||^2; отражения исключены"""
    pred, gt = _check_pair(pred, gt)
    if pred.shape[1] < 3:
        raise DegenerateConfigurationError(f"нужно минимум 3 сустава, получено {pred.shape[1]}")
    mu_p, mu_g = pred.mean(axis=1), gt.mean(axis=1)
    P, G = pred - mu_p[:, None], gt - mu_g[:, None]
    _check_spread(P, "предсказания")
    _check_spread(G, "эталона")

    U, S, Vt = np.linalg.svd(G @ P.T)
    D = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2] = -1.0
    R = (U * D) @ Vt
    scale = float(np.sum(S * D) / np.sum(P * P))
    transform = SimilarityTransform(scale=scale, rotation=R, translation=mu_g - scale * (R @ mu_p))
    return transform.apply(pred), scale, R, transform.translation


def pose_error_aligned(pred: Pose3D, gt: Pose3D, subset: Optional[Sequence[int]] = None) -> float:
    pred, gt = _check_pair(pred, gt)
    if subset is not None:
        subset = list(subset)
        if any(not 0 <= j < pred.shape[1] for j in subset):
            raise DimensionMismatchError(f"индексы подмножества вне диапазона: {subset}")
        pred, gt = pred[:, subset], gt[:, subset]
    aligned, _, _, _ = procrustes_align(pred, gt)
    return mpjpe(aligned, gt)


def planar_scale_align(pred: Pose3D, gt: Pose3D) -> Pose3D:
    """Центрирование, поворот вокруг y и неотрицательный масштаб, приближающие pred к gt"""
    pred, gt = _check_pair(pred, gt)
    P = pred - pred.mean(axis=1, keepdims=True)
    G = gt - gt.mean(axis=1, keepdims=True)
    rotated = rotation_matrix(float(optimal_angles(G, P))) @ P
    norm = float(np.sum(rotated * rotated))
    scale = max(0.0, float(np.sum(rotated * G)) / norm) if norm > 0 else 0.0
    return scale * rotated + gt.mean(axis=1, keepdims=True)


def planar_aligned_error(pred: Pose3D, gt: Pose3D) -> float:
    return mpjpe(planar_scale_align(pred, gt), gt)


def evaluate_pairs(preds: Sequence[Pose3D], gts: Sequence[Pose3D], frame_ids: Sequence[str],
                   subset: Optional[Sequence[int]] = None, labels: Optional[Sequence[Optional[str]]] = None) -> pd.DataFrame:
    """Покадровая таблица frame_id, action_label, mpjpe, aligned_error"""
    if not len(preds) == len(gts) == len(frame_ids):
        raise DimensionMismatchError(f"число кадров не совпадает: {len(preds)}, {len(gts)}, {len(frame_ids)}")
    rows = []
    for i, (pred, gt) in enumerate(zip(preds, gts)):
        rows.append({
            "frame_id": frame_ids[i],
            "action_label": labels[i] if labels is not None else None,
            "mpjpe": mpjpe(pred, gt),
            "aligned_error": pose_error_aligned(pred, gt, subset),
        })
    report = pd.DataFrame(rows, columns=["frame_id", "action_label", "mpjpe", "aligned_error"])
    if len(report):
        logger.info(f"📊 Оценка {len(report)} кадров: MPJPE {report['mpjpe'].mean():.4g}, "
                    f"после выравнивания {report['aligned_error'].mean():.4g}")
    return report


def per_action_summary(report: pd.DataFrame) -> pd.DataFrame:
    return report.groupby("action_label", dropna=False)[["mpjpe", "aligned_error"]].mean().reset_index()
