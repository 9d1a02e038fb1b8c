"""
Мультимодальная модель позы: жадный выбор эталонов для инициализации и EM для смеси PPCA.
"""
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.special import logsumexp

from align import AlignmentState, GaussianPoseModel, stack_poses, train_aligned_model, unrotate, weighted_ppca
from config import EmConfig, TrainingConfig
from errors import (CollapsedComponentError, CollapsedComponentWarning, EmptyDatasetError,
                    InsufficientDataError, InvariantViolationError)
from preprocess import build_training_set
from skeleton import Pose3D, SkeletonTopology

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MixtureModel:
    components: Tuple[GaussianPoseModel, ...]
    weights: np.ndarray
    loglik_history: Tuple[float, ...] = field(default=(), compare=False)

    @property
    def K(self) -> int:
        return len(self.components)

    @property
    def J(self) -> int:
        return self.components[0].J

    @property
    def L(self) -> int:
        return self.components[0].L

    def check_invariants(self, tol: float = 1e-8) -> None:
        if self.K < 1 or len(self.weights) != self.K:
            raise InvariantViolationError(f"K={self.K}, весов {len(self.weights)}", "component count")
        if np.any(self.weights < 0) or abs(float(np.sum(self.weights)) - 1.0) > 1e-10:
            raise InvariantViolationError(f"сумма весов {float(np.sum(self.weights))!r}", "weights sum to one")
        for component in self.components:
            component.check_invariants(tol)


def single_component(model: GaussianPoseModel) -> MixtureModel:
    return MixtureModel(components=(model,), weights=np.array([1.0]))


@dataclass(frozen=True)
class ExemplarSet:
    indices: Tuple[int, ...]
    min_separation: float

    @property
    def k(self) -> int:
        return len(self.indices)


def _flatten(poses: Sequence[Pose3D]) -> np.ndarray:
    P = stack_poses(poses)
    return P.reshape(P.shape[0], -1)


def select_exemplars(poses: Sequence[Pose3D], k_max: int, min_separation: float,
                     policy: str = "stop") -> ExemplarSet:
    """Жадная минимизация sum_p min_{s in S} d(s, p); останов при k_max или слишком близком кандидате"""
    if len(poses) == 0:
        raise EmptyDatasetError("нет поз для выбора эталонов")
    X = _flatten(poses)
    D = cdist(X, X)
    nearest = np.full(X.shape[0], np.inf)
    chosen: List[int] = []

    while len(chosen) < k_max:
        totals = np.minimum(nearest[None, :], D).sum(axis=1)
        totals[chosen] = np.inf
        if chosen and policy == "skip":
            too_close = D[:, chosen].min(axis=1) < min_separation
            totals[too_close] = np.inf
        if not np.any(np.isfinite(totals)):
            break
        best = int(np.argmin(totals))
        if chosen and float(D[best, chosen].min()) < min_separation:
            logger.debug(f"⏹️ Кандидат {best} слишком близок к эталонам, останов на {len(chosen)}")
            break
        chosen.append(best)
        nearest = np.minimum(nearest, D[best])

    logger.info(f"🎯 Выбрано эталонов: {len(chosen)} из {k_max}, порог {min_separation:.4g}")
    return ExemplarSet(indices=tuple(chosen), min_separation=float(min_separation))


def default_min_separation(poses: Sequence[Pose3D], ratio: float = 0.4) -> float:
    X = _flatten(poses)
    if X.shape[0] < 2:
        return 0.0
    return ratio * float(np.median(pdist(X)))


def assign_clusters(poses: Sequence[Pose3D], exemplars: ExemplarSet) -> np.ndarray:
    """Индекс ближайшего эталона; при равенстве - наименьший"""
    if exemplars.k == 0:
        raise EmptyDatasetError("пустой набор эталонов")
    X = _flatten(poses)
    return np.argmin(cdist(X, X[list(exemplars.indices)]), axis=1)


def component_log_pdf(X: np.ndarray, model: GaussianPoseModel) -> np.ndarray:
    """log N(x; mu, e diag(sigma^2) e^T + noise I) через тождество обращения низкоранговой поправки"""
    d = X.shape[1]
    diff = X - model.mean.reshape(-1)
    nu = model.noise_var
    total = model.sigma ** 2 + nu
    proj = diff @ model.basis_matrix
    maha = np.sum(diff * diff, axis=1) / nu - proj ** 2 @ (1.0 / nu - 1.0 / total)
    logdet = float(np.sum(np.log(total))) + (d - model.J) * math.log(nu)
    return -0.5 * (d * LOG_2PI + logdet + maha)


def log_joint(X: np.ndarray, mixture: MixtureModel) -> np.ndarray:
    with np.errstate(divide="ignore"):
        log_weights = np.log(mixture.weights)
    return np.stack([component_log_pdf(X, c) for c in mixture.components], axis=1) + log_weights


def log_density(poses: Sequence[Pose3D], mixture: MixtureModel) -> np.ndarray:
    return logsumexp(log_joint(_flatten(poses), mixture), axis=1)


def model_log_density(pose: Pose3D, mixture: MixtureModel) -> float:
    return float(log_density([pose], mixture)[0])


def _handle_collapse(k: int, mass: float, J: int, policy: str):
    message = f"компонента {k} вырождена: эффективная масса {mass:.3g} < {J + 1}"
    if policy == "raise":
        raise CollapsedComponentError(message, component=k)
    logger.warning(f"⚠️ {message}, компонента удалена")
    warnings.warn(message, CollapsedComponentWarning)


def _m_step(X: np.ndarray, resp: np.ndarray, J: int, L: int, policy: str) -> MixtureModel:
    mass = resp.sum(axis=0)
    components, kept = [], []
    for k in range(resp.shape[1]):
        if mass[k] < J + 1:
            _handle_collapse(k, float(mass[k]), J, policy)
            continue
        components.append(weighted_ppca(X, J, L, resp[:, k]))
        kept.append(k)
    if not components:
        raise InsufficientDataError("все компоненты смеси вырождены")
    weights = mass[kept] / float(np.sum(mass[kept]))
    return MixtureModel(components=tuple(components), weights=weights)


def train_mppca(poses: Sequence[Pose3D], exemplars: ExemplarSet, J: int,
                em_config: EmConfig = EmConfig()) -> MixtureModel:
    """EM для смеси PPCA, инициализированный жёстким назначением к ближайшим эталонам"""
    P = stack_poses(poses)
    N, _, L = P.shape
    X = P.reshape(N, -1)

    labels = assign_clusters(P, exemplars)
    hard = np.zeros((N, exemplars.k))
    hard[np.arange(N), labels] = 1.0
    mixture = _m_step(X, hard, J, L, em_config.collapse_policy)

    joint = log_joint(X, mixture)
    loglik = float(np.sum(logsumexp(joint, axis=1)))
    history = [loglik]
    logger.info(f"🔄 EM: N={N}, K={mixture.K}, J={J}, начальное log-правдоподобие {loglik:.6g}")

    for iteration in range(em_config.max_iter):
        resp = np.exp(joint - logsumexp(joint, axis=1, keepdims=True))
        mixture = _m_step(X, resp, J, L, em_config.collapse_policy)
        joint = log_joint(X, mixture)
        new_loglik = float(np.sum(logsumexp(joint, axis=1)))
        history.append(new_loglik)
        if new_loglik < loglik - 1e-9 * max(1.0, abs(loglik)):
            logger.warning(f"⚠️ EM итерация {iteration}: log-правдоподобие уменьшилось {loglik:.9g} -> {new_loglik:.9g}")
        if abs(new_loglik - loglik) < em_config.tol * max(1.0, abs(loglik)):
            loglik = new_loglik
            break
        loglik = new_loglik
        if iteration % 50 == 0:
            logger.debug(f"📊 EM итерация {iteration}: {loglik:.9g}")

    logger.info(f"✅ EM завершён: K={mixture.K}, итераций {len(history) - 1}, log-правдоподобие {loglik:.6g}")
    return MixtureModel(components=mixture.components, weights=mixture.weights, loglik_history=tuple(history))


def train_pose_mixture(poses: Sequence[Pose3D], topology: SkeletonTopology,
                       config: TrainingConfig = TrainingConfig()) -> Tuple[MixtureModel, AlignmentState]:
    """Полный конвейер обучения: нормировка -> выравнивание -> эталоны -> EM"""
    training = build_training_set(poses, topology, augment=config.augment)
    P = stack_poses(training)

    _, state = train_aligned_model(P, config.align.J, config.align.schedule, config.align.regularizer_mode)
    aligned = unrotate(P, state.thetas)

    stride = config.exemplars.stride if len(aligned[:: config.exemplars.stride]) >= 2 else 1
    subsample = aligned[::stride]
    min_separation = config.exemplars.min_separation
    if min_separation is None:
        min_separation = default_min_separation(subsample, config.exemplars.separation_ratio)
    k_max = config.exemplars.k_max or config.K
    picked = select_exemplars(subsample, k_max, min_separation, config.exemplars.policy)

    # Индексы подвыборки -> индексы полного выровненного набора
    exemplars = ExemplarSet(indices=tuple(i * stride for i in picked.indices), min_separation=picked.min_separation)
    mixture = train_mppca(aligned, exemplars, config.align.J, config.em)
    return mixture, state
