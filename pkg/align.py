"""
Обучение одной гауссовой модели позы с выравниванием поворотов в плоскости земли.

Чередуем закрытую PPCA (mu, e, sigma) и закрытое обновление поворотов R_i,
постепенно увеличивая размер базиса от 1 до J.
"""
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from config import GrowthSchedule
from errors import InsufficientDataError, InvariantViolationError, NonConvergenceWarning, RankDeficientError
from skeleton import PlanarRotation, Pose3D, rotation_matrices, wrap_angle

logger = logging.getLogger(__name__)

# Нижняя граница дисперсий относительно наибольшего собственного числа
VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class GaussianPoseModel:
    mean: np.ndarray  # (3, L)
    basis: np.ndarray  # (J, 3, L)
    sigma: np.ndarray  # (J,)
    noise_var: float

    @property
    def J(self) -> int:
        return int(self.basis.shape[0])

    @property
    def L(self) -> int:
        return int(self.mean.shape[1])

    @property
    def dim(self) -> int:
        return 3 * self.L

    @property
    def basis_matrix(self) -> np.ndarray:
        """Базис в виде столбцов (3L, J)"""
        return self.basis.reshape(self.J, self.dim).T

    def reconstruct(self, coeffs: np.ndarray) -> np.ndarray:
        """mu + a.e для одного вектора (J,) или пакета (N, J)"""
        coeffs = np.asarray(coeffs, dtype=float)
        return self.mean + np.tensordot(coeffs, self.basis, axes=([-1], [0]))

    def check_invariants(self, tol: float = 1e-8) -> None:
        if self.mean.ndim != 2 or self.mean.shape[0] != 3:
            raise InvariantViolationError(f"форма среднего {self.mean.shape}", "mean shape")
        if self.basis.shape != (self.J, 3, self.L) or self.sigma.shape != (self.J,):
            raise InvariantViolationError("формы базиса и sigma не согласованы", "basis shape")
        arrays = (self.mean, self.basis, self.sigma, np.array([self.noise_var]))
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise InvariantViolationError("нечисловые значения в модели", "finite values")
        if self.J:
            gram = self.basis_matrix.T @ self.basis_matrix
            err = float(np.max(np.abs(gram - np.eye(self.J))))
            if err > tol:
                raise InvariantViolationError(f"отклонение {err:.3g}", "basis orthonormality")
            if np.any(self.sigma <= 0):
                raise InvariantViolationError("sigma должны быть положительны", "sigma positive")
            if np.any(np.diff(self.sigma) > 0):
                raise InvariantViolationError("sigma должны не возрастать", "sigma non-increasing")
        if not self.noise_var > 0:
            raise InvariantViolationError(f"noise_var={self.noise_var}", "noise_var positive")
        centroid = float(np.max(np.abs(self.mean.mean(axis=1))))
        if centroid > max(tol, 1e-8 * float(np.max(np.abs(self.mean)) + 1.0)):
            raise InvariantViolationError(f"центроид {centroid:.3g}", "mean zero centroid")


@dataclass
class AlignmentState:
    rotations: List[PlanarRotation]
    coefficients: np.ndarray  # (N, J)
    objective: float
    history: List[Tuple[int, float]] = field(default_factory=list)  # (J, значение) по раундам
    converged: bool = False

    @property
    def thetas(self) -> np.ndarray:
        return np.array([r.theta for r in self.rotations])


def prior_weights(sigma: np.ndarray, mode: str = "gaussian_prior") -> np.ndarray:
    """r_j^2 в штрафе sum (a_j r_j)^2: 1/sigma^2 (гауссов приор) или sigma^2 (буквальная форма)"""
    sigma = np.asarray(sigma, dtype=float)
    if mode == "gaussian_prior":
        return 1.0 / (sigma * sigma)
    if mode == "sigma_scaled":
        return sigma * sigma
    raise ValueError(f"неизвестный режим регуляризации: {mode}")


def stack_poses(poses: Sequence[Pose3D]) -> np.ndarray:
    P = np.asarray(poses, dtype=float)
    if P.ndim != 3 or P.shape[1] != 3:
        raise InsufficientDataError(f"ожидался набор поз (N, 3, L), получено {P.shape}")
    return P


def optimal_angles(P: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Закрытое решение 2D Прокруста по строкам (x, z): argmin_theta ||P - R(theta) X||^2 для пакета"""
    px, pz = P[..., 0, :], P[..., 2, :]
    xx, xz = X[..., 0, :], X[..., 2, :]
    in_plane = np.sum(px * xx + pz * xz, axis=-1)
    cross = np.sum(px * xz - pz * xx, axis=-1)
    scale = np.sqrt(np.sum(px * px + pz * pz, axis=-1) * np.sum(xx * xx + xz * xz, axis=-1))
    # Вся масса на оси y: любой угол оптимален, берём 0
    degenerate = np.hypot(in_plane, cross) <= 1e-14 * scale + 1e-300
    thetas = np.mod(np.arctan2(cross, in_plane), 2.0 * math.pi)
    thetas = np.where(degenerate, 0.0, thetas)
    return np.where(thetas >= 2.0 * math.pi, 0.0, thetas)


def update_rotation(pose: Pose3D, reconstruction: Pose3D) -> PlanarRotation:
    theta = optimal_angles(np.asarray(pose, dtype=float), np.asarray(reconstruction, dtype=float))
    return PlanarRotation(float(theta))


def unrotate(P: np.ndarray, thetas: np.ndarray) -> np.ndarray:
    """R_i^T P_i для пакета"""
    R = rotation_matrices(thetas)
    return np.einsum("nji,njl->nil", R, P)


def rotate(X: np.ndarray, thetas: np.ndarray) -> np.ndarray:
    R = rotation_matrices(thetas)
    return np.einsum("nij,njl->nil", R, X)


def _closest_rotation(block: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(block)
    if np.linalg.det(u @ vt) < 0:
        u[:, -1] = -u[:, -1]
    return u @ vt


def init_mean_tk(poses: Sequence[Pose3D]) -> Pose3D:
    """Начальное среднее в духе Томаси-Канаде: y - поточечное среднее, (x, z) - из ранга 2 матрицы 2N x L"""
    P = stack_poses(poses)
    N, _, L = P.shape
    if N < 2:
        raise InsufficientDataError(f"нужно минимум 2 позы, получено {N}")

    M = P[:, [0, 2], :].reshape(2 * N, L)
    U, S, Vt = np.linalg.svd(M, full_matrices=False)
    if S.size < 2 or S[1] < 1e-12 * S[0]:
        raise RankDeficientError(f"матрица M вырождена: sigma_2/sigma_1 = {S[1] / S[0] if S.size > 1 and S[0] > 0 else 0.0:.3g}")
    A = U[:, :2] * S[:2]
    blocks = A.reshape(N, 2, 2)

    # Метрическое уточнение: ищем симметричную Q с A_i Q A_i^T = I
    r1, r2 = blocks[:, 0, :], blocks[:, 1, :]

    def _row(a, b):
        return np.stack([a[:, 0] * b[:, 0], a[:, 0] * b[:, 1] + a[:, 1] * b[:, 0], a[:, 1] * b[:, 1]], axis=1)

    G = np.vstack([_row(r1, r1), _row(r2, r2), _row(r1, r2)])
    rhs = np.concatenate([np.ones(N), np.ones(N), np.zeros(N)])
    q = np.linalg.lstsq(G, rhs, rcond=None)[0]
    Q = np.array([[q[0], q[1]], [q[1], q[2]]])
    try:
        C = np.linalg.cholesky(Q)
    except np.linalg.LinAlgError:
        logger.warning("⚠️ Метрическое уточнение не удалось, используем масштабирование")
        C = np.eye(2) * math.sqrt(2.0 * N / float(np.sum(A * A)))
    upgraded = blocks @ C
    if np.sum(np.linalg.det(upgraded)) < 0:
        C[:, 1] = -C[:, 1]
        upgraded = blocks @ C

    rotations = np.array([_closest_rotation(b) for b in upgraded])
    # Калибровка: поворот первого образца - тождественный
    rotations = rotations @ rotations[0].T
    A_hat = rotations.reshape(2 * N, 2)
    xz = np.linalg.pinv(A_hat) @ M

    mean = np.zeros((3, L))
    mean[0], mean[2] = xz[0], xz[1]
    mean[1] = P[:, 1, :].mean(axis=0)
    return mean


def weighted_ppca(X: np.ndarray, J: int, L: int, weights: Optional[np.ndarray] = None) -> GaussianPoseModel:
    """Закрытая PPCA Типпинга-Бишопа по (взвешенной) выборочной ковариации векторов (N, 3L)"""
    d = X.shape[1]
    if weights is None:
        mean = X.mean(axis=0)
        Xc = X - mean
        S = Xc.T @ Xc / X.shape[0]
    else:
        total = float(np.sum(weights))
        mean = weights @ X / total
        Xc = X - mean
        S = (Xc * weights[:, None]).T @ Xc / total
    S = 0.5 * (S + S.T)

    eigvals, eigvecs = scipy.linalg.eigh(S)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order]

    floor = VARIANCE_FLOOR * max(float(eigvals[0]), 1e-300)
    noise_var = max(float(np.mean(eigvals[J:])), floor) if J < d else floor
    sigma2 = np.maximum(eigvals[:J] - noise_var, floor)

    W = eigvecs[:, :J]
    # Детерминированный знак: наибольшая по модулю компонента положительна
    signs = np.sign(W[np.argmax(np.abs(W), axis=0), np.arange(J)])
    W = W * np.where(signs == 0, 1.0, signs)

    basis = W.T.reshape(J, 3, L)
    return GaussianPoseModel(mean=mean.reshape(3, L), basis=basis, sigma=np.sqrt(sigma2), noise_var=noise_var)


def ppca_closed_form(aligned_poses: Sequence[Pose3D], J: int) -> GaussianPoseModel:
    P = stack_poses(aligned_poses)
    N, _, L = P.shape
    if J < 1 or N <= J or J >= 3 * L:
        raise InsufficientDataError(f"PPCA требует N > J и J < 3L: N={N}, J={J}, 3L={3 * L}")
    return weighted_ppca(P.reshape(N, -1), J, L)


def fit_coefficients(aligned: np.ndarray, model: GaussianPoseModel, mode: str = "gaussian_prior") -> np.ndarray:
    """argmin_a ||x - mu - a.e||^2 + sum (a_j r_j)^2; базис ортонормирован, поэтому покомпонентно"""
    N = aligned.shape[0]
    proj = (aligned.reshape(N, -1) - model.mean.reshape(-1)) @ model.basis_matrix
    return proj / (1.0 + prior_weights(model.sigma, mode))


def alignment_objective(P: np.ndarray, thetas: np.ndarray, coeffs: np.ndarray, model: GaussianPoseModel,
                        mode: str = "gaussian_prior") -> float:
    residual = unrotate(P, thetas) - model.reconstruct(coeffs)
    data = float(np.sum(residual * residual))
    prior = float(np.sum(coeffs * coeffs * prior_weights(model.sigma, mode)))
    log_term = P.shape[0] * math.log(float(np.sum(model.sigma ** 2))) if model.J else 0.0
    return data + prior + log_term


def alignment_round(P: np.ndarray, thetas: np.ndarray, J: int, mode: str):
    """Один раунд: PPCA -> коэффициенты -> повороты -> коэффициенты"""
    model = ppca_closed_form(unrotate(P, thetas), J)
    coeffs = fit_coefficients(unrotate(P, thetas), model, mode)
    thetas = optimal_angles(P, model.reconstruct(coeffs))
    coeffs = fit_coefficients(unrotate(P, thetas), model, mode)
    return model, thetas, coeffs, alignment_objective(P, thetas, coeffs, model, mode)


def train_aligned_model(poses: Sequence[Pose3D], J_target: int, schedule: GrowthSchedule = GrowthSchedule(),
                        regularizer_mode: str = "gaussian_prior") -> Tuple[GaussianPoseModel, AlignmentState]:
    """
    Чередование PPCA и поворотов с ростом базиса по расписанию.

    Базис растёт на step каждые rounds_per_step принятых раундов. Раунд, ухудшивший целевую функцию,
    отклоняется: при J < J_target это сразу переводит расписание к следующему размеру базиса,
    при J = J_target обучение считается сошедшимся.
    """
    P = stack_poses(poses)
    N = P.shape[0]
    if J_target < 1 or N <= J_target:
        raise InsufficientDataError(f"нужно N > J: N={N}, J={J_target}")

    mean0 = init_mean_tk(P)
    thetas = optimal_angles(P, np.broadcast_to(mean0, P.shape))

    J = min(schedule.step, J_target)
    model, thetas, coeffs, objective = alignment_round(P, thetas, J, regularizer_mode)
    history = [(J, objective)]
    rounds_at_J = 1
    converged = False
    logger.info(f"🔄 Выравнивание: N={N}, старт J={J}, цель J={J_target}, целевая функция {objective:.6g}")

    for round_index in range(1, schedule.max_rounds):
        if J < J_target and rounds_at_J >= schedule.rounds_per_step:
            J = min(J + schedule.step, J_target)
            model, thetas, coeffs, objective = alignment_round(P, thetas, J, regularizer_mode)
            history.append((J, objective))
            rounds_at_J = 1
            logger.debug(f"📈 Базис увеличен до J={J}, целевая функция {objective:.6g}")
            continue

        candidate = alignment_round(P, thetas, J, regularizer_mode)
        new_objective = candidate[3]
        if new_objective > objective + 1e-12 * max(1.0, abs(objective)):
            # Шаг PPCA ухудшил целевую функцию: оставляем предыдущее решение
            if J == J_target:
                logger.debug(f"⏹️ Раунд {round_index} отклонён: {new_objective:.6g} > {objective:.6g}")
                converged = True
                break
            logger.info(f"⏭️ Раунд {round_index} отклонён при J={J}: {new_objective:.6g} > {objective:.6g}, "
                        f"переход к J={min(J + schedule.step, J_target)}")
            rounds_at_J = schedule.rounds_per_step
            continue

        relative = (objective - new_objective) / max(1.0, abs(objective))
        model, thetas, coeffs, objective = candidate
        history.append((J, objective))
        rounds_at_J += 1
        if J == J_target and relative < schedule.tol:
            converged = True
            break

    if J < J_target:
        # Лимит раундов исчерпан до достижения целевого размера базиса
        model, thetas, coeffs, objective = alignment_round(P, thetas, J_target, regularizer_mode)
        history.append((J_target, objective))
    if not converged:
        message = f"выравнивание не сошлось за {schedule.max_rounds} раундов"
        logger.warning(f"⚠️ {message}")
        warnings.warn(message, NonConvergenceWarning)

    logger.info(f"✅ Выравнивание завершено: J={model.J}, раундов {len(history)}, целевая функция {objective:.6g}")
    state = AlignmentState(
        rotations=[PlanarRotation(wrap_angle(t)) for t in thetas],
        coefficients=coeffs,
        objective=objective,
        history=history,
        converged=converged,
    )
    return model, state
