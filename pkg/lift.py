"""
Подъём 2D-ориентиров в 3D: перебор квантованных поворотов в плоскости земли,
закрытое решение по (s, b) для каждого угла, локальное уточнение и выбор компоненты смеси.
"""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from scipy.optimize import minimize_scalar

from align import GaussianPoseModel, prior_weights
from config import Config, LiftConfig
from errors import AllComponentsFailedError, DataError, DimensionMismatchError, SingularSystemError
from mixture import MixtureModel
from skeleton import TWO_PI, CameraModel, Pose2D, Pose3D, as_pose2d, rotation_matrices, rotation_matrix, wrap_angle

logger = logging.getLogger(__name__)

# Относительный порог вырожденности 2D-входа и обусловленности таблицы
DEGENERATE_INPUT = 1e-12
SINGULAR_ENTRY = 1e-12


@dataclass(frozen=True)
class RotationTable:
    """Предвычисленные Pi E R mu и Pi E R e на сетке углов; неизменяема и разделяется между кадрами"""
    thetas: np.ndarray  # (n,)
    proj_mean: np.ndarray  # (n, 2, L)
    proj_basis: np.ndarray  # (n, J, 2, L)
    design: np.ndarray  # (n, 2L, J+1): столбцы [Pi E R mu, Pi E R e_1, ...]
    gram: np.ndarray  # (n, J+1, J+1)
    r2: np.ndarray  # (J,)
    eig_vectors: np.ndarray  # (n, J+1, J+1), V^T G V = I
    eig_values: np.ndarray  # (n, J+1), diag(0, r^2) V = G V diag(kappa)
    basis_vectors: np.ndarray  # (n, J, J), W^T diag(r^2) W = I
    basis_values: np.ndarray  # (n, J), B^T B W = diag(r^2) W diag(gamma)
    singular: np.ndarray  # (n,) bool
    mean_norm: float

    @property
    def grid_n(self) -> int:
        return len(self.thetas)


@dataclass(frozen=True)
class LiftResult:
    theta: float
    scale: float
    coeffs: np.ndarray
    component: int
    cost: float
    pose3d: Pose3D
    center: np.ndarray = field(default_factory=lambda: np.zeros(2))
    component_scores: Tuple[float, ...] = ()


@dataclass
class BatchLiftResult:
    results: List[Optional[LiftResult]]
    errors: Dict[int, Exception]
    elapsed: float

    @property
    def frames_per_second(self) -> float:
        return len(self.results) / self.elapsed if self.elapsed > 0 else float("inf")


def grid_thetas(grid_n: int) -> np.ndarray:
    # i/m и 2i/2m дают побитно одинаковые углы
    return TWO_PI * np.arange(grid_n) / grid_n


def _design_matrices(model: GaussianPoseModel, camera: CameraModel, thetas: np.ndarray):
    PER = camera.PE @ rotation_matrices(thetas)  # (n, 2, 3)
    proj_mean = PER @ model.mean
    proj_basis = np.einsum("nij,kjl->nkil", PER, model.basis)
    n, L = len(thetas), model.L
    design = np.concatenate([proj_mean.reshape(n, 2 * L, 1), proj_basis.reshape(n, model.J, 2 * L).transpose(0, 2, 1)], axis=2)
    return proj_mean, proj_basis, design


def precompute_rotation_tables(model: GaussianPoseModel, camera: CameraModel, grid_n: int,
                               regularizer_mode: str = "gaussian_prior") -> RotationTable:
    thetas = grid_thetas(grid_n)
    proj_mean, proj_basis, design = _design_matrices(model, camera, thetas)
    n, J = grid_n, model.J
    gram = np.transpose(design, (0, 2, 1)) @ design
    r2 = prior_weights(model.sigma, regularizer_mode)
    D0 = np.diag(np.concatenate([[0.0], r2]))

    eig_vectors = np.zeros((n, J + 1, J + 1))
    eig_values = np.zeros((n, J + 1))
    basis_vectors = np.zeros((n, J, J))
    basis_values = np.zeros((n, J))
    singular = np.zeros(n, dtype=bool)
    for i in range(n):
        try:
            kappa, V = scipy.linalg.eigh(D0, gram[i])
            if not np.all(np.isfinite(kappa)) or np.min(np.linalg.eigvalsh(gram[i])) <= SINGULAR_ENTRY * max(np.trace(gram[i]), 1e-300):
                raise np.linalg.LinAlgError("плохая обусловленность")
            eig_values[i], eig_vectors[i] = kappa, V
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            singular[i] = True
        gamma, W = scipy.linalg.eigh(gram[i, 1:, 1:], np.diag(r2))
        basis_values[i], basis_vectors[i] = np.clip(gamma, 0.0, None), W

    if np.any(singular):
        logger.debug(f"⚠️ Таблица поворотов: {int(singular.sum())} из {n} углов решаются напрямую")
    for array in (thetas, proj_mean, proj_basis, design, gram, r2, eig_vectors, eig_values, basis_vectors, basis_values, singular):
        array.setflags(write=False)
    return RotationTable(
        thetas=thetas, proj_mean=proj_mean, proj_basis=proj_basis, design=design, gram=gram, r2=r2,
        eig_vectors=eig_vectors, eig_values=eig_values, basis_vectors=basis_vectors, basis_values=basis_values,
        singular=singular, mean_norm=float(np.linalg.norm(model.mean)),
    )


def precompute_mixture_tables(mixture: MixtureModel, camera: CameraModel, config: LiftConfig = LiftConfig()) -> Tuple[RotationTable, ...]:
    return tuple(precompute_rotation_tables(c, camera, config.grid_n, config.regularizer_mode) for c in mixture.components)


def _center2d(y2d: Pose2D) -> Tuple[np.ndarray, np.ndarray]:
    y = as_pose2d(y2d)
    offset = y.mean(axis=1)
    return y - offset[:, None], offset


def _effective_lambda(y: np.ndarray, mean_norm: float, config: LiftConfig) -> float:
    """Приор накладывается на b = s a с весом lambda / s_hat^2, s_hat = ||Y|| / ||mu||"""
    s_hat = max(float(np.linalg.norm(y)) / max(mean_norm, 1e-300), config.scale_floor)
    return config.lambda_scale / (s_hat * s_hat)


def _check_input(y: np.ndarray, mean_norm: float):
    if not float(np.linalg.norm(y)) > DEGENERATE_INPUT * max(1.0, mean_norm):
        raise SingularSystemError("вырожденный 2D-вход: все ориентиры совпадают")


def _lift_cost(y: np.ndarray, design: np.ndarray, s: float, a: np.ndarray, r2: np.ndarray, lambda_scale: float) -> float:
    residual = y - s * (design[:, 0] + design[:, 1:] @ a)
    return float(residual @ residual) + lambda_scale * float(np.sum(a * a * r2))


def _solve_direct(y: np.ndarray, design: np.ndarray, r2: np.ndarray, lam: float, config: LiftConfig):
    """Прямое решение нормальных уравнений по (s, b) для одного угла с ремонтом гребнем"""
    gram = design.T @ design
    rhs = design.T @ y
    M = gram + lam * np.diag(np.concatenate([[0.0], r2]))
    x = None
    for ridge in (0.0, SINGULAR_ENTRY * max(float(np.trace(M)), 1e-300)):
        try:
            x = scipy.linalg.solve(M + ridge * np.eye(len(M)), rhs, assume_a="pos")
            if np.all(np.isfinite(x)):
                break
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            x = None
    if x is None or not np.all(np.isfinite(x)):
        raise SingularSystemError("нормальные уравнения вырождены")

    s, b = float(x[0]), x[1:]
    if s <= config.scale_floor:
        s = config.scale_floor
        B = design[:, 1:]
        Mb = gram[1:, 1:] + lam * np.diag(r2)
        b = np.linalg.lstsq(Mb, B.T @ (y - s * design[:, 0]), rcond=None)[0]
    a = b / s
    return s, a, _lift_cost(y, design, s, a, r2, config.lambda_scale)


def solve_scale_coeffs(y2d: Pose2D, table: RotationTable, index: int, config: LiftConfig = LiftConfig()):
    """(s, a, cost) для фиксированного угла table.thetas[index]; y2d центрируется"""
    y, _ = _center2d(y2d)
    _check_input(y, table.mean_norm)
    lam = _effective_lambda(y, table.mean_norm, config)
    return _solve_direct(y.reshape(-1), table.design[index], table.r2, lam, config)


def _grid_costs(y: np.ndarray, table: RotationTable, lam: float, config: LiftConfig):
    """Стоимости всех углов сетки за один проход через обобщённое разложение"""
    Aty = y @ table.design  # (n, J+1)
    z = (Aty[:, None, :] @ table.eig_vectors)[:, 0, :]
    x = (table.eig_vectors @ (z / (1.0 + lam * table.eig_values))[:, :, None])[:, :, 0]
    s, b = x[:, 0].copy(), x[:, 1:].copy()

    clamped = s <= config.scale_floor
    if np.any(clamped):
        # Масштаб фиксирован на нижней границе, b - гребневая регрессия при известном s
        W = table.basis_vectors[clamped]
        denom = table.basis_values[clamped] + lam
        inv = np.where(denom > SINGULAR_ENTRY, 1.0 / np.where(denom > SINGULAR_ENTRY, denom, 1.0), 0.0)
        rhs = Aty[clamped, 1:] - config.scale_floor * table.gram[clamped, 1:, 0]
        proj = (rhs[:, None, :] @ W)[:, 0, :]
        b[clamped] = (W @ (proj * inv)[:, :, None])[:, :, 0]
        s[clamped] = config.scale_floor
        x = np.concatenate([s[:, None], b], axis=1)

    data = float(y @ y) - 2.0 * np.sum(x * Aty, axis=1) + np.einsum("ni,nij,nj->n", x, table.gram, x)
    a = b / s[:, None]
    costs = np.maximum(data, 0.0) + config.lambda_scale * np.sum(a * a * table.r2, axis=1)
    costs[table.singular] = np.inf
    return costs


def _pose_from(model: GaussianPoseModel, theta: float, a: np.ndarray) -> Pose3D:
    return rotation_matrix(theta) @ model.reconstruct(a)


def lift_single(y2d: Pose2D, model: GaussianPoseModel, camera: CameraModel, config: LiftConfig = LiftConfig(),
                table: Optional[RotationTable] = None, component: int = 0) -> LiftResult:
    if table is None:
        table = precompute_rotation_tables(model, camera, config.grid_n, config.regularizer_mode)
    y2, offset = _center2d(y2d)
    if y2.shape[1] != model.L:
        raise DimensionMismatchError(f"ожидалось {model.L} ориентиров, получено {y2.shape[1]}")
    _check_input(y2, table.mean_norm)
    y = y2.reshape(-1)
    lam = _effective_lambda(y, table.mean_norm, config)

    costs = _grid_costs(y, table, lam, config)
    for i in np.flatnonzero(table.singular):
        try:
            costs[i] = _solve_direct(y, table.design[i], table.r2, lam, config)[2]
        except SingularSystemError:
            costs[i] = np.inf
    if not np.any(np.isfinite(costs)):
        raise SingularSystemError("ни один угол сетки не дал решения")

    best = int(np.argmin(costs))
    theta = float(table.thetas[best])
    s, a, cost = _solve_direct(y, table.design[best], table.r2, lam, config)

    if config.refine:
        step = TWO_PI / table.grid_n

        def _profile(t: float) -> float:
            _, _, design = _design_matrices(model, camera, np.array([t]))
            return _solve_direct(y, design[0], table.r2, lam, config)[2]

        found = minimize_scalar(_profile, bounds=(theta - step, theta + step), method="bounded",
                                options={"xatol": config.refine_tol})
        if np.isfinite(found.fun) and found.fun <= cost:
            _, _, design = _design_matrices(model, camera, np.array([float(found.x)]))
            s_ref, a_ref, cost_ref = _solve_direct(y, design[0], table.r2, lam, config)
            if cost_ref <= cost:
                theta, s, a, cost = float(found.x), s_ref, a_ref, cost_ref

    theta = wrap_angle(theta)
    return LiftResult(theta=theta, scale=s, coeffs=a, component=component, cost=cost,
                      pose3d=_pose_from(model, theta, a), center=offset)


def selection_score(result: LiftResult, model: GaussianPoseModel, weight: float, config: LiftConfig) -> float:
    """Стоимость + штраф компоненты: -2 log pi_k + sum_j log sigma_j^2"""
    if config.selection == "cost":
        return result.cost
    log_weight = math.log(weight) if weight > 0 else -math.inf
    return result.cost - 2.0 * log_weight + float(np.sum(np.log(model.sigma ** 2)))


def lift_mixture(y2d: Pose2D, mixture: MixtureModel, camera: CameraModel, config: LiftConfig = LiftConfig(),
                 tables: Optional[Sequence[RotationTable]] = None) -> LiftResult:
    if tables is None:
        tables = precompute_mixture_tables(mixture, camera, config)
    candidates, scores, causes = [], [], []
    for k, (model, table) in enumerate(zip(mixture.components, tables)):
        try:
            result = lift_single(y2d, model, camera, config, table=table, component=k)
        except DataError as e:
            causes.append(e)
            candidates.append(None)
            scores.append(math.inf)
            continue
        candidates.append(result)
        scores.append(selection_score(result, model, float(mixture.weights[k]), config))

    if all(c is None for c in candidates):
        raise AllComponentsFailedError(f"все {mixture.K} компонент(ы) не дали решения: {causes[0]}", causes=causes)
    # np.argmin возвращает первый минимум: при равенстве выигрывает меньший индекс
    best = int(np.argmin(scores)) if np.any(np.isfinite(scores)) else next(i for i, c in enumerate(candidates) if c is not None)
    winner = candidates[best]
    return LiftResult(theta=winner.theta, scale=winner.scale, coeffs=winner.coeffs, component=best, cost=winner.cost,
                      pose3d=winner.pose3d, center=winner.center, component_scores=tuple(scores))


def lift_batch(frames: Sequence[Pose2D], mixture: MixtureModel, camera: CameraModel, config: LiftConfig = LiftConfig(),
               workers: Optional[int] = None) -> BatchLiftResult:
    """Независимый подъём кадров; ошибки кадров собираются по индексам, порядок сохраняется"""
    start = time.perf_counter()
    tables = precompute_mixture_tables(mixture, camera, config)
    workers = workers or Config.WORKERS

    def _one(frame):
        try:
            return lift_mixture(frame, mixture, camera, config, tables=tables), None
        except DataError as e:
            return None, e

    if workers > 1 and len(frames) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            outcomes = list(executor.map(_one, frames))
    else:
        outcomes = [_one(frame) for frame in frames]

    results = [r for r, _ in outcomes]
    errors = {i: e for i, (_, e) in enumerate(outcomes) if e is not None}
    batch = BatchLiftResult(results=results, errors=errors, elapsed=time.perf_counter() - start)
    for i, e in errors.items():
        logger.warning(f"⚠️ Кадр {i}: {e}")
    logger.info(f"📊 Подъём {len(frames)} кадров: ошибок {len(errors)}, {batch.frames_per_second:.0f} кадров/с")
    return batch
