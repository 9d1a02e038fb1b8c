"""
Многостадийный симулятор: синтетический наблюдатель вместо CNN и цикл
извлечение -> подъём -> проекция -> рендер -> слияние по T стадиям.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from beliefmap import BeliefStack, extract_landmarks, fuse, project_pose, render_beliefs, stage_loss
from config import BASELINE_FUSION_WEIGHT, Config, NoiseModel, SimConfig
from errors import DataError, SimulationStageError
from lift import LiftResult, RotationTable, lift_mixture, precompute_mixture_tables
from metrics import planar_aligned_error
from mixture import MixtureModel, single_component
from skeleton import CameraModel, Pose2D, Pose3D, as_pose3d

logger = logging.getLogger(__name__)

WEIGHT_GRID = np.round(np.arange(21) * 0.05, 10)


@dataclass
class StageRecord:
    stage: int
    extracted: Pose2D
    lift: LiftResult
    projected: Pose2D
    weight: float
    loss: float
    fused_peak: float  # среднее максимумов каналов ориентиров
    error2d: float
    projected_error2d: float
    error3d: float

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "weight": self.weight,
            "theta": self.lift.theta,
            "scale": self.lift.scale,
            "component": self.lift.component,
            "lift_cost": self.lift.cost,
            "loss": self.loss,
            "fused_peak": self.fused_peak,
            "error2d": self.error2d,
            "projected_error2d": self.projected_error2d,
            "error3d": self.error3d,
        }


@dataclass
class StageTrace:
    stages: List[StageRecord] = field(default_factory=list)
    frame_id: str = ""

    def __len__(self) -> int:
        return len(self.stages)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(record, name) for record in self.stages])

    def to_dict(self) -> dict:
        return {"frame_id": self.frame_id, "stages": [record.to_dict() for record in self.stages]}


@dataclass
class FusionFit:
    weights: List[float]
    stage_losses: List[float]  # средняя потеря по кадрам на каждой стадии при найденных весах
    baseline_losses: List[float]


def map_center(sim: SimConfig) -> np.ndarray:
    return np.array([(sim.width - 1) / 2.0, (sim.height - 1) / 2.0])


def ground_truth_2d(gt3d: Pose3D, camera: CameraModel, sim: SimConfig) -> Pose2D:
    """Проекция позы в пиксели карты: центроид в центр карты, масштаб pixels_per_unit"""
    pose = as_pose3d(gt3d)
    centered = pose - pose.mean(axis=1, keepdims=True)
    return camera.project(centered, sim.pixels_per_unit) + map_center(sim)[:, None]


def mean_pixel_error(y2d: Pose2D, gt2d: Pose2D) -> float:
    return float(np.mean(np.linalg.norm(np.asarray(y2d) - np.asarray(gt2d), axis=0)))


def synth_observation(gt2d: Pose2D, noise: NoiseModel, seed: int, width: int = 46, height: int = 46,
                      blur_sigma: float = 1.0) -> BeliefStack:
    """Карты детектора: gt2d + гауссов шум, с вероятностью outlier_prob пик смещается на outlier_px"""
    rng = np.random.default_rng(seed)
    y = np.array(gt2d, dtype=float)
    L = y.shape[1]
    jitter = rng.normal(0.0, 1.0, size=(2, L))
    outliers = rng.random(L) < noise.outlier_prob
    angles = rng.uniform(0.0, 2.0 * math.pi, size=L)
    if noise.jitter_std > 0:
        y = y + noise.jitter_std * jitter
    if noise.outlier_px > 0 and np.any(outliers):
        y[:, outliers] += noise.outlier_px * np.vstack([np.cos(angles), np.sin(angles)])[:, outliers]
    return render_beliefs(y, width, height, blur_sigma)


def _stage_mixture(mixture: MixtureModel, sim: SimConfig) -> MixtureModel:
    if sim.use_mixture:
        return mixture
    return single_component(mixture.components[int(np.argmax(mixture.weights))])


def _lift_stage(stage: int, extracted: Pose2D, mixture: MixtureModel, camera: CameraModel, sim: SimConfig,
                tables: Sequence[RotationTable]):
    try:
        result = lift_mixture(extracted, mixture, camera, sim.lift, tables=tables)
    except DataError as e:
        raise SimulationStageError(stage, e) from e
    projected = project_pose(result, camera)
    return result, projected, render_beliefs(projected, sim.width, sim.height, sim.blur_sigma)


def run_stages(gt3d: Pose3D, mixture: MixtureModel, camera: CameraModel, sim: SimConfig = SimConfig(),
               observation: Optional[BeliefStack] = None, tables: Optional[Sequence[RotationTable]] = None,
               frame_id: str = "") -> StageTrace:
    mixture = _stage_mixture(mixture, sim)
    if tables is None:
        tables = precompute_mixture_tables(mixture, camera, sim.lift)
    gt2d = ground_truth_2d(gt3d, camera, sim)
    if observation is None:
        observation = synth_observation(gt2d, sim.noise, sim.seed, sim.width, sim.height, sim.blur_sigma)
    gt_maps = render_beliefs(gt2d, sim.width, sim.height, sim.blur_sigma)

    trace = StageTrace(frame_id=frame_id)
    current = extract_landmarks(observation)
    for t, w in enumerate(sim.weights(), start=1):
        result, projected, b_hat = _lift_stage(t, current, mixture, camera, sim, tables)
        fused = fuse(observation, b_hat, w)
        trace.stages.append(StageRecord(
            stage=t,
            extracted=current,
            lift=result,
            projected=projected,
            weight=w,
            loss=stage_loss(fused, gt_maps),
            fused_peak=float(fused.channels[:-1].max(axis=(1, 2)).mean()),
            error2d=mean_pixel_error(current, gt2d),
            projected_error2d=mean_pixel_error(projected, gt2d),
            error3d=planar_aligned_error(result.pose3d, gt3d),
        ))
        current = extract_landmarks(fused)

    logger.debug(f"🔄 Кадр {frame_id}: 3D-ошибка по стадиям {np.round(trace.column('error3d'), 4).tolist()}")
    return trace


def run_batch(frames: Sequence[Pose3D], mixture: MixtureModel, camera: CameraModel, sim: SimConfig = SimConfig(),
              frame_ids: Optional[Sequence[str]] = None, workers: Optional[int] = None) -> List[StageTrace]:
    """Кадры независимы; кадр i использует seed + i"""
    stage_mixture = _stage_mixture(mixture, sim)
    tables = precompute_mixture_tables(stage_mixture, camera, sim.lift)
    frame_ids = list(frame_ids) if frame_ids is not None else [str(i) for i in range(len(frames))]
    workers = workers or Config.WORKERS

    def _one(index: int) -> StageTrace:
        frame_sim = sim.model_copy(update={"seed": sim.seed + index})
        return run_stages(frames[index], stage_mixture, camera, frame_sim, tables=tables, frame_id=frame_ids[index])

    if workers > 1 and len(frames) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            traces = list(executor.map(_one, range(len(frames))))
    else:
        traces = [_one(i) for i in range(len(frames))]
    logger.info(f"✅ Симуляция: {len(traces)} кадров, {sim.stages} стадий")
    return traces


def summarize_traces(traces: Sequence[StageTrace]) -> Dict[str, List[float]]:
    """Медианы и средние по кадрам для каждой стадии"""
    summary: Dict[str, List[float]] = {}
    if not traces:
        return summary
    for name in ("error2d", "projected_error2d", "error3d", "loss"):
        values = np.vstack([trace.column(name) for trace in traces])
        summary[f"median_{name}"] = np.median(values, axis=0).tolist()
        summary[f"mean_{name}"] = np.mean(values, axis=0).tolist()
    return summary


@dataclass
class _FrameState:
    observation: BeliefStack
    gt_maps: BeliefStack
    current: Pose2D


def _initial_states(frames, camera, sim, observations) -> List[_FrameState]:
    states = []
    for i, gt3d in enumerate(frames):
        gt2d = ground_truth_2d(gt3d, camera, sim)
        observation = observations[i] if observations is not None else \
            synth_observation(gt2d, sim.noise, sim.seed + i, sim.width, sim.height, sim.blur_sigma)
        states.append(_FrameState(observation, render_beliefs(gt2d, sim.width, sim.height, sim.blur_sigma),
                                  extract_landmarks(observation)))
    return states


def _sweep(states: List[_FrameState], weights: List[float], mixture, camera, sim, tables, optimize: bool):
    """Один проход по стадиям; b_hat стадии не зависит от w_t и считается один раз на кадр"""
    losses = []
    for t in range(sim.stages):
        b_hats = [_lift_stage(t + 1, s.current, mixture, camera, sim, tables)[2] for s in states]
        if optimize:
            grid_losses = [np.mean([stage_loss(fuse(s.observation, b, w), s.gt_maps) for s, b in zip(states, b_hats)])
                           for w in WEIGHT_GRID]
            best = min(grid_losses)
            # При равенстве берётся наибольший вес
            weights[t] = float(max(w for w, value in zip(WEIGHT_GRID, grid_losses) if value == best))
        fused = [fuse(s.observation, b, weights[t]) for s, b in zip(states, b_hats)]
        losses.append(float(np.mean([stage_loss(f, s.gt_maps) for f, s in zip(fused, states)])))
        for s, f in zip(states, fused):
            s.current = extract_landmarks(f)
    return losses


def fit_fusion_weights(frames: Sequence[Pose3D], mixture: MixtureModel, camera: CameraModel, sim: SimConfig = SimConfig(),
                       observations: Optional[Sequence[BeliefStack]] = None, passes: int = 2) -> FusionFit:
    """Покоординатный спуск по сетке {0, 0.05, ..., 1}: стадии по порядку, два прохода"""
    if len(frames) == 0:
        raise DataError("нужен хотя бы один кадр для подбора весов слияния")
    mixture = _stage_mixture(mixture, sim)
    tables = precompute_mixture_tables(mixture, camera, sim.lift)

    initial = sim.weights()
    reference = [BASELINE_FUSION_WEIGHT] * sim.stages
    baseline = _sweep(_initial_states(frames, camera, sim, observations), reference, mixture, camera, sim, tables, False)

    weights = list(initial)
    for index in range(passes):
        previous = list(weights)
        _sweep(_initial_states(frames, camera, sim, observations), weights, mixture, camera, sim, tables, True)
        logger.info(f"📊 Проход {index + 1}: веса слияния {weights}")
        if weights == previous:
            break

    losses = _sweep(_initial_states(frames, camera, sim, observations), weights, mixture, camera, sim, tables, False)
    candidates = [(weights, losses), (reference, baseline)]
    if initial != reference and initial != weights:
        candidates.insert(1, (initial, _sweep(_initial_states(frames, camera, sim, observations), list(initial),
                                              mixture, camera, sim, tables, False)))
    # При равенстве остаются подобранные веса
    best_weights, best_losses = min(candidates, key=lambda c: c[1][-1])
    if best_weights is not weights:
        logger.warning(f"⚠️ Подобранные веса хуже {best_weights} на последней стадии "
                       f"({losses[-1]:.6g} > {best_losses[-1]:.6g}), оставляем их")
    return FusionFit(weights=list(best_weights), stage_losses=best_losses, baseline_losses=baseline)
