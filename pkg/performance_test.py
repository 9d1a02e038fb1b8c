#!/usr/bin/env python3
"""
Тест производительности подъёма: кадры в секунду и качество сетки углов
"""
import time

import numpy as np
import psutil
import pytest

from config import LiftConfig
from conftest import make_model, sample_poses
from lift import lift_batch, lift_single, precompute_rotation_tables
from metrics import planar_aligned_error
from mixture import single_component
from skeleton import CameraModel

THROUGHPUT_FLOOR = 1000.0  # кадров/с, нижняя граница при K=1, grid_n=80
THROUGHPUT_TARGET = 3000.0


def _scene(n_frames: int, seed: int = 7):
    rng = np.random.default_rng(seed)
    model = make_model(rng, L=17, J=5, sigma_top=0.3)
    poses, _, _ = sample_poses(model, n_frames, rng, noise_std=0.01)
    camera = CameraModel()
    frames = [camera.project(p) + rng.normal(scale=0.01, size=(2, 17)) for p in poses]
    return model, camera, frames


def _process_mb() -> float:
    return psutil.Process().memory_info().rss / (1024 * 1024)


def measure_throughput(n_frames: int = 10000, grid_n: int = 80) -> float:
    """Однопоточный подъём пакета одной гауссианой"""
    print("=== Тест пропускной способности ===")
    model, camera, frames = _scene(n_frames)
    config = LiftConfig(grid_n=grid_n, refine=False)
    memory_before = _process_mb()

    start = time.perf_counter()
    batch = lift_batch(frames, single_component(model), camera, config, workers=1)
    elapsed = time.perf_counter() - start
    fps = n_frames / elapsed

    print(f"📊 Кадров: {n_frames}, сетка: {grid_n}, ошибок: {len(batch.errors)}")
    print(f"⏱️ Время: {elapsed:.2f}s, {fps:.0f} кадров/с (цель {THROUGHPUT_TARGET:.0f})")
    print(f"💾 Память: {memory_before:.0f}MB -> {_process_mb():.0f}MB")
    return fps


def _grid_scene(n_frames: int, seed: int = 11):
    """Позы модели, случайные углы и масштаб s из [0.5, 2], без шума"""
    rng = np.random.default_rng(seed)
    model = make_model(rng, L=17, J=5, sigma_top=0.3)
    poses, _, _ = sample_poses(model, n_frames, rng)
    camera = CameraModel()
    scales = rng.uniform(0.5, 2.0, size=n_frames)
    return model, camera, poses, [camera.project(p, s) for p, s in zip(poses, scales)]


def measure_grid_quality(n_frames: int = 1000, grid_n: int = 80, dense_n: int = 10000):
    """Сетка с уточнением против полного перебора refine_grid_n углов; возвращает сводку"""
    print("\n=== Тест качества сетки углов ===")
    model, camera, poses, frames = _grid_scene(n_frames)
    coarse = LiftConfig(grid_n=grid_n, refine=False)
    refined = LiftConfig(grid_n=grid_n, refine=True, refine_grid_n=dense_n)
    dense = refined.reference()
    tables = {
        "coarse": precompute_rotation_tables(model, camera, grid_n),
        "dense": precompute_rotation_tables(model, camera, dense.grid_n),
    }

    start = time.perf_counter()
    matches, worst_gap, never_worse = 0, 0.0, True
    refined_errors, dense_errors = [], []
    for pose, y in zip(poses, frames):
        c = lift_single(y, model, camera, coarse, table=tables["coarse"])
        r = lift_single(y, model, camera, refined, table=tables["coarse"])
        d = lift_single(y, model, camera, dense, table=tables["dense"])
        never_worse &= r.cost <= c.cost + 1e-12
        worst_gap = max(worst_gap, r.cost - d.cost)
        if r.cost <= 1.01 * d.cost + 1e-12:
            matches += 1
        refined_errors.append(planar_aligned_error(r.pose3d, pose))
        dense_errors.append(planar_aligned_error(d.pose3d, pose))
    elapsed = time.perf_counter() - start

    quality = {
        "share": matches / n_frames,
        "worst_gap": worst_gap,
        "never_worse": bool(never_worse),
        "refined_error": float(np.mean(refined_errors)),
        "dense_error": float(np.mean(dense_errors)),
        "elapsed": elapsed,
    }
    print(f"📊 Стоимость в пределах 1% от перебора {dense.grid_n} углов: {quality['share'] * 100:.1f}% кадров")
    print(f"📊 Худший разрыв стоимости: {worst_gap:.3e}")
    print(f"📊 Средняя ошибка 3D: сетка {quality['refined_error']:.6f}, перебор {quality['dense_error']:.6f}")
    print(f"{'✅' if never_worse else '❌'} Уточнение не ухудшает стоимость сетки")
    print(f"⏱️ Время: {elapsed:.1f}s")
    return quality


@pytest.mark.slow
def test_throughput_floor():
    assert measure_throughput(n_frames=2000) >= THROUGHPUT_FLOOR


@pytest.mark.slow
def test_grid_with_refinement_matches_exhaustive_search():
    quality = measure_grid_quality(n_frames=1000)
    assert quality["never_worse"]
    assert quality["share"] >= 0.99
    assert abs(quality["refined_error"] - quality["dense_error"]) <= 0.01 * quality["dense_error"] + 1e-6


if __name__ == "__main__":
    print("🧪 Тестирование производительности подъёма\n")

    fps = measure_throughput()
    quality = measure_grid_quality()

    print(f"\n📊 Результат: {fps:.0f} кадров/с, совпадение сетки {quality['share'] * 100:.1f}%")
    if fps < THROUGHPUT_FLOOR:
        print(f"❌ Ниже нижней границы {THROUGHPUT_FLOOR:.0f} кадров/с")
    elif fps < THROUGHPUT_TARGET:
        print(f"⚠️ Ниже цели {THROUGHPUT_TARGET:.0f} кадров/с, зависит от машины")
    else:
        print("🎉 Цель по скорости достигнута!")
