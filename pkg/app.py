# poselift API - HTTP-сервис подъёма 2D-ориентиров в 3D и симуляции стадий
import os
import uuid
import logging
from datetime import datetime
from typing import Dict, List, Literal, Optional

import numpy as np
import psutil
from fastapi import BackgroundTasks, FastAPI, File, HTTPException, UploadFile
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from config import Config, LiftConfig, NoiseModel, SimConfig
from errors import DataError, UsageError
from lift import lift_batch
from pose_io import load_model, model_summary
from simulate import fit_fusion_weights, run_batch, summarize_traces
from skeleton import CameraModel, image_camera

# Настройка логирования (ПЕРВЫМ ДЕЛОМ!)
logging.basicConfig(
    level=Config.LOG_LEVEL,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger("app")

VERSION = "1.0.0"

app = FastAPI(
    title="poselift API",
    description="Подъём 2D-ориентиров в 3D по моделям поз с выравниванием поворотов",
    version=VERSION
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Глобальные переменные
models: Dict[str, Dict] = {}
simulation_tasks: Dict[str, Dict] = {}


def get_memory_usage() -> Dict[str, int]:
    """Получение информации об использовании памяти"""
    try:
        memory = psutil.virtual_memory()
        process = psutil.Process()
        return {
            "total_mb": memory.total // (1024 * 1024),
            "available_mb": memory.available // (1024 * 1024),
            "process_mb": process.memory_info().rss // (1024 * 1024),
            "percent": memory.percent
        }
    except Exception as e:
        logger.error(f"Ошибка получения информации о памяти: {e}")
        return {"total_mb": 0, "available_mb": 0, "process_mb": 0, "percent": 0}


def get_active_tasks_count() -> int:
    return sum(1 for task in simulation_tasks.values() if task["status"] == "processing")


def _http_error(e: Exception) -> HTTPException:
    if isinstance(e, HTTPException):
        return e
    if isinstance(e, UsageError):
        return HTTPException(status_code=400, detail=str(e))
    if isinstance(e, DataError):
        return HTTPException(status_code=422, detail=str(e))
    return HTTPException(status_code=500, detail=str(e))


def _get_model(model_id: str) -> Dict:
    entry = models.get(model_id)
    if entry is None:
        raise HTTPException(status_code=404, detail="Модель не найдена")
    return entry


class ModelUploadResponse(BaseModel):
    model_id: str
    filename: str
    size: int
    K: int
    J: int
    L: int


class LiftRequest(BaseModel):
    model_id: str
    frames: List[List[List[float]]]  # кадры (2, L)
    grid_n: Optional[int] = Field(None, ge=1)
    refine: Optional[bool] = None
    camera: Literal["identity", "image"] = "identity"


class SimulateRequest(BaseModel):
    model_id: str
    poses: List[List[List[float]]]  # позы (3, L) в единицах модели
    stages: int = Field(6, ge=1)
    seed: int = 0
    jitter_std: float = Field(0.0, ge=0)
    outlier_prob: float = Field(0.0, ge=0, le=1)
    outlier_px: float = Field(0.0, ge=0)
    fit_weights: bool = False
    grid_n: Optional[int] = Field(None, ge=1)
    refine: Optional[bool] = None


@app.get("/")
async def root():
    """Главная страница API"""
    return {
        "name": "poselift API",
        "version": VERSION,
        "status": "running",
        "endpoints": {
            "upload": "/api/models/upload",
            "lift": "/api/lift",
            "simulate": "/api/simulate",
            "health": "/health",
            "stats": "/api/system/stats",
            "docs": "/docs"
        },
        "models_loaded": len(models)
    }


@app.get("/health")
async def health_check():
    """Проверка состояния системы"""
    try:
        return {
            "status": "healthy",
            "memory": get_memory_usage(),
            "active_tasks": get_active_tasks_count(),
            "max_concurrent_tasks": Config.MAX_CONCURRENT_TASKS,
            "timestamp": datetime.now().isoformat()
        }
    except Exception as e:
        return {
            "status": "unhealthy",
            "error": str(e),
            "timestamp": datetime.now().isoformat()
        }


@app.get("/api/system/stats")
async def get_system_stats():
    """Получение статистики системы"""
    try:
        return {
            "memory": get_memory_usage(),
            "models": len(models),
            "tasks": {
                "active": get_active_tasks_count(),
                "total": len(simulation_tasks),
                "max_concurrent": Config.MAX_CONCURRENT_TASKS
            },
            "config": {
                "workers": Config.WORKERS,
                "max_upload_mb": Config.MAX_UPLOAD_SIZE // (1024 * 1024),
                "models_dir": Config.MODELS_DIR
            }
        }
    except Exception as e:
        raise HTTPException(status_code=500, detail=str(e))


@app.post("/api/models/upload", response_model=ModelUploadResponse)
async def upload_model(file: UploadFile = File(...)):
    """Загрузка файла модели с проверкой инвариантов"""
    try:
        content = await file.read()
        if len(content) > Config.MAX_UPLOAD_SIZE:
            raise HTTPException(status_code=413, detail=f"Файл слишком большой. Максимум {Config.MAX_UPLOAD_SIZE // (1024 * 1024)}MB")

        os.makedirs(Config.MODELS_DIR, exist_ok=True)
        model_id = str(uuid.uuid4())
        path = os.path.join(Config.MODELS_DIR, f"{model_id}.bin")
        with open(path, "wb") as buffer:
            buffer.write(content)

        try:
            model_file = load_model(path)
        except DataError:
            os.remove(path)
            raise
        models[model_id] = {"path": path, "file": model_file, "created_at": datetime.now()}

        mixture = model_file.mixture
        logger.info(f"✅ Модель загружена: {file.filename} -> {model_id}, K={mixture.K}, J={mixture.J}, "
                    f"память: {get_memory_usage()['process_mb']}MB")
        return ModelUploadResponse(model_id=model_id, filename=file.filename or "", size=len(content),
                                   K=mixture.K, J=mixture.J, L=mixture.L)
    except Exception as e:
        logger.error(f"❌ Ошибка загрузки модели: {e}")
        raise _http_error(e)


@app.get("/api/models/{model_id}")
async def get_model(model_id: str):
    try:
        return {"model_id": model_id, **model_summary(_get_model(model_id)["file"])}
    except Exception as e:
        raise _http_error(e)


@app.post("/api/lift")
def lift_frames(request: LiftRequest):
    """Подъём пакета кадров; ошибки отдельных кадров не прерывают пакет"""
    try:
        model_file = _get_model(request.model_id)["file"]
        config = LiftConfig()
        updates = {k: v for k, v in {"grid_n": request.grid_n, "refine": request.refine}.items() if v is not None}
        if updates:
            config = config.model_copy(update=updates)
        camera = image_camera() if request.camera == "image" else CameraModel()
        frames = [np.asarray(frame, dtype=float) for frame in request.frames]

        batch = lift_batch(frames, model_file.mixture, camera, config)
        results = []
        for i, result in enumerate(batch.results):
            if result is None:
                results.append({"index": i, "error": str(batch.errors[i])})
                continue
            results.append({
                "index": i,
                "theta": result.theta,
                "scale": result.scale,
                "component": result.component,
                "cost": result.cost,
                "coeffs": result.coeffs.tolist(),
                "pose3d": result.pose3d.tolist(),
            })
        fps = batch.frames_per_second
        return {"results": results, "errors": len(batch.errors),
                "frames_per_second": round(fps, 1) if np.isfinite(fps) else None}
    except Exception as e:
        logger.error(f"❌ Ошибка подъёма: {e}")
        raise _http_error(e)


@app.post("/api/simulate")
async def start_simulation(request: SimulateRequest, background_tasks: BackgroundTasks):
    """Запуск симуляции стадий в фоне"""
    try:
        _get_model(request.model_id)
        active_tasks = get_active_tasks_count()
        if active_tasks >= Config.MAX_CONCURRENT_TASKS:
            raise HTTPException(status_code=429, detail=f"Слишком много активных задач ({active_tasks}). Попробуйте позже.")

        task_id = str(uuid.uuid4())
        simulation_tasks[task_id] = {
            "status": "processing",
            "model_id": request.model_id,
            "created_at": datetime.now(),
            "progress": 0
        }
        background_tasks.add_task(simulate_task, task_id, request)
        logger.info(f"🔍 Запущена симуляция: {len(request.poses)} кадров, task_id: {task_id}, активных задач: {active_tasks + 1}")
        return {"task_id": task_id, "status": "processing"}
    except Exception as e:
        logger.error(f"❌ Ошибка запуска симуляции: {e}")
        raise _http_error(e)


@app.get("/api/simulate/{task_id}")
async def get_simulation_status(task_id: str):
    task = simulation_tasks.get(task_id)
    if not task:
        raise HTTPException(status_code=404, detail="Задача не найдена")
    return {
        "task_id": task_id,
        "status": task["status"],
        "progress": task.get("progress", 0),
        "result": task.get("result"),
        "error": task.get("error")
    }


def simulate_task(task_id: str, request: SimulateRequest):
    """Фоновая задача: подбор весов (по запросу) и прогон стадий"""
    try:
        mixture = models[request.model_id]["file"].mixture
        lift_updates = {k: v for k, v in {"grid_n": request.grid_n, "refine": request.refine}.items() if v is not None}
        sim = SimConfig(
            stages=request.stages,
            seed=request.seed,
            noise=NoiseModel(jitter_std=request.jitter_std, outlier_prob=request.outlier_prob, outlier_px=request.outlier_px),
            lift=LiftConfig(**lift_updates),
        )
        poses = [np.asarray(p, dtype=float) for p in request.poses]
        camera = image_camera()

        if request.fit_weights:
            simulation_tasks[task_id]["progress"] = 10
            fit = fit_fusion_weights(poses, mixture, camera, sim)
            sim = sim.model_copy(update={"fusion_weights": fit.weights})

        simulation_tasks[task_id]["progress"] = 50
        traces = run_batch(poses, mixture, camera, sim)
        summary = summarize_traces(traces)
        summary["fusion_weights"] = sim.weights()
        simulation_tasks[task_id].update({
            "status": "completed",
            "progress": 100,
            "completed_at": datetime.now(),
            "result": {"summary": summary, "frames": [trace.to_dict() for trace in traces]}
        })
        logger.info(f"✅ Симуляция завершена: {task_id}")
    except Exception as e:
        logger.error(f"❌ Ошибка симуляции {task_id}: {e}")
        simulation_tasks[task_id].update({
            "status": "failed",
            "error": str(e)
        })


# Запуск приложения
if __name__ == "__main__":
    import uvicorn

    memory_info = get_memory_usage()
    logger.info(f"🚀 poselift API {VERSION} запущен!")
    logger.info(f"💾 Память: {memory_info['process_mb']}MB / {memory_info['total_mb']}MB")
    logger.info(f"⚙️ Потоков на пакет: {Config.WORKERS}, максимум задач: {Config.MAX_CONCURRENT_TASKS}")

    uvicorn.run(app, host="0.0.0.0", port=Config.PORT)
