# Конфигурация poselift: переменные окружения + типизированные настройки алгоритмов
import json
import logging
import os
from typing import List, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import UsageError

load_dotenv()

logger = logging.getLogger(__name__)

DEFAULT_TOPOLOGY_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data", "h36m_17.json")
DEFAULT_FUSION_WEIGHT = 0.25  # при 0.5 пики наблюдения и проекции равны по высоте
BASELINE_FUSION_WEIGHT = 0.5


class Config:
    LOG_LEVEL = os.getenv("POSELIFT_LOG_LEVEL", "INFO")
    WORKERS = int(os.getenv("POSELIFT_WORKERS", "1"))  # Потоки для пакетной обработки кадров
    MODELS_DIR = os.getenv("POSELIFT_MODELS_DIR", "models")
    MAX_UPLOAD_SIZE = int(os.getenv("POSELIFT_MAX_UPLOAD_MB", "64")) * 1024 * 1024
    MAX_CONCURRENT_TASKS = int(os.getenv("POSELIFT_MAX_CONCURRENT_TASKS", "2"))
    DEFAULT_TOPOLOGY = os.getenv("POSELIFT_DEFAULT_TOPOLOGY", DEFAULT_TOPOLOGY_PATH)
    PORT = int(os.getenv("PORT", "8000"))


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class GrowthSchedule(_Frozen):
    """Расписание роста базиса: +step каждые rounds_per_step раундов до J"""
    rounds_per_step: int = Field(3, ge=1)
    step: int = Field(1, ge=1)
    tol: float = Field(1e-6, gt=0)
    max_rounds: int = Field(200, ge=1)


class AlignConfig(_Frozen):
    J: int = Field(20, ge=1)
    schedule: GrowthSchedule = GrowthSchedule()
    regularizer_mode: Literal["gaussian_prior", "sigma_scaled"] = "gaussian_prior"


class ExemplarConfig(_Frozen):
    k_max: Optional[int] = Field(None, ge=1)  # None -> K
    stride: int = Field(64, ge=1)
    min_separation: Optional[float] = None  # None -> 0.4 x медиана попарных расстояний
    separation_ratio: float = Field(0.4, ge=0)
    policy: Literal["stop", "skip"] = "stop"


class EmConfig(_Frozen):
    tol: float = Field(1e-6, gt=0)
    max_iter: int = Field(500, ge=0)
    collapse_policy: Literal["remove", "raise"] = "remove"


class TrainingConfig(_Frozen):
    K: int = Field(3, ge=1)
    augment: bool = True
    align: AlignConfig = AlignConfig()
    exemplars: ExemplarConfig = ExemplarConfig()
    em: EmConfig = EmConfig()


class LiftConfig(_Frozen):
    grid_n: int = Field(80, ge=1)
    refine: bool = True
    refine_grid_n: int = Field(10000, ge=1)  # эталонная плотная сетка, см. reference()
    regularizer_mode: Literal["gaussian_prior", "sigma_scaled"] = "gaussian_prior"
    lambda_scale: float = Field(1.0, ge=0)
    selection: Literal["posterior", "cost"] = "posterior"
    scale_floor: float = Field(1e-6, gt=0)
    refine_tol: float = Field(1e-10, gt=0)

    def reference(self) -> "LiftConfig":
        """Полный перебор refine_grid_n углов без уточнения"""
        return self.model_copy(update={"grid_n": self.refine_grid_n, "refine": False})


class NoiseModel(_Frozen):
    jitter_std: float = Field(0.0, ge=0)  # пиксели
    outlier_prob: float = Field(0.0, ge=0, le=1)
    outlier_px: float = Field(0.0, ge=0)


class SimConfig(_Frozen):
    stages: int = Field(6, ge=1)
    noise: NoiseModel = NoiseModel()
    fusion_weights: Optional[List[float]] = None  # None -> DEFAULT_FUSION_WEIGHT на каждой стадии
    seed: int = 0
    width: int = Field(46, ge=1)
    height: int = Field(46, ge=1)
    blur_sigma: float = Field(1.0, gt=0)
    pixels_per_unit: float = Field(28.0, gt=0)
    use_mixture: bool = True
    lift: LiftConfig = LiftConfig()

    @field_validator("fusion_weights")
    @classmethod
    def _weights_in_range(cls, value):
        if value is not None and any(not 0.0 <= w <= 1.0 for w in value):
            raise ValueError("веса слияния должны лежать в [0, 1]")
        return value

    @model_validator(mode="after")
    def _weights_match_stages(self):
        if self.fusion_weights is not None and len(self.fusion_weights) != self.stages:
            raise ValueError(f"ожидалось {self.stages} весов слияния, получено {len(self.fusion_weights)}")
        return self

    def weights(self) -> List[float]:
        return list(self.fusion_weights) if self.fusion_weights is not None else [DEFAULT_FUSION_WEIGHT] * self.stages


class ProtocolPreset(_Frozen):
    name: str
    test_subjects: Optional[List[str]] = None
    stride: int = 1
    cameras: Optional[List[str]] = None
    aligned: bool = False


PROTOCOLS = {
    "1": ProtocolPreset(name="protocol1", test_subjects=["S9", "S11"], stride=5),
    "2": ProtocolPreset(name="protocol2", test_subjects=["S11"], stride=64, aligned=True),
    "3": ProtocolPreset(name="protocol3", test_subjects=["S9", "S11"], cameras=["cam3"], aligned=True),
}


def load_config_file(path: Optional[str], model: type):
    """Загружает JSON-конфиг в pydantic-модель; без пути возвращает значения по умолчанию"""
    if not path:
        return model()
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
        config = model.model_validate(raw)
        logger.info(f"⚙️ Конфигурация загружена: {path}")
        return config
    except (OSError, json.JSONDecodeError, ValidationError) as e:
        logger.error(f"❌ Ошибка чтения конфигурации {path}: {e}")
        raise UsageError(f"--config {path}: {e}") from e
