"""
Ввод-вывод poselift: CSV с позами, бинарный файл модели, карты уверенности BMAP,
отчёты симуляции (JSONL) и метрик (CSV).
"""
import io
import json
import logging
import re
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from align import GaussianPoseModel
from beliefmap import BeliefStack
from config import ProtocolPreset
from errors import (DuplicateFrameIdError, JointCountMismatchError, ParseError, VersionMismatchError)
from mixture import MixtureModel
from skeleton import SkeletonTopology

logger = logging.getLogger(__name__)

META_COLUMNS = ("subject", "action", "camera")
AXES = {"2d": ("x", "y"), "3d": ("x", "y", "z")}

MODEL_MAGIC = b"PLIFTMDL"
MODEL_VERSION = 1
BMAP_MAGIC = b"BMAP"


@dataclass
class PoseFrame:
    frame_id: str
    coords: np.ndarray  # (2, L) или (3, L)
    subject: Optional[str] = None
    action: Optional[str] = None
    camera: Optional[str] = None


@dataclass
class PoseDataset:
    frames: List[PoseFrame]
    kind: str = "3d"
    columns: Sequence[str] = ()  # присутствующие мета-столбцы

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def poses(self) -> np.ndarray:
        return np.array([f.coords for f in self.frames])

    @property
    def frame_ids(self) -> List[str]:
        return [f.frame_id for f in self.frames]


def joint_columns(topology: SkeletonTopology, kind: str) -> List[str]:
    return [f"{name}_{axis}" for name in topology.joint_names for axis in AXES[kind]]


def _check_kind(kind: str) -> str:
    kind = kind.lower()
    if kind not in AXES:
        raise ParseError(f"неизвестный тип поз: {kind}")
    return kind


def _pandas_line(error: Exception) -> Optional[int]:
    match = re.search(r"line (\d+)", str(error))
    return int(match.group(1)) if match else None


def _read_text(path: str) -> str:
    try:
        with open(path, encoding="utf-8") as f:
            return f.read()
    except (OSError, UnicodeDecodeError) as e:
        raise ParseError(f"не удалось прочитать {path}: {e}") from e


def _read_table(text: str, path: str):
    """Заголовок и таблица строк с одним запасным столбцом для лишних полей"""
    try:
        header = list(pd.read_csv(io.StringIO(text), nrows=0, dtype=str).columns)
        width = len(header)
        table = pd.read_csv(io.StringIO(text), header=None, names=list(range(width + 1)), dtype=str,
                            keep_default_na=False, skip_blank_lines=True, index_col=False)
    except pd.errors.ParserError as e:
        raise JointCountMismatchError(f"неверное число полей: {e}", line=_pandas_line(e)) from e
    except pd.errors.EmptyDataError as e:
        raise ParseError(f"пустой файл {path}") from e
    body = table.iloc[1:, :width].reset_index(drop=True)
    body.columns = header
    return header, body, table.iloc[1:, width].notna().to_numpy()


def load_pose_csv(path: str, topology: SkeletonTopology, kind: str = "3d") -> PoseDataset:
    """Заголовок frame_id[,subject,action,camera],<joint>_x,<joint>_y[,<joint>_z],... в порядке топологии"""
    kind = _check_kind(kind)
    text = _read_text(path)
    # pandas пропускает пустые строки, поэтому номера строк файла считаются отдельно
    physical = [n for n, line in enumerate(text.splitlines(), start=1) if line.strip()]

    def _line(row: int) -> int:
        return physical[row + 1] if row + 1 < len(physical) else row + 2

    header, df, too_long = _read_table(text, path)
    if not header or header[0] != "frame_id":
        raise ParseError("первый столбец должен называться frame_id", line=_line(-1))
    meta = [c for c in header[1:] if c in META_COLUMNS]
    expected = joint_columns(topology, kind)
    coords_header = header[1 + len(meta):]
    if len(coords_header) != len(expected):
        raise JointCountMismatchError(
            f"ожидалось {len(expected)} координатных столбцов ({topology.L} суставов), получено {len(coords_header)}",
            line=_line(-1))
    if coords_header != expected:
        bad = next(c for c, e in zip(coords_header, expected) if c != e)
        raise ParseError(f"столбец {bad} не соответствует порядку суставов топологии", line=_line(-1))

    raw = df[expected]
    missing = raw.isna().to_numpy() | (raw == "").to_numpy()
    broken = too_long | missing.any(axis=1)
    if broken.any():
        row = int(np.argmax(broken))
        if too_long[row]:
            raise JointCountMismatchError(f"в строке больше {len(header)} полей", line=_line(row))
        raise JointCountMismatchError(f"в строке {int((~missing[row]).sum())} координат из {len(expected)}",
                                      line=_line(row))
    try:
        values = raw.to_numpy().astype(float)
    except ValueError:
        # Медленный путь только для поиска первой плохой ячейки
        values = raw.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
    bad = ~np.isfinite(values)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise ParseError(f"не число в столбце {expected[col]}: {raw.iat[row, col]!r}", line=_line(int(row)))

    seen: Dict[str, int] = {}
    frames = []
    dims = len(AXES[kind])
    for i, frame_id in enumerate(df["frame_id"].tolist()):
        if frame_id in seen:
            raise DuplicateFrameIdError(f"frame_id {frame_id} уже встречался в строке {seen[frame_id]}", line=_line(i))
        seen[frame_id] = _line(i)
        row_meta = {c: (df.at[i, c] or None) for c in meta}
        frames.append(PoseFrame(frame_id=frame_id, coords=values[i].reshape(topology.L, dims).T.copy(), **row_meta))

    logger.info(f"📂 Загружено {len(frames)} кадров ({kind}) из {path}")
    return PoseDataset(frames=frames, kind=kind, columns=tuple(meta))


def write_pose_csv(dataset: PoseDataset, topology: SkeletonTopology, path: str):
    """Числа пишутся кратчайшим представлением, точно восстанавливаемым при чтении"""
    kind = _check_kind(dataset.kind)
    header = ["frame_id", *dataset.columns, *joint_columns(topology, kind)]
    rows = []
    for frame in dataset.frames:
        meta = [getattr(frame, c) or "" for c in dataset.columns]
        rows.append([frame.frame_id, *meta, *(repr(float(v)) for v in np.asarray(frame.coords).T.reshape(-1))])
    pd.DataFrame(rows, columns=header).to_csv(path, index=False, lineterminator="\n")


def poses_dataset(poses: Sequence[np.ndarray], frame_ids: Optional[Sequence[str]] = None, kind: str = "3d") -> PoseDataset:
    frame_ids = list(frame_ids) if frame_ids is not None else [str(i) for i in range(len(poses))]
    return PoseDataset(frames=[PoseFrame(frame_id=f, coords=np.asarray(p, dtype=float)) for f, p in zip(frame_ids, poses)],
                       kind=kind)


def filter_protocol(dataset: PoseDataset, preset: ProtocolPreset) -> PoseDataset:
    """Фильтр протокола: тестовые субъекты, камеры и прореживание внутри каждой последовательности"""
    counters: Dict[tuple, int] = {}
    kept = []
    for frame in dataset.frames:
        if preset.test_subjects is not None and frame.subject is not None and frame.subject not in preset.test_subjects:
            continue
        if preset.cameras is not None and frame.camera is not None and frame.camera not in preset.cameras:
            continue
        key = (frame.subject, frame.action, frame.camera)
        position = counters.get(key, 0)
        counters[key] = position + 1
        if position % preset.stride == 0:
            kept.append(frame)
    logger.info(f"🔍 Протокол {preset.name}: {len(kept)} из {len(dataset)} кадров")
    return PoseDataset(frames=kept, kind=dataset.kind, columns=dataset.columns)


# Бинарный файл модели
@dataclass
class ModelFile:
    topology: SkeletonTopology
    mixture: MixtureModel
    training_meta: dict = field(default_factory=dict)
    version: int = MODEL_VERSION


def _canonical_json(data: dict) -> bytes:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def save_model(model_file: ModelFile, path: str):
    """PLIFTMDL | u32 версия | u32 длина заголовка | JSON-заголовок | блоки float64 little-endian"""
    mixture = model_file.mixture
    header = {
        "version": model_file.version,
        "topology": model_file.topology.to_dict(),
        "K": mixture.K,
        "J": mixture.J,
        "L": mixture.L,
        "training_meta": model_file.training_meta,
        "blocks": ["weights"] + [f"component{k}:{name}" for k in range(mixture.K)
                                 for name in ("mean", "basis", "sigma", "noise_var")],
    }
    blocks = [np.asarray(mixture.weights, dtype=float)]
    for c in mixture.components:
        blocks.extend([c.mean, c.basis, c.sigma, np.array([c.noise_var])])

    header_bytes = _canonical_json(header)
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<II", model_file.version, len(header_bytes)))
        f.write(header_bytes)
        for block in blocks:
            f.write(np.ascontiguousarray(block, dtype="<f8").tobytes())
    logger.info(f"💾 Модель сохранена: {path} (K={mixture.K}, J={mixture.J}, L={mixture.L})")


def load_model(path: str) -> ModelFile:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise ParseError(f"не удалось прочитать модель {path}: {e}") from e

    if data[:8] != MODEL_MAGIC or len(data) < 16:
        raise ParseError(f"{path}: не файл модели poselift")
    version, header_len = struct.unpack("<II", data[8:16])
    if version != MODEL_VERSION:
        raise VersionMismatchError(f"версия файла модели {version}, поддерживается {MODEL_VERSION}")
    try:
        header = json.loads(data[16:16 + header_len].decode("utf-8"))
        K, J, L = int(header["K"]), int(header["J"]), int(header["L"])
        topology = SkeletonTopology.from_dict(header["topology"])
        payload = np.frombuffer(data, dtype="<f8", offset=16 + header_len)
    except (ValueError, KeyError, TypeError) as e:
        raise ParseError(f"{path}: повреждённый заголовок модели: {e}") from e

    expected = K + K * (3 * L + J * 3 * L + J + 1)
    if payload.size != expected:
        raise ParseError(f"{path}: ожидалось {expected} чисел, найдено {payload.size}")

    position = 0

    def _take(count: int, shape) -> np.ndarray:
        nonlocal position
        block = payload[position:position + count].astype(float).reshape(shape)
        position += count
        return block

    weights = _take(K, (K,))
    components = []
    for _ in range(K):
        mean = _take(3 * L, (3, L))
        basis = _take(J * 3 * L, (J, 3, L))
        sigma = _take(J, (J,))
        noise_var = float(_take(1, (1,))[0])
        components.append(GaussianPoseModel(mean=mean, basis=basis, sigma=sigma, noise_var=noise_var))
    mixture = MixtureModel(components=tuple(components), weights=weights)
    mixture.check_invariants()
    if topology.L != L:
        raise ParseError(f"{path}: топология на {topology.L} суставов, модель на {L}")
    return ModelFile(topology=topology, mixture=mixture, training_meta=header.get("training_meta", {}), version=version)


# Карты уверенности
def write_belief_stack(stack: BeliefStack, path: str):
    """BMAP | u32 высота, ширина, каналы | float32, канал за каналом, построчно"""
    channels = stack.channels
    with open(path, "wb") as f:
        f.write(BMAP_MAGIC)
        f.write(struct.pack("<III", stack.height, stack.width, channels.shape[0]))
        f.write(np.ascontiguousarray(channels, dtype="<f4").tobytes())


def read_belief_stack(path: str) -> BeliefStack:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise ParseError(f"не удалось прочитать карты {path}: {e}") from e
    if data[:4] != BMAP_MAGIC or len(data) < 16:
        raise ParseError(f"{path}: не файл BMAP")
    height, width, count = struct.unpack("<III", data[4:16])
    values = np.frombuffer(data[16:16 + 4 * height * width * count], dtype="<f4")
    if values.size != height * width * count or len(data) != 16 + 4 * values.size:
        raise ParseError(f"{path}: ожидалось {height * width * count} значений, найдено {values.size}")
    return BeliefStack(values.astype(float).reshape(count, height, width))


# Отчёты
def write_simulation_report(traces, summary: dict, path: str):
    """По строке JSON на кадр, последней строкой - сводка"""
    with open(path, "w", encoding="utf-8") as f:
        for trace in traces:
            f.write(json.dumps(trace.to_dict(), sort_keys=True) + "\n")
        f.write(json.dumps({"summary": summary}, sort_keys=True) + "\n")


def write_metrics_csv(report: pd.DataFrame, path: str):
    report.to_csv(path, index=False, lineterminator="\n", float_format="%r")


def write_lift_json(results, frame_ids: Sequence[str], errors: Dict[int, Exception], path: str):
    records = []
    for i, (frame_id, result) in enumerate(zip(frame_ids, results)):
        if result is None:
            records.append({"frame_id": frame_id, "error": str(errors.get(i, "unknown"))})
            continue
        records.append({
            "frame_id": frame_id,
            "theta": result.theta,
            "scale": result.scale,
            "component": result.component,
            "cost": result.cost,
            "coeffs": [float(a) for a in result.coeffs],
            "component_scores": [float(s) for s in result.component_scores],
        })
    with open(path, "w", encoding="utf-8") as f:
        json.dump(records, f, indent=2, sort_keys=True)


def model_summary(model_file: ModelFile) -> dict:
    mixture = model_file.mixture
    return {
        "version": model_file.version,
        "K": mixture.K,
        "J": mixture.J,
        "L": mixture.L,
        "joints": list(model_file.topology.joint_names),
        "weights": [float(w) for w in mixture.weights],
        "components": [
            {
                "sigma": [float(s) for s in c.sigma],
                "noise_var": float(c.noise_var),
                "explained": float(np.sum(c.sigma ** 2) / (np.sum(c.sigma ** 2) + (c.dim - c.J) * c.noise_var)),
            }
            for c in mixture.components
        ],
        "training_meta": model_file.training_meta,
    }
