#!/usr/bin/env python3
"""
Командная строка poselift: train, lift, simulate, eval, inspect.

Коды выхода: 0 - успех, 1 - ошибка использования, 2 - ошибка данных.
"""
import argparse
import json
import logging
import sys
from typing import List, Optional

from pydantic import ValidationError

from config import PROTOCOLS, Config, LiftConfig, SimConfig, TrainingConfig, load_config_file
from errors import DataError, UsageError
from lift import lift_batch
from metrics import evaluate_pairs
from mixture import train_pose_mixture
from preprocess import build_training_set
from pose_io import (ModelFile, filter_protocol, load_model, load_pose_csv, model_summary, poses_dataset,
                     read_belief_stack, save_model, write_lift_json, write_metrics_csv, write_pose_csv,
                     write_simulation_report)
from beliefmap import extract_landmarks
from simulate import fit_fusion_weights, run_batch, summarize_traces
from skeleton import CameraModel, image_camera, load_topology

logger = logging.getLogger("cli")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _camera(name: str) -> CameraModel:
    return image_camera() if name == "image" else CameraModel()


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="poselift", description="Модели поз с выравниванием поворотов и подъём 2D -> 3D")
    parser.add_argument("--verbose", action="store_true", help="Подробный лог (DEBUG)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    train = sub.add_parser("train", help="Обучение смеси PPCA по 3D-позам")
    train.add_argument("--poses", required=True, help="CSV с 3D-позами")
    train.add_argument("--topology", default=Config.DEFAULT_TOPOLOGY)
    train.add_argument("--config", default=None, help="JSON с TrainingConfig")
    train.add_argument("--k", type=int, default=None, help="Число компонент смеси")
    train.add_argument("--j", type=int, default=None, help="Размер базиса")
    train.add_argument("--out", required=True, help="Файл модели")

    lift = sub.add_parser("lift", help="Подъём 2D-ориентиров в 3D")
    lift.add_argument("--model", required=True)
    source = lift.add_mutually_exclusive_group(required=True)
    source.add_argument("--input", help="CSV с 2D-ориентирами")
    source.add_argument("--beliefs", nargs="+", help="Файлы карт уверенности BMAP")
    lift.add_argument("--config", default=None, help="JSON с LiftConfig")
    lift.add_argument("--grid", type=int, default=None, help="Число углов сетки")
    lift.add_argument("--refine", action=argparse.BooleanOptionalAction, default=None)
    lift.add_argument("--camera", choices=["identity", "image"], default=None,
                      help="identity для координат модели, image для пикселей (по умолчанию для --beliefs)")
    lift.add_argument("--out", required=True, help="CSV с 3D-позами; рядом пишется <out>.json")

    simulate = sub.add_parser("simulate", help="Многостадийная симуляция по 3D-позам")
    simulate.add_argument("--poses", required=True)
    simulate.add_argument("--model", required=True)
    simulate.add_argument("--config", default=None, help="JSON с SimConfig")
    simulate.add_argument("--grid", type=int, default=None)
    simulate.add_argument("--refine", action=argparse.BooleanOptionalAction, default=None)
    simulate.add_argument("--fit-weights", action="store_true", help="Подобрать веса слияния на этих кадрах")
    simulate.add_argument("--seed", type=int, default=None)
    simulate.add_argument("--out", required=True, help="JSONL-отчёт")

    evaluate = sub.add_parser("eval", help="Метрики по предсказанным и эталонным 3D-позам")
    evaluate.add_argument("--pred", required=True)
    evaluate.add_argument("--gt", required=True)
    evaluate.add_argument("--topology", default=Config.DEFAULT_TOPOLOGY)
    evaluate.add_argument("--protocol", choices=sorted(PROTOCOLS), default="1")
    evaluate.add_argument("--out", required=True)

    inspect = sub.add_parser("inspect", help="Сводка по файлу модели")
    inspect.add_argument("--model", required=True)
    return parser


def _override(config, **updates):
    """Флаги командной строки поверх значений из файла; None - флаг не задан"""
    updates = {k: v for k, v in updates.items() if v is not None}
    if not updates:
        return config
    try:
        return type(config).model_validate({**config.model_dump(), **updates})
    except ValidationError as e:
        raise UsageError(f"недопустимое значение флага: {e}") from e


def cmd_train(args) -> int:
    topology = load_topology(args.topology)
    config: TrainingConfig = load_config_file(args.config, TrainingConfig)
    config = _override(config, K=args.k, align=_override(config.align, J=args.j))
    dataset = load_pose_csv(args.poses, topology, "3d")

    mixture, state = train_pose_mixture(dataset.poses, topology, config)
    meta = {
        "J": config.align.J,
        "K": config.K,
        "schedule": config.align.schedule.model_dump(),
        "regularizer_mode": config.align.regularizer_mode,
        "alignment_converged": state.converged,
    }
    save_model(ModelFile(topology=topology, mixture=mixture, training_meta=meta), args.out)
    logger.info(f"✅ Обучение завершено: K={mixture.K}, J={mixture.J} -> {args.out}")
    return 0


def _lift_config(args) -> LiftConfig:
    config: LiftConfig = load_config_file(args.config, LiftConfig)
    return _override(config, grid_n=args.grid, refine=args.refine)


def cmd_lift(args) -> int:
    model_file = load_model(args.model)
    topology = model_file.topology
    config = _lift_config(args)
    if args.beliefs:
        frames = [extract_landmarks(read_belief_stack(path)) for path in args.beliefs]
        frame_ids = [str(i) for i in range(len(frames))]
        camera = _camera(args.camera or "image")
    else:
        dataset = load_pose_csv(args.input, topology, "2d")
        frames, frame_ids = [f.coords for f in dataset.frames], dataset.frame_ids
        camera = _camera(args.camera or "identity")

    batch = lift_batch(frames, model_file.mixture, camera, config)
    # Кадры с ошибкой попадают только в JSON-отчёт
    lifted = [(f, r.pose3d) for f, r in zip(frame_ids, batch.results) if r is not None]
    write_pose_csv(poses_dataset([p for _, p in lifted], [f for f, _ in lifted], "3d"), topology, args.out)
    write_lift_json(batch.results, frame_ids, batch.errors, args.out + ".json")
    logger.info(f"✅ Подъём: {len(frames)} кадров, ошибок {len(batch.errors)} -> {args.out}")
    return 0


def cmd_simulate(args) -> int:
    model_file = load_model(args.model)
    sim: SimConfig = load_config_file(args.config, SimConfig)
    sim = _override(sim, seed=args.seed, lift=_override(sim.lift, grid_n=args.grid, refine=args.refine))
    dataset = load_pose_csv(args.poses, model_file.topology, "3d")
    # Позы приводятся к масштабу обучающего набора модели
    poses = build_training_set(list(dataset.poses), model_file.topology, augment=False)
    camera = image_camera()

    if args.fit_weights:
        fit = fit_fusion_weights(poses, model_file.mixture, camera, sim)
        sim = sim.model_copy(update={"fusion_weights": fit.weights})
        logger.info(f"📊 Веса слияния: {fit.weights}")

    traces = run_batch(poses, model_file.mixture, camera, sim, frame_ids=dataset.frame_ids)
    summary = summarize_traces(traces)
    summary["fusion_weights"] = sim.weights()
    write_simulation_report(traces, summary, args.out)
    logger.info(f"✅ Симуляция: {len(traces)} кадров -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    topology = load_topology(args.topology)
    preset = PROTOCOLS[args.protocol]
    gt = filter_protocol(load_pose_csv(args.gt, topology, "3d"), preset)
    pred = {f.frame_id: f for f in load_pose_csv(args.pred, topology, "3d").frames}
    missing = [f.frame_id for f in gt.frames if f.frame_id not in pred]
    if missing:
        raise DataError(f"нет предсказаний для {len(missing)} кадров, например {missing[0]}")

    subset = topology.eval_subset if preset.aligned else None
    report = evaluate_pairs([pred[f.frame_id].coords for f in gt.frames], [f.coords for f in gt.frames],
                            gt.frame_ids, subset=subset, labels=[f.action for f in gt.frames])
    write_metrics_csv(report, args.out)
    logger.info(f"✅ Оценка ({preset.name}): {len(report)} кадров -> {args.out}")
    return 0


def cmd_inspect(args) -> int:
    print(json.dumps(model_summary(load_model(args.model)), indent=2, ensure_ascii=False))
    return 0


COMMANDS = {"train": cmd_train, "lift": cmd_lift, "simulate": cmd_simulate, "eval": cmd_eval, "inspect": cmd_inspect}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("не указана команда (train, lift, simulate, eval, inspect)")
    except UsageError as e:
        print(f"poselift: ошибка использования: {e}", file=sys.stderr)
        return 1

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else Config.LOG_LEVEL,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        logger.error(f"❌ {e}")
        print(f"poselift: ошибка использования: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        logger.error(f"❌ Ошибка данных: {e}")
        print(f"poselift: ошибка данных: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
