#!/usr/bin/env python3
"""
Тесты ввода-вывода: CSV поз, файл модели, карты BMAP, отчёты
"""
import json
import struct

import numpy as np
import pandas as pd
import pytest

from align import GaussianPoseModel
from beliefmap import render_beliefs
from config import PROTOCOLS
from conftest import make_model
from errors import (DuplicateFrameIdError, InvariantViolationError, JointCountMismatchError, ParseError,
                    VersionMismatchError)
from mixture import MixtureModel
from pose_io import (ModelFile, PoseDataset, PoseFrame, filter_protocol, joint_columns, load_model, load_pose_csv,
                     model_summary, poses_dataset, read_belief_stack, save_model, write_belief_stack,
                     write_metrics_csv, write_pose_csv, write_simulation_report)
from skeleton import chain_topology

TOPOLOGY = chain_topology(3, lr_pairs=[(1, 2)])
HEADER_3D = "frame_id," + ",".join(joint_columns(TOPOLOGY, "3d"))


def _write(tmp_path, text, name="poses.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_joint_columns_order():
    assert joint_columns(TOPOLOGY, "2d") == ["j0_x", "j0_y", "j1_x", "j1_y", "j2_x", "j2_y"]


def test_load_3d_csv(tmp_path):
    path = _write(tmp_path, HEADER_3D + "\nf0,1,2,3,4,5,6,7,8,9\nf1,0.5,0,0,0,0,0,0,0,-1e-3\n")
    dataset = load_pose_csv(path, TOPOLOGY, "3d")
    assert dataset.frame_ids == ["f0", "f1"]
    np.testing.assert_array_equal(dataset.frames[0].coords, [[1, 4, 7], [2, 5, 8], [3, 6, 9]])
    assert dataset.poses.shape == (2, 3, 3)


def test_write_then_read_preserves_values_and_meta(tmp_path, rng):
    frames = [PoseFrame(frame_id=f"s{i}", coords=rng.normal(size=(3, 3)) / 7.0, subject="S9", action="walk",
                        camera="cam3") for i in range(4)]
    dataset = PoseDataset(frames=frames, kind="3d", columns=("subject", "action", "camera"))
    path = str(tmp_path / "out.csv")
    write_pose_csv(dataset, TOPOLOGY, path)

    loaded = load_pose_csv(path, TOPOLOGY, "3d")
    assert loaded.columns == ("subject", "action", "camera")
    for original, frame in zip(frames, loaded.frames):
        np.testing.assert_array_equal(frame.coords, original.coords)
        assert (frame.subject, frame.action, frame.camera) == ("S9", "walk", "cam3")


def test_2d_csv(tmp_path):
    path = _write(tmp_path, "frame_id,j0_x,j0_y,j1_x,j1_y,j2_x,j2_y\n0,1,2,3,4,5,6\n")
    dataset = load_pose_csv(path, TOPOLOGY, "2d")
    np.testing.assert_array_equal(dataset.frames[0].coords, [[1, 3, 5], [2, 4, 6]])


def test_header_must_start_with_frame_id(tmp_path):
    path = _write(tmp_path, HEADER_3D.replace("frame_id", "id") + "\nf0,1,2,3,4,5,6,7,8,9\n")
    with pytest.raises(ParseError) as info:
        load_pose_csv(path, TOPOLOGY)
    assert info.value.line == 1


def test_header_wrong_joint_count(tmp_path):
    path = _write(tmp_path, "frame_id,j0_x,j0_y,j0_z\nf0,1,2,3\n")
    with pytest.raises(JointCountMismatchError):
        load_pose_csv(path, TOPOLOGY)


def test_header_wrong_joint_order(tmp_path):
    columns = joint_columns(TOPOLOGY, "3d")
    columns[0], columns[3] = columns[3], columns[0]
    path = _write(tmp_path, "frame_id," + ",".join(columns) + "\nf0,1,2,3,4,5,6,7,8,9\n")
    with pytest.raises(ParseError):
        load_pose_csv(path, TOPOLOGY)


def test_short_row_reports_line(tmp_path):
    path = _write(tmp_path, HEADER_3D + "\nf0,1,2,3,4,5,6,7,8,9\nf1,1,2,3\n")
    with pytest.raises(JointCountMismatchError) as info:
        load_pose_csv(path, TOPOLOGY)
    assert info.value.line == 3


def test_long_row_reports_line(tmp_path):
    path = _write(tmp_path, HEADER_3D + "\nf0,1,2,3,4,5,6,7,8,9\nf1,1,2,3,4,5,6,7,8,9,10\n")
    with pytest.raises(JointCountMismatchError) as info:
        load_pose_csv(path, TOPOLOGY)
    assert info.value.line == 3


def test_every_row_one_field_too_many(tmp_path):
    path = _write(tmp_path, HEADER_3D + "\nf0,1,2,3,4,5,6,7,8,9,10\nf1,1,2,3,4,5,6,7,8,9,10\n")
    with pytest.raises(JointCountMismatchError) as info:
        load_pose_csv(path, TOPOLOGY)
    assert info.value.line == 2


def test_trailing_comma_is_an_extra_field(tmp_path):
    path = _write(tmp_path, HEADER_3D + "\nf0,1,2,3,4,5,6,7,8,9,\n")
    with pytest.raises(JointCountMismatchError) as info:
        load_pose_csv(path, TOPOLOGY)
    assert info.value.line == 2


def test_line_numbers_count_blank_lines(tmp_path):
    path = _write(tmp_path, HEADER_3D + "\n\nf0,1,2,3,4,5,6,7,8,9\n\nf1,1,2,3\n")
    with pytest.raises(JointCountMismatchError) as info:
        load_pose_csv(path, TOPOLOGY)
    assert info.value.line == 5

    path = _write(tmp_path, HEADER_3D + "\nf0,1,2,3,4,5,6,7,8,9\n\n\nf0,1,2,3,4,5,6,7,8,9\n", name="dup.csv")
    with pytest.raises(DuplicateFrameIdError) as info:
        load_pose_csv(path, TOPOLOGY)
    assert info.value.line == 5


def test_blank_lines_are_skipped(tmp_path):
    path = _write(tmp_path, HEADER_3D + "\n\nf0,1,2,3,4,5,6,7,8,9\n\n")
    assert load_pose_csv(path, TOPOLOGY).frame_ids == ["f0"]


def test_non_numeric_value(tmp_path):
    path = _write(tmp_path, HEADER_3D + "\nf0,1,2,3,4,abc,6,7,8,9\n")
    with pytest.raises(ParseError) as info:
        load_pose_csv(path, TOPOLOGY)
    assert info.value.line == 2
    assert "j1_y" in str(info.value)


def test_duplicate_frame_id(tmp_path):
    path = _write(tmp_path, HEADER_3D + "\nf0,1,2,3,4,5,6,7,8,9\nf0,1,2,3,4,5,6,7,8,9\n")
    with pytest.raises(DuplicateFrameIdError) as info:
        load_pose_csv(path, TOPOLOGY)
    assert info.value.line == 3


def test_missing_file(tmp_path):
    with pytest.raises(ParseError):
        load_pose_csv(str(tmp_path / "absent.csv"), TOPOLOGY)


def test_protocol_filter_strides_per_sequence():
    frames = []
    for subject in ("S1", "S9", "S11"):
        for action in ("walk", "eat"):
            for i in range(12):
                frames.append(PoseFrame(frame_id=f"{subject}-{action}-{i}", coords=np.zeros((3, 3)), subject=subject,
                                        action=action, camera="cam1"))
    dataset = PoseDataset(frames=frames, columns=("subject", "action", "camera"))

    filtered = filter_protocol(dataset, PROTOCOLS["1"])
    # Кадры 0, 5, 10 в каждой из 4 последовательностей S9/S11
    assert len(filtered) == 12
    assert all(f.subject in ("S9", "S11") for f in filtered.frames)
    assert {f.frame_id.split("-")[-1] for f in filtered.frames} == {"0", "5", "10"}
    assert len(filter_protocol(dataset, PROTOCOLS["3"])) == 0


def _mixture(rng):
    first, second = make_model(rng, L=3, J=2), make_model(rng, L=3, J=2)
    return MixtureModel(components=(first, second), weights=np.array([0.25, 0.75]))


def test_model_file_roundtrip(tmp_path, rng):
    mixture = _mixture(rng)
    path = str(tmp_path / "model.bin")
    save_model(ModelFile(topology=TOPOLOGY, mixture=mixture, training_meta={"J": 2, "K": 2}), path)

    loaded = load_model(path)
    assert loaded.topology == TOPOLOGY
    assert loaded.training_meta == {"J": 2, "K": 2}
    np.testing.assert_array_equal(loaded.mixture.weights, mixture.weights)
    for a, b in zip(loaded.mixture.components, mixture.components):
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.basis, b.basis)
        np.testing.assert_array_equal(a.sigma, b.sigma)
        assert a.noise_var == b.noise_var

    summary = model_summary(loaded)
    assert summary["K"] == 2 and summary["J"] == 2 and summary["L"] == 3
    assert summary["joints"] == ["j0", "j1", "j2"]


def test_model_file_version_mismatch(tmp_path, rng):
    path = tmp_path / "model.bin"
    save_model(ModelFile(topology=TOPOLOGY, mixture=_mixture(rng)), str(path))
    data = bytearray(path.read_bytes())
    data[8:12] = struct.pack("<I", 99)
    path.write_bytes(bytes(data))
    with pytest.raises(VersionMismatchError):
        load_model(str(path))


def test_model_file_corruption(tmp_path, rng):
    path = tmp_path / "model.bin"
    save_model(ModelFile(topology=TOPOLOGY, mixture=_mixture(rng)), str(path))
    data = path.read_bytes()

    path.write_bytes(b"NOTMODEL" + data[8:])
    with pytest.raises(ParseError):
        load_model(str(path))
    path.write_bytes(data[:-8])
    with pytest.raises(ParseError):
        load_model(str(path))
    path.write_bytes(data[:20])
    with pytest.raises(ParseError):
        load_model(str(path))


def test_model_file_invariants_checked_on_load(tmp_path, rng):
    good = make_model(rng, L=3, J=2)
    bad = GaussianPoseModel(mean=good.mean, basis=good.basis, sigma=good.sigma[::-1].copy(), noise_var=good.noise_var)
    path = str(tmp_path / "model.bin")
    save_model(ModelFile(topology=TOPOLOGY, mixture=MixtureModel(components=(bad,), weights=np.array([1.0]))), path)
    with pytest.raises(InvariantViolationError):
        load_model(path)


def test_belief_stack_file(tmp_path):
    stack = render_beliefs(np.array([[3.0, 10.0], [4.0, 2.0]]), 16, 12)
    path = str(tmp_path / "frame.bmap")
    write_belief_stack(stack, path)
    raw = (tmp_path / "frame.bmap").read_bytes()
    assert raw[:4] == b"BMAP"
    assert struct.unpack("<III", raw[4:16]) == (12, 16, 3)

    loaded = read_belief_stack(path)
    np.testing.assert_array_equal(loaded.channels, stack.channels.astype(np.float32).astype(float))

    (tmp_path / "frame.bmap").write_bytes(raw[:-4])
    with pytest.raises(ParseError):
        read_belief_stack(path)


def test_reports(tmp_path):
    report = pd.DataFrame({"frame_id": ["a"], "action_label": ["walk"], "mpjpe": [0.1], "aligned_error": [1 / 3]})
    csv_path = str(tmp_path / "metrics.csv")
    write_metrics_csv(report, csv_path)
    loaded = pd.read_csv(csv_path)
    assert loaded["aligned_error"].iloc[0] == pytest.approx(1 / 3, rel=1e-15)

    jsonl = tmp_path / "sim.jsonl"
    write_simulation_report([], {"median_error3d": [0.5]}, str(jsonl))
    lines = jsonl.read_text(encoding="utf-8").splitlines()
    assert json.loads(lines[-1]) == {"summary": {"median_error3d": [0.5]}}


def test_poses_dataset_default_ids(rng):
    dataset = poses_dataset([rng.normal(size=(3, 3)) for _ in range(2)])
    assert dataset.frame_ids == ["0", "1"]
    assert dataset.kind == "3d"
