import struct

import numpy as np
import pytest

from app.core.constant import CHECKPOINT_MAGIC, Stage
from app.core.exceptions import DataFileError
from app.models.detector import build_model
from app.service.checkpoint import load_checkpoint, restore_model, save_checkpoint
from conftest import tiny_config


def _assert_close_to_f32(model, reference):
    for name, p in model.named_parameters().items():
        np.testing.assert_array_equal(p.data, reference.named_parameters()[name].data.astype(np.float32))


def test_student_only_round_trip(tmp_path, config):
    student = build_model(config, 3)
    path = save_checkpoint(tmp_path / "ckpt.bin", config, Stage.JDP, 12, student)
    checkpoint = load_checkpoint(path)
    assert checkpoint.stage == Stage.JDP and checkpoint.iteration == 12
    assert checkpoint.inference_role == "student"
    restored = restore_model(checkpoint, config)
    assert restored.trainable
    _assert_close_to_f32(restored, student)


def test_teacher_and_student_round_trip(tmp_path, config):
    student = build_model(config, 3)
    teacher = student.clone(trainable=False)
    teacher.perceiver_ready = False
    for p in student.parameters():
        p.data = p.data + 1.0
    path = save_checkpoint(tmp_path / "ckpt.bin", config, Stage.DTR, 40, student, teacher)
    checkpoint = load_checkpoint(path)
    assert set(checkpoint.states) == {"student", "teacher"}
    assert checkpoint.inference_role == "teacher"
    restored = restore_model(checkpoint, config)
    assert not restored.trainable and not restored.perceiver_ready
    _assert_close_to_f32(restored, teacher)
    _assert_close_to_f32(restore_model(checkpoint, config, role="student"), student)


def test_restore_rejects_a_different_model(tmp_path, config):
    path = save_checkpoint(tmp_path / "ckpt.bin", config, Stage.JDP, 1, build_model(config, 1))
    other = tiny_config(**{"model.d_model": 16})
    with pytest.raises(DataFileError, match="different model config"):
        restore_model(load_checkpoint(path), other)
    with pytest.raises(DataFileError, match="teacher"):
        restore_model(load_checkpoint(path), config, role="teacher")


def test_load_errors(tmp_path, config):
    with pytest.raises(DataFileError, match="not found"):
        load_checkpoint(tmp_path / "missing.bin")

    good = save_checkpoint(tmp_path / "ckpt.bin", config, Stage.JDP, 1, build_model(config, 1)).read_bytes()

    truncated = tmp_path / "truncated.bin"
    truncated.write_bytes(good[:-5])
    with pytest.raises(DataFileError, match="truncated"):
        load_checkpoint(truncated)

    tiny = tmp_path / "tiny.bin"
    tiny.write_bytes(good[:6])
    with pytest.raises(DataFileError, match="truncated"):
        load_checkpoint(tiny)

    magic = tmp_path / "magic.bin"
    magic.write_bytes(b"NOPE" + good[4:])
    with pytest.raises(DataFileError, match="bad magic"):
        load_checkpoint(magic)

    version = tmp_path / "version.bin"
    version.write_bytes(good[:4] + struct.pack("<I", 99) + good[8:])
    with pytest.raises(DataFileError, match="version 99"):
        load_checkpoint(version)

    trailing = tmp_path / "trailing.bin"
    trailing.write_bytes(good + b"\x00\x00\x00\x00")
    with pytest.raises(DataFileError, match="trailing"):
        load_checkpoint(trailing)

    header = tmp_path / "header.bin"
    header.write_bytes(struct.pack("<4sII", CHECKPOINT_MAGIC, 1, 5) + b"{oops")
    with pytest.raises(DataFileError, match="corrupt"):
        load_checkpoint(header)
