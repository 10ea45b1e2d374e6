"""
Checkpoint Service
Versioned binary container: magic, format version, header length, a JSON
header (config hash, stage, iteration, parameter names and shapes), then the
named parameter blocks as little-endian float32, teacher and student side by
side.
"""
import json
import struct
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional

import numpy as np

from app.core.constant import CHECKPOINT_MAGIC, CHECKPOINT_VERSION, Stage
from app.core.exceptions import DataFileError
from app.core.logger import logger
from app.models.detector import DualBranchModel, build_model
from app.schema.config import ExperimentConfig, config_hash

_PREFIX = struct.Struct("<4sII")
_DTYPE = np.dtype("<f4")


class Checkpoint(NamedTuple):
    config_hash: str
    stage: Stage
    iteration: int
    states: Dict[str, Dict[str, np.ndarray]]
    perceiver_ready: Dict[str, bool]

    @property
    def inference_role(self) -> str:
        return "teacher" if "teacher" in self.states else "student"


def save_checkpoint(path, config: ExperimentConfig, stage: Stage, iteration: int,
                    student: DualBranchModel, teacher: Optional[DualBranchModel] = None) -> Path:
    path = Path(path)
    models = {"student": student}
    if teacher is not None:
        models["teacher"] = teacher
    blocks: List[dict] = []
    payload = []
    for role in sorted(models):
        for name, p in models[role].named_parameters().items():
            blocks.append({"model": role, "name": name, "shape": list(p.shape)})
            payload.append(np.ascontiguousarray(p.data, dtype=_DTYPE).tobytes())
    header = json.dumps({
        "config_hash": config_hash(config),
        "stage": stage.value,
        "iteration": int(iteration),
        "perceiver_ready": {role: bool(m.perceiver_ready) for role, m in models.items()},
        "blocks": blocks,
    }, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)) + header + b"".join(payload))
    logger.debug(f"Checkpoint written: {path} ({len(blocks)} blocks)")
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DataFileError(path, "checkpoint not found")
    data = path.read_bytes()
    if len(data) < _PREFIX.size:
        raise DataFileError(path, "checkpoint is truncated")
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise DataFileError(path, "not a checkpoint (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise DataFileError(path, f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(data[start:start + header_len].decode("utf-8"))
        stage = Stage(header["stage"])
    except (UnicodeDecodeError, ValueError, KeyError) as e:
        raise DataFileError(path, f"corrupt checkpoint header ({e})") from e
    offset = start + header_len
    states: Dict[str, Dict[str, np.ndarray]] = {}
    for block in header.get("blocks", []):
        shape = tuple(block["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if offset + nbytes > len(data):
            raise DataFileError(path, f"checkpoint is truncated at block '{block['name']}'")
        values = np.frombuffer(data, dtype=_DTYPE, count=nbytes // _DTYPE.itemsize, offset=offset)
        states.setdefault(block["model"], {})[block["name"]] = values.astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(data):
        raise DataFileError(path, "checkpoint has trailing bytes")
    return Checkpoint(header["config_hash"], stage, int(header["iteration"]), states,
                      header.get("perceiver_ready", {}))


def restore_model(checkpoint: Checkpoint, config: ExperimentConfig, role: Optional[str] = None,
                  path: str = "checkpoint") -> DualBranchModel:
    """Rebuild one stored model; the config must shape the same parameters"""
    if checkpoint.config_hash != config_hash(config):
        raise DataFileError(path, "checkpoint was written for a different model config")
    role = role or checkpoint.inference_role
    if role not in checkpoint.states:
        raise DataFileError(path, f"checkpoint holds no '{role}' model")
    model = build_model(config, config.seed, trainable=(role == "student"))
    model.load_state_dict(checkpoint.states[role])
    model.perceiver_ready = checkpoint.perceiver_ready.get(role, True)
    return model
