from enum import Enum


class DomainTag(str, Enum):
    SOURCE = "source"
    TARGET_LIKE = "target_like"
    TARGET = "target"


class Stage(str, Enum):
    JDP = "JDP"
    CDD = "CDD"
    DTR = "DTR"


class Split(str, Enum):
    TRAIN_SOURCE = "train_source"
    TRAIN_TARGET = "train_target"
    EVAL_TARGET = "eval_target"
    EVAL_SOURCE = "eval_source"


class PerceiverMode(str, Enum):
    NONE = "none"
    SELF = "self"
    SYM = "sym"
    ASYM = "asym"


class BranchMode(str, Enum):
    DUAL = "dual"
    SINGLE = "single"


class Supervision(str, Enum):
    ADAPT = "adapt"
    ORACLE_TGT = "oracle_tgt"
    ORACLE_SRC_TGT = "oracle_src_tgt"


class StageSchedule(str, Enum):
    JDP = "jdp"
    JDP_CDD = "jdp_cdd"
    JDP_CDD_DTR = "jdp_cdd_dtr"


class ShiftPreset(str, Enum):
    CUSTOM = "custom"
    FOGGY = "foggy"
    SIM2REAL = "sim2real"
    CROSS_CAMERA = "cross_camera"


CLASS_NAMES = ("box", "disk", "bar")

CHECKPOINT_MAGIC = b"XDDA"
CHECKPOINT_VERSION = 1

MANIFEST_SUFFIX = ".jsonl"
METRICS_FILE = "metrics.jsonl"
CONFIG_FILE = "config.txt"
CHECKPOINT_FILE = "checkpoint.bin"
PREDICTIONS_FILE = "predictions_eval_target.jsonl"
