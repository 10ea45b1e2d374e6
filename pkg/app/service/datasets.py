"""
Dataset Service
Writes and reads the split manifests (JSON lines) and their PPM/PGM images.
"""
import json
from pathlib import Path
from typing import Dict, List

from pydantic import BaseModel, ConfigDict, ValidationError

from app.core.constant import MANIFEST_SUFFIX, DomainTag, Split
from app.core.exceptions import DataFileError
from app.core.logger import logger
from app.schema.config import ExperimentConfig
from app.schema.records import AnnotationRecord, ManifestRecord
from app.schema.scene import LabeledScene
from app.service.image_io import read_image, write_image
from app.service.scenes import apply_domain_shift, generate_source


class Datasets(BaseModel):
    """Scenes a run trains and evaluates on"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    train_source: List[LabeledScene]
    train_target: List[LabeledScene]
    eval_target: List[LabeledScene]
    eval_source: List[LabeledScene]
    # Target annotations, only read by the oracle modes
    train_target_labeled: List[LabeledScene] = []


def split_sizes(config: ExperimentConfig) -> Dict[Split, int]:
    data = config.data
    return {
        Split.TRAIN_SOURCE: data.n_train_source,
        Split.TRAIN_TARGET: data.n_train_target,
        Split.EVAL_TARGET: data.n_eval_target,
        Split.EVAL_SOURCE: data.n_eval_source,
    }


def manifest_path(root, split: Split) -> Path:
    return Path(root) / f"{split.value}{MANIFEST_SUFFIX}"


def build_split_scenes(config: ExperimentConfig) -> Dict[Split, List[LabeledScene]]:
    """Generate every split in memory; scene ids are disjoint across splits"""
    sizes = split_sizes(config)
    scenes: Dict[Split, List[LabeledScene]] = {}
    start = 0
    for split, n in sizes.items():
        generated = generate_source(n, config.seed, config.data, start_id=start)
        if split in (Split.TRAIN_TARGET, Split.EVAL_TARGET):
            generated = [apply_domain_shift(s, config.shift, config.seed) for s in generated]
        scenes[split] = generated
        start += n
    return scenes


def write_split(root, split: Split, scenes: List[LabeledScene]) -> Path:
    root = Path(root)
    path = manifest_path(root, split)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for scene in scenes:
        suffix = "ppm" if scene.image.shape[2] == 3 else "pgm"
        image_rel = Path("images") / split.value / f"{scene.scene_id:06d}.{suffix}"
        write_image(root / image_rel, scene.image)
        record = ManifestRecord(
            scene_id=scene.scene_id,
            image_path=image_rel.as_posix(),
            domain_tag=scene.domain_tag,
            annotations=[AnnotationRecord.from_annotation(a) for a in scene.annotations],
        )
        lines.append(json.dumps(record.model_dump(mode="json", by_alias=True), sort_keys=True))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Wrote {len(scenes)} scenes to {path}")
    return path


def read_manifest(path) -> List[ManifestRecord]:
    path = Path(path)
    if not path.is_file():
        raise DataFileError(path, "manifest not found")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(ManifestRecord.model_validate_json(line))
        except ValidationError as e:
            raise DataFileError(path, f"line {lineno} is not a manifest record ({e.error_count()} errors)") from e
    return records


def load_split(root, split: Split, with_annotations: bool = True) -> List[LabeledScene]:
    root = Path(root)
    scenes = []
    for record in read_manifest(manifest_path(root, split)):
        annotations = tuple(a.to_annotation() for a in record.annotations) if with_annotations else tuple()
        scenes.append(LabeledScene(
            scene_id=record.scene_id,
            image=read_image(root / record.image_path),
            annotations=annotations,
            domain_tag=record.domain_tag,
        ))
    return scenes


def load_datasets(root, oracle: bool = False) -> Datasets:
    """
    Load all splits; train-target annotations are dropped unless an oracle
    mode asks for them
    """
    train_target_labeled = load_split(root, Split.TRAIN_TARGET)
    unlabeled = [s.model_copy(update={"annotations": tuple()}) for s in train_target_labeled]
    return Datasets(
        train_source=load_split(root, Split.TRAIN_SOURCE),
        train_target=unlabeled,
        eval_target=load_split(root, Split.EVAL_TARGET),
        eval_source=load_split(root, Split.EVAL_SOURCE),
        train_target_labeled=train_target_labeled if oracle else [],
    )


def validate_splits(datasets: Datasets):
    """Splits must be disjoint by scene id and target training scenes unlabeled"""
    seen: Dict[int, str] = {}
    for name in ("train_source", "train_target", "eval_target", "eval_source"):
        for scene in getattr(datasets, name):
            if scene.scene_id in seen:
                raise DataFileError(name, f"scene {scene.scene_id} also appears in {seen[scene.scene_id]}")
            seen[scene.scene_id] = name
    if any(s.annotations for s in datasets.train_target):
        raise DataFileError("train_target", "unlabeled target split exposes annotations")
    if any(s.domain_tag != DomainTag.TARGET for s in datasets.train_target + datasets.eval_target):
        raise DataFileError("train_target", "target splits must be tagged 'target'")


def generate_datasets(config: ExperimentConfig, root=None) -> Dict:
    """
    Render every split of ``config`` and write manifests and images under ``root``

    Returns:
        Dict with status, message and the manifest path of each split
    """
    root = Path(root or config.data.root)
    scenes = build_split_scenes(config)
    paths = {split.value: str(write_split(root, split, items)) for split, items in scenes.items()}
    counts = ", ".join(f"{split.value}={len(items)}" for split, items in scenes.items())
    return {"status": "success", "message": f"generated {counts} under {root}", "manifests": paths}
