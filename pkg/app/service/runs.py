"""
Run Service
Trains one configured run and keeps its artifacts together in one directory:
config.txt, metrics.jsonl, checkpoint.bin and the eval-target prediction dump.
"""
import json
from pathlib import Path
from typing import Dict, List

from pydantic import ValidationError

from app.core.constant import CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, PREDICTIONS_FILE, Split, Supervision
from app.core.exceptions import DataFileError
from app.core.logger import logger
from app.schema.config import ExperimentConfig, load_config, save_config
from app.schema.records import MetricsRecord
from app.service.checkpoint import load_checkpoint, restore_model, save_checkpoint
from app.service.datasets import load_datasets, load_split, validate_splits
from app.service.evaluation import evaluate_map
from app.service.inference import predict_scenes, write_predictions
from app.service.pipeline import run_pipeline


def append_metrics(path, record: MetricsRecord):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(record.model_dump(mode="json"), sort_keys=True) + "\n")


def read_metrics(path) -> List[MetricsRecord]:
    path = Path(path)
    if not path.is_file():
        raise DataFileError(path, "metrics log not found")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(MetricsRecord.model_validate_json(line))
        except ValidationError as e:
            raise DataFileError(path, f"line {lineno} is not a metrics record") from e
    return records


def train_run(config: ExperimentConfig, out_dir=None, data_root=None) -> Dict:
    """
    Train one run end to end and write its artifacts.

    Args:
        config: Experiment settings
        out_dir: Run directory (defaults to ``config.output_dir``)
        data_root: Dataset root (defaults to ``config.data.root``)

    Returns:
        Dict with status, message, final mAP and artifact paths
    """
    out = Path(out_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / METRICS_FILE
    if metrics_path.exists():
        metrics_path.unlink()
    save_config(config, out / CONFIG_FILE)

    oracle = config.distill.supervision != Supervision.ADAPT
    datasets = load_datasets(data_root or config.data.root, oracle=oracle)
    validate_splits(datasets)
    logger.info(f"Loaded {len(datasets.train_source)} source / {len(datasets.train_target)} target training scenes")

    result = run_pipeline(config, datasets, on_snapshot=lambda r: append_metrics(metrics_path, r))
    teacher = result.pair.teacher if result.pair is not None else None
    student = result.pair.student if result.pair is not None else result.model
    checkpoint = save_checkpoint(out / CHECKPOINT_FILE, config, result.stage, result.iteration, student, teacher)

    predictions = predict_scenes(result.model, datasets.eval_target, config.eval, config.distill.nms_iou)
    write_predictions(out / PREDICTIONS_FILE, predictions)
    final = result.history[-1].map_target if result.history else 0.0
    return {
        "status": "success",
        "message": f"trained {result.iteration} iterations, final eval-target mAP {final:.4f}",
        "map_target": final,
        "checkpoint": str(checkpoint),
        "metrics": str(metrics_path),
        "history": result.history,
    }


def evaluate_checkpoint(checkpoint_path, split: Split, config_path=None, data_root=None) -> Dict:
    """mAP of a stored run's inference model on one labeled split"""
    checkpoint_path = Path(checkpoint_path)
    config = load_config(config_path or checkpoint_path.parent / CONFIG_FILE)
    checkpoint = load_checkpoint(checkpoint_path)
    model = restore_model(checkpoint, config, path=str(checkpoint_path))
    scenes = load_split(data_root or config.data.root, split)
    predictions = predict_scenes(model, scenes, config.eval, config.distill.nms_iou)
    truth = {s.scene_id: s.annotations for s in scenes if s.scene_id in predictions}
    result = evaluate_map(predictions, truth, config.data.num_classes, config.eval.iou_threshold)
    return {
        "status": "success",
        "message": f"{split.value}: mAP {result.map:.4f} ({checkpoint.inference_role}, {checkpoint.stage.value})",
        "map": result.map,
        "per_class_ap": result.named_ap(),
        "supervision": config.distill.supervision.value,
    }
