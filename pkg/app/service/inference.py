"""
Inference Service
Turns branch outputs into detections and runs SA-branch inference over scenes.
Inference touches only the extractor and the SA branch.
"""
import json
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
from pydantic import ValidationError

from app.core.exceptions import DataFileError
from app.core.logger import logger
from app.models.detector import BranchOutput, DualBranchModel, branch_forward
from app.models.tensor import no_grad
from app.schema.config import EvalConfig
from app.schema.detection import BBox, Detection
from app.schema.records import DetectionRecord, PredictionRecord
from app.schema.scene import LabeledScene
from app.service.boxes import decode_deltas, denormalize_roi_deltas, nms


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def branch_detections(output: BranchOutput, proposal_boxes: np.ndarray, image_size: int,
                      score_floor: float = 0.05) -> List[Detection]:
    """
    One candidate per (proposal, foreground class) whose probability reaches
    ``score_floor``; boxes are the proposals refined by the branch deltas
    """
    probs = softmax(output.class_logits.data)
    background = probs.shape[1] - 1
    if len(proposal_boxes) == 0:
        return []
    boxes = decode_deltas(np.asarray(proposal_boxes), denormalize_roi_deltas(output.box_deltas.data), image_size)
    detections = []
    for k, c in zip(*np.nonzero(probs[:, :background] >= score_floor)):
        detections.append(Detection(box=BBox.from_array(boxes[k]), class_id=int(c), score=float(probs[k, c])))
    return detections


def postprocess(detections: Sequence[Detection], nms_iou: float, max_detections: int = 0,
                min_score: float = 0.0) -> List[Detection]:
    """Per-class NMS, then an optional score threshold and cap"""
    kept = [d for d in nms(detections, nms_iou) if d.score >= min_score]
    return kept[:max_detections] if max_detections > 0 else kept


def detect(model: DualBranchModel, image: np.ndarray, eval_config: EvalConfig, nms_iou: float = 0.5) -> List[Detection]:
    """SA-branch detections of one image; the perceiver is never used"""
    with no_grad():
        proposals = model.extract(image).proposals
        output = branch_forward(model.sa_branch, proposals.features)
    candidates = branch_detections(output, proposals.boxes, model.image_size, eval_config.score_floor)
    return postprocess(candidates, nms_iou, eval_config.max_detections)


def predict_scenes(model: DualBranchModel, scenes: Sequence[LabeledScene], eval_config: EvalConfig,
                   nms_iou: float = 0.5) -> Dict[int, List[Detection]]:
    if eval_config.max_images > 0:
        scenes = scenes[:eval_config.max_images]
    return {s.scene_id: detect(model, s.image, eval_config, nms_iou) for s in scenes}


def write_predictions(path, predictions: Dict[int, List[Detection]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for scene_id in sorted(predictions):
        record = PredictionRecord(
            scene_id=scene_id,
            detections=[DetectionRecord.from_detection(d) for d in predictions[scene_id]],
        )
        lines.append(json.dumps(record.model_dump(mode="json", by_alias=True), sort_keys=True))
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    logger.debug(f"Wrote predictions for {len(lines)} scenes to {path}")
    return path


def read_predictions(path) -> Dict[int, List[Detection]]:
    path = Path(path)
    if not path.is_file():
        raise DataFileError(path, "prediction dump not found")
    predictions = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = PredictionRecord.model_validate_json(line)
        except ValidationError as e:
            raise DataFileError(path, f"line {lineno} is not a prediction record") from e
        predictions[record.scene_id] = [d.to_detection() for d in record.detections]
    return predictions
