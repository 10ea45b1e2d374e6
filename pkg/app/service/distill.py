"""
Distillation Service
The three training stages: joint-domain pretraining of both branches,
cross-domain distillation on teacher pseudo labels, and teacher refinement by
EMA of the student.
"""
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from app.core.constant import BranchMode, PerceiverMode, Stage
from app.core.exceptions import ContractError
from app.core.logger import logger
from app.models.detector import (
    BranchOutput, DualBranchModel, Extraction, PerceiverContext, ProposalSet, branch_encode, branch_forward,
)
from app.models.optim import SGD
from app.models.tensor import Tensor, backward, no_grad
from app.schema.config import DistillConfig, EvalConfig
from app.schema.detection import (
    Annotation, Detection, annotations_to_arrays, boxes_to_array, detections_to_annotations,
)
from app.schema.scene import LabeledScene
from app.service.boxes import iou_matrix
from app.service.inference import branch_detections, postprocess
from app.service.losses import LossPair, branch_loss, rpn_loss_terms, total_loss, zero
from app.service.scenes import Augmented, photometric_augment, weak_augment

JDP_TERMS = ("rpn_src_tl", "sa_src", "tl_tl")
CDD_TERMS = ("rpn_tgt", "sa_tgt", "tl_tgt")


class PseudoLabelSet(NamedTuple):
    """Teacher pseudo labels of one target image, one set per branch"""

    sa: List[Detection]
    tl: List[Detection]

    def is_empty(self) -> bool:
        return not self.sa and not self.tl

    def check(self, threshold: float, nms_iou: float):
        for name, dets in (("sa", self.sa), ("tl", self.tl)):
            if any(d.score < threshold for d in dets):
                raise ContractError(f"pseudo set '{name}' holds a score below {threshold}")
            if len(dets) < 2:
                continue
            boxes = boxes_to_array(d.box for d in dets)
            labels = np.asarray([d.class_id for d in dets])
            overlaps = iou_matrix(boxes, boxes)
            np.fill_diagonal(overlaps, 0.0)
            if ((labels[:, None] == labels[None, :]) & (overlaps > nms_iou)).any():
                raise ContractError(f"pseudo set '{name}' holds duplicates above IoU {nms_iou}")


class TeacherStudentPair:
    """Frozen teacher and trainable student with identical parameter names"""

    def __init__(self, teacher: DualBranchModel, student: DualBranchModel, stage: Stage = Stage.CDD):
        if set(teacher.named_parameters()) != set(student.named_parameters()):
            raise ContractError("teacher and student parameter names differ")
        if teacher.trainable:
            raise ContractError("teacher must not track gradients")
        self.teacher = teacher
        self.student = student
        self.stage = stage


def _as_float(terms: Dict[str, Tensor]) -> Dict[str, float]:
    return {k: float(v.data) for k, v in terms.items()}


def perceiver_contexts(
    model: DualBranchModel,
    proposals: ProposalSet,
    mode: PerceiverMode,
    branch_mode: BranchMode = BranchMode.DUAL,
) -> Tuple[Optional[PerceiverContext], Optional[PerceiverContext]]:
    """
    Perceiver contexts for the (SA, TL) branches on one set of proposals.

    ``asym`` lets SA perceive TL encodings, ``sym`` also lets TL perceive SA
    encodings, ``self`` lets SA attend to its own proposals. Single-branch
    models run without a perceiver.
    """
    if mode == PerceiverMode.NONE or branch_mode == BranchMode.SINGLE:
        return None, None
    boxes = proposals.boxes
    if mode == PerceiverMode.SELF:
        return PerceiverContext(model.sa_perceiver, boxes), None
    sa_context = PerceiverContext(model.sa_perceiver, boxes, branch_encode(model.tl_branch, proposals.features))
    if mode == PerceiverMode.ASYM:
        return sa_context, None
    tl_context = PerceiverContext(model.tl_perceiver, boxes, branch_encode(model.sa_branch, proposals.features))
    return sa_context, tl_context


def _extract(model: DualBranchModel, scene_image: np.ndarray, labels: Sequence[Annotation],
             config: DistillConfig) -> Extraction:
    boxes, _ = annotations_to_arrays(labels)
    extra = boxes if config.add_gt_proposals and len(boxes) else None
    return model.extract(scene_image, extra)


def supervised_terms(model: DualBranchModel, scene: LabeledScene, branch: str,
                     config: DistillConfig) -> Tuple[LossPair, LossPair]:
    """RPN and branch losses of one labeled scene, perceiver unused"""
    extraction = _extract(model, scene.image, scene.annotations, config)
    gt_boxes, _ = annotations_to_arrays(scene.annotations)
    rpn = rpn_loss_terms(extraction.output, model.extractor.anchors, gt_boxes, config)
    head = model.sa_branch if branch == "sa" else model.tl_branch
    out = branch_forward(head, extraction.proposals.features)
    roi = branch_loss(out.class_logits, out.box_deltas, extraction.proposals.boxes, scene.annotations, config)
    return rpn, roi


def jdp_losses(student: DualBranchModel, source_scene: LabeledScene, target_like_scene: Optional[LabeledScene],
               config: DistillConfig) -> Dict[str, Tensor]:
    """
    RPN loss on source and target-like scenes, SA loss on source and TL loss
    on target-like; a single-branch model trains SA on both
    """
    rpn_s, sa_s = supervised_terms(student, source_scene, "sa", config)
    terms = {"rpn_src_tl": rpn_s.total, "sa_src": sa_s.total, "tl_tl": zero()}
    if config.use_target_like and target_like_scene is not None:
        branch = "sa" if config.branch_mode == BranchMode.SINGLE else "tl"
        rpn_tl, roi_tl = supervised_terms(student, target_like_scene, branch, config)
        terms["rpn_src_tl"] = rpn_s.total + rpn_tl.total
        terms["tl_tl"] = roi_tl.total
    return terms


def _apply(optimizer: SGD, terms: Dict[str, Tensor]) -> Dict[str, float]:
    total = total_loss(terms)
    breakdown = _as_float(terms)
    breakdown["total"] = float(total.data)
    optimizer.zero_grad()
    if total.requires_grad:
        backward(total)
        breakdown["grad_norm"] = optimizer.step()
    return breakdown


def jdp_step(student: DualBranchModel, source_scene: LabeledScene, target_like_scene: Optional[LabeledScene],
             optimizer: SGD, config: DistillConfig) -> Dict[str, float]:
    """One SGD step on the joint-domain pretraining loss"""
    return _apply(optimizer, jdp_losses(student, source_scene, target_like_scene, config))


def supervised_step(student: DualBranchModel, scenes: Sequence[LabeledScene], optimizer: SGD,
                    config: DistillConfig) -> Dict[str, float]:
    """Fully supervised SA step on labeled scenes of any domain (oracle training)"""
    rpn, roi = zero(), zero()
    for scene in scenes:
        r, s = supervised_terms(student, scene, "sa", config)
        rpn, roi = rpn + r.total, roi + s.total
    return _apply(optimizer, {"rpn": rpn, "sa": roi})


def select_pseudo_labels(output: BranchOutput, proposal_boxes: np.ndarray, image_size: int,
                         config: DistillConfig, score_floor: float = 0.05) -> List[Detection]:
    """Per-class NMS over one branch's candidates, then the confidence threshold"""
    candidates = branch_detections(output, proposal_boxes, image_size, score_floor)
    return postprocess(candidates, config.nms_iou, min_score=config.pseudo_threshold)


def generate_pseudo_labels(
    teacher: DualBranchModel,
    image: np.ndarray,
    config: DistillConfig,
    score_floor: float = 0.05,
) -> PseudoLabelSet:
    """
    Teacher detections of a weak-augmented target image, per branch: per-class
    NMS, then the confidence threshold. The sets are never merged.

    The teacher's perceiver only joins once it holds refined values.
    """
    mode = config.perceiver_mode if teacher.perceiver_ready else PerceiverMode.NONE
    with no_grad():
        proposals = teacher.extract(image).proposals
        sa_context, tl_context = perceiver_contexts(teacher, proposals, mode, config.branch_mode)
        sa_out = branch_forward(teacher.sa_branch, proposals.features, sa_context is not None, sa_context)
        tl_out = None
        if config.branch_mode == BranchMode.DUAL:
            tl_out = branch_forward(teacher.tl_branch, proposals.features, tl_context is not None, tl_context)

    def _labels(output) -> List[Detection]:
        return select_pseudo_labels(output, proposals.boxes, teacher.image_size, config, score_floor)

    return PseudoLabelSet(_labels(sa_out), _labels(tl_out) if tl_out is not None else [])


def cdd_losses(student: DualBranchModel, image: np.ndarray, pseudo: PseudoLabelSet,
               config: DistillConfig) -> Dict[str, Tensor]:
    """
    Target terms on the strong-augmented target image: RPN against each pseudo
    set, SA loss on the SA set with the perceiver active, TL loss on the TL
    set. An empty pseudo set contributes nothing.
    """
    terms = {name: zero() for name in CDD_TERMS}
    if pseudo.is_empty():
        return terms
    sa_labels = detections_to_annotations(pseudo.sa)
    tl_labels = detections_to_annotations(pseudo.tl)
    extraction = _extract(student, image, sa_labels + tl_labels, config)
    proposals = extraction.proposals
    anchors = student.extractor.anchors
    for labels in (sa_labels, tl_labels):
        if labels:
            boxes, _ = annotations_to_arrays(labels)
            terms["rpn_tgt"] = terms["rpn_tgt"] + rpn_loss_terms(extraction.output, anchors, boxes, config).total
    sa_context, tl_context = perceiver_contexts(student, proposals, config.perceiver_mode, config.branch_mode)
    if sa_labels:
        out = branch_forward(student.sa_branch, proposals.features, sa_context is not None, sa_context)
        terms["sa_tgt"] = branch_loss(out.class_logits, out.box_deltas, proposals.boxes, sa_labels, config).total
    if tl_labels and config.branch_mode == BranchMode.DUAL:
        out = branch_forward(student.tl_branch, proposals.features, tl_context is not None, tl_context)
        terms["tl_tgt"] = branch_loss(out.class_logits, out.box_deltas, proposals.boxes, tl_labels, config).total
    return terms


def target_views(image: np.ndarray, rng: np.random.Generator) -> Tuple[Augmented, Augmented]:
    """Weak view for the teacher and strong view for the student, sharing one flip"""
    weak = weak_augment(image, rng)
    return weak, Augmented(photometric_augment(weak.image, rng), weak.flipped)


def cdd_step(
    pair: TeacherStudentPair,
    source_scene: LabeledScene,
    target_like_scene: Optional[LabeledScene],
    target_scene: LabeledScene,
    optimizer: SGD,
    config: DistillConfig,
    rng: np.random.Generator,
    eval_config: Optional[EvalConfig] = None,
) -> Dict[str, float]:
    """
    One student step on L_CDD(target) + L_JDP(source, target-like)

    Args:
        pair: Teacher/student pair in CDD or DTR
        source_scene: Labeled source scene
        target_like_scene: Its Fourier-transferred copy
        target_scene: Unlabeled target scene
        optimizer: Student optimizer
        config: Distillation settings
        rng: Augmentation randomness

    Returns:
        Loss breakdown with the JDP and target terms, the total and the gradient norm
    """
    if pair.stage not in (Stage.CDD, Stage.DTR):
        raise ContractError(f"cdd_step needs stage CDD or DTR, got {pair.stage.value}")
    terms = jdp_losses(pair.student, source_scene, target_like_scene, config)
    pseudo = PseudoLabelSet([], [])
    if config.use_target:
        weak, strong = target_views(target_scene.image, rng)
        floor = eval_config.score_floor if eval_config is not None else 0.05
        pseudo = generate_pseudo_labels(pair.teacher, weak.image, config, floor)
        terms.update(cdd_losses(pair.student, strong.image, pseudo, config))
    else:
        terms.update({name: zero() for name in CDD_TERMS})
    breakdown = _apply(optimizer, terms)
    breakdown["pseudo_sa"] = float(len(pseudo.sa))
    breakdown["pseudo_tl"] = float(len(pseudo.tl))
    return breakdown


def start_distillation(student: DualBranchModel, optimizer: SGD, rng: np.random.Generator) -> TeacherStudentPair:
    """
    Freeze a copy of the pretrained student as teacher and give the student a
    freshly initialized perceiver
    """
    teacher = student.clone(trainable=False)
    teacher.perceiver_ready = False
    student.reset_perceivers(rng)
    student.perceiver_ready = True
    optimizer.reset_state(prefix="sa_perceiver.")
    optimizer.reset_state(prefix="tl_perceiver.")
    logger.info("Teacher frozen from the pretrained student; student perceiver reinitialized")
    return TeacherStudentPair(teacher, student, Stage.CDD)


def ema_update(pair: TeacherStudentPair, alpha: float):
    """theta_T <- alpha * theta_T + (1 - alpha) * theta_S for every parameter"""
    if pair.stage != Stage.DTR:
        raise ContractError(f"ema_update needs stage DTR, got {pair.stage.value}")
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"ema alpha must lie in [0, 1], got {alpha}")
    teacher = pair.teacher.named_parameters()
    student = pair.student.named_parameters()
    if set(teacher) != set(student):
        raise ContractError("teacher and student parameter names differ")
    for name, t in teacher.items():
        t.data = alpha * t.data + (1.0 - alpha) * student[name].data


def refresh_teacher(pair: TeacherStudentPair, alpha: float):
    """EMA refresh; the first one also hands the student's perceiver to the teacher"""
    ema_update(pair, alpha)
    if not pair.teacher.perceiver_ready:
        student = pair.student.named_parameters()
        for p in pair.teacher.perceiver_parameters():
            p.data = student[p.name].data.copy()
        pair.teacher.perceiver_ready = True
        logger.info("Teacher perceiver initialized from the student")


def assert_no_teacher_grads(pair: TeacherStudentPair):
    for name, p in pair.teacher.named_parameters().items():
        if p.grad is not None or p.requires_grad:
            raise ContractError(f"teacher parameter '{name}' carries gradients")
