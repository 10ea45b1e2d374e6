"""
Pipeline Service
Runs the stage schedule (JDP, then CDD with a frozen teacher, then DTR with
EMA refresh) over a seeded stream of batches and records evaluation snapshots.
"""
from typing import Callable, Dict, List, NamedTuple, Optional

import numpy as np

from app.core.constant import Stage, StageSchedule, Supervision
from app.core.exceptions import ContractError
from app.core.logger import logger, log_stage
from app.models.detector import DualBranchModel, build_model
from app.models.optim import SGD
from app.schema.config import ExperimentConfig
from app.schema.records import MetricsRecord
from app.schema.scene import LabeledScene
from app.service.datasets import Datasets
from app.service.distill import (
    TeacherStudentPair, assert_no_teacher_grads, cdd_step, jdp_step, refresh_teacher, start_distillation,
    supervised_step,
)
from app.service.evaluation import MapResult, evaluate_map
from app.service.inference import predict_scenes
from app.service.scenes import flip_annotations, flip_image, make_target_like


class Batch(NamedTuple):
    source: LabeledScene
    target_like: Optional[LabeledScene]
    target: LabeledScene


class SceneSampler:
    """
    Seeded stream of (source, target-like, target) batches. Every epoch
    reshuffles both domains and pairs each source scene with a random target
    image for its Fourier transfer.
    """

    def __init__(self, datasets: Datasets, config: ExperimentConfig, rng: np.random.Generator):
        self.sources = datasets.train_source
        self.targets = datasets.train_target
        if not self.sources or not self.targets:
            raise ContractError("training needs source and target scenes")
        self.beta = config.distill.beta_fda
        self.rng = rng
        self._position = 0
        self._new_epoch()

    def _new_epoch(self):
        self._source_order = self.rng.permutation(len(self.sources))
        self._target_order = self.rng.permutation(len(self.targets))
        self._style = self.rng.integers(0, len(self.targets), size=len(self.sources))
        self._position = 0

    def next(self) -> Batch:
        if self._position >= len(self.sources):
            self._new_epoch()
        i = int(self._source_order[self._position])
        target = self.targets[int(self._target_order[self._position % len(self.targets)])]
        style = self.targets[int(self._style[i])]
        self._position += 1
        source = self.sources[i]
        target_like = make_target_like(source, style.image, self.beta)
        if self.rng.random() < 0.5:
            source = _flip_scene(source)
            target_like = _flip_scene(target_like)
        return Batch(source, target_like, target)


def _flip_scene(scene: LabeledScene) -> LabeledScene:
    return scene.model_copy(update={
        "image": flip_image(scene.image),
        "annotations": flip_annotations(scene.annotations, scene.width),
    })


class PipelineResult(NamedTuple):
    model: DualBranchModel
    pair: Optional[TeacherStudentPair]
    history: List[MetricsRecord]
    stage: Stage
    iteration: int


def evaluate_model(model: DualBranchModel, scenes: List[LabeledScene], config: ExperimentConfig) -> MapResult:
    """SA-branch mAP of ``model`` over ``scenes``"""
    predictions = predict_scenes(model, scenes, config.eval, config.distill.nms_iou)
    truth = {s.scene_id: s.annotations for s in scenes if s.scene_id in predictions}
    return evaluate_map(predictions, truth, config.data.num_classes, config.eval.iou_threshold)


class _Snapshots:
    def __init__(self, config: ExperimentConfig, scenes: List[LabeledScene],
                 on_snapshot: Optional[Callable[[MetricsRecord], None]]):
        self.config = config
        self.scenes = scenes
        self.on_snapshot = on_snapshot
        self.history: List[MetricsRecord] = []
        self._sums: Dict[str, float] = {}
        self._count = 0

    def add(self, stage: Stage, iteration: int, terms: Dict[str, float]):
        for key, value in terms.items():
            self._sums[key] = self._sums.get(key, 0.0) + value
        self._count += 1
        if iteration % 50 == 0:
            log_stage(stage.value, iteration, terms)

    def take(self, model: DualBranchModel, stage: str, iteration: int):
        result = evaluate_model(model, self.scenes, self.config)
        means = {k: v / max(1, self._count) for k, v in sorted(self._sums.items())}
        record = MetricsRecord(iter=iteration, stage=stage, map_target=result.map,
                               per_class_ap=result.named_ap(), loss_terms=means)
        self.history.append(record)
        self._sums, self._count = {}, 0
        logger.info(f"[{stage}] iter {iteration}: eval-target mAP {result.map:.4f}")
        if self.on_snapshot is not None:
            self.on_snapshot(record)


def _due(iteration: int, every: int, stage_end: int) -> bool:
    return iteration % every == 0 or iteration == stage_end


def _run_oracle(config: ExperimentConfig, datasets: Datasets, student: DualBranchModel, optimizer: SGD,
                rng: np.random.Generator, snapshots: _Snapshots) -> PipelineResult:
    distill = config.distill
    labeled = datasets.train_target_labeled
    if not labeled:
        raise ContractError("oracle training needs labeled target scenes")
    total = distill.iters_jdp + distill.iters_cdd_dtr
    for it in range(1, total + 1):
        scenes = [labeled[int(rng.integers(0, len(labeled)))]]
        if distill.supervision == Supervision.ORACLE_SRC_TGT:
            scenes.append(datasets.train_source[int(rng.integers(0, len(datasets.train_source)))])
        snapshots.add(Stage.JDP, it, supervised_step(student, scenes, optimizer, distill))
        if _due(it, distill.eval_every, total):
            snapshots.take(student, distill.supervision.value, it)
    return PipelineResult(student, None, snapshots.history, Stage.JDP, total)


def run_pipeline(
    config: ExperimentConfig,
    datasets: Datasets,
    on_snapshot: Optional[Callable[[MetricsRecord], None]] = None,
) -> PipelineResult:
    """
    Train a student (and its teacher) through the configured stage schedule.

    Args:
        config: Experiment settings; the run is a pure function of it and the datasets
        datasets: Training and evaluation scenes
        on_snapshot: Called with every metrics record as soon as it exists

    Returns:
        PipelineResult whose ``model`` is the inference model (the teacher once
        distillation has started, the student before)
    """
    distill = config.distill
    rng = np.random.default_rng([int(config.seed), 101])
    student = build_model(config, config.seed)
    optimizer = SGD(student.parameters(), distill.lr, distill.momentum, distill.weight_decay,
                    distill.grad_clip_norm)
    snapshots = _Snapshots(config, datasets.eval_target, on_snapshot)

    if distill.supervision != Supervision.ADAPT:
        logger.info(f"Oracle training ({distill.supervision.value}) for {distill.iters_jdp + distill.iters_cdd_dtr} iterations")
        return _run_oracle(config, datasets, student, optimizer, rng, snapshots)

    sampler = SceneSampler(datasets, config, rng)
    logger.info(f"JDP: {distill.iters_jdp} iterations")
    for it in range(1, distill.iters_jdp + 1):
        batch = sampler.next()
        terms = jdp_step(student, batch.source, batch.target_like, optimizer, distill)
        snapshots.add(Stage.JDP, it, terms)
        if _due(it, distill.eval_every, distill.iters_jdp):
            snapshots.take(student, Stage.JDP.value, it)

    if distill.stages == StageSchedule.JDP or distill.iters_cdd_dtr == 0:
        return PipelineResult(student, None, snapshots.history, Stage.JDP, distill.iters_jdp)

    pair = start_distillation(student, optimizer, rng)
    end = distill.iters_jdp + distill.iters_cdd_dtr
    logger.info(f"CDD/DTR: {distill.iters_cdd_dtr} iterations, teacher frozen for {distill.cdd_warmup}")
    for step in range(distill.iters_cdd_dtr):
        it = distill.iters_jdp + step + 1
        refine = distill.stages == StageSchedule.JDP_CDD_DTR and step >= distill.cdd_warmup
        pair.stage = Stage.DTR if refine else Stage.CDD
        batch = sampler.next()
        terms = cdd_step(pair, batch.source, batch.target_like, batch.target, optimizer, distill, rng, config.eval)
        if refine:
            refresh_teacher(pair, distill.ema_alpha)
        assert_no_teacher_grads(pair)
        snapshots.add(pair.stage, it, terms)
        if _due(it, distill.eval_every, end):
            snapshots.take(pair.teacher, pair.stage.value, it)
    return PipelineResult(pair.teacher, pair, snapshots.history, pair.stage, end)
