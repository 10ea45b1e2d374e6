"""
Detector
Shared proposal extractor (tiny conv stack + RPN head) feeding two detection
branches with identical shapes, source-adaptive (SA) and target-like (TL),
plus the perceiver parameters attached to each branch.
"""
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from app.core.exceptions import ContractError, DimensionError
from app.models.perceiver import PerceiverParams, encode_branch, iterative_perceive
from app.models.tensor import (
    Parameter, Tensor, conv2d, fc_layer, matmul, relu, reshape, transpose,
)
from app.schema.config import ExperimentConfig, ModelConfig
from app.schema.detection import BBox, Proposal
from app.service.boxes import decode_deltas

# Objectness prior of the RPN classifier at initialization
RPN_PRIOR = 0.01


class Linear:
    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator,
                 std: Optional[float] = None, trainable: bool = True):
        std = np.sqrt(2.0 / d_in) if std is None else std
        self.weight = Parameter(f"{name}.weight", rng.normal(0.0, std, (d_in, d_out)), trainable)
        self.bias = Parameter(f"{name}.bias", np.zeros(d_out), trainable)

    def __call__(self, x: Tensor) -> Tensor:
        return fc_layer(x, self.weight, self.bias)

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]


class Conv:
    def __init__(self, name: str, c_in: int, c_out: int, kernel: int, stride: int, padding: int,
                 rng: np.random.Generator, std: Optional[float] = None, bias: float = 0.0,
                 trainable: bool = True):
        fan_in = c_in * kernel * kernel
        std = np.sqrt(2.0 / fan_in) if std is None else std
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.weight = Parameter(f"{name}.weight", rng.normal(0.0, std, (c_out, fan_in)), trainable)
        self.bias = Parameter(f"{name}.bias", np.full(c_out, float(bias)), trainable)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.kernel, self.stride, self.padding)

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]


class ExtractorOutput(NamedTuple):
    feature_map: Tensor
    objectness: Tensor
    deltas: Tensor


class ProposalSet(NamedTuple):
    """Proposals of one image; ``features`` row k belongs to ``boxes`` row k"""

    boxes: np.ndarray
    objectness: np.ndarray
    features: Tensor

    def __len__(self):
        return self.boxes.shape[0]

    def to_proposals(self) -> List[Proposal]:
        return [
            Proposal(box=BBox.from_array(b), objectness=float(o), feature=f)
            for b, o, f in zip(self.boxes, self.objectness, self.features.data)
        ]


class Extraction(NamedTuple):
    output: ExtractorOutput
    proposals: ProposalSet


def feature_map_size(image_size: int, depth: int) -> int:
    """Side of the last map after ``depth`` stride-2, padding-1, 3x3 convs"""
    size = image_size
    for _ in range(depth):
        size = (size - 1) // 2 + 1
    return size


def make_anchors(image_size: int, feature_size: int, anchor_size: float) -> np.ndarray:
    """One square anchor centred on every feature cell, row-major over the map"""
    step = image_size / feature_size
    centres = (np.arange(feature_size) + 0.5) * step
    cy, cx = np.meshgrid(centres, centres, indexing="ij")
    half = 0.5 * anchor_size
    return np.stack([
        cx.reshape(-1) - half,
        cy.reshape(-1) - half,
        np.full(cx.size, float(anchor_size)),
        np.full(cx.size, float(anchor_size)),
    ], axis=1)


def pooling_matrix(boxes: np.ndarray, image_size: int, feature_size: int, grid: int) -> np.ndarray:
    """
    Box-aligned average pooling as a constant matrix.

    Every box is cut into ``grid`` x ``grid`` bins; a bin averages the feature
    cells it overlaps, weighted by overlap area. Bins that miss the map fall
    back to the cell under their centre.

    Returns:
        (K * grid * grid, feature_size ** 2) matrix, rows ordered box-major then bin row-major
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    step = image_size / feature_size
    frac = np.arange(grid) / grid
    bx0 = (boxes[:, 0][:, None] + frac[None, :] * boxes[:, 2][:, None])
    by0 = (boxes[:, 1][:, None] + frac[None, :] * boxes[:, 3][:, None])
    bx1 = bx0 + boxes[:, 2][:, None] / grid
    by1 = by0 + boxes[:, 3][:, None] / grid
    # (K, grid_y, grid_x) bins flattened
    x0 = np.broadcast_to(bx0[:, None, :], (len(boxes), grid, grid)).reshape(-1)
    x1 = np.broadcast_to(bx1[:, None, :], (len(boxes), grid, grid)).reshape(-1)
    y0 = np.broadcast_to(by0[:, :, None], (len(boxes), grid, grid)).reshape(-1)
    y1 = np.broadcast_to(by1[:, :, None], (len(boxes), grid, grid)).reshape(-1)
    edges = np.arange(feature_size) * step
    ox = np.clip(np.minimum(x1[:, None], edges[None, :] + step) - np.maximum(x0[:, None], edges[None, :]), 0, None)
    oy = np.clip(np.minimum(y1[:, None], edges[None, :] + step) - np.maximum(y0[:, None], edges[None, :]), 0, None)
    weights = (oy[:, :, None] * ox[:, None, :]).reshape(len(x0), -1)
    total = weights.sum(axis=1)
    empty = total <= 0
    if empty.any():
        cj = np.clip(((x0 + x1) / 2 // step).astype(int), 0, feature_size - 1)
        ci = np.clip(((y0 + y1) / 2 // step).astype(int), 0, feature_size - 1)
        rows = np.nonzero(empty)[0]
        weights[rows, ci[rows] * feature_size + cj[rows]] = 1.0
        total = weights.sum(axis=1)
    return weights / total[:, None]


def pool_features(feature_map: Tensor, boxes: np.ndarray, image_size: int, grid: int) -> Tensor:
    """(K, grid * grid * C) features of ``boxes`` pooled from a (C, S, S) map"""
    channels, size, _ = feature_map.shape
    matrix = Tensor(pooling_matrix(boxes, image_size, size, grid))
    cells = transpose(reshape(feature_map, (channels, size * size)))
    pooled = matmul(matrix, cells)
    return reshape(pooled, (len(boxes), grid * grid * channels))


class ProposalExtractor:
    def __init__(self, config: ModelConfig, image_size: int, in_channels: int,
                 rng: np.random.Generator, trainable: bool = True):
        self.config = config
        self.image_size = image_size
        self.in_channels = in_channels
        self.convs = []
        c_in = in_channels
        for i, c_out in enumerate(config.channels):
            self.convs.append(Conv(f"extractor.conv{i}", c_in, c_out, 3, 2, 1, rng, trainable=trainable))
            c_in = c_out
        prior_bias = -np.log((1.0 - RPN_PRIOR) / RPN_PRIOR)
        self.rpn_conv = Conv("extractor.rpn_conv", c_in, c_in, 3, 1, 1, rng, trainable=trainable)
        self.rpn_cls = Conv("extractor.rpn_cls", c_in, 1, 1, 1, 0, rng, std=0.01, bias=prior_bias,
                            trainable=trainable)
        self.rpn_reg = Conv("extractor.rpn_reg", c_in, 4, 1, 1, 0, rng, std=0.01, trainable=trainable)
        self.feature_size = feature_map_size(image_size, len(config.channels))
        self.anchors = make_anchors(image_size, self.feature_size, config.anchor_size)

    def parameters(self) -> List[Parameter]:
        params = [p for conv in self.convs for p in conv.parameters()]
        for head in (self.rpn_conv, self.rpn_cls, self.rpn_reg):
            params.extend(head.parameters())
        return params

    def __call__(self, image: np.ndarray) -> ExtractorOutput:
        image = np.asarray(image, dtype=np.float64)
        expected = (self.image_size, self.image_size, self.in_channels)
        if image.shape != expected:
            raise DimensionError("image does not match the configured size", image.shape, expected)
        x = Tensor(np.moveaxis(image, 2, 0))
        for conv in self.convs:
            x = relu(conv(x))
        hidden = relu(self.rpn_conv(x))
        n = self.feature_size * self.feature_size
        objectness = reshape(self.rpn_cls(hidden), (n,))
        deltas = transpose(reshape(self.rpn_reg(hidden), (4, n)))
        return ExtractorOutput(x, objectness, deltas)


def select_proposals(output: ExtractorOutput, anchors: np.ndarray, top_k: int, image_size: int):
    """
    Top-K decoded anchors by objectness; ties keep anchor order.

    Returns:
        (boxes (K, 4), objectness (K,)) as constants
    """
    logits = output.objectness.data
    scores = 1.0 / (1.0 + np.exp(-np.clip(logits, -500, 500)))
    order = np.argsort(-scores, kind="stable")[:min(top_k, len(scores))]
    boxes = decode_deltas(anchors[order], output.deltas.data[order], image_size)
    return boxes, scores[order]


class DetectionBranch:
    """Two FC encoders, a (C + 1)-way class head and a box head"""

    def __init__(self, name: str, config: ModelConfig, num_classes: int,
                 rng: np.random.Generator, trainable: bool = True):
        self.name = name
        self.num_classes = num_classes
        self.fc1 = Linear(f"{name}.fc1", config.feature_dim, config.d_model, rng, trainable=trainable)
        self.fc2 = Linear(f"{name}.fc2", config.d_model, config.d_model, rng, trainable=trainable)
        self.cls = Linear(f"{name}.cls", config.d_model, num_classes + 1, rng, std=0.01, trainable=trainable)
        self.box = Linear(f"{name}.box", config.d_model, 4, rng, std=0.001, trainable=trainable)

    def parameters(self) -> List[Parameter]:
        return self.fc1.parameters() + self.fc2.parameters() + self.cls.parameters() + self.box.parameters()

    @property
    def background(self) -> int:
        return self.num_classes


class PerceiverContext(NamedTuple):
    """
    What a branch perceives: the perceiver to run, the boxes of the attending
    proposals, and the context encodings at each FC depth (None attends to
    the branch's own running features)
    """

    params: PerceiverParams
    boxes: np.ndarray
    features: Optional[Sequence[Tensor]] = None
    context_boxes: Optional[np.ndarray] = None


class BranchOutput(NamedTuple):
    class_logits: Tensor
    box_deltas: Tensor


def branch_encode(branch: DetectionBranch, features: Tensor) -> List[Tensor]:
    """Plain encodings of ``features`` after each FC encoder"""
    phi1 = encode_branch(features, branch.fc1.weight, branch.fc1.bias)
    phi2 = encode_branch(phi1, branch.fc2.weight, branch.fc2.bias)
    return [phi1, phi2]


def branch_forward(
    branch: DetectionBranch,
    features: Tensor,
    use_perceiver: bool = False,
    context: Optional[PerceiverContext] = None,
) -> BranchOutput:
    """
    Classify and refine proposals.

    Args:
        branch: SA or TL branch
        features: (K, D) proposal features
        use_perceiver: Run the perceiver between the FC encoders
        context: Required when ``use_perceiver`` is set

    Returns:
        (K, C + 1) class logits and (K, 4) box deltas
    """
    if features.shape[1] != branch.fc1.weight.shape[0]:
        raise DimensionError("proposal features do not match the branch", features.shape, branch.fc1.weight.shape)
    if use_perceiver and context is None:
        raise ContractError(f"{branch.name}: perceiver requested without a context")
    phi = encode_branch(features, branch.fc1.weight, branch.fc1.bias)
    if use_perceiver:
        phi = iterative_perceive(phi, (branch.fc2.weight, branch.fc2.bias), context.features,
                                 context.boxes, context.params, context.context_boxes)
    else:
        phi = encode_branch(phi, branch.fc2.weight, branch.fc2.bias)
    return BranchOutput(branch.cls(phi), branch.box(phi))


class DualBranchModel:
    """
    Extractor, SA and TL branches, and one perceiver per branch. Teacher and
    student instances always hold the same parameter names.
    """

    def __init__(self, config: ModelConfig, image_size: int, in_channels: int, num_classes: int,
                 rng: np.random.Generator, trainable: bool = True):
        self.config = config
        self.image_size = image_size
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.trainable = trainable
        self.extractor = ProposalExtractor(config, image_size, in_channels, rng, trainable)
        self.sa_branch = DetectionBranch("sa_branch", config, num_classes, rng, trainable)
        self.tl_branch = DetectionBranch("tl_branch", config, num_classes, rng, trainable)
        self.sa_perceiver = PerceiverParams("sa_perceiver", config, rng, trainable)
        self.tl_perceiver = PerceiverParams("tl_perceiver", config, rng, trainable)
        # False while the perceiver holds no learned values (a fresh teacher)
        self.perceiver_ready = True

    def named_parameters(self) -> Dict[str, Parameter]:
        params = (
            self.extractor.parameters()
            + self.sa_branch.parameters()
            + self.tl_branch.parameters()
            + self.sa_perceiver.parameters()
            + self.tl_perceiver.parameters()
        )
        named = {p.name: p for p in params}
        if len(named) != len(params):
            raise ContractError("parameter names are not unique")
        return named

    def parameters(self) -> List[Parameter]:
        return list(self.named_parameters().values())

    def perceiver_parameters(self) -> List[Parameter]:
        return self.sa_perceiver.parameters() + self.tl_perceiver.parameters()

    def set_trainable(self, trainable: bool):
        self.trainable = trainable
        for p in self.parameters():
            p.requires_grad = trainable
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        named = self.named_parameters()
        if set(state) != set(named):
            missing = sorted(set(named) - set(state))[:3]
            extra = sorted(set(state) - set(named))[:3]
            raise ContractError(f"parameter names differ (missing {missing}, unexpected {extra})")
        for name, p in named.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise DimensionError(f"parameter '{name}' shape", p.shape, value.shape)
            p.data = value.copy()

    def clone(self, trainable: bool) -> "DualBranchModel":
        copy = DualBranchModel(self.config, self.image_size, self.in_channels, self.num_classes,
                               np.random.default_rng(0), trainable)
        copy.load_state_dict(self.state_dict())
        copy.perceiver_ready = self.perceiver_ready
        return copy

    def reset_perceivers(self, rng: np.random.Generator):
        self.sa_perceiver.reset(rng)
        self.tl_perceiver.reset(rng)
        for p in self.perceiver_parameters():
            p.grad = None

    def extract(self, image: np.ndarray, extra_boxes: Optional[np.ndarray] = None) -> Extraction:
        """
        Run the extractor and pool features for the top-K proposals, with
        ``extra_boxes`` (ground truth or pseudo labels) appended when given
        """
        output = self.extractor(image)
        boxes, scores = select_proposals(output, self.extractor.anchors, self.config.top_k, self.image_size)
        if extra_boxes is not None and len(extra_boxes):
            extra = np.asarray(extra_boxes, dtype=np.float64).reshape(-1, 4)
            boxes = np.concatenate([boxes, extra], axis=0)
            scores = np.concatenate([scores, np.ones(len(extra))])
        features = pool_features(output.feature_map, boxes, self.image_size, self.config.pool_grid)
        return Extraction(output, ProposalSet(boxes, scores, features))


def extract_proposals(model: DualBranchModel, image: np.ndarray) -> ProposalSet:
    """Top-K proposals of ``image`` with their pooled features"""
    return model.extract(image).proposals


def build_model(config: ExperimentConfig, seed: int, trainable: bool = True) -> DualBranchModel:
    rng = np.random.default_rng([int(seed), 7])
    return DualBranchModel(config.model, config.data.image_size, config.data.channels,
                           config.data.num_classes, rng, trainable)
