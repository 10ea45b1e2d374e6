"""
Target Proposal Perceiver
Multi-head proposal cross attention between the SA branch (queries) and a
context branch (keys and values), with attention weights modulated by a
learned geometry weight over box pairs, applied once per FC encoder depth.
"""
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from app.core.exceptions import DimensionError
from app.models.tensor import (
    Parameter, Tensor, add, concat, fc_layer, matmul, relu, reshape, scale, transpose, weighted_softmax_rows,
)
from app.schema.config import ModelConfig


class HeadParams:
    def __init__(self, prefix: str, d_model: int, d_head: int, d_geo_emb: int,
                 rng: np.random.Generator, trainable: bool = True):
        std = 1.0 / np.sqrt(d_model)
        self.w_q = Parameter(f"{prefix}.w_q", rng.normal(0.0, std, (d_model, d_head)), trainable)
        self.w_k = Parameter(f"{prefix}.w_k", rng.normal(0.0, std, (d_model, d_head)), trainable)
        self.w_v = Parameter(f"{prefix}.w_v", rng.normal(0.0, std, (d_model, d_head)), trainable)
        self.w_geo = Parameter(f"{prefix}.w_geo", rng.normal(0.0, 0.1, (d_geo_emb, 1)), trainable)

    def parameters(self) -> List[Parameter]:
        return [self.w_q, self.w_k, self.w_v, self.w_geo]


class IterationParams:
    def __init__(self, prefix: str, config: ModelConfig, rng: np.random.Generator, trainable: bool = True):
        self.heads = [
            HeadParams(f"{prefix}.head{h}", config.d_model, config.d_head, config.d_geo_emb, rng, trainable)
            for h in range(config.num_heads)
        ]
        width = config.num_heads * config.d_head
        self.g_w = Parameter(f"{prefix}.g.weight", np.zeros((width, config.d_model)), trainable)
        self.g_b = Parameter(f"{prefix}.g.bias", np.zeros(config.d_model), trainable)

    def parameters(self) -> List[Parameter]:
        params = [p for head in self.heads for p in head.parameters()]
        return params + [self.g_w, self.g_b]


class PerceiverParams:
    """Attention parameters for every perceiver iteration"""

    def __init__(self, prefix: str, config: ModelConfig, rng: np.random.Generator, trainable: bool = True):
        self.prefix = prefix
        self.config = config
        self.iterations = [
            IterationParams(f"{prefix}.iter{i}", config, rng, trainable)
            for i in range(config.perceiver_iterations)
        ]
        self.reset(rng)

    def parameters(self) -> List[Parameter]:
        return [p for it in self.iterations for p in it.parameters()]

    def reset(self, rng: np.random.Generator):
        """Fresh random attention maps; the output summarizer G starts near zero"""
        cfg = self.config
        std = 1.0 / np.sqrt(cfg.d_model)
        for it in self.iterations:
            for head in it.heads:
                head.w_q.data = rng.normal(0.0, std, head.w_q.shape)
                head.w_k.data = rng.normal(0.0, std, head.w_k.shape)
                head.w_v.data = rng.normal(0.0, std, head.w_v.shape)
                head.w_geo.data = rng.normal(0.0, 0.1, head.w_geo.shape)
            if cfg.zero_init_g:
                it.g_w.data = np.zeros(it.g_w.shape)
            else:
                it.g_w.data = rng.normal(0.0, cfg.g_init_scale, it.g_w.shape)
            it.g_b.data = np.zeros(it.g_b.shape)


class Attention(NamedTuple):
    context: Tensor
    weights: Tensor
    affinity: Tensor
    geometry: Tensor


def encode_branch(features: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """relu(features @ w + b)"""
    return relu(fc_layer(features, w, b))


def geometry_features(boxes_sa: np.ndarray, boxes_tl: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """
    Relative geometry of every (SA i, TL j) pair, shaped (K_sa, K_tl, 4):
    (log(|dcx|/w_i + eps), log(|dcy|/h_i + eps), log(w_j/w_i), log(h_j/h_i))
    """
    a = np.asarray(boxes_sa, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_tl, dtype=np.float64).reshape(-1, 4)
    acx, acy = a[:, 0] + 0.5 * a[:, 2], a[:, 1] + 0.5 * a[:, 3]
    bcx, bcy = b[:, 0] + 0.5 * b[:, 2], b[:, 1] + 0.5 * b[:, 3]
    wi, hi = a[:, 2][:, None], a[:, 3][:, None]
    dx = np.log(np.abs(acx[:, None] - bcx[None, :]) / wi + eps)
    dy = np.log(np.abs(acy[:, None] - bcy[None, :]) / hi + eps)
    dw = np.log(b[:, 2][None, :] / wi)
    dh = np.log(b[:, 3][None, :] / hi)
    return np.stack([dx, dy, dw, dh], axis=-1)


def sinusoidal_embedding(geometry: np.ndarray, dim: int, wave_length: float = 1000.0) -> np.ndarray:
    """Sin/cos embedding of the 4 geometry features into ``dim`` values per pair"""
    feat_range = dim // 8
    dim_mat = wave_length ** (np.arange(feat_range) / feat_range)
    mul_mat = (100.0 * geometry)[..., None] / dim_mat
    emb = np.concatenate([np.sin(mul_mat), np.cos(mul_mat)], axis=-1)
    return emb.reshape(geometry.shape[0] * geometry.shape[1], 4 * 2 * feat_range)


def geometry_embedding(boxes_sa: np.ndarray, boxes_tl: np.ndarray, dim: int, eps: float = 1e-3) -> Tensor:
    """Constant (K_sa * K_tl, dim) embedding of every box pair"""
    return Tensor(sinusoidal_embedding(geometry_features(boxes_sa, boxes_tl, eps), dim))


def _weight(embedding: Tensor, w_geo: Tensor, rows: int, cols: int) -> Tensor:
    return relu(reshape(matmul(embedding, w_geo), (rows, cols)))


def geometry_weight(boxes_sa: np.ndarray, boxes_tl: np.ndarray, w_geo: Tensor, dim: int,
                    eps: float = 1e-3) -> Tensor:
    """Nonnegative (K_sa, K_tl) weight U = relu(embedding @ w_geo)"""
    emb = geometry_embedding(boxes_sa, boxes_tl, dim, eps)
    return _weight(emb, w_geo, len(boxes_sa), len(boxes_tl))


def proposal_cross_attention(phi_sa: Tensor, phi_tl: Tensor, u: Tensor, head: HeadParams) -> Attention:
    """
    One head: A = Q(phi_sa) K(phi_tl)^T / sqrt(d_head), W = U-weighted row
    softmax of A, context = W V(phi_tl)
    """
    if phi_sa.shape[1] != phi_tl.shape[1]:
        raise DimensionError("attention inputs disagree in width", phi_sa.shape, phi_tl.shape)
    if u.shape != (phi_sa.shape[0], phi_tl.shape[0]):
        raise DimensionError("geometry weight does not match proposal counts", u.shape,
                             (phi_sa.shape[0], phi_tl.shape[0]))
    q = matmul(phi_sa, head.w_q)
    k = matmul(phi_tl, head.w_k)
    v = matmul(phi_tl, head.w_v)
    a = scale(matmul(q, transpose(k)), 1.0 / np.sqrt(head.w_q.shape[1]))
    w = weighted_softmax_rows(a, u)
    return Attention(matmul(w, v), w, a, u)


def mhpca(phi_sa: Tensor, phi_tl: Tensor, boxes_sa: np.ndarray, boxes_tl: np.ndarray,
          params: IterationParams, d_geo_emb: int, eps: float = 1e-3) -> Tensor:
    """Psi = phi_sa + G([H_1, ..., H_L])"""
    width = params.g_w.shape[0]
    d_head = params.heads[0].w_q.shape[1] if params.heads else 0
    if len(params.heads) * d_head != width or params.g_w.shape[1] != phi_sa.shape[1]:
        raise DimensionError("head outputs do not match the summarizer", (len(params.heads), d_head),
                             params.g_w.shape)
    emb = geometry_embedding(boxes_sa, boxes_tl, d_geo_emb, eps)
    contexts = []
    for head in params.heads:
        u = _weight(emb, head.w_geo, phi_sa.shape[0], phi_tl.shape[0])
        contexts.append(proposal_cross_attention(phi_sa, phi_tl, u, head).context)
    return add(phi_sa, fc_layer(concat(contexts), params.g_w, params.g_b))


def iterative_perceive(
    phi_sa0: Tensor,
    fc2: Sequence[Tensor],
    contexts: Optional[Sequence[Tensor]],
    boxes: np.ndarray,
    params: PerceiverParams,
    context_boxes: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Run the perceiver at both FC encoder depths.

    Iteration 1 attends from the first SA encoding to the context at depth 1;
    its output goes through the SA branch's second encoder ``fc2`` and
    iteration 2 attends from there to the context at depth 2. ``contexts``
    None means self attention on the running SA features.

    Returns:
        Target-perceived SA features at the second encoder depth
    """
    cfg = params.config
    context_boxes = boxes if context_boxes is None else context_boxes
    kv = phi_sa0 if contexts is None else contexts[0]
    psi = mhpca(phi_sa0, kv, boxes, context_boxes, params.iterations[0], cfg.d_geo_emb, cfg.geo_eps)
    phi = encode_branch(psi, fc2[0], fc2[1])
    if len(params.iterations) < 2:
        return phi
    kv = phi if contexts is None else contexts[1]
    return mhpca(phi, kv, boxes, context_boxes, params.iterations[1], cfg.d_geo_emb, cfg.geo_eps)
