import os

os.environ["XDDA_LOG_DIR"] = ""
os.environ.setdefault("XDDA_LOG_LEVEL", "WARNING")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from app.models.tensor import backward, no_grad, tracked_leaves  # noqa: E402
from app.schema.config import ExperimentConfig, from_flat  # noqa: E402
from app.service.datasets import generate_datasets  # noqa: E402

# Small enough for finite differences and for a full pipeline in seconds
TINY = {
    "data.image_size": 16,
    "data.min_object_size": 4,
    "data.max_object_size": 8,
    "data.max_objects": 2,
    "data.n_train_source": 3,
    "data.n_train_target": 3,
    "data.n_eval_target": 2,
    "data.n_eval_source": 2,
    "model.channels": [4, 4],
    "model.anchor_size": 8.0,
    "model.top_k": 4,
    "model.d_model": 8,
    "model.num_heads": 2,
    "model.d_geo_emb": 8,
    "distill.iters_jdp": 2,
    "distill.iters_cdd_dtr": 2,
    "distill.cdd_warmup": 1,
    "distill.eval_every": 2,
    "ablation.seeds": [1],
}


def tiny_config(**overrides) -> ExperimentConfig:
    return from_flat({**TINY, **overrides})


def grad_check(build_loss, params, h: float = 1e-3, rtol: float = 1e-4, atol: float = 1e-5):
    """Compare backward() against central differences for every entry of ``params``"""
    loss = build_loss()
    for leaf in [*params, *tracked_leaves(loss)]:
        leaf.grad = None
    backward(loss)
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = np.zeros_like(p.data)
        for idx in np.ndindex(p.data.shape):
            old = p.data[idx]
            with no_grad():
                p.data[idx] = old + h
                up = build_loss().item()
                p.data[idx] = old - h
                down = build_loss().item()
            p.data[idx] = old
            numeric[idx] = (up - down) / (2 * h)
        np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol, err_msg=getattr(p, "name", "tensor"))


@pytest.fixture
def config() -> ExperimentConfig:
    return tiny_config()


@pytest.fixture
def data_root(tmp_path, config):
    root = tmp_path / "data"
    generate_datasets(config, root)
    return root
