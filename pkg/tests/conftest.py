import numpy as np
import pytest

from goldfinch.config import ModelConfig
from goldfinch.model import Model


def small_cfg(**kw) -> ModelConfig:
    base = dict(n_layer=3, d_model=32, head_size=16, vocab_size=50, ctx_len=64, cr=4, chunk_len=4,
                decay_rank=8, ddlerp_rank=8, gold_lora_rank=8, loradapt_rank=8, second_value_rank=8,
                dtype="float64", seed=3)
    base.update(kw)
    return ModelConfig(**base)


def jittered(cfg: ModelConfig, scale: float = 0.1, seed: int = 0) -> Model:
    m = Model(cfg)
    m.store.perturb(scale, seed=seed)
    return m


def fd_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gf[i] = (hi - lo) / (2 * eps)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
