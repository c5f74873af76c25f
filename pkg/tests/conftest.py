import numpy as np
import pytest

from st_transfer.model import ModelConfig, collate, init_params
from st_transfer.text import build_char_vocab

TINY = dict(d0=10, d1=8, d2=4, d3=8, d_o=8, encoder_blstm_layers=2, decoder_layers=2)


def tiny_config(vocab_size: int = 6, **kw) -> ModelConfig:
    return ModelConfig(vocab_size, **{**TINY, **kw})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_vocab():
    return build_char_vocab(["ab"])  # 4 reserved + 2 chars = V 6


def tiny_batch(cfg: ModelConfig, rng, dtype=np.float64):
    feats = [rng.standard_normal((12, cfg.d0)), rng.standard_normal((9, cfg.d0))]
    toks = [np.array([1, 4, 5, 4, 2]), np.array([1, 5, 2])]
    return collate(["a", "b"], feats, toks, dtype=dtype)


def float64_params(cfg: ModelConfig, seed: int = 0) -> dict:
    return {k: np.array(v, dtype=np.float64) for k, v in init_params(cfg, seed, dtype=np.float64).items()}
