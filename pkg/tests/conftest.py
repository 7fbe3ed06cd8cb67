import numpy as np
import pytest

from gfp.backbone import TransformerConfig
from gfp.model import GFPModel, ModelConfig
from gfp.objective import LossWeights
from gfp.predictor import HierarchySpec
from gfp.targetnet import TgnConfig
from gfp.trainer import condition_params
from gfp.tokenizer import motion_intensity, sample_mask


def small_config(**overrides) -> ModelConfig:
    """Width 16, two encoder layers, levels {2, 4} + global over 12 tokens (T_e=4, V=3)."""
    kw = dict(
        frames=8,
        joints=3,
        channels=3,
        patch_len=2,
        encoder=TransformerConfig(16, 2, 32, 2),
        hierarchy=HierarchySpec(levels=(2, 4), predictor_width=16, target_width=8,
                                projector_hidden=12, global_hidden=20),
        tgn=TgnConfig(local_hidden=12, global_hidden=16),
        decoder_heads=2,
        decoder_ffn_hidden=32,
        recon_layers=1,
    )
    kw.update(overrides)
    return ModelConfig(**kw)


def conditioned_params(model: GFPModel, seed: int = 1, scale: float = 15.0):
    """Initial weights scaled up so activations are O(1) and finite differences are informative."""
    params = model.init_params(seed)
    condition_params(params, scale)
    return params


def small_batch(cfg: ModelConfig, B: int = 3, ratio: float = 0.5, seed: int = 0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(B, cfg.frames, cfg.joints, cfg.channels))
    plans = [sample_mask(motion_intensity(x, cfg.patch_len), ratio, rng) for x in X]
    return X, plans


@pytest.fixture
def small_model():
    return GFPModel(small_config(), LossWeights())
