import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gfp.errors import ValidationError
from gfp.evalsuite import (
    FeatureBank,
    ProbeConfig,
    block_macs,
    extract_features,
    flops_account,
    knn_retrieve,
    linear_probe,
)
from gfp.model import GFPModel, ntu_config
from gfp.predictor import HierarchySpec
from gfp.skeldata import SkeletonSequence

from conftest import small_config


def bank(features, labels, prefix="s"):
    return FeatureBank(np.asarray(features, float), labels, [f"{prefix}{i}" for i in range(len(labels))])


# -- linear probe ---------------------------------------------------------------


def test_probe_on_one_hot_features_is_perfect():
    labels = np.repeat(np.arange(4), 10)
    res = linear_probe(bank(np.eye(4)[labels], labels), bank(np.eye(4)[labels], labels, "t"))
    assert res.accuracy == 1.0 and res.train_accuracy == 1.0


def test_probe_on_noise_is_near_chance():
    rng = np.random.default_rng(0)
    tr = bank(rng.normal(size=(400, 8)), rng.integers(0, 4, 400))
    te = bank(rng.normal(size=(2000, 8)), rng.integers(0, 4, 2000), "t")
    assert abs(linear_probe(tr, te).accuracy - 0.25) < 0.05


def test_probe_needs_two_classes():
    with pytest.raises(ValidationError):
        linear_probe(bank(np.ones((5, 2)), [1] * 5), bank(np.ones((2, 2)), [1, 1], "t"))


def test_probe_is_deterministic_and_stops_early():
    rng = np.random.default_rng(1)
    labels = np.repeat(np.arange(3), 20)
    feats = rng.normal(size=(60, 5)) + labels[:, None]
    a = linear_probe(bank(feats, labels), bank(feats, labels, "t"))
    b = linear_probe(bank(feats, labels), bank(feats, labels, "t"))
    assert a == b
    c = linear_probe(bank(feats, labels), bank(feats, labels, "t"), ProbeConfig(max_iter=10))
    assert c.iterations == 10


def test_constant_feature_column_is_harmless():
    labels = np.repeat(np.arange(2), 5)
    feats = np.column_stack([labels, np.full(10, 7.0)])
    assert linear_probe(bank(feats, labels), bank(feats, labels, "t")).accuracy == 1.0


def test_probe_leaves_encoder_untouched():
    cfg = small_config()
    model = GFPModel(cfg)
    params = model.init_params(0)
    digest = params.digest()
    rng = np.random.default_rng(0)
    seqs = [SkeletonSequence(rng.normal(size=(10, 3, 3)).astype(np.float32), i % 2, f"x{i}") for i in range(6)]
    tr = extract_features(seqs, model, params)
    linear_probe(tr, tr)
    assert params.digest() == digest


def test_extract_features_checks_skeleton_shape():
    model = GFPModel(small_config())
    seq = SkeletonSequence(np.zeros((10, 4, 3), np.float32), 0, "bad")
    with pytest.raises(ValidationError):
        extract_features([seq], model, model.init_params(0))


# -- retrieval ----------------------------------------------------------------


def test_knn_on_duplicates_is_perfect():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(12, 6))
    labels = rng.integers(0, 3, 12)
    assert knn_retrieve(bank(f, labels, "q"), bank(f, labels, "g")) == 1.0


def test_knn_hand_example():
    g = bank([[1, 0], [0, 1]], [0, 1], "g")
    q = bank([[2, 0.1], [0.1, 3], [1, 1.01]], [0, 0, 0], "q")
    assert knn_retrieve(q, g) == pytest.approx(1 / 3)


@settings(max_examples=30, deadline=None)
@given(scale=st.floats(0.01, 100), seed=st.integers(0, 1000))
def test_knn_is_scale_invariant(scale, seed):
    rng = np.random.default_rng(seed)
    g = bank(rng.normal(size=(10, 4)), rng.integers(0, 3, 10), "g")
    q = bank(rng.normal(size=(7, 4)), rng.integers(0, 3, 7), "q")
    q2 = bank(q.features * scale, q.labels, "q")
    assert knn_retrieve(q, g) == knn_retrieve(q2, g)


def test_knn_rejects_overlapping_ids():
    with pytest.raises(ValidationError, match="appear in the gallery"):
        knn_retrieve(bank(np.eye(2), [0, 1]), bank(np.eye(2), [0, 1]))


def test_knn_warns_on_zero_norm(caplog):
    g = bank([[1, 0], [0, 0], [0, 1]], [0, 1, 1], "g")
    q = bank([[1, 0.1]], [0], "q")
    with caplog.at_level(logging.WARNING, logger="gfp.evalsuite"):
        assert knn_retrieve(q, g) == 1.0
    assert "zero norm" in caplog.text


def test_knn_empty_gallery():
    with pytest.raises(ValidationError):
        knn_retrieve(bank(np.eye(2), [0, 1], "q"), FeatureBank(np.zeros((0, 2)), []))


# -- FLOPs ----------------------------------------------------------------------


def test_ntu_config_matches_reference_costs():
    r = flops_account(ntu_config(), 0.9, bodies=2)
    assert r.encoder_flops / 1e9 == pytest.approx(1.97, rel=0.2)
    assert r.decoder_flops / 1e9 == pytest.approx(1.57, rel=0.2)
    assert r.tgn_flops / 1e9 == pytest.approx(0.64, rel=0.2)
    assert (r.decoder_flops + r.tgn_flops) / 17.70e9 < 0.15


def test_encoder_flops_by_hand():
    # 75 visible tokens, width 256, ffn 1024, 8 layers, one body
    n, d = 75, 256
    per_block = 4 * n * d * d + 2 * n * n * d + 2 * n * d * 1024
    assert block_macs(n, d, 1024) == per_block
    assert flops_account(ntu_config(), 0.9).encoder_flops == 2 * 8 * per_block


def test_flops_monotone_in_visible_tokens():
    cfg = ntu_config()
    assert flops_account(cfg, 0.5).encoder_flops > flops_account(cfg, 0.9).encoder_flops
    assert flops_account(cfg, 0.5).decoder_flops == flops_account(cfg, 0.9).decoder_flops


def test_flops_degenerate_configs():
    import dataclasses

    cfg = small_config()
    no_enc = dataclasses.replace(cfg, encoder=dataclasses.replace(cfg.encoder, layers=0))
    assert flops_account(no_enc).encoder_flops == 0
    flat = dataclasses.replace(cfg, hierarchy=HierarchySpec(levels=(), include_global=False))
    r = flops_account(flat)
    assert r.decoder_flops == 0 and r.tgn_flops == 0


def test_bodies_scale_linearly():
    a, b = flops_account(ntu_config(), bodies=1), flops_account(ntu_config(), bodies=2)
    assert b.tgn_flops == 2 * a.tgn_flops and b.encoder_flops == 2 * a.encoder_flops


def test_reconstruction_baseline_has_no_tgn():
    import dataclasses

    r = flops_account(dataclasses.replace(ntu_config(), objective="eq1"))
    assert r.tgn_flops == 0


# -- feature banks ---------------------------------------------------------------


def test_feature_bank_round_trip(tmp_path):
    b = FeatureBank(np.random.default_rng(0).normal(size=(5, 3)), [0, 1, 2, 1, -1], list("abcde"))
    b.save(tmp_path / "f.skt")
    c = FeatureBank.load(tmp_path / "f.skt")
    assert np.array_equal(b.features, c.features) and np.array_equal(b.labels, c.labels)
    assert c.sample_ids == list("abcde")


def test_feature_bank_validates():
    with pytest.raises(ValidationError):
        FeatureBank(np.zeros((3, 2)), [0, 1])
    with pytest.raises(ValidationError):
        FeatureBank(np.array([[np.nan]]), [0])
