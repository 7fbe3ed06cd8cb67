import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gfp import backbone as bb
from gfp.backbone import ModelParams
from gfp.errors import ValidationError
from gfp.predictor import (
    HierarchicalPredictor,
    HierarchySpec,
    assemble_full,
    temporal_pool,
    temporal_pool_backward,
)
from gfp.tokenizer import sample_mask


def test_full_size_target_counts():
    spec = HierarchySpec()
    assert spec.token_counts(30, 25) == {"t5": 150, "t10": 75, "t30": 25, "global": 1}
    assert spec.num_targets(30, 25) == 251
    patch_level = HierarchySpec(levels=(1,), include_global=False)
    assert patch_level.num_targets(30, 25) == 750
    assert spec.kernels() == [5, 2, 3]


@pytest.mark.parametrize("levels", [(4,), (5, 5), (10, 5), (0, 5)])
def test_invalid_levels(levels):
    with pytest.raises(ValidationError):
        HierarchySpec(levels=levels).validate(30)


def test_assemble_full_counts_and_placement():
    N, d = 750, 4
    plan = sample_mask(np.zeros(N), 0.9, np.random.default_rng(0))
    feats = np.random.default_rng(1).normal(size=(1, 75, d))
    zero_pos = (np.zeros((30, d)), np.zeros((25, d)))
    full = assemble_full(feats, plan.visible[None], N, np.zeros(d), *zero_pos)
    assert full.shape == (1, 750, d)
    assert not full[0, plan.masked].any()
    np.testing.assert_array_equal(full[0, plan.visible], feats[0])
    other = sample_mask(np.zeros(N), 0.9, np.random.default_rng(7))
    full2 = assemble_full(feats, other.visible[None], N, np.ones(d), *zero_pos)
    np.testing.assert_array_equal(full2[0, other.visible[3]], feats[0, 3])
    assert (full2[0, other.masked] == 1.0).all()


def test_assemble_full_rejects_inconsistent_plan():
    with pytest.raises(ValidationError):
        assemble_full(np.zeros((1, 3, 2)), np.arange(4)[None], 10, np.zeros(2), np.zeros((5, 2)), np.zeros((2, 2)))
    with pytest.raises(ValidationError):
        assemble_full(np.zeros((1, 2, 2)), np.array([[0, 10]]), 10, np.zeros(2), np.zeros((5, 2)), np.zeros((2, 2)))


def test_temporal_pool_cases():
    const = np.full((30 * 25, 3), 2.5)
    pooled = temporal_pool(const, 25, 5)
    assert pooled.shape == (150, 3) and (pooled == 2.5).all()
    # joint 0 has values 1 and 3 at its two time steps
    tokens = np.array([[1.0], [10.0], [3.0], [20.0]])
    assert temporal_pool(tokens, 2, 2).ravel().tolist() == [2.0, 15.0]
    with pytest.raises(ValidationError):
        temporal_pool(np.zeros((12, 1)), 2, 4)


@settings(max_examples=30)
@given(T=st.sampled_from([2, 4, 6, 12]), V=st.integers(1, 4), k=st.sampled_from([1, 2]), seed=st.integers(0, 99))
def test_pool_preserves_joint_means_and_separation(T, V, k, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(T * V, 3))
    y = temporal_pool(x, V, k)
    np.testing.assert_allclose(y.reshape(-1, V, 3).mean(0), x.reshape(T, V, 3).mean(0), atol=1e-12)
    bumped = x.reshape(T, V, 3).copy()
    bumped[:, 0] += 1.0
    diff = temporal_pool(bumped.reshape(T * V, 3), V, k) - y
    changed = np.abs(diff.reshape(-1, V, 3)).sum(axis=(0, 2)) > 0
    assert changed.tolist() == [True] + [False] * (V - 1)


def test_pool_backward_is_adjoint():
    rng = np.random.default_rng(0)
    x, dy = rng.normal(size=(2, 12, 3)), rng.normal(size=(2, 6, 3))
    lhs = (temporal_pool(x, 3, 2) * dy).sum()
    rhs = (x * temporal_pool_backward(dy, 3, 2)).sum()
    assert lhs == pytest.approx(rhs)


def make_predictor(levels=(5, 10, 30), include_global=True, Te=30, V=25, width=8):
    spec = HierarchySpec(levels=levels, include_global=include_global, predictor_width=width, target_width=4,
                         projector_hidden=6, global_hidden=10)
    pred = HierarchicalPredictor(spec, width, Te, V, heads=2, ffn_hidden=8)
    params = ModelParams()
    pred.init(params, np.random.default_rng(0))
    return pred, params


def test_predictor_full_size_shapes():
    pred, params = make_predictor()
    out, _ = pred.forward(params, np.random.default_rng(1).normal(size=(2, 750, 8)))
    assert {k: v.shape for k, v in out.levels.items()} == {
        "t5": (2, 150, 4), "t10": (2, 75, 4), "t30": (2, 25, 4), "global": (2, 1, 4)}
    assert out.num_targets == 251
    with pytest.raises(ValidationError):
        pred.forward(params, np.zeros((1, 749, 8)))


def test_patch_level_special_case():
    pred, params = make_predictor(levels=(1,), include_global=False)
    out, _ = pred.forward(params, np.zeros((1, 750, 8)))
    assert out.num_targets == 750


def test_pass_through_with_zero_blocks_and_identity_projectors():
    pred, params = make_predictor(levels=(2, 4), Te=4, V=3, width=4)
    spec = HierarchySpec(levels=(2, 4), predictor_width=4, target_width=4, projector_hidden=4,
                         projector_depth=1, global_hidden=4, global_depth=1)
    pred = HierarchicalPredictor(spec, 4, 4, 3, heads=2, ffn_hidden=8)
    params = ModelParams()
    pred.init(params, np.random.default_rng(0))
    for path, v in params.items():
        if ".attn." in path or ".ffn." in path or path.endswith(".bias"):
            params[path] = np.zeros_like(v)
        elif path.endswith(".weight") and v.ndim == 2:
            params[path] = np.eye(4)
    full = np.random.default_rng(3).normal(size=(1, 12, 4))
    out, _ = pred.forward(params, full)
    p1 = temporal_pool(full, 3, 2)
    np.testing.assert_allclose(out.levels["t2"], p1, atol=1e-12)
    np.testing.assert_allclose(out.levels["t4"], temporal_pool(p1, 3, 2), atol=1e-12)
    np.testing.assert_allclose(out.levels["global"][:, 0], full.mean(axis=1), atol=1e-12)


def test_predictor_gradients_match_finite_differences():
    pred, params = make_predictor(levels=(2, 4), Te=4, V=3, width=8)
    for path, v in params.items():
        params[path] = v * 10 if path.endswith("weight") and "norm" not in path else v
    rng = np.random.default_rng(2)
    full = rng.normal(size=(2, 12, 8))
    w = {k: rng.normal(size=s) for k, s in (("t2", (2, 6, 4)), ("t4", (2, 3, 4)), ("global", (2, 1, 4)))}

    def loss(x):
        out, _ = pred.forward(params, x)
        return sum(float((out.levels[k] * w[k]).sum()) for k in w)

    _, cache = pred.forward(params, full)
    grads = {}
    dfull = pred.backward(params, cache, w, grads)
    eps = 1e-6
    for idx in [(0, 0, 0), (1, 5, 3), (0, 11, 7)]:
        x = full.copy()
        x[idx] += eps
        lp = loss(x)
        x[idx] -= 2 * eps
        lm = loss(x)
        assert dfull[idx] == pytest.approx((lp - lm) / (2 * eps), rel=1e-5, abs=1e-9)
    for path in params.paths():
        arr = params[path]
        idx = np.unravel_index(rng.integers(arr.size), arr.shape)
        old = arr[idx]
        arr[idx] = old + eps
        lp = loss(full)
        arr[idx] = old - eps
        lm = loss(full)
        arr[idx] = old
        assert grads[path][idx] == pytest.approx((lp - lm) / (2 * eps), rel=1e-5, abs=1e-8), path
