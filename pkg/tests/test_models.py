import numpy as np
import pytest

from mimetic_mlp import autodiff as ad
from mimetic_mlp.autodiff import ConfigurationError, ShapeError, Tensor
from mimetic_mlp.gradcheck import check_model
from mimetic_mlp.init_schemes import InitSpec
from mimetic_mlp.models import (
    ModelConfig,
    build_model,
    forward,
    mlp_weight_pairs,
    multi_head_self_attention,
    parameter_count,
)
from mimetic_mlp.train import OptimSpec, OptimState, adamw_step


def small(family="convnext", **kw):
    base = dict(family=family, embed_dim=16, depth=3, expansion=2, patch_size=2, heads=4,
                num_classes=10, image_size=8)
    base.update(kw)
    return ModelConfig(**base)


def test_convnext_desk_scale_shapes():
    model = build_model(ModelConfig(family="convnext", embed_dim=16, depth=3, expansion=2, patch_size=2,
                                    num_classes=10, image_size=32))
    pairs = mlp_weight_pairs(model)
    assert len(pairs) == 3
    for idx, (i, W1, W2) in enumerate(pairs):
        assert i == idx
        assert W1.shape == (32, 16) and W2.shape == (16, 32)


def test_vit_head_dim():
    cfg = small("vit", embed_dim=32, heads=4)
    assert cfg.embed_dim // cfg.heads == 8
    build_model(cfg)


@pytest.mark.parametrize("family", ["convnext", "vit"])
def test_same_seed_identical_bytes(family):
    a, b = build_model(small(family, seed=9)), build_model(small(family, seed=9))
    assert [x.tobytes() for _, x in a.state()] == [x.tobytes() for _, x in b.state()]
    c = build_model(small(family, seed=10))
    assert any(x.tobytes() != y.tobytes() for (_, x), (_, y) in zip(a.state(), c.state()))


@pytest.mark.parametrize("family", ["convnext", "vit"])
@pytest.mark.parametrize("scalar_bias", [False, True])
def test_parameter_count_formula(family, scalar_bias):
    cfg = small(family, init_spec=InitSpec(learnable_scalar_bias=scalar_bias))
    assert build_model(cfg).num_parameters() == parameter_count(cfg)


def test_parameter_count_hand_computed():
    # convnext n=16 p=32 f=3 P=2 C=10 depth 3:
    # patch 12*16+16=208; block 9*16+16 + 32 + (2*16*32+32+16)=1264; tail 32 + 170
    assert parameter_count(small()) == 208 + 3 * 1264 + 32 + 170


@pytest.mark.parametrize("bad", [dict(family="mlp"), dict(patch_size=3), dict(filter_size=4),
                                 dict(family="vit", embed_dim=18, heads=4), dict(depth=0)])
def test_invalid_configs(bad):
    with pytest.raises(ConfigurationError):
        build_model(small(**bad))


@pytest.mark.parametrize("family", ["convnext", "vit"])
def test_forward_shapes_and_zero_head(family):
    model = build_model(small(family))
    logits = forward(model, Tensor(np.zeros((4, 3, 8, 8))))
    assert logits.shape == (4, 10)
    np.testing.assert_array_equal(logits.data, np.zeros((4, 10)))
    with pytest.raises(ShapeError):
        forward(model, Tensor(np.zeros((4, 3, 16, 16))))


@pytest.mark.parametrize("family", ["convnext", "vit"])
def test_batch_permutation_equivariance(family):
    rng = np.random.default_rng(0)
    model = build_model(small(family))
    for name, p in model.params.items():
        if name.startswith("head"):
            p.assign(rng.standard_normal(p.shape))
    x = rng.standard_normal((5, 3, 8, 8))
    perm = rng.permutation(5)
    np.testing.assert_allclose(forward(model, x[perm]).data, forward(model, x).data[perm], rtol=1e-12)


@pytest.mark.parametrize("family", ["convnext", "vit"])
def test_residual_identity(family):
    """With every block output path zeroed the network is patchify -> pool -> norm -> head."""
    rng = np.random.default_rng(1)
    model = build_model(small(family))
    for name, p in model.params.items():
        if name.startswith("head") or name.endswith("dw.b") or name == "patch.b":
            p.assign(rng.standard_normal(p.shape))
        if any(name.endswith(s) for s in ("mlp.W2", "mlp.b2", "attn.Wo", "attn.bo", "dw.K")):
            p.assign(np.zeros(p.shape))
    x = rng.standard_normal((3, 3, 8, 8))
    ref = ad.linear(ad.patchify(Tensor(x), 2), model.patch_W, model.patch_b)
    if model.pos is not None:
        ref = ad.add(ref, model.pos)
    ref = ad.linear(model.norm(ad.mean_pool_over_tokens(ref)), model.head_W, model.head_b)
    np.testing.assert_allclose(forward(model, x).data, ref.data, rtol=1e-12, atol=1e-14)


def test_mlp_weight_pairs_are_copies_and_track_updates():
    model = build_model(small())
    _, W1, _ = mlp_weight_pairs(model)[0]
    W1[...] = 123.0
    assert not np.any(model.mlp_blocks()[0].W1.data == 123.0)

    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((4, 3, 8, 8)), np.array([0, 1, 2, 3])
    for name, p in model.params.items():
        if name.startswith("head"):
            p.assign(0.1 * rng.standard_normal(p.shape))
    before = model.mlp_blocks()[0].W1.numpy()
    ad.backward(ad.cross_entropy(forward(model, x), y))
    g = model.mlp_blocks()[0].W1.grad.copy()
    params = model.parameters()
    spec = OptimSpec(lr=0.01, weight_decay=0.0)
    adamw_step(params, [p.grad for p in params], OptimState.zeros(params), spec, 1)
    # oracle: one bias-corrected Adam step from zero state is -lr * g / (|g| + eps)
    expected = before - 0.01 * g / (np.abs(g) + spec.eps)
    np.testing.assert_allclose(mlp_weight_pairs(model)[0][1], expected, rtol=1e-12, atol=1e-15)


def _attn_weights(n, rng):
    return [Tensor(rng.standard_normal((n, n))) for _ in range(4)]


def test_attention_single_token():
    rng = np.random.default_rng(0)
    Wq, Wk, Wv, Wo = _attn_weights(8, rng)
    x = rng.standard_normal((2, 1, 8))
    out = multi_head_self_attention(Tensor(x), Wq, Wk, Wv, Wo, heads=2).data
    np.testing.assert_allclose(out, x @ Wv.data.T @ Wo.data.T, rtol=1e-12)


def test_attention_zero_values_and_identical_tokens():
    rng = np.random.default_rng(1)
    Wq, Wk, Wv, Wo = _attn_weights(8, rng)
    x = rng.standard_normal((1, 4, 8))
    zero = multi_head_self_attention(Tensor(x), Wq, Wk, Tensor(np.zeros((8, 8))), Wo, heads=4).data
    np.testing.assert_array_equal(zero, np.zeros_like(x))
    same = np.repeat(rng.standard_normal((1, 1, 8)), 3, axis=1)
    out = multi_head_self_attention(Tensor(same), Wq, Wk, Wv, Wo, heads=4).data
    np.testing.assert_allclose(out[0, 0], out[0, 1], rtol=1e-13)
    np.testing.assert_allclose(out[0, 0], out[0, 2], rtol=1e-13)


@pytest.mark.parametrize("family", ["convnext", "vit"])
def test_end_to_end_gradients(family):
    report = check_model(family)
    assert report.worst_rel_err <= 1e-4, report
