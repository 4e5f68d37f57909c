import numpy as np
import pytest

from xfrl.networks import (
    ARCHITECTURES,
    HeadSpec,
    build,
    conv_param_count,
    forward_features,
    param_count,
    plan_shapes,
    surgery_transfer,
)
from xfrl.tensor_nn import Dense, ShapeError, sgd_step

CLS3 = HeadSpec("classification", 3)

TABLE = {
    "A_ConvNet": [(16, 5), (32, 5), (64, 5), (128, 6)],
    "H_Net": [(48, 5), (96, 5), (128, 3), (128, 3), (256, 3)],
    "AlexNet_Conv": [(96, 11), (256, 5), (384, 3), (384, 3), (256, 3)],
}


@pytest.mark.parametrize("arch", sorted(TABLE))
def test_conv_sequences(arch):
    model = build(arch, CLS3, (1, 64, 64), seed=0)
    assert model.conv_config() == TABLE[arch]
    assert [s.kind for s in model.layer_specs() if s.kind == "conv"] == ["conv"] * len(TABLE[arch])


def test_aconvnet_builds_four_blocks():
    model = build("A_ConvNet", CLS3, (1, 64, 64), seed=0)
    assert model.depth == 4


def test_input_too_small_names_layer():
    with pytest.raises(ShapeError, match="layer 4"):
        build("A_ConvNet", CLS3, (1, 32, 32), seed=0)


def test_same_seed_bit_identical():
    a = build("H_Net", CLS3, (1, 64, 64), seed=5, width=0.25)
    b = build("H_Net", CLS3, (1, 64, 64), seed=5, width=0.25)
    assert all(p.value.tobytes() == q.value.tobytes() for p, q in zip(a.params(), b.params()))
    c = build("H_Net", CLS3, (1, 64, 64), seed=6, width=0.25)
    assert any(p.value.tobytes() != q.value.tobytes() for p, q in zip(a.params(), c.params()))


def test_alexnet_conv1_param_count():
    model = build("AlexNet_Conv", CLS3, (1, 64, 64), seed=0)
    assert param_count(model.block_params(1)) == 96 * 11 * 11 * 1 + 96 == 11_712


def test_param_count_examples():
    params = Dense(2, 3, np.random.default_rng(0)).params()
    assert param_count(params) == 9
    model = build("A_ConvNet", CLS3, (1, 64, 64), seed=0)
    formula = 16 * 25 + 16 + 32 * 16 * 25 + 32 + 64 * 32 * 25 + 64 + 128 * 64 * 36 + 128
    assert conv_param_count(model) == formula
    total = param_count(model)
    model.freeze_upto(4)
    assert param_count(model) == total


def test_feature_dims():
    model = build("A_ConvNet", CLS3, (1, 64, 64), seed=0)
    x = np.random.default_rng(0).normal(size=(2, 1, 64, 64))
    assert forward_features(model, x, 1).shape == (2, 14400)
    assert model.feature_shape(1) == (16, 30, 30)
    with pytest.raises(ValueError):
        forward_features(model, x, 5)
    with pytest.raises(ValueError):
        forward_features(model, x, 0)


def test_top_features_feed_head():
    model = build("AlexNet_Conv", CLS3, (1, 32, 32), seed=1, width=0.125)
    x = np.random.default_rng(1).normal(size=(3, 1, 32, 32))
    feats = forward_features(model, x, model.depth)
    out, taps = model.forward(x, taps={model.depth})
    np.testing.assert_array_equal(taps[model.depth].reshape(3, -1), feats)
    gap = feats.reshape(3, model.feature_shape(model.depth)[0], -1).mean(axis=2)
    np.testing.assert_allclose(out, gap @ model.head.dense.w.value.T + model.head.dense.b.value, atol=1e-12)


def test_zero_input_zero_features():
    model = build("A_ConvNet", CLS3, (1, 64, 64), seed=0)
    assert not np.any(forward_features(model, np.zeros((1, 1, 64, 64)), 2))


def test_pooling_rule():
    plan = plan_shapes("AlexNet_Conv", (1, 64, 64))
    assert [p[2] for p in plan] == [True, False, False, False, False]
    assert plan[-1][3] == (256, 17, 17)


def test_reconstruction_head_restores_shape():
    model = build("H_Net", HeadSpec("reconstruction"), (1, 64, 64), seed=0, width=0.125)
    x = np.random.default_rng(0).normal(size=(2, 1, 64, 64))
    out, _ = model.forward(x)
    assert out.shape == x.shape


def test_width_scales_channels():
    model = build("AlexNet_Conv", CLS3, (1, 32, 32), seed=0, width=0.125)
    assert model.conv_config() == [(12, 11), (32, 5), (48, 3), (48, 3), (32, 3)]


def _src():
    return build("AlexNet_Conv", CLS3, (1, 32, 32), seed=3, width=0.125)


def test_surgery_k0_is_fresh_build():
    fresh = build("AlexNet_Conv", HeadSpec("classification", 2), (1, 32, 32), seed=9, width=0.125)
    out = surgery_transfer(_src(), 0, True, HeadSpec("classification", 2), seed=9)
    assert all(p.value.tobytes() == q.value.tobytes() for p, q in zip(fresh.params(), out.params()))
    assert all(p.trainable for p in out.params())


def test_surgery_copies_and_freezes():
    src = _src()
    out = surgery_transfer(src, 2, True, HeadSpec("classification", 4), seed=11)
    for l in (1, 2):
        for p, q in zip(src.block_params(l), out.block_params(l)):
            assert p.value.tobytes() == q.value.tobytes()
            assert not q.trainable
    fresh = build("AlexNet_Conv", HeadSpec("classification", 4), (1, 32, 32), seed=11, width=0.125)
    for l in (3, 4, 5):
        for p, q in zip(fresh.block_params(l), out.block_params(l)):
            assert p.value.tobytes() == q.value.tobytes()
            assert q.trainable
    with pytest.raises(ValueError):
        surgery_transfer(src, 6, True, CLS3, seed=0)


def test_surgery_does_not_mutate_source():
    src = _src()
    before = [p.value.copy() for p in src.params()]
    out = surgery_transfer(src, 5, False, CLS3, seed=0)
    for p in out.params():
        p.value += 1.0
    assert all(np.array_equal(b, p.value) for b, p in zip(before, src.params()))
    assert all(p.trainable for p in src.params())


def test_freeze_survives_training_steps():
    src = _src()
    model = surgery_transfer(src, 5, True, CLS3, seed=0)
    x = np.random.default_rng(0).normal(size=(4, 1, 32, 32))
    head_before = model.head.dense.w.value.copy()
    for _ in range(3):
        out, _ = model.forward(x)
        _, g = model.loss(out, x, np.array([0, 1, 2, 0]))
        model.backward(g)
        sgd_step(model.params(), 0.1)
    for l in range(1, 6):
        for p, q in zip(src.block_params(l), model.block_params(l)):
            assert p.value.tobytes() == q.value.tobytes()
    assert not np.array_equal(head_before, model.head.dense.w.value)


def test_lr_multiplier_count_checked():
    model = _src()
    with pytest.raises(ValueError):
        model.set_lr_multipliers([1.0] * 5)
    model.set_lr_multipliers([0.1, 0.1, 0.1, 0.5, 1.0, 10.0])
    assert model.head.dense.w.lr_multiplier == 10.0
    assert model.block_params(4)[0].lr_multiplier == 0.5


def test_network_gradient_matches_finite_differences():
    from xfrl.tensor_nn import grad_check

    model = build("AlexNet_Conv", CLS3, (1, 32, 32), seed=2, width=0.0625)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 1, 32, 32))
    labels = np.array([0, 2])
    p = model.block_params(3)[0]

    def fun(v):
        p.value = v.copy()
        model.zero_grad()
        out, _ = model.forward(x)
        loss, g = model.loss(out, x, labels)
        model.backward(g)
        return loss, p.grad.copy()

    assert grad_check(fun, p.value.copy(), 1e-5) < 1e-4


def test_all_table_configs_listed():
    assert set(ARCHITECTURES) == set(TABLE)
