from fractions import Fraction

import numpy as np
import pytest
import torch

from denrescov.backbones import stage_channels
from denrescov.errors import ConfigError, InputError, ShapeError
from denrescov.fusion import (
    HEATMAP_LAYERS,
    FusionMode,
    FusionModelConfig,
    build_conv_block,
    build_fusion_model,
    build_model,
    forward,
    fuse_stage,
    load_model,
    save_model,
)


def _propagate(input_size, scale, block, mode="concat_channels"):
    """Independent shape propagation from stage widths (H, W, C per layer)."""
    res = stage_channels("resnet50", scale)
    den = stage_channels("densenet121", scale)
    fused = [r + d if mode == "concat_channels" else r for r, d in zip(res, den)]
    s = [input_size // 4, input_size // 8, input_size // 16, input_size // 32]
    w = int(block * scale)
    t = s[3]
    return {
        "new56": (s[0], s[0], fused[0]),
        "new28": (s[1], s[1], fused[1]),
        "new14": (s[2], s[2], fused[2]),
        "new7": (t, t, fused[3]),
        "convA": (t, t, w),
        "convB": (t, t, w),
        "convC": (t, t, w),
        "a_concat": (t, t, 2 * w),
        "b_concat": (t, t, w + fused[3]),
        "global_concat": (t, t, 3 * w + fused[3]),
    }


def _run_shapes(model):
    x = torch.rand(1, 3, model.input_size, model.input_size)
    with torch.no_grad():
        feats = model.eval().forward_features(x)
    return {k: (v.shape[2], v.shape[3], v.shape[1]) for k, v in feats.items()}


def test_full_scale_concat_shapes():
    model = build_fusion_model(FusionModelConfig())
    expected = _propagate(224, Fraction(1), 512)
    assert expected["global_concat"] == (7, 7, 4608)
    assert expected["new56"] == (56, 56, 512)
    assert model.layer_shapes() == expected
    assert _run_shapes(model) == expected
    assert model.head_out.out_features == 4


def test_tiny_mode_shapes(tiny_model):
    expected = _propagate(64, Fraction(1, 8), 512)
    assert [expected[k][0] for k in ("new56", "new28", "new14", "new7")] == [16, 8, 4, 2]
    assert _run_shapes(tiny_model) == expected == tiny_model.layer_shapes()


@pytest.mark.parametrize("size", [32, 64, 128])
@pytest.mark.parametrize("scale", [Fraction(1, 8), Fraction(1, 4)])
@pytest.mark.parametrize("mode", ["concat_channels", "project_add"])
def test_shape_closure(size, scale, mode):
    torch.manual_seed(0)
    model = build_fusion_model(FusionModelConfig(backbone_scale=scale, input_size=size, fusion_mode=mode))
    expected = _propagate(size, scale, 512, mode)
    assert _run_shapes(model) == expected
    p = forward(model, np.random.default_rng(0).random((2, size, size, 3), dtype=np.float32))
    assert p.shape == (2, 4)


def test_fuse_stage_concat_and_project_add():
    res, des = torch.rand(1, 2048, 7, 7), torch.rand(1, 1024, 7, 7)
    assert fuse_stage(res, des, "concat_channels").shape == (1, 3072, 7, 7)
    proj = torch.nn.Conv2d(1024, 2048, 1, bias=False)
    assert fuse_stage(res, des, FusionMode.PROJECT_ADD, proj).shape == (1, 2048, 7, 7)


def test_fuse_stage_stage1_full_scale():
    assert fuse_stage(torch.rand(1, 256, 56, 56), torch.rand(1, 256, 56, 56), "concat_channels").shape == (
        1, 512, 56, 56)


def test_fuse_stage_spatial_mismatch():
    with pytest.raises(ShapeError):
        fuse_stage(torch.rand(1, 8, 7, 7), torch.rand(1, 8, 14, 14), "concat_channels")


def test_concat_channels_equal_input_sums(tiny_model):
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        r, d = tiny_model.resnet(x), tiny_model.densenet(x)
        fused = tiny_model.fused_taps(x)
    for k in range(4):
        assert fused[k].shape[1] == r[k].shape[1] + d[k].shape[1]
        assert torch.equal(fused[k], torch.cat([r[k], d[k]], 1))


def test_project_add_with_zero_projection_is_resnet_tap():
    torch.manual_seed(0)
    model = build_fusion_model(backbone_scale=Fraction(1, 8), input_size=64, fusion_mode="project_add").eval()
    with torch.no_grad():
        for p in model.projections:
            p.weight.zero_()
        x = torch.rand(2, 3, 64, 64)
        fused = model.fused_taps(x)
        raw = model.resnet(x)
    for f, r in zip(fused, raw):
        assert torch.equal(f, r)


@pytest.mark.parametrize("spatial,reps", [(56, 3), (28, 2), (14, 1)])
def test_conv_block_repetitions(spatial, reps):
    block = build_conv_block(spatial, 16, in_channels=8)
    assert block.repetitions == reps
    with torch.no_grad():
        assert block.eval()(torch.rand(1, 8, spatial, spatial)).shape == (1, 16, 7, 7)


@pytest.mark.parametrize("spatial", [7, 21, 48, 3])
def test_conv_block_rejects_non_power_of_two_multiple(spatial):
    with pytest.raises(ConfigError):
        build_conv_block(spatial, 16)


def test_conv_block_layer_order():
    block = build_conv_block(28, 4, in_channels=2)
    kinds = [type(m).__name__ for m in block]
    assert kinds == ["Conv2d", "BatchNorm2d", "ReLU", "AvgPool2d"] * 2
    assert block.conv0.kernel_size == (3, 3) and block.conv0.padding == (1, 1)


@pytest.mark.parametrize(
    "kwargs",
    [dict(num_classes=1), dict(conv_block_channels=0), dict(head_hidden=0), dict(l2_coefficient=-1.0),
     dict(fusion_mode="sum"), dict(architecture="vgg16"), dict(classes=["a", "b"])],
)
def test_invalid_model_config(kwargs):
    with pytest.raises(ConfigError):
        FusionModelConfig(**kwargs)


def test_forward_probabilities(tiny_model, rng):
    p = forward(tiny_model, rng.random((5, 64, 64, 3)))
    assert p.shape == (5, 4)
    assert np.all((p >= 0) & (p <= 1))
    assert np.allclose(p.sum(axis=1), 1, atol=1e-6)


def test_forward_single_and_empty(tiny_model, rng):
    assert forward(tiny_model, rng.random((1, 64, 64, 3))).shape == (1, 4)
    assert forward(tiny_model, np.zeros((0, 64, 64, 3))).shape == (0, 4)


def test_forward_duplicates_give_identical_rows(tiny_model, rng):
    x = np.repeat(rng.random((1, 64, 64, 3)), 3, axis=0)
    p = forward(tiny_model, x)
    assert np.array_equal(p[0], p[1]) and np.array_equal(p[1], p[2])


def test_forward_rows_independent_of_batch_composition(tiny_model, rng):
    x = rng.random((7, 64, 64, 3))
    full = forward(tiny_model, x)
    assert np.array_equal(forward(tiny_model, x[2:5]), full[2:5])
    assert np.array_equal(forward(tiny_model, x[::-1]), full[::-1])


def test_forward_rejects_nonfinite(tiny_model):
    x = np.zeros((1, 64, 64, 3))
    x[0, 3, 4, 1] = np.nan
    with pytest.raises(InputError):
        forward(tiny_model, x)


@pytest.mark.parametrize("shape", [(1, 32, 32, 3), (1, 64, 64, 1), (64, 64, 3), (1, 3, 64, 64)])
def test_forward_rejects_wrong_shape(tiny_model, shape):
    with pytest.raises(ShapeError):
        forward(tiny_model, np.zeros(shape))


def test_save_load_round_trip_is_bit_identical(tiny_model, tmp_path, rng):
    x = rng.random((3, 64, 64, 3)).astype(np.float32)
    before = forward(tiny_model, x)
    save_model(tiny_model, tmp_path / "m")
    loaded = load_model(tmp_path / "m")
    assert loaded.config == tiny_model.config
    assert np.array_equal(forward(loaded, x), before)


def test_class_permutation_permutes_probabilities(tiny_model, rng):
    x = rng.random((4, 64, 64, 3))
    p = forward(tiny_model, x)
    perm = [2, 0, 3, 1]
    with torch.no_grad():
        tiny_model.head_out.weight.copy_(tiny_model.head_out.weight[perm].clone())
        tiny_model.head_out.bias.copy_(tiny_model.head_out.bias[perm].clone())
    np.testing.assert_allclose(forward(tiny_model, x), p[:, perm], rtol=0, atol=1e-7)


@pytest.mark.parametrize("arch", ["resnet50", "densenet121"])
def test_baseline_architectures(arch, tmp_path, rng):
    config = FusionModelConfig(backbone_scale=Fraction(1, 8), input_size=64, architecture=arch, num_classes=3)
    model = build_model(config)
    x = rng.random((2, 64, 64, 3))
    p = forward(model, x)
    assert p.shape == (2, 3)
    save_model(model, tmp_path)
    assert np.array_equal(forward(load_model(tmp_path), x), p)


def test_heatmap_layer_names_cover_features(tiny_model):
    with torch.no_grad():
        feats = tiny_model.forward_features(torch.rand(1, 3, 64, 64))
    assert tuple(feats) == HEATMAP_LAYERS
