import numpy as np
import pytest

from adnet import model as M
from adnet import tensor as T
from adnet.model import (
    ADNet,
    ModelConfig,
    adnet_forward,
    attention_module,
    count_parameters,
    drdb_forward,
    export_attention_heatmap,
    init_weights,
    parameter_shapes,
    receptive_field_radius,
)


def conv_params(cin, cout, k=3):
    return cout * cin * k * k + cout


def oracle_count(variant, c=64, drdbs=3, growth=32, levels=3, layers=3):
    """Closed-form parameter count written from the architecture description."""
    n = 2 * conv_params(3, c) if variant == "full" else conv_params(6, c)
    if variant in ("baseline", "full"):
        n += 2 * (conv_params(2 * c, 2 * c) + conv_params(2 * c, c))
    if variant != "baseline":
        lv = 1 if variant == "deform_single" else levels
        n += (lv - 1) * 2 * conv_params(c, c)
        dcn = conv_params(c, 27) + conv_params(c, c)
        n += conv_params(2 * c, c) + conv_params(c, c) + dcn
        n += (lv - 1) * (2 * conv_params(2 * c, c) + conv_params(c, c) + dcn + conv_params(2 * c, c))
        if variant != "deform_single":
            n += conv_params(2 * c, c) + conv_params(c, c) + dcn
    n += conv_params((6 if variant == "full" else 3) * c, c)
    block = sum(conv_params(c + j * growth, growth) for j in range(layers)) + conv_params(c + layers * growth, c, 1)
    n += drdbs * block
    n += conv_params(drdbs * c, c, 1) + conv_params(c, c) + conv_params(c, 3)
    return n


CONFIGS = [
    ("full", 64, 3, 32, 3),
    ("full", 16, 1, 16, 3),
    ("full", 8, 2, 8, 2),
    ("baseline", 64, 3, 32, 3),
    ("deform_single", 32, 2, 16, 3),
    ("pcd_only", 16, 1, 8, 4),
    ("pcd_only", 64, 3, 32, 1),
]


@pytest.mark.parametrize("variant,c,d,g,lv", CONFIGS)
def test_parameter_count_oracle(variant, c, d, g, lv):
    cfg = ModelConfig(variant=variant, base_channels=c, drdb_count=d, drdb_growth=g, pyramid_levels=lv)
    assert count_parameters(cfg) == oracle_count(variant, c, d, g, lv)
    assert init_weights(cfg).num_parameters() == count_parameters(cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(variant="other")
    with pytest.raises(ValueError):
        ModelConfig(reference_index=0)
    with pytest.raises(ValueError):
        ModelConfig(pyramid_levels=0)
    assert ModelConfig().size_multiple == 4
    assert ModelConfig(variant="baseline").size_multiple == 1


def _inputs(rng, b=1, h=16, w=16, dtype=np.float64):
    x = rng.random((b, 18, h, w)).astype(dtype)
    return M.split_inputs(x)


def test_attention_channel_trace(monkeypatch):
    cfg = ModelConfig()
    w = init_weights(cfg, dtype=np.float64)
    trace = []
    real = T.conv2d

    def spy(x, weight, *a, **k):
        trace.append((x.shape[1], weight.shape[0]))
        return real(x, weight, *a, **k)

    monkeypatch.setattr(T, "conv2d", spy)
    rng = np.random.default_rng(0)
    f1, f2 = (T.Tensor(rng.standard_normal((1, 64, 6, 6))) for _ in range(2))
    amap = attention_module(f1, f2, w, "att1")
    assert trace == [(128, 128), (128, 64)]
    assert amap.shape == (1, 64, 6, 6)
    assert np.all((amap.data > 0) & (amap.data < 1))


def test_attention_zero_weights_half():
    cfg = ModelConfig(base_channels=8)
    w = init_weights(cfg, zero=("att1.",), dtype=np.float64)
    f = T.Tensor(np.random.default_rng(1).standard_normal((1, 8, 5, 5)))
    np.testing.assert_array_equal(attention_module(f, f, w, "att1").data, 0.5)
    with pytest.raises(ValueError):
        attention_module(f, T.Tensor(np.zeros((1, 8, 5, 4))), w, "att1")


def test_apply_attention_extremes():
    f = T.Tensor(np.random.default_rng(2).standard_normal((1, 4, 3, 3)))
    np.testing.assert_array_equal(M.apply_attention(f, T.Tensor(np.ones(f.shape))).data, f.data)
    np.testing.assert_array_equal(M.apply_attention(f, T.Tensor(np.zeros(f.shape))).data, 0.0)


def test_drdb_channel_trace_and_identity():
    cfg = ModelConfig()
    shapes = parameter_shapes(cfg)
    assert [shapes[f"fusion.drdb0.dense{j}.weight"][1] for j in range(3)] == [64, 96, 128]
    assert shapes["fusion.drdb0.fuse.weight"] == (64, 160, 1, 1)
    w = init_weights(cfg, zero=("drdb0.fuse",), dtype=np.float64)
    x = T.Tensor(np.random.default_rng(3).standard_normal((1, 64, 6, 6)), requires_grad=True)
    out = drdb_forward(x, w, "fusion.drdb0", 3, 2)
    np.testing.assert_array_equal(out.data, x.data)
    g = np.random.default_rng(4).standard_normal(x.shape)
    T.backward(T.sum(T.mul(out, T.Tensor(g))), wrt=[x])
    np.testing.assert_array_equal(x.grad, g)


def test_full_fusion_input_width():
    assert parameter_shapes(ModelConfig())["fusion.conv_in.weight"] == (64, 384, 3, 3)


def test_pyramid_shapes():
    cfg = ModelConfig(base_channels=8)
    w = init_weights(cfg, dtype=np.float64)
    feat = T.Tensor(np.random.default_rng(5).standard_normal((1, 8, 32, 32)))
    pyr = M.feature_pyramid(feat, w, 3)
    assert [p.shape[2:] for p in pyr] == [(32, 32), (16, 16), (8, 8)]
    out = M.pcd_align(pyr, pyr, w, 3)
    assert out.shape == (1, 8, 32, 32)


@pytest.mark.parametrize("variant", M.VARIANTS)
def test_variants_share_io(variant):
    cfg = ModelConfig(variant=variant, base_channels=8, drdb_count=1, drdb_growth=8)
    ldr, hdr = _inputs(np.random.default_rng(6), b=2)
    out = adnet_forward(ldr, hdr, cfg, init_weights(cfg, seed=1, dtype=np.float64))
    assert out.shape == (2, 3, 16, 16)
    assert np.all((out.data > 0) & (out.data < 1))


def test_divisibility_error():
    cfg = ModelConfig(base_channels=4, drdb_count=1, drdb_growth=4)
    ldr, hdr = _inputs(np.random.default_rng(7), h=18, w=16)
    with pytest.raises(ValueError, match="divisible"):
        adnet_forward(ldr, hdr, cfg, init_weights(cfg))


def _twin_dcn(w, prefix, x, offset_feat):
    # plain conv with the weight halved: what a zero-offset dcn with sigmoid(0) masks computes
    return T.conv2d(x, T.scale(w[f"{prefix}.weight"], 0.5), w[f"{prefix}.bias"], padding=1)


@pytest.mark.parametrize("variant", ["full", "pcd_only", "deform_single"])
def test_zero_offsets_match_plain_conv_twin(variant, monkeypatch):
    cfg = ModelConfig(variant=variant, base_channels=8, drdb_count=1, drdb_growth=8)
    w = init_weights(cfg, seed=2, dtype=np.float64, zero=(".fuse.",))
    ldr, hdr = _inputs(np.random.default_rng(8))
    out = adnet_forward(ldr, hdr, cfg, w).data
    monkeypatch.setattr(M, "dcn_pack", _twin_dcn)
    twin = adnet_forward(ldr, hdr, cfg, w).data
    assert np.abs(out - twin).max() < 1e-6


def test_single_scale_alignment_is_one_level_pcd():
    cfg = ModelConfig(variant="deform_single", base_channels=6)
    w = init_weights(cfg, seed=3, dtype=np.float64)
    rng = np.random.default_rng(9)
    for k in w:
        if "offset_mask" in k:
            w[k].data[...] = rng.normal(0, 0.1, w[k].shape)
    a, b = (T.Tensor(rng.standard_normal((1, 6, 8, 8))) for _ in range(2))
    single = M.deform_align_single(a, b, w).data
    assert single.shape == (1, 6, 8, 8)
    np.testing.assert_array_equal(single, M.pcd_align([a], [b], w, levels=1, cascade=False).data)


def test_reference_feature_bypasses_gating(monkeypatch):
    cfg = ModelConfig(base_channels=8, drdb_count=1, drdb_growth=8)
    w = init_weights(cfg, seed=4, dtype=np.float64)
    ldr, hdr = _inputs(np.random.default_rng(10))
    captured = {}

    def spy(feats, ref_feat, w_, cfg_):
        captured["feats"] = feats
        return T.sigmoid(T.channel_slice(ref_feat, 0, 3))

    monkeypatch.setattr(M, "fusion", spy)
    adnet_forward(ldr, hdr, cfg, w)
    expected = M._lrelu(M._conv(w, "ldr_feat", ldr[1])).data
    feats = captured["feats"]
    assert len(feats) == 6
    np.testing.assert_array_equal(feats[1].data, expected)


def test_heatmaps():
    cfg = ModelConfig(base_channels=8, drdb_count=1, drdb_growth=8)
    net = ADNet(cfg, seed=5)
    x = np.random.default_rng(11).random((1, 18, 16, 16)).astype(np.float32)
    maps = net.attention_maps(x)
    assert len(maps) == 2
    assert all(m.shape == (1, 16, 16) and m.min() >= 0 and m.max() <= 1 for m in maps)
    const = [T.Tensor(np.full((1, 8, 4, 4), 0.5))] * 2
    np.testing.assert_array_equal(export_attention_heatmap(const)[0], 0.5)
    with pytest.raises(ValueError):
        ADNet(ModelConfig(variant="pcd_only", base_channels=4, drdb_count=1, drdb_growth=4)).attention_maps(x)


def test_forward_deterministic():
    cfg = ModelConfig(base_channels=8, drdb_count=1, drdb_growth=8)
    x = np.random.default_rng(12).random((1, 18, 16, 16)).astype(np.float32)
    a = ADNet(cfg, seed=6).predict(x)
    b = ADNet(cfg, seed=6).predict(x.copy())
    assert a.tobytes() == b.tobytes()


def _perturbation_reach(cfg, seed, size=64):
    net = ADNet(cfg, init_weights(cfg, seed=seed, dtype=np.float64))
    rng = np.random.default_rng(seed)
    for k, t in net.weights.items():
        if "offset_mask" in k:
            t.data[...] = rng.normal(0, 1e-3, t.shape)
    x = rng.random((1, 18, size, size))
    base = net.predict(x)
    c = size // 2
    x[:, :, c, c] += 1.0
    changed = np.abs(net.predict(x) - base).max(axis=(0, 1)) > 0
    ys, xs = np.nonzero(changed)
    return max(np.abs(ys - c).max(), np.abs(xs - c).max())


@pytest.mark.parametrize("variant,levels", [("baseline", 3), ("deform_single", 3), ("pcd_only", 2), ("full", 3)])
def test_receptive_field_bounds_perturbation(variant, levels):
    cfg = ModelConfig(variant=variant, base_channels=4, drdb_count=1, drdb_growth=4, pyramid_levels=levels)
    reach = _perturbation_reach(cfg, seed=13, size=112)
    radius = receptive_field_radius(cfg, offset_margin=1.0)
    assert reach <= radius
    assert reach >= radius - 8  # the structural bound is not wildly loose


def test_weights_layout_checked():
    cfg = ModelConfig(base_channels=4, drdb_count=1, drdb_growth=4)
    w = init_weights(ModelConfig(base_channels=8, drdb_count=1, drdb_growth=4))
    with pytest.raises(ValueError):
        ADNet(cfg, w)
