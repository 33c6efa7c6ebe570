import numpy as np
import pytest

from oracles import cbamdrn_forward
from pe_triage import nn
from pe_triage.model import (
    CbamdrnModel,
    ModelConfig,
    WindowSetMismatch,
    backbone_forward,
    cbam_apply,
    channel_attention,
    classify,
    init_backbone,
    predict,
    predict_batch,
    residual_block,
    spatial_attention,
)
from pe_triage.nn import Tensor
from pe_triage.preprocess import WindowedImage

TINY = ModelConfig(stage_channels=(8, 8, 16, 16), cbam_reduction=4, spatial_kernel=3, input_size=32)


def _sig(z):
    return 1.0 / (1.0 + np.exp(-z))


def test_channel_attention_hand_case():
    f = Tensor(np.array([[[[1.0, -2.0], [3.0, 0.0]]]]))  # N=1, C=1
    one = Tensor(np.ones((1, 1)))
    zero = Tensor(np.zeros(1))
    gate = channel_attention(f, one, zero, one, zero).data
    # avg 0.5, max 3 -> relu passes both
    assert gate[0, 0] == pytest.approx(_sig(0.5 + 3.0))
    neg = Tensor(-np.ones((1, 1)))
    gate = channel_attention(f, neg, zero, one, zero).data
    assert gate[0, 0] == pytest.approx(0.5)  # relu kills both branches


def test_spatial_attention_hand_case():
    f = np.zeros((1, 2, 2, 2))
    f[0, 0] = [[1, 2], [3, 4]]
    f[0, 1] = [[3, 0], [1, 0]]
    w = np.array([0.5, -1.0]).reshape(1, 2, 1, 1)
    gate = spatial_attention(Tensor(f), Tensor(w), Tensor(np.array([0.25]))).data
    mean = f.mean(axis=1)
    mx = f.max(axis=1)
    np.testing.assert_allclose(gate[:, 0], _sig(0.5 * mean - mx + 0.25), rtol=1e-6)


def test_cbam_zero_weights_halves_twice(rng):
    f = rng.standard_normal((2, 8, 5, 5))
    params = {
        "c.mlp1.weight": Tensor(np.zeros((8, 2))),
        "c.mlp1.bias": Tensor(np.zeros(2)),
        "c.mlp2.weight": Tensor(np.zeros((2, 8))),
        "c.mlp2.bias": Tensor(np.zeros(8)),
        "c.spatial.weight": Tensor(np.zeros((1, 2, 3, 3))),
        "c.spatial.bias": Tensor(np.zeros(1)),
    }
    np.testing.assert_allclose(cbam_apply(Tensor(f), params, "c").data, f * 0.25, rtol=1e-6)


def test_channel_attention_shape_check():
    with pytest.raises(nn.ShapeMismatch):
        channel_attention(Tensor(np.ones((1, 4, 2, 2))), Tensor(np.ones((3, 1))), Tensor(np.zeros(1)),
                          Tensor(np.ones((1, 3))), Tensor(np.zeros(3)))


def test_residual_block_identity_when_branch_silenced(rng):
    cfg = ModelConfig(stage_channels=(8, 8, 8, 8), cbam_reduction=4)
    store = init_backbone(cfg, "w", rng, np.float64)
    # stage2 block keeps width and (dilation 1, stride 2) -> projection; stage3 is identity
    p = "w.stage3.block0"
    assert f"{p}.shortcut.conv.weight" not in store
    store[f"{p}.bn3.weight"].data[:] = 0.0
    store[f"{p}.bn3.bias"].data[:] = 0.0
    x = np.abs(rng.standard_normal((2, 8, 6, 6)))
    out = residual_block(Tensor(x), store, p, dilation=2, stride=1, training=False)
    np.testing.assert_allclose(out.data, x)


def test_strides_and_final_map():
    cfg = ModelConfig()
    assert cfg.stage_strides() == (1, 2, 1, 1)
    rng = np.random.default_rng(0)
    store = init_backbone(cfg, "v", rng)
    caps = {}
    with nn.no_grad():
        h, pooled = backbone_forward(Tensor(np.zeros((1, 1, 224, 224), np.float32)), store, cfg, "v", captures=caps)
    assert h.shape == (1, 128, 28, 28) and pooled.shape == (1, 128)
    assert caps["stem"].shape == (1, 16, 56, 56)
    assert caps["stage2"].shape[-1] == 28


def test_desk_parameter_count():
    model = CbamdrnModel(mode="DWL")
    assert 5e4 <= model.num_parameters() <= 2e5
    assert model.fusion_width == 256
    assert set(model.windows) == {"vascular", "lung"}
    assert len(CbamdrnModel(TINY, mode="TWL").windows) == 3


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(stage_channels=(16, 32), blocks_per_stage=(1, 1, 1), stage_dilations=(1, 1))
    with pytest.raises(ValueError):
        ModelConfig(stage_channels=(12, 32, 64, 128))
    with pytest.raises(ValueError):
        ModelConfig(spatial_kernel=4)
    with pytest.raises(ValueError):
        CbamdrnModel(TINY, mode="QWL")
    full = ModelConfig.full_scale()
    assert full.stage_channels[-1] == 2048 and full.blocks_per_stage == (3, 4, 6, 3)


def test_window_mismatch():
    model = CbamdrnModel(TINY, mode="DWL")
    x = np.zeros((1, 1, 32, 32), np.float32)
    with pytest.raises(WindowSetMismatch):
        model.forward([x, x, x])
    with pytest.raises(WindowSetMismatch):
        classify([WindowedImage("vascular", x[0, 0]), WindowedImage("mediastinum", x[0, 0])], model)
    named = [WindowedImage("vascular", x[0, 0]), WindowedImage("lung", x[0, 0])]
    assert classify(named, model).shape == (2,)


def test_tie_rule():
    assert predict([0.2, 0.9]) == 1
    assert predict([0.9, 0.2]) == 0
    assert predict([0.5, 0.5]) == 1
    np.testing.assert_array_equal(predict_batch(np.array([[1, 1], [2, 1], [0, 3]])), [1, 0, 1])


def test_seeded_init_and_save_load(tmp_path):
    a = CbamdrnModel(TINY, mode="DWL", seed=3)
    b = CbamdrnModel(TINY, mode="DWL", seed=3)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    x = np.random.default_rng(1).standard_normal((2, 1, 32, 32)).astype(np.float32)
    path = tmp_path / "m.ctw"
    a.save(path)
    c = CbamdrnModel.load(path, TINY, "DWL")
    with nn.no_grad():
        np.testing.assert_array_equal(a.forward([x, x]).data, c.forward([x, x]).data)
    with pytest.raises(nn.IncompatibleWeights):
        CbamdrnModel.load(path, TINY, "TWL")


def test_eval_mode_is_batch_independent(rng):
    model = CbamdrnModel(TINY, mode="VWL", seed=0)
    x = rng.standard_normal((4, 1, 32, 32)).astype(np.float32)
    with nn.no_grad():
        full = model.forward([x]).data
        single = model.forward([x[:1]]).data
    np.testing.assert_allclose(full[:1], single, rtol=1e-5, atol=1e-6)


def test_snapshot_restore():
    model = CbamdrnModel(TINY, mode="VWL")
    snap = model.snapshot()
    model.params["fusion.bias"].data += 1
    model.restore(snap)
    np.testing.assert_array_equal(model.params["fusion.bias"].data, snap["fusion.bias"])


def _perturbed(model, rng):
    """Move batch-norm and attention away from their identity-like init so the oracle sees real values."""
    for k, t in model.params.items():
        if k.endswith("running_mean") or k.endswith(".bias"):
            t.data[...] = rng.normal(0, 0.1, t.shape)
        elif k.endswith("running_var"):
            t.data[...] = rng.uniform(0.5, 2.0, t.shape)
    return model


def test_forward_matches_composed_oracle(rng):
    model = _perturbed(CbamdrnModel(TINY, mode="DWL", seed=4), rng)
    xs = [rng.uniform(-1, 1, (2, 1, 32, 32)).astype(np.float32) for _ in range(2)]
    with nn.no_grad():
        got = model.forward(xs).data
    p = {k: v.data.astype(np.float64) for k, v in model.params.items()}
    want = cbamdrn_forward(p, xs, model.windows, TINY.stage_channels, TINY.stage_dilations)
    assert np.abs(got - want).max() < 1e-3


def test_window_swap_changes_logits(rng):
    model = CbamdrnModel(TINY, mode="DWL", seed=5)
    a, b = (rng.uniform(-1, 1, (1, 1, 32, 32)).astype(np.float32) for _ in range(2))
    with nn.no_grad():
        assert not np.allclose(model.forward([a, b]).data, model.forward([b, a]).data)


def test_cbam_toggle_changes_output(rng):
    on = TINY
    off = ModelConfig(stage_channels=(8, 8, 16, 16), cbam_reduction=4, spatial_kernel=3, input_size=32, use_cbam=False)
    store = init_backbone(on, "v", rng)
    x = Tensor(rng.uniform(-1, 1, (1, 1, 32, 32)).astype(np.float32))
    with nn.no_grad():
        with_att, _ = backbone_forward(x, store, on, "v")
        without, _ = backbone_forward(x, store, off, "v")
    assert with_att.shape == without.shape
    assert not np.allclose(with_att.data, without.data)


def test_fusion_is_a_dot_product(rng):
    model = CbamdrnModel(TINY, mode="DWL", seed=6)
    xs = [rng.uniform(-1, 1, (3, 1, 32, 32)).astype(np.float32) for _ in range(2)]
    with nn.no_grad():
        feats = model.features(xs).data.astype(np.float64)
        logits = model.forward(xs).data
    w = model.params["fusion.weight"].data.astype(np.float64)
    b = model.params["fusion.bias"].data.astype(np.float64)
    for i in range(3):
        for c in range(2):
            assert logits[i, c] == pytest.approx(sum(feats[i, j] * w[j, c] for j in range(w.shape[0])) + b[c], abs=1e-4)


def test_attention_never_amplifies(rng):
    store = init_backbone(TINY, "v", rng, np.float64)
    for k, t in store.items():
        if ".cbam." in k:
            t.data[...] = rng.normal(0, 2.0, t.shape)
    f = rng.standard_normal((2, 8, 6, 6)) * 5
    out = cbam_apply(Tensor(f), store, "v.stage1.cbam").data
    assert np.all(np.abs(out) <= np.abs(f))
