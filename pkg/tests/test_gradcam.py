import numpy as np
import pytest
from PIL import Image

from pe_triage import nn
from pe_triage.gradcam import (
    GradCamMap,
    cam_from,
    dump_map,
    grad_cam,
    overlay,
    read_map,
    save_png,
)
from pe_triage.model import CbamdrnModel, ModelConfig, UnknownLayer
from pe_triage.nn import Tensor, ops
from pe_triage.preprocess import WindowedImage

TINY = ModelConfig(stage_channels=(8, 8, 16, 16), cbam_reduction=4, spatial_kernel=3, input_size=32)


def test_toy_closed_form():
    # two 2×2 feature maps, head y = W^T avgpool(A)
    a = np.array([[[1.0, 2.0], [0.0, 4.0]], [[3.0, -1.0], [2.0, 0.0]]])
    w = np.array([[0.8, -0.2], [-0.4, 0.6]])
    act = Tensor(a[None], requires_grad=True)
    y = ops.linear(ops.global_pool(act, "avg"), Tensor(w), None)
    seed = np.zeros((1, 2))
    seed[0, 0] = 1.0
    y.backward(seed)
    # dy0/dA_k = w[k, 0] / 4 everywhere -> alpha = (0.2, -0.1)
    np.testing.assert_allclose(act.grad[0, 0], np.full((2, 2), 0.2))
    np.testing.assert_allclose(act.grad[0, 1], np.full((2, 2), -0.1))
    raw = np.maximum(0.2 * a[0] - 0.1 * a[1], 0.0)  # [[-0.1, 0.5], [-0.2, 0.8]] -> relu
    np.testing.assert_allclose(raw, [[0.0, 0.5], [0.0, 0.8]], atol=1e-12)
    np.testing.assert_allclose(cam_from(a, act.grad[0]), raw / 0.8, atol=1e-6)


def test_cam_all_zero_stays_zero():
    a = np.ones((3, 4, 4))
    assert not cam_from(a, np.zeros_like(a)).any()
    assert not cam_from(a, -np.ones_like(a)).any()


def _inputs(seed=0):
    rng = np.random.default_rng(seed)
    return [rng.uniform(-1, 1, (32, 32)).astype(np.float32) for _ in range(2)]


def test_grad_cam_maps_properties():
    model = CbamdrnModel(TINY, mode="DWL", seed=1)
    before = {k: v.grad for k, v in model.params.items()}
    for seed in range(5):
        for cls in (0, 1):
            maps = grad_cam(model, _inputs(seed), cls)
            assert [m.window_name for m in maps] == ["vascular", "lung"]
            for m in maps:
                assert m.layer == "stage4" and m.values.shape == (32, 32)
                assert m.values.min() >= 0
                assert m.values.max() == pytest.approx(1.0) or not m.values.any()
    assert all(model.params[k].grad is before[k] for k in before)


def test_grad_cam_layers_and_errors():
    model = CbamdrnModel(TINY, mode="DWL", seed=1)
    assert grad_cam(model, _inputs(), 1, "stem")[0].layer == "stem"
    with pytest.raises(UnknownLayer):
        grad_cam(model, _inputs(), 1, "stage9")
    with pytest.raises(ValueError):
        grad_cam(model, _inputs(), 2)


def test_grad_cam_zero_head_gives_zero_map():
    model = CbamdrnModel(TINY, mode="DWL", seed=1)
    model.params["fusion.weight"].data[:] = 0.0
    for m in grad_cam(model, _inputs(), 1):
        assert not m.values.any()


def test_overlay_formula(rng):
    base = rng.uniform(-1, 1, (6, 5)).astype(np.float32)
    heat = rng.uniform(0, 1, (6, 5)).astype(np.float32)
    out = overlay(GradCamMap("lung", "stage4", heat), WindowedImage("lung", base))
    for y in range(6):
        for x in range(5):
            g = (float(base[y, x]) + 1) / 2
            assert out[y, x, 0] == pytest.approx(min(g + float(heat[y, x]), 1.0), abs=1e-6)
            assert out[y, x, 1] == pytest.approx(g, abs=1e-6)
            assert out[y, x, 2] == pytest.approx(g, abs=1e-6)


def test_overlay_extremes():
    base = np.linspace(-1, 1, 12, dtype=np.float32).reshape(3, 4)
    gray = overlay(GradCamMap("v", "s", np.zeros((3, 4), np.float32)), base)
    assert np.allclose(gray[..., 0], gray[..., 1]) and np.allclose(gray[..., 1], gray[..., 2])
    red = overlay(GradCamMap("v", "s", np.ones((3, 4), np.float32)), base)
    assert np.all(red[..., 0] == 1.0)
    with pytest.raises(ValueError):
        overlay(GradCamMap("v", "s", np.ones((2, 2), np.float32)), base)


def test_png_and_map_dump(tmp_path):
    rgb = overlay(GradCamMap("v", "s", np.eye(4, dtype=np.float32)), np.zeros((4, 4), np.float32))
    path = save_png(rgb, tmp_path / "o.png")
    img = np.asarray(Image.open(path))
    assert img.shape == (4, 4, 3) and img.dtype == np.uint8
    assert tuple(img[0, 0]) == (255, 128, 128)
    cam = GradCamMap("v", "s", np.arange(6, dtype=np.float32).reshape(2, 3) / 5)
    dump_map(cam, tmp_path / "m.cam")
    assert (tmp_path / "m.cam").read_bytes().startswith(b"3 2\n")
    np.testing.assert_array_equal(read_map(tmp_path / "m.cam").values, cam.values)


def test_center_of_mass():
    v = np.zeros((5, 5), np.float32)
    v[1, 3] = 1.0
    v[3, 3] = 1.0
    assert GradCamMap("v", "s", v).center_of_mass == (3.0, 2.0)
    assert GradCamMap("v", "s", np.zeros((2, 2), np.float32)).center_of_mass is None


def test_no_grad_context_is_respected():
    model = CbamdrnModel(TINY, mode="DWL", seed=1)
    with nn.no_grad():
        with pytest.raises(nn.GraphNotBuilt):
            grad_cam(model, _inputs(), 1)
