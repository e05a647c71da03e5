import json

import numpy as np
import pytest
from PIL import Image

from tbnet import functional as F
from tbnet.explain import (OVERLAY_ALPHA, ProbeSpec, dump_drop_map, explain, load_drop_map, overlay_rgb,
                           patch_origins, render_overlay, threshold_mask)
from tbnet.model import NetworkConfig, build_network
from tbnet.tensor import Tensor

from conftest import TINY
from explain_cases import WindowMeanModel, iou, window_image, window_mask


@pytest.fixture(scope="module")
def window_result():
    model = WindowMeanModel()
    return model, explain(model, window_image())


def test_window_localization(window_result):
    _, res = window_result
    assert res.predicted_class == 1
    assert iou(res.mask, window_mask()) >= 0.5
    assert res.mask[window_mask()].all()


def test_forward_pass_count(window_result):
    model, _ = window_result
    positions = ((224 - 16) // 8 + 1) ** 2
    assert positions == 729
    assert model.images == positions + 1


def test_mask_is_threshold_of_drop_map(window_result):
    _, res = window_result
    assert np.array_equal(res.mask, res.drop_map >= 0.5 * res.drop_map.max())
    assert res.drop_map.shape == (224, 224) and res.drop_map.dtype == np.float32


def test_threshold_mask_empty_when_no_drop():
    assert not threshold_mask(np.zeros((4, 4)), 0.5).any()
    assert not threshold_mask(-np.ones((4, 4)), 0.5).any()


def test_deterministic():
    img = window_image(seed=3)
    a, b = explain(WindowMeanModel(), img), explain(WindowMeanModel(), img)
    assert a.drop_map.tobytes() == b.drop_map.tobytes()


def test_constant_model_gives_empty_mask(rng):
    net = build_network(NetworkConfig.from_dict(dict(TINY, input_size=[64, 64])))
    net.classifier.weight.data[...] = 0.0
    net.classifier.bias.data[...] = [0.2, -0.1]
    res = explain(net, rng.uniform(0, 1, (64, 64)))
    assert (res.drop_map == 0).all()
    assert not res.mask.any()


def test_whole_image_occlusion_two_pass_oracle():
    model = WindowMeanModel()
    img = window_image(seed=1)
    res = explain(model, img, ProbeSpec(patch_size=224, stride=224))
    base = model(img[None, None])[0, 1]
    filled = np.full_like(img, img.mean(dtype=np.float64))
    drop = base - model(filled[None, None])[0, 1]
    np.testing.assert_allclose(res.drop_map, drop, rtol=1e-6)


def test_mask_invariant_to_logit_shift(rng):
    net = build_network(NetworkConfig.from_dict(dict(TINY, input_size=[64, 64])), seed=1)
    img = rng.uniform(0, 1, (64, 64)).astype(np.float32)

    def shifted(c):
        return lambda x: F.softmax(net.logits(x) + Tensor(np.float32(c))).data

    a, b = explain(shifted(0.0), img), explain(shifted(3.0), img)
    assert np.array_equal(a.mask, b.mask)
    np.testing.assert_allclose(a.drop_map, b.drop_map, atol=1e-6)


@pytest.mark.parametrize("size,patch,stride,expect", [
    (224, 16, 8, list(range(0, 209, 8))),
    (20, 16, 8, [0, 4]),
    (10, 16, 8, [0]),
])
def test_patch_origins(size, patch, stride, expect):
    assert patch_origins(size, patch, stride) == expect


def test_probe_spec_rejects_gaps():
    with pytest.raises(ValueError):
        ProbeSpec(patch_size=8, stride=16)


# -- overlay ------------------------------------------------------------------------
def _gray(rng, size=(20, 30)):
    return rng.uniform(0, 1, size).astype(np.float32)


def test_empty_mask_overlay_is_grayscale(tmp_path, rng):
    img = _gray(rng)
    render_overlay(img, np.zeros(img.shape, bool), tmp_path / "o.png")
    out = np.asarray(Image.open(tmp_path / "o.png"))
    gray = np.rint(img.astype(np.float64) * 255).astype(np.uint8)
    for c in range(3):
        assert np.array_equal(out[..., c], gray)


def test_full_mask_tints_every_pixel(tmp_path, rng):
    img = _gray(rng)
    render_overlay(img, np.ones(img.shape, bool), tmp_path / "o.png")
    out = np.asarray(Image.open(tmp_path / "o.png")).astype(int)
    assert (out[..., 0] > out[..., 1]).all()


def test_overlay_round_trip_within_one_level(tmp_path, rng):
    img = _gray(rng)
    mask = rng.random(img.shape) < 0.4
    render_overlay(img, mask, tmp_path / "o.png")
    out = np.asarray(Image.open(tmp_path / "o.png")).astype(np.float64)
    g = img.astype(np.float64) * 255
    expect = np.repeat(g[..., None], 3, axis=2)
    expect[mask] = (1 - OVERLAY_ALPHA) * expect[mask] + OVERLAY_ALPHA * np.array([255.0, 0.0, 0.0])
    assert np.abs(out - expect).max() <= 1.0
    assert np.array_equal(overlay_rgb(img, mask), out.astype(np.uint8))


def test_unwritable_path(tmp_path, rng):
    with pytest.raises(OSError):
        render_overlay(_gray(rng), np.zeros((20, 30), bool), tmp_path / "missing" / "o.png")


def test_drop_map_dump(tmp_path, window_result):
    _, res = window_result
    raw, side = dump_drop_map(res, tmp_path / "drop")
    assert raw.stat().st_size == 224 * 224 * 4
    assert json.loads(side.read_text()) == {"width": 224, "height": 224, "patch": 16, "stride": 8}
    assert np.array_equal(load_drop_map(tmp_path / "drop"), res.drop_map)
