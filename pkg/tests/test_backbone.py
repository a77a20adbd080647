import math

import numpy as np
import pytest
import torch

from amodalseg.backbone import (
    Backbone,
    BackboneConfig,
    BoxHead,
    MaskHead,
    classification_loss,
    coarse_forward,
    crop_masks,
    decode_boxes,
    encode_boxes,
    extract_roi_features,
    mask_bce,
    pad_prior_channels,
    paste_mask,
)
from amodalseg.types import BoundingBox


@pytest.fixture
def heads():
    torch.manual_seed(0)
    return BoxHead(64, 3), MaskHead(64 + 16), MaskHead(64)


@pytest.fixture
def image(rng):
    return rng.integers(0, 255, size=(64, 64, 3), dtype=np.uint8)


def test_roi_features_shape_and_determinism(image):
    torch.manual_seed(0)
    bb = Backbone(BackboneConfig())
    feats = extract_roi_features(bb, image, [BoundingBox(4, 4, 30, 20), BoundingBox(4, 4, 30, 20)])
    assert [tuple(f.data.shape) for f in feats] == [(64, 14, 14)] * 2
    assert torch.equal(feats[0].data, feats[1].data)


def test_degenerate_box_skipped_with_warning(image):
    bb = Backbone(BackboneConfig())
    with pytest.warns(UserWarning, match="degenerate"):
        feats = extract_roi_features(bb, image, [BoundingBox(70, 70, 90, 90), BoundingBox(0, 0, 10, 10)])
    assert len(feats) == 1
    assert feats[0].source_box == BoundingBox(0, 0, 10, 10)


def test_backbone_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(roi_channels=4)
    with pytest.raises(ValueError):
        BackboneConfig(widths=(8, 8))


def test_coarse_forward_shapes_and_range(heads):
    box, amodal, visible = heads
    out = coarse_forward(box, amodal, visible, torch.randn(5, 64, 14, 14))
    assert out.class_logits.shape == (5, 4) and out.box_deltas.shape == (5, 4)
    assert out.coarse_amodal.shape == (5, 28, 28) == out.coarse_visible.shape
    assert len(out.amodal_acts) == len(out.visible_acts) == MaskHead.n_layers
    for m in (out.coarse_amodal, out.coarse_visible):
        assert m.min() >= 0 and m.max() <= 1


def test_zero_input_gives_logistic_of_bias(heads):
    box, amodal, visible = heads
    with torch.no_grad():
        visible.predictor.bias.fill_(0.7)
        amodal.predictor.bias.fill_(-1.3)
        out = coarse_forward(box, amodal, visible, torch.zeros(2, 64, 14, 14))
    # conv biases start at zero, so every hidden activation is zero
    assert torch.allclose(out.coarse_visible, torch.sigmoid(torch.tensor(0.7)))
    assert torch.allclose(out.coarse_amodal, torch.sigmoid(torch.tensor(-1.3)))


def test_coarse_forward_deterministic(heads):
    f = torch.randn(3, 64, 14, 14)
    a = coarse_forward(*heads, f)
    b = coarse_forward(*heads, f)
    assert torch.equal(a.amodal_logits, b.amodal_logits) and torch.equal(a.class_logits, b.class_logits)


def test_independently_initialized_heads_differ():
    torch.manual_seed(1)
    fa, fv = MaskHead(64), MaskHead(64)
    f = torch.randn(2, 64, 14, 14)
    assert not torch.equal(fa(f), fv(f))
    assert all(p is not q for p, q in zip(fa.parameters(), fv.parameters()))


def test_pad_prior_channels():
    f = torch.randn(2, 5, 3, 3)
    p = pad_prior_channels(f, 4)
    assert p.shape == (2, 9, 3, 3)
    assert torch.equal(p[:, :5], f) and not p[:, 5:].any()
    assert pad_prior_channels(f, 0) is f


# ---------------------------------------------------------------- losses


def test_bce_uniform_half_is_ln2():
    gt = (torch.rand(3, 28, 28) > 0.5).double()
    assert mask_bce(torch.zeros(3, 28, 28, dtype=torch.float64), gt).item() == pytest.approx(math.log(2), abs=1e-12)


@pytest.mark.parametrize("eps", [1e-2, 1e-4, 1e-6])
def test_bce_near_perfect_prediction(eps):
    gt = (torch.rand(2, 28, 28) > 0.5).double()
    p = gt * (1 - eps) + (1 - gt) * eps
    loss = mask_bce(torch.logit(p), gt).item()
    assert loss == pytest.approx(-math.log(1 - eps), rel=1e-6)


def test_weighted_bce_scales_per_instance():
    logits = torch.randn(2, 4, 4, dtype=torch.float64)
    gt = (torch.rand(2, 4, 4) > 0.5).double()
    full = mask_bce(logits, gt)
    first = mask_bce(logits[:1], gt[:1])
    assert mask_bce(logits, gt, torch.tensor([1.0, 0.0], dtype=torch.float64)).item() == pytest.approx(
        first.item() / 2, abs=1e-12)
    assert mask_bce(logits, gt, torch.ones(2, dtype=torch.float64)).item() == pytest.approx(full.item(), abs=1e-12)


def test_classification_loss_confident_truth():
    logits = torch.full((3, 4), -30.0)
    labels = torch.tensor([0, 2, 3])
    logits[torch.arange(3), labels] = 30.0
    assert classification_loss(logits, labels).item() < 1e-12


# ---------------------------------------------------------------- box geometry


def test_box_encode_decode_round_trip():
    g = torch.Generator().manual_seed(0)
    xy = torch.rand(20, 2, generator=g, dtype=torch.float64) * 40
    wh = torch.rand(20, 2, generator=g, dtype=torch.float64) * 20 + 2
    props = torch.cat([xy, xy + wh], dim=1)
    xy2 = torch.rand(20, 2, generator=g, dtype=torch.float64) * 40
    wh2 = torch.rand(20, 2, generator=g, dtype=torch.float64) * 20 + 2
    targets = torch.cat([xy2, xy2 + wh2], dim=1)
    assert torch.allclose(decode_boxes(props, encode_boxes(props, targets)), targets, atol=1e-9)
    assert torch.allclose(encode_boxes(props, props), torch.zeros(20, 4, dtype=torch.float64))


def test_paste_full_mask_fills_box():
    m = paste_mask(np.ones((28, 28)), BoundingBox(8, 4, 24, 20), (32, 32))
    assert m[4:20, 8:24].min() > 0.99
    assert m[:4].max() == 0 and m[:, :8].max() == 0 and m[20:].max() == 0


def test_paste_then_crop_recovers_box_mask():
    rng = np.random.default_rng(3)
    box = BoundingBox(10, 6, 38, 34)
    small = np.kron((rng.random((7, 7)) > 0.5).astype(float), np.ones((4, 4)))
    full = paste_mask(small, box, (48, 48)) >= 0.5
    back = crop_masks(torch.from_numpy(full[None].astype(np.float64)),
                      torch.tensor([[10.0, 6.0, 38.0, 34.0]], dtype=torch.float64))[0].numpy()
    assert (back == small).mean() > 0.97
