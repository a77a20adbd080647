import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from amodalseg.shape_prior import MaskAutoencoder, build_codebook, collect_amodal_crops
from amodalseg.synthetic import generate_splits
from amodalseg.training import (
    TERMS,
    TrainConfig,
    TrainingError,
    _make_batch,
    _prepare,
    compute_instance_weights,
    compute_losses,
    load_train_config,
    read_loss_curves,
    smoothed,
    total_loss,
    train,
    warmup_ramp,
)
from amodalseg.model import AmodalModel

TINY = dict(iterations=3, roi_channels=8, head_width=8, n_priors=2, codebook_size=4, embedding_dim=4)


@pytest.fixture(scope="module")
def data():
    tr, _ = generate_splits(8, 1, seed=0)
    return tr


@pytest.fixture(scope="module")
def codebook(data):
    torch.manual_seed(0)
    return build_codebook(MaskAutoencoder(dim=4).eval(), collect_amodal_crops(data), k=4)


def _masks(iou_fraction):
    """Coarse / GT pair whose binarized IoU is exactly iou_fraction (multiples of 1/28)."""
    gt = torch.zeros(1, 28, 28)
    gt[0, :, :28] = 1
    pred = torch.zeros(1, 28, 28)
    pred[0, :, :round(28 * iou_fraction)] = 0.9
    return pred, gt


# ---------------------------------------------------------------- warm-up weights


def test_warmup_examples():
    perfect, gt = _masks(1.0)
    w0 = compute_instance_weights(0, perfect, perfect, gt, gt, 500)
    assert w0.amodal.item() == 0.0 and w0.visible.item() == 0.0
    w1 = compute_instance_weights(800, perfect, perfect, gt, gt, 500)
    assert w1.amodal.item() == 1.0 and w1.visible.item() == 1.0
    half, gt = _masks(0.5)
    w = compute_instance_weights(250, half, perfect, gt, gt, 500)
    assert w.amodal.item() == pytest.approx(0.25) and w.visible.item() == pytest.approx(0.5)


def test_warmup_ramp():
    assert warmup_ramp(0, 500) == 0.0 and warmup_ramp(250, 500) == 0.5 and warmup_ramp(5000, 500) == 1.0
    with pytest.raises(ValueError):
        warmup_ramp(-1, 500)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 28), st.lists(st.integers(0, 2000), min_size=2, max_size=6))
def test_weights_in_unit_range_and_monotone(cols, its):
    pred, gt = _masks(cols / 28)
    ws = [compute_instance_weights(i, pred, pred, gt, gt, 500).amodal.item() for i in sorted(its)]
    assert all(0.0 <= w <= 1.0 for w in ws)
    assert all(a <= b for a, b in zip(ws, ws[1:]))


# ---------------------------------------------------------------- total loss


def test_total_loss_arithmetic():
    terms = {t: torch.tensor(0.1 * (i + 1), dtype=torch.float64) for i, t in enumerate(TERMS)}
    rep = total_loss(terms)
    assert rep.total_value == pytest.approx(sum(0.1 * (i + 1) for i in range(9)), abs=1e-12)
    assert rep.total_value == pytest.approx(sum(rep.terms.values()), abs=1e-12)
    assert total_loss({t: torch.zeros(()) for t in TERMS}).total_value == 0.0


def test_only_cls_enabled():
    terms = {t: torch.tensor(float(i + 1)) for i, t in enumerate(TERMS)}
    rep = total_loss(terms, {t: t == "cls" for t in TERMS})
    assert rep.total_value == 1.0
    assert all(v == 0.0 for k, v in rep.terms.items() if k != "cls")


def test_non_finite_term_named():
    with pytest.raises(TrainingError, match="visible_fm"):
        total_loss({"cls": torch.tensor(1.0), "visible_fm": torch.tensor(float("nan"))})


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=9, max_size=9), st.lists(st.booleans(), min_size=9,
                                                                                        max_size=9))
def test_total_is_sum_of_reported_terms(values, flags):
    rep = total_loss({t: torch.tensor(v, dtype=torch.float64) for t, v in zip(TERMS, values)}, dict(zip(TERMS, flags)))
    assert rep.total_value == pytest.approx(sum(rep.terms.values()), rel=1e-12, abs=1e-12)


# ---------------------------------------------------------------- config


def test_config_validation_and_yaml(tmp_path):
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(toggles={"bogus": False})
    with pytest.raises(ValueError):
        TrainConfig(variant="sideways")
    with pytest.raises(ValueError):
        TrainConfig(amodal_mask_loss="l2")
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 0.1})
    p = tmp_path / "cfg.yaml"
    p.write_text("lr: 0.02\niterations: 10\ntoggles:\n  reclass: false\n")
    cfg = load_train_config(p)
    assert cfg.lr == 0.02 and cfg.toggles["reclass"] is False and cfg.toggles["cls"] is True
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_smoothed_window():
    v = np.arange(10, dtype=float)
    s = smoothed(v, 3)
    assert s[0] == 0.0 and s[1] == 0.5 and s[5] == 4.0


# ---------------------------------------------------------------- one step


def _batch(data, cfg, seed=0):
    torch.manual_seed(seed)
    model = AmodalModel(cfg.model_config(len(data.categories)))
    batch = _make_batch(model, _prepare(data), [0, 1], cfg, np.random.default_rng(seed))
    return model, batch


def test_reclass_toggle_zeroes_its_head_gradients(data, codebook):
    cfg = TrainConfig(**TINY, toggles={"reclass": False})
    model, batch = _batch(data, cfg)
    terms, _ = compute_losses(model, batch, cfg, 1000, codebook)
    assert "reclass" not in terms
    total_loss(terms, cfg.toggles).total.backward()
    for p in model.reclass_head.parameters():
        assert p.grad is None or not p.grad.any()
    assert any(p.grad is not None and p.grad.any() for p in model.visible_head.parameters())


def test_refined_terms_silent_at_iteration_zero(data, codebook):
    cfg = TrainConfig(**TINY)
    model, batch = _batch(data, cfg)
    terms, w = compute_losses(model, batch, cfg, 0, codebook)
    assert not w.amodal.any() and not w.visible.any()
    for t in ("amodal_refined", "visible_refined", "reclass", "amodal_fm", "visible_fm"):
        assert terms[t].item() == 0.0
    assert set(terms) == set(TERMS)


def test_ce2_switch_gives_same_loss(data, codebook):
    a = TrainConfig(**TINY)
    b = TrainConfig(**TINY, amodal_mask_loss="ce2")
    model, batch = _batch(data, a)
    ta, _ = compute_losses(model, batch, a, 1000, codebook)
    tb, _ = compute_losses(model, batch, b, 1000, codebook)
    assert ta["amodal_refined"].item() == pytest.approx(tb["amodal_refined"].item(), rel=1e-6)


# ---------------------------------------------------------------- training loop


def _params(model):
    return [p.detach().clone() for p in model.parameters()]


def test_training_deterministic_and_writes_files(tmp_path, data, codebook):
    cfg = TrainConfig(**TINY)
    a = train(data, cfg, codebook, out_dir=tmp_path / "a")
    b = train(data, cfg, codebook, out_dir=tmp_path / "b")
    assert all(torch.equal(p, q) for p, q in zip(_params(a.model), _params(b.model)))
    # archives differ only in zip timestamps and the recorded wall time
    ma, ea = AmodalModel.load(tmp_path / "a" / "checkpoint.npz")
    mb, eb = AmodalModel.load(tmp_path / "b" / "checkpoint.npz")
    assert ea["train_config"] == eb["train_config"]
    sa, sb = ma.state_dict(), mb.state_dict()
    assert sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)
    curves = read_loss_curves(tmp_path / "a" / "loss_curves.csv")
    assert set(curves) == {*TERMS, "total"}
    assert all(len(v) == cfg.iterations for v in curves.values())
    np.testing.assert_allclose(curves["total"], sum(curves[t] for t in TERMS), rtol=1e-6)


def test_zero_rates_leave_parameters_bit_identical(data, codebook):
    cfg = TrainConfig(**TINY, lr=0.0, weight_decay=0.0)
    torch.manual_seed(cfg.seed)
    init = _params(AmodalModel(cfg.model_config(len(data.categories))))
    trained = _params(train(data, cfg, codebook).model)
    assert all(torch.equal(p, q) for p, q in zip(init, trained))


def test_codebook_required_and_matching(data, codebook):
    with pytest.raises(TrainingError, match="codebook"):
        train(data, TrainConfig(**TINY))
    big_k = dict(TINY, n_priors=8)
    with pytest.raises(TrainingError, match="fewer than"):
        train(data, TrainConfig(**big_k), codebook)
    two = build_codebook(codebook.autoencoder, {1: collect_amodal_crops(data)[1]}, k=4)
    with pytest.raises(TrainingError, match="categories"):
        train(data, TrainConfig(**TINY), two)


def test_no_prior_config_trains_without_codebook(data):
    res = train(data, TrainConfig(**TINY, shape_prior_refine=False))
    assert np.isfinite(res.term_curve("total")).all()
