import math

import numpy as np
import pytest

from mclrd.analysis import analyze_decomposed_shift
from mclrd.config import ModelConfig, TrainConfig
from mclrd.datagen import MultimodalSample
from mclrd.model import BaseModel
from mclrd.pipeline import (
    LOSS_NAMES,
    NonFiniteLoss,
    StateError,
    adapt,
    compute_losses,
    evaluate,
    lambda_at,
    per_class_accuracy,
    pretrain,
)

from .conftest import small_model, small_synth

OFF = dict(use_ldd=False, use_lrd=False, use_lac=False, use_lada=False)


@pytest.fixture(scope="module")
def split():
    return small_synth("mixed", seed=0)


@pytest.fixture(scope="module")
def base(split):
    return pretrain(split.source_train, small_model(), TrainConfig.desk_pretrain(seed=0)).model


def _adapt_cfg(**kw):
    return TrainConfig.desk_adapt(**{"epochs": 1, "lr": 5e-4, "batch_size": 8, **kw})


def _params(model):
    return {k: v.data.copy() for k, v in model.named_parameters().items()}


# pretraining ------------------------------------------------------------------


def test_pretrain_fits_separable_source():
    sep = small_synth("zero-shift", seed=1, class_sep=3.0, noise_sigma=0.3, n_source_per_class=20)
    res = pretrain(sep.source_train, small_model(), TrainConfig.desk_pretrain(seed=1))
    assert res.train_acc > 0.95
    assert res.model.frozen


def test_pretrain_is_deterministic(split):
    a = pretrain(split.source_train, small_model(), TrainConfig.desk_pretrain(seed=3))
    b = pretrain(split.source_train, small_model(), TrainConfig.desk_pretrain(seed=3))
    assert a.step_loss == b.step_loss
    for k, v in _params(a.model).items():
        np.testing.assert_array_equal(v, _params(b.model)[k])


def test_pretrain_epoch_loss_trend(split):
    res = pretrain(split.source_train, small_model(), TrainConfig.desk_pretrain(seed=0, epochs=6, lr=1e-3))
    rises = sum(b > a for a, b in zip(res.epoch_loss, res.epoch_loss[1:]))
    assert rises <= 1


def test_pretrain_empty_source():
    with pytest.raises(ValueError):
        pretrain([], small_model(), TrainConfig.desk_pretrain())


# adaptation -------------------------------------------------------------------


def test_adapt_requires_frozen_pretrained_base(split):
    with pytest.raises(StateError):
        adapt(split, None, _adapt_cfg())
    with pytest.raises(StateError):
        adapt(split, BaseModel(small_model()), _adapt_cfg())


def test_encoders_untouched_by_adaptation(split, base):
    before = {k: v.data.copy() for k, v in base.named_parameters().items()}
    res = adapt(split, base, _adapt_cfg(steps_per_epoch=50))
    assert len(res.history) == 50
    for k, v in base.named_parameters().items():
        np.testing.assert_array_equal(v.data, before[k])


def test_single_step_changes_only_trainable_groups(split, base):
    from mclrd.model import MCLRD

    fresh = _params(MCLRD(base, seed=0))
    res = adapt(split, base, _adapt_cfg(steps_per_epoch=1))
    changed = {k for k, v in _params(res.model).items() if not np.array_equal(v, fresh[k])}
    groups = {k.split(".")[0] for k in changed}
    assert groups == {"bank", "router", "cls", "disc"}


def test_adapt_bit_identical_reruns(split, base):
    a = adapt(split, base, _adapt_cfg(seed=4))
    b = adapt(split, base, _adapt_cfg(seed=4))
    for k, v in _params(a.model).items():
        np.testing.assert_array_equal(v, _params(b.model)[k])
    assert [r.total for r in a.history] == [r.total for r in b.history]


def test_report_total_is_sum_of_terms(split, base):
    res = adapt(split, base, _adapt_cfg(steps_per_epoch=5))
    for r in res.history:
        assert abs(r.total - sum(getattr(r, n) for n in LOSS_NAMES)) < 1e-9
        assert set(r.per_site) == {"l0.clip", "l0.video", "l1.clip", "l1.video"}


@pytest.mark.parametrize("off", ["ldd", "lrd", "lac", "lada"])
def test_each_ablation_runs_and_zeroes_its_term(split, base, off):
    name = {"ldd": "dd", "lrd": "rd", "lac": "ac", "lada": "ada"}[off]
    res = adapt(split, base, _adapt_cfg(steps_per_epoch=3, **{f"use_{off}": False}))
    assert all(getattr(r, name) == 0.0 for r in res.history)
    assert res.model.toggles[off] is False


def test_cls_only_adaptation_converges_on_separable_data():
    sep = small_synth("zero-shift", seed=1, class_sep=3.0, noise_sigma=0.3, n_source_per_class=20)
    b = pretrain(sep.source_train, small_model(), TrainConfig.desk_pretrain(seed=1)).model
    res = adapt(sep, b, _adapt_cfg(epochs=8, lr=2e-3, **OFF))
    first = np.mean([r.cls for r in res.history[:5]])
    last = np.mean([r.cls for r in res.history[-5:]])
    assert last < 0.5 * first


def test_first_batch_updates_banks_before_consistency(split, base):
    from mclrd.model import MCLRD

    model = MCLRD(base, seed=0)
    src = split.source_train[:3]
    tgt = [s for s in split.target_train if s.label == src[0].label][:1]
    from mclrd.datagen import stack_batch

    x_r, x_o, y, dom = stack_batch(src + tgt)
    out = model.forward(x_r, x_o)
    terms, per_site, _ = compute_losses(model, out, y, dom, model.toggles)
    # target class was seen in the same batch, so nothing is cold
    assert all(b.cold_hits == 0 for b in model.class_banks.values())
    assert terms["ac"].item() > 0


def test_nan_loss_reports_step(split, base, monkeypatch):
    import mclrd.pipeline as pl

    real = pl.compute_losses
    calls = {"n": 0}

    def poisoned(*a, **kw):
        terms, per_site, single = real(*a, **kw)
        calls["n"] += 1
        if calls["n"] == 3:
            from mclrd.diffcore import Tensor
            terms["rd"] = Tensor(float("nan"))
        return terms, per_site, single

    monkeypatch.setattr(pl, "compute_losses", poisoned)
    with pytest.raises(NonFiniteLoss) as ei:
        adapt(split, base, _adapt_cfg())
    assert ei.value.step == 2


def test_lambda_schedules():
    const = ModelConfig.desk(lambda_ada=0.5)
    assert lambda_at(const, 0.0) == lambda_at(const, 1.0) == 0.5
    ramp = ModelConfig.desk(lambda_schedule="ramp")
    assert lambda_at(ramp, 0.0) == 0.0
    assert abs(lambda_at(ramp, 1.0) - (2 / (1 + math.exp(-10)) - 1)) < 1e-15


# evaluation -------------------------------------------------------------------


class _Fixed:
    def __init__(self, preds):
        self.preds = list(preds)

    def predict(self, x_r, x_o):
        out, self.preds = self.preds[: len(x_r)], self.preds[len(x_r):]
        return np.array(out)


def _samples(labels):
    z = np.zeros((2, 3))
    return [MultimodalSample(f"e{i}", z, z, y, "target") for i, y in enumerate(labels)]


def test_evaluate_constant_predictor():
    labels = [c for c in range(5) for _ in range(4)]
    assert evaluate(_Fixed([0] * 20), _samples(labels)) == pytest.approx(0.2)


def test_evaluate_perfect_and_hand_case():
    assert evaluate(_Fixed([2, 0, 1]), _samples([2, 0, 1])) == 1.0
    assert evaluate(_Fixed([2, 1, 1]), _samples([2, 0, 1])) == pytest.approx(2 / 3)
    assert per_class_accuracy(_Fixed([2, 1, 1]), _samples([2, 0, 1]), 4) == [0.0, 1.0, 1.0, None]


def test_evaluate_empty():
    with pytest.raises(ValueError):
        evaluate(_Fixed([]), [])


# shift analysis ---------------------------------------------------------------


def test_analysis_refuses_adversarially_trained_model(split, base):
    res = adapt(split, base, _adapt_cfg(steps_per_epoch=2))
    with pytest.raises(StateError):
        analyze_decomposed_shift(res.model, split)


def test_analysis_schema(split, base):
    res = adapt(split, base, _adapt_cfg(steps_per_epoch=2, use_lada=False))
    rows = analyze_decomposed_shift(res.model, split)
    assert [r.stream for r in rows] == ["rgb-unique", "flow-unique", "shared"]
    assert all(r.mmd >= 0 and r.null_std > 0 for r in rows)
    assert rows[0].n_source == len(split.source_test)


def test_zero_shift_streams_report_no_shift():
    zs = small_synth("zero-shift", seed=2, n_source_test_per_class=20, n_target_per_class=24)
    b = pretrain(zs.source_train, small_model(), TrainConfig.desk_pretrain(seed=2)).model
    res = adapt(zs, b, _adapt_cfg(epochs=2, use_lada=False))
    for r in analyze_decomposed_shift(res.model, zs):
        assert r.mmd <= 3 * r.null_std, r
