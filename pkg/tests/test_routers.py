import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mclrd import diffcore as dc
from mclrd.decomposers import DecomposerBank, decompose_all
from mclrd.diffcore import DimensionError, Tensor
from mclrd.routers import (
    ClassWeightBank,
    RouterWeights,
    SubRouterParams,
    activation_consistency_loss,
    merge,
    merge_shared,
    merge_unique,
    route,
    router_decorrelation_loss,
    update_class_bank,
)


def _rw(*vecs):
    return RouterWeights(*(Tensor(np.asarray(v, dtype=float)) for v in vecs))


def _router(d=4, N=3, seed=0, std=0.7):
    return SubRouterParams(d, N, np.random.default_rng(seed), init_std=std)


def _np_softmax(v):
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# route ----------------------------------------------------------------------


def test_zero_router_is_uniform(rng):
    p = _router()
    for t in p.params.values():
        t.data = np.zeros_like(t.data)
    w = route(Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=(5, 4))), p)
    for v in (w.w_u_r, w.w_u_o, w.w_s):
        np.testing.assert_array_equal(v.data, np.full(3, 1 / 3))


def test_route_is_clip_order_invariant(rng):
    p = _router()
    zr, zo = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    perm = rng.permutation(5)
    a = route(Tensor(zr), Tensor(zo), p).numpy()
    b = route(Tensor(zr[perm]), Tensor(zo[perm]), p).numpy()
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)


def test_route_matches_direct_formula(rng):
    p = _router()
    zr, zo = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    P = {k: v.data for k, v in p.params.items()}
    mr, mo = zr.mean(axis=0), zo.mean(axis=0)
    oracle = [
        _np_softmax(mr @ P["R_u_r"] + P["b_u_r"][0]),
        _np_softmax(mo @ P["R_u_o"] + P["b_u_o"][0]),
        _np_softmax(np.concatenate([mr, mo]) @ P["R_s"] + P["b_s"][0]),
    ]
    w = route(Tensor(zr), Tensor(zo), p)
    for got, want in zip((w.w_u_r, w.w_u_o, w.w_s), oracle):
        assert np.abs(got.data - want).max() < 1e-12


def test_route_dimension_errors(rng):
    p = _router()
    with pytest.raises(DimensionError):
        route(Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=(4, 4))), p)
    with pytest.raises(DimensionError):
        route(Tensor(rng.normal(size=(5, 3))), Tensor(rng.normal(size=(5, 3))), p)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3, 4), elements=st.floats(-1e4, 1e4)), st.integers(0, 2**16))
def test_route_outputs_are_simplex_points(z, seed):
    w = route(Tensor(z[0]), Tensor(z[1]), _router(seed=seed, std=3.0))
    for v in (w.w_u_r, w.w_u_o, w.w_s):
        assert np.all(v.data >= 0)
        assert abs(v.data.sum() - 1.0) < 1e-9


# merge ----------------------------------------------------------------------


def test_one_hot_merge_selects(rng):
    outs = [Tensor(rng.normal(size=(2, 3))) for _ in range(3)]
    got = merge_unique(outs, Tensor([0.0, 1.0, 0.0]))
    np.testing.assert_array_equal(got.data, outs[1].data)


def test_uniform_merge_of_identical_outputs(rng):
    o = Tensor(rng.normal(size=(2, 3)))
    got = merge_unique([o] * 4, Tensor(np.full(4, 0.25)))
    np.testing.assert_allclose(got.data, o.data, rtol=1e-15, atol=1e-15)


def test_merge_weighted_sum_oracle(rng):
    outs = [rng.normal(size=(2, 3)) for _ in range(3)]
    w = _np_softmax(rng.normal(size=3))
    oracle = sum(w[i] * outs[i] for i in range(3))
    got = merge([Tensor(o) for o in outs], Tensor(w))
    assert np.abs(got.data - oracle).max() < 1e-12


def test_merge_length_mismatch(rng):
    with pytest.raises(DimensionError):
        merge([Tensor(rng.normal(size=(2, 3)))] * 3, Tensor(np.full(4, 0.25)))


def test_merge_shared_reuses_coefficients(rng):
    outs_r = [Tensor(rng.normal(size=(2, 3))) for _ in range(3)]
    outs_o = [Tensor(rng.normal(size=(2, 3))) for _ in range(3)]
    w = dc.parameter(_np_softmax(rng.normal(size=3)))
    a, b = merge_shared(outs_r, outs_o, w)
    np.testing.assert_array_equal(a.data, merge(outs_r, w).data)
    np.testing.assert_array_equal(b.data, merge(outs_o, w).data)
    # one coefficient vector feeds both modalities, so its gradient collects both
    (dc.sum(a) + dc.sum(b)).backward()
    want = [outs_r[i].data.sum() + outs_o[i].data.sum() for i in range(3)]
    np.testing.assert_allclose(w.grad, want, rtol=1e-13)


def test_shared_last_decomposer_and_identical_inputs_tie_modalities(rng):
    bank = DecomposerBank("clip", 4, 3, 2, 2, np.random.default_rng(0), init_std=0.5)
    for t in bank.params.values():
        t.data = rng.normal(0.0, 0.5, t.shape)
    z = Tensor(rng.normal(size=(2, 3)))
    mlp = dc.gelu(z)
    w = Tensor(np.eye(4)[3])
    a, b = merge_shared(decompose_all(z, bank, "r", mlp), decompose_all(z, bank, "o", mlp), w)
    np.testing.assert_array_equal(a.data, b.data)


def test_zero_deltas_merge_to_mlp_term(rng):
    bank = DecomposerBank("video", 3, 3, 2, 2, np.random.default_rng(0))
    for t in bank.params.values():
        t.data = np.zeros_like(t.data)
    z = Tensor(rng.normal(size=(2, 3)))
    mlp = dc.gelu(z)
    w = Tensor(_np_softmax(rng.normal(size=3)))
    a, b = merge_shared(decompose_all(z, bank, "r", mlp), decompose_all(z, bank, "o", mlp), w)
    np.testing.assert_allclose(a.data, mlp.data, rtol=1e-15, atol=1e-15)
    np.testing.assert_allclose(b.data, mlp.data, rtol=1e-15, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 2**16))
def test_merge_is_linear_in_weights(a, seed):
    g = np.random.default_rng(seed)
    outs = Tensor(g.normal(size=(4, 2, 3)))
    w1, w2 = _np_softmax(g.normal(size=4)), _np_softmax(g.normal(size=4))
    lhs = merge(outs, Tensor(a * w1 + (1 - a) * w2)).data
    rhs = a * merge(outs, Tensor(w1)).data + (1 - a) * merge(outs, Tensor(w2)).data
    assert np.abs(lhs - rhs).max() < 1e-9


# router decorrelation --------------------------------------------------------


def test_rd_disjoint_supports_is_zero():
    e = np.eye(3)
    assert router_decorrelation_loss(_rw(e[0], e[1], e[2])).item() == 0.0


def test_rd_uniform_six_is_one_third():
    u = np.full(6, 1 / 6)
    assert abs(router_decorrelation_loss(_rw(u, u, u)).item() - 1 / 3) < 1e-9


def test_rd_maximal_overlap():
    e = np.eye(3)
    assert router_decorrelation_loss(_rw(e[0], e[1], e[0])).item() >= 1.0


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)))
def test_rd_nonnegative(logits):
    w = _rw(*_np_softmax(logits))
    assert router_decorrelation_loss(w).item() >= 0.0


def test_rd_zero_iff_disjoint():
    w = _rw([0.5, 0.5, 0, 0], [0.3, 0.7, 0, 0], [0, 0, 0.1, 0.9])
    assert router_decorrelation_loss(w).item() == 0.0
    w = _rw([0.5, 0.5, 0, 0], [0.3, 0.7, 0, 0], [0, 0.01, 0.09, 0.9])
    assert router_decorrelation_loss(w).item() > 0.0


# class bank and activation consistency -------------------------------------


def test_first_observation_sets_mean():
    bank = ClassWeightBank(3, 6)
    w = _rw([0.2, 0.8], [0.5, 0.5], [1.0, 0.0])
    update_class_bank(bank, w, 1)
    np.testing.assert_array_equal(bank.means[1], [0.2, 0.8, 0.5, 0.5, 1.0, 0.0])
    assert bank.counts.tolist() == [0, 1, 0]


def test_two_observations_ema():
    bank = ClassWeightBank(2, 6)
    w1 = np.array([0.2, 0.8, 0.5, 0.5, 1.0, 0.0])
    w2 = np.array([0.6, 0.4, 0.1, 0.9, 0.0, 1.0])
    update_class_bank(bank, w1, 0)
    update_class_bank(bank, w2, 0)
    np.testing.assert_allclose(bank.means[0], 0.9 * w1 + 0.1 * w2, rtol=0, atol=1e-15)


def test_exact_mean_flag():
    bank = ClassWeightBank(1, 2, exact=True)
    for w in ([1.0, 0.0], [0.0, 1.0], [0.5, 0.5]):
        update_class_bank(bank, np.array(w), 0)
    np.testing.assert_allclose(bank.means[0], [0.5, 0.5], atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(arrays(np.float64, (3, 4), elements=st.floats(-20, 20)), st.integers(0, 2)),
                min_size=1, max_size=12))
def test_bank_means_stay_blockwise_simplex(updates):
    bank = ClassWeightBank(3, 12)
    for logits, y in updates:
        update_class_bank(bank, _np_softmax(logits).reshape(-1), y)
    for c in range(3):
        if bank.counts[c]:
            np.testing.assert_allclose(bank.means[c].reshape(3, 4).sum(axis=1), 1.0, atol=1e-6)


def test_ac_zero_at_class_mean():
    bank = ClassWeightBank(2, 6)
    w = _rw([0.2, 0.8], [0.5, 0.5], [1.0, 0.0])
    update_class_bank(bank, w, 0)
    assert abs(activation_consistency_loss(w, 0, bank).item()) < 1e-9


def test_ac_uniform_mean_one_hot_target():
    bank = ClassWeightBank(1, 6)
    update_class_bank(bank, np.full(6, 0.5), 0)
    e = [1.0, 0.0]
    assert abs(activation_consistency_loss(_rw(e, e, e), 0, bank).item() - 1.5) < 1e-12


def test_ac_cold_class_is_zero_and_counted():
    bank = ClassWeightBank(2, 6)
    update_class_bank(bank, np.full(6, 0.5), 0)
    e = [1.0, 0.0]
    assert activation_consistency_loss(_rw(e, e, e), 1, bank).item() == 0.0
    assert bank.cold_hits == 1


def test_ac_batch_mixes_warm_and_cold_rows():
    bank = ClassWeightBank(2, 6)
    update_class_bank(bank, np.full(6, 0.5), 0)
    w = _rw([[1.0, 0.0], [1.0, 0.0]], [[1.0, 0.0], [1.0, 0.0]], [[1.0, 0.0], [1.0, 0.0]])
    assert abs(activation_consistency_loss(w, [0, 1], bank).item() - 0.75) < 1e-12
    assert bank.cold_hits == 1


def test_ac_order_invariance_with_matching_convention(rng):
    ws = [_np_softmax(rng.normal(size=3)) for _ in range(3)]
    wt = [_np_softmax(rng.normal(size=3)) for _ in range(3)]
    a = ClassWeightBank(1, 9)
    update_class_bank(a, np.concatenate(ws), 0)
    la = activation_consistency_loss(_rw(*wt), 0, a).item()
    perm = [2, 0, 1]
    b = ClassWeightBank(1, 9)
    update_class_bank(b, np.concatenate([ws[i] for i in perm]), 0)
    lb = activation_consistency_loss(_rw(*[wt[i] for i in perm]), 0, b).item()
    assert abs(la - lb) < 1e-15


def test_ac_does_not_backprop_into_bank(rng):
    bank = ClassWeightBank(1, 6)
    update_class_bank(bank, np.full(6, 0.5), 0)
    before = bank.means.copy()
    logits = [dc.parameter(rng.normal(size=2)) for _ in range(3)]
    w = RouterWeights(*(dc.softmax(l) for l in logits))
    activation_consistency_loss(w, 0, bank).backward()
    np.testing.assert_array_equal(bank.means, before)
    assert all(np.abs(l.grad).max() > 0 for l in logits)


def test_bank_state_round_trip():
    bank = ClassWeightBank(2, 4)
    update_class_bank(bank, np.array([0.1, 0.9, 0.4, 0.6]), 1)
    bank.cold_hits = 3
    other = ClassWeightBank(2, 4)
    other.load_state(bank.state())
    np.testing.assert_array_equal(other.means, bank.means)
    np.testing.assert_array_equal(other.counts, bank.counts)
    assert other.cold_hits == 3
