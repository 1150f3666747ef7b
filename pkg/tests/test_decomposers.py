import itertools
import math

import numpy as np
import pytest

from mclrd import diffcore as dc
from mclrd.config import ConfigError
from mclrd.decomposers import (
    DecomposerBank,
    alpha_schedule,
    clip_decompose,
    decompose_all,
    decomposer_decorrelation_loss,
    video_decompose,
)
from mclrd.diffcore import DimensionError, Tensor

from .conftest import fd_grad


def _bank(level, N=4, d=5, T=3, r=2, seed=0, std=0.5):
    bank = DecomposerBank(level, N, d, T, r, np.random.default_rng(seed), init_std=std)
    g = np.random.default_rng(seed + 1)
    for p in bank.params.values():
        p.data = g.normal(0.0, std, p.shape)
    return bank


def _mlp(z):
    # stand-in for the frozen MLP sub-path; any fixed nonlinear map works here
    return dc.gelu(dc.scale(z, 0.7)) + 0.1


def test_alpha_endpoints():
    a = alpha_schedule(6)
    assert a[0] == 1.0 and a[-1] == 0.0
    np.testing.assert_allclose(a, [(6 - i) / 5 for i in range(1, 7)], rtol=0, atol=0)
    with pytest.raises(ConfigError):
        alpha_schedule(1)


@pytest.mark.parametrize("level,decompose", [("clip", clip_decompose), ("video", video_decompose)])
def test_first_decomposer_ignores_shared_matrices(level, decompose, rng):
    bank = _bank(level)
    z = Tensor(rng.normal(size=(3, 5)))
    before = decompose(z, bank, "r", 1, _mlp).data
    bank.params["A_hat"].data = bank.params["A_hat"].data + 10.0
    bank.params["B_hat"].data = bank.params["B_hat"].data * -3.0
    np.testing.assert_array_equal(decompose(z, bank, "r", 1, _mlp).data, before)


@pytest.mark.parametrize("level,decompose", [("clip", clip_decompose), ("video", video_decompose)])
def test_last_decomposer_ignores_modality_matrices_and_ties_modalities(level, decompose, rng):
    bank = _bank(level)
    z = Tensor(rng.normal(size=(3, 5)))
    r_out = decompose(z, bank, "r", bank.N, _mlp).data
    np.testing.assert_array_equal(decompose(z, bank, "o", bank.N, _mlp).data, r_out)
    for m in ("r", "o"):
        bank.params[f"A_{m}"].data = bank.params[f"A_{m}"].data + 5.0
        bank.params[f"B_{m}"].data = bank.params[f"B_{m}"].data - 2.0
    np.testing.assert_array_equal(decompose(z, bank, "r", bank.N, _mlp).data, r_out)


def test_clip_low_rank_delta_hand_computed():
    bank = DecomposerBank("clip", 3, 3, 2, 1, np.random.default_rng(0))
    B_r, B_hat = [[1.0], [2.0], [-1.0]], [[0.0], [1.0], [3.0]]
    A_r, A_hat = [[2.0, -1.0, 1.0]], [[1.0, 1.0, 0.0]]
    bank.params["B_r"].data[1] = B_r
    bank.params["B_hat"].data[1] = B_hat
    bank.params["A_r"].data[1] = A_r
    bank.params["A_hat"].data[1] = A_hat
    z = [[1.0, 0.0, 2.0], [-1.0, 3.0, 1.0]]
    a = 0.5  # i = 2 of N = 3
    Bm = [a * B_r[j][0] + (1 - a) * B_hat[j][0] for j in range(3)]
    Am = [a * A_r[0][j] + (1 - a) * A_hat[0][j] for j in range(3)]
    oracle = [[sum(z[t][j] * Bm[j] for j in range(3)) * Am[c] for c in range(3)] for t in range(2)]
    got = bank.delta_one(Tensor(z), "r", 2).data
    assert np.abs(got - np.array(oracle)).max() < 1e-12


def test_video_unit_vector_bank_moves_one_clip(rng):
    T, d = 4, 3
    bank = DecomposerBank("video", 2, d, T, 1, np.random.default_rng(0))
    for p in bank.params.values():
        p.data = np.zeros_like(p.data)
    e1, e2 = np.eye(T)[:, [0]], np.eye(T)[:, [1]]
    bank.params["B_r"].data[0] = e1  # i = 1 -> alpha = 1
    bank.params["A_r"].data[0] = e2
    z = rng.normal(size=(T, d))
    delta = bank.delta_one(Tensor(z), "r", 1).data
    # (z^T e1 e2^T)^T = e2 e1^T z : clip 1's features land in clip 2's row
    expected = np.zeros((T, d))
    expected[1] = z[0]
    np.testing.assert_array_equal(delta, expected)


def test_video_delta_is_order_sensitive_while_mlp_term_permutes(rng):
    bank = _bank("video", T=3)
    z = rng.normal(size=(3, 5))
    perm = [2, 0, 1]
    np.testing.assert_allclose(_mlp(Tensor(z[perm])).data, _mlp(Tensor(z)).data[perm], rtol=0, atol=0)
    d_perm = bank.delta_one(Tensor(z[perm]), "o", 2).data
    d_orig = bank.delta_one(Tensor(z), "o", 2).data
    assert not np.allclose(d_perm, d_orig[perm])


def test_zero_bank_returns_mlp_term(rng):
    bank = _bank("video", T=3)
    for p in bank.params.values():
        p.data = np.zeros_like(p.data)
    z = Tensor(rng.normal(size=(3, 5)))
    for i in range(1, bank.N + 1):
        np.testing.assert_array_equal(video_decompose(z, bank, "r", i, _mlp).data, _mlp(z).data)


def test_errors(rng):
    bank = _bank("video", T=3)
    with pytest.raises(DimensionError):
        video_decompose(Tensor(rng.normal(size=(4, 5))), bank, "r", 1, _mlp)
    with pytest.raises(IndexError):
        bank.delta_one(Tensor(rng.normal(size=(3, 5))), "r", 0)
    with pytest.raises(ConfigError):
        DecomposerBank("clip", 1, 4, 3, 2, np.random.default_rng(0))


@pytest.mark.parametrize("level", ["clip", "video"])
def test_stacked_outputs_match_single_index(level, rng):
    bank = _bank(level)
    z = Tensor(rng.normal(size=(2, 3, 5)))
    stacked = decompose_all(z, bank, "o", _mlp(z)).data
    for i in range(1, bank.N + 1):
        single = bank.delta_one(z, "o", i).data + _mlp(z).data
        np.testing.assert_allclose(stacked[:, i - 1], single, rtol=1e-13, atol=1e-14)


@pytest.mark.parametrize("level,decompose", [("clip", clip_decompose), ("video", video_decompose)])
def test_decompose_grad(level, decompose, rng):
    bank = _bank(level, std=0.4)
    z = dc.parameter(rng.normal(size=(3, 5)))
    w = rng.normal(size=(3, 5))
    loss = dc.sum(decompose(z, bank, "r", 2, _mlp) * w)
    loss.backward()

    def f():
        return float((decompose(Tensor(z.data), bank, "r", 2, _mlp).data * w).sum())

    for t in [z] + list(bank.params.values()):
        numeric = fd_grad(f, t.data)
        got = np.zeros_like(t.data) if t.grad is None else t.grad
        assert np.all(np.abs(got - numeric) <= np.maximum(1e-6, 1e-5 * np.abs(numeric)))


# decorrelation loss ---------------------------------------------------------


def test_dd_identical_outputs():
    v = Tensor(np.ones((2, 3)))
    loss = decomposer_decorrelation_loss([v] * 6, [v] * 6)
    assert abs(loss.item() - 30.0) < 1e-9


def test_dd_orthogonal_outputs_is_zero():
    eye = np.eye(4).reshape(4, 2, 2)
    outs = [Tensor(e) for e in eye]
    assert abs(decomposer_decorrelation_loss(outs, outs).item()) < 1e-12


def test_dd_sixty_degrees():
    a = Tensor([[1.0, 0.0]])
    b = Tensor([[0.5, math.sqrt(3) / 2]])
    assert abs(decomposer_decorrelation_loss([a, b], [a, b]).item() - 1.0) < 1e-12


def test_dd_matches_pairwise_oracle_and_batch_averages(rng):
    E_r = rng.normal(size=(3, 4, 2, 5))
    E_o = rng.normal(size=(3, 4, 2, 5))
    per = []
    for b in range(3):
        tot = 0.0
        for E in (E_r, E_o):
            for i, j in itertools.combinations(range(4), 2):
                x, y = E[b, i].ravel(), E[b, j].ravel()
                tot += x @ y / (np.linalg.norm(x) * np.linalg.norm(y) + 1e-12)
        per.append(tot)
    got = decomposer_decorrelation_loss(Tensor(E_r), Tensor(E_o)).item()
    assert abs(got - np.mean(per)) < 1e-12


def test_dd_decreases_under_descent():
    rng = np.random.default_rng(3)
    bank = DecomposerBank("clip", 6, 8, 4, 3, rng)
    for p in bank.params.values():
        p.data = rng.normal(0.0, 0.3, p.shape)
    z = Tensor(rng.normal(size=(4, 4, 8)))
    mlp = _mlp(z)
    params = list(bank.params.values())
    vals = []
    for _ in range(21):
        for p in params:
            p.grad = None
        loss = decomposer_decorrelation_loss(decompose_all(z, bank, "r", mlp), decompose_all(z, bank, "o", mlp))
        loss.backward()
        vals.append(loss.item())
        for p in params:
            p.data = p.data - 1e-2 * p.grad
    assert all(b < a for a, b in zip(vals, vals[1:]))
