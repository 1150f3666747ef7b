"""Central finite-difference checks for tape gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .config import ModelConfig
from .diffcore import Tensor
from .decomposers import DecomposerBank, decompose_all, decomposer_decorrelation_loss
from .encoder import Encoder, mlp_forward, mlp_path, msa_forward
from .heads import STREAMS, DiscriminatorParams, adversarial_alignment_loss, classification_loss
from .model import MCLRD, BaseModel
from .pipeline import compute_losses, total_loss
from .routers import (
    ClassWeightBank,
    RouterWeights,
    SubRouterParams,
    activation_consistency_loss,
    merge,
    route,
    router_decorrelation_loss,
    update_class_bank,
)

ABS_TOL = 1e-6
REL_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_abs: float
    max_rel: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<28s} max_abs={self.max_abs:.2e} max_rel={self.max_rel:.2e}"


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """d fn() / d x by central differences, perturbing ``x.data`` in place."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = float(fn().data)
        flat[i] = old - h
        down = float(fn().data)
        flat[i] = old
        gflat[i] = (up - down) / (2.0 * h)
    return g


def check(name: str, fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
          abs_tol: float = ABS_TOL, rel_tol: float = REL_TOL, scales: Sequence[float] | None = None) -> CheckResult:
    """Compare tape gradients of scalar ``fn()`` w.r.t. ``inputs`` against finite differences.

    An entry passes when ``|analytic - numeric| <= max(abs_tol, rel_tol * |numeric|)``.
    ``scales`` multiplies the numeric side per input; gradient reversal upstream
    of an input makes its expected tape gradient ``-lambda`` times the true one.
    """
    for x in inputs:
        x.grad = None
        x.requires_grad = True
    out = fn()
    out.backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]
    max_abs = max_rel = 0.0
    ok = True
    scales = [1.0] * len(inputs) if scales is None else list(scales)
    for x, ga, sc in zip(inputs, analytic, scales):
        gn = sc * numeric_grad(fn, x, h)
        diff = np.abs(ga - gn)
        tol = np.maximum(abs_tol, rel_tol * np.abs(gn))
        ok &= bool(np.all(diff <= tol)) and bool(np.all(np.isfinite(ga)))
        max_abs = max(max_abs, float(diff.max(initial=0.0)))
        rel = diff / np.maximum(np.abs(gn), 1e-12)
        max_rel = max(max_rel, float(np.where(diff > abs_tol, rel, 0.0).max(initial=0.0)))
    return CheckResult(name, max_abs, max_rel, ok)


# the suite ------------------------------------------------------------------


def _param(rng, *shape, scale=1.0):
    return dc.parameter(rng.normal(0.0, scale, shape))


def _weighted(rng, fn):
    """Scalar probe ``sum(fn() * W)`` with a fixed random ``W``, so every output entry matters."""
    W = None

    def probe():
        nonlocal W
        out = fn()
        if W is None:
            W = rng.normal(size=out.shape)
        return dc.sum(out * W)
    return probe


def _tiny_config():
    return ModelConfig.desk(d_in=5, d=4, H=2, d_ff=6, T=3, C=3, N_c=3, N_v=3, d_ra=2, init_std=0.3)


def _jitter(module, rng, scale=0.3):
    for p in module.params.values():
        p.data = rng.normal(0.0, scale, p.shape)


def suite(seed: int = 0) -> list[CheckResult]:
    """Finite-difference checks over every differentiable piece of the model."""
    rng = np.random.default_rng(seed)
    cfg = _tiny_config()
    results = []

    def add(name, fn, inputs, **kw):
        results.append(check(name, _weighted(rng, fn), inputs, **kw))

    # primitives
    a, b = _param(rng, 3, 4), _param(rng, 4, 2)
    add("matmul", lambda: a @ b, [a, b])
    x, g, bb = _param(rng, 3, 5), _param(rng, 1, 5), _param(rng, 1, 5)
    add("layer_norm", lambda: dc.layer_norm(x, g, bb), [x, g, bb])
    v = _param(rng, 2, 6)
    add("softmax", lambda: dc.softmax(v), [v])
    add("log_softmax", lambda: dc.log_softmax(v), [v])
    add("gelu", lambda: dc.gelu(v), [v])
    add("mean_pool", lambda: dc.mean_pool(a), [a])
    add("transpose_concat", lambda: dc.concat([dc.transpose(a), dc.scale(dc.transpose(a), 2.0)], axis=-1), [a])
    add("cosine", lambda: dc.cosine_similarity(a, dc.square(a) + 0.5, axis=-1), [a])
    c3 = _param(rng, 2, 4, 5)
    add("cosine_matrix", lambda: dc.cosine_matrix(c3), [c3])
    add("squared_norm", lambda: dc.squared_norm(a), [a])
    lg = _param(rng, 4, 3)
    results.append(check("cross_entropy", lambda: dc.cross_entropy(lg, [0, 2, 1, 1]), [lg]))

    # encoder pieces
    enc = Encoder(cfg, rng)
    _jitter(enc, rng)
    layer = enc.layer(0)
    z = _param(rng, 2, cfg.T, cfg.d)
    add("attention", lambda: msa_forward(z, layer), [z, layer.W_q, layer.W_k, layer.W_v, layer.W_o, layer.ln1_g])
    add("mlp", lambda: mlp_forward(z, layer), [z, layer.W_1, layer.b_1, layer.W_2, layer.ln2_g, layer.ln2_b])
    xin = rng.normal(size=(2, cfg.T, cfg.d_in))
    add("encoder", lambda: enc.forward(xin), [enc.params["W_in"], enc.params["layer1.W_v"]])

    # decomposers
    for level in ("clip", "video"):
        bank = DecomposerBank(level, 3, cfg.d, cfg.T, cfg.d_ra, rng)
        _jitter(bank, rng)
        inputs = [z] + list(bank.params.values())
        add(f"decomposer_{level}", lambda bank=bank: decompose_all(z, bank, "r", mlp_path(z, layer)), inputs)

    # routers and merging
    router = SubRouterParams(cfg.d, 3, rng, init_std=0.5)
    z2 = _param(rng, 2, cfg.T, cfg.d)
    add("router", lambda: route(z, z2, router).concat(), [z, z2] + list(router.params.values()))
    E = _param(rng, 2, 3, cfg.T, cfg.d)
    wl = _param(rng, 2, 3)
    add("merge", lambda: merge(E, dc.softmax(wl)), [E, wl])

    # the five losses
    logits = [_param(rng, 4, cfg.C) for _ in range(3)]
    results.append(check("loss_cls", lambda: classification_loss(logits, [0, 2, 1, 0]), logits))
    Er, Eo = _param(rng, 2, 3, cfg.T, cfg.d), _param(rng, 2, 3, cfg.T, cfg.d)
    results.append(check("loss_dd", lambda: decomposer_decorrelation_loss(Er, Eo), [Er, Eo]))
    wr = [_param(rng, 2, 3) for _ in range(3)]

    def weights():
        return RouterWeights(*(dc.softmax(w) for w in wr))
    results.append(check("loss_rd", lambda: router_decorrelation_loss(weights()), wr))
    cb = ClassWeightBank(cfg.C, 9)
    update_class_bank(cb, np.concatenate([dc.softmax(Tensor(rng.normal(size=3))).data for _ in range(3)]), 1)
    update_class_bank(cb, np.full(9, 1 / 3), 2)
    results.append(check("loss_ac", lambda: activation_consistency_loss(weights(), [1, 2], cb), wr))
    disc = DiscriminatorParams(cfg.d, 3, rng, init_std=0.5)
    feats = {s: _param(rng, 4, cfg.T, cfg.d) for s in STREAMS}
    lam = 0.8
    results.append(check(
        "loss_ada", lambda: adversarial_alignment_loss(feats, [0, 1, 0, 1], disc, lam)[0],
        list(feats.values()) + list(disc.params.values()),
        scales=[-lam] * len(feats) + [1.0] * len(disc.params)))

    # whole model, every regularizer except the reversed one
    base = BaseModel(cfg, seed=seed)
    base.freeze()
    model = MCLRD(base, seed=seed, toggles={"ldd": True, "lrd": True, "lac": True, "lada": False})
    for key in model.banks:
        _jitter(model.banks[key], rng, 0.2)
        _jitter(model.routers[key], rng, 0.5)
        for c in range(cfg.C):
            update_class_bank(model.class_banks[key], np.full(9, 1 / 3), c)
    xr = rng.normal(size=(3, cfg.T, cfg.d_in))
    xo = rng.normal(size=(3, cfg.T, cfg.d_in))
    y, dom = np.array([0, 1, 2]), np.ones(3, dtype=np.int64)  # target rows only: banks stay fixed

    def total():
        terms, _, _ = compute_losses(model, model.forward(xr, xo), y, dom, model.toggles)
        return total_loss(terms)
    named = model.trainable_named()
    probe = [named[k] for k in ("bank.l1.video.A_r", "bank.l0.clip.B_hat", "router.l1.clip.R_s", "cls.psi_s.W")]
    results.append(check("model_total", total, probe))
    return results

