"""Two-stage training: source pretraining of the base models, then adaptation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .config import ModelConfig, TrainConfig
from .datagen import DatasetSplit, MultimodalSample, stack_batch
from .diffcore import NumericError, Tensor
from .heads import adversarial_alignment_loss, classification_loss
from .model import MCLRD, BaseModel, ForwardOut
from .optim import Adam
from .routers import activation_consistency_loss, router_decorrelation_loss, update_class_bank

log = logging.getLogger(__name__)

LOSS_NAMES = ("cls", "dd", "rd", "ac", "ada")


class StateError(RuntimeError):
    pass


@dataclass
class LossReport:
    step: int
    cls: float
    dd: float
    rd: float
    ac: float
    ada: float
    total: float
    grad_norm: float = 0.0
    per_site: dict[str, dict[str, float]] = field(default_factory=dict)
    single_domain: bool = False

    def row(self) -> dict[str, float]:
        return {"step": self.step, "cls": self.cls, "dd": self.dd, "rd": self.rd, "ac": self.ac,
                "ada": self.ada, "total": self.total}


@dataclass
class PretrainResult:
    model: BaseModel
    epoch_loss: list[float]
    step_loss: list[float]
    train_acc: float
    rng_state: dict | None = None


def _batches(rng: np.random.Generator, n: int, size: int) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


class NonFiniteLoss(NumericError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


def _check_finite(value: float, step: int) -> None:
    if not math.isfinite(value):
        raise NonFiniteLoss(step)


def pretrain(source: Sequence[MultimodalSample], model_cfg: ModelConfig, cfg: TrainConfig,
             callback=None) -> PretrainResult:
    """Train both encoders and their heads on source cross-entropy, then freeze them.

    ``callback(step, loss)`` runs after every optimizer step.
    """
    cfg.validate()
    if not source:
        raise ValueError("pretraining needs a non-empty source set")
    model = BaseModel(model_cfg, seed=cfg.seed)
    params = list(model.named_parameters().values())
    opt = Adam(params, cfg.lr, cfg.betas, cfg.eps)
    rng = np.random.default_rng(cfg.seed + 1)
    x_r, x_o, labels, _ = stack_batch(source)
    epoch_loss, step_loss = [], []
    step = 0
    for _ in range(cfg.epochs):
        losses = []
        for idx in _batches(rng, len(source), cfg.batch_size):
            opt.zero_grad()
            lr_, lo_ = model.logits(x_r[idx], x_o[idx])
            loss = dc.scale(dc.cross_entropy(lr_, labels[idx]) + dc.cross_entropy(lo_, labels[idx]), 0.5)
            _check_finite(loss.item(), step)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step_loss.append(loss.item())
            if callback is not None:
                callback(step, loss.item())
            step += 1
        epoch_loss.append(float(np.mean(losses)))
        log.info("pretrain epoch %d loss %.4f", len(epoch_loss), epoch_loss[-1])
    model.freeze()
    acc = evaluate(model, source)
    return PretrainResult(model, epoch_loss, step_loss, acc, rng.bit_generator.state)


def compute_losses(model: MCLRD, out: ForwardOut, labels: np.ndarray, domains: np.ndarray,
                   toggles: dict[str, bool], lam: float | None = None) -> tuple[dict[str, Tensor], dict[str, dict[str, float]], bool]:
    """Assemble every loss term; hat-losses average over all (layer, level) sites.

    Source rows update the per-site class banks before the consistency term is
    taken on target rows.
    """
    zero = Tensor(0.0)
    terms: dict[str, Tensor] = {"cls": classification_loss(out.logits, labels)}
    per_site: dict[str, dict[str, float]] = {}
    n_sites = len(out.sites)
    src, tgt = domains == 0, domains == 1
    dd = rd = ac = zero
    for rec in out.sites:
        site = per_site.setdefault(rec.key, {})
        if toggles["ldd"]:
            v = rec.decorrelation()
            dd = dd + v
            site["dd"] = v.item()
        if toggles["lrd"]:
            v = router_decorrelation_loss(rec.weights)
            rd = rd + v
            site["rd"] = v.item()
        bank = model.class_banks[rec.key]
        if src.any():
            update_class_bank(bank, rec.weights.numpy()[src], labels[src])
        if toggles["lac"] and tgt.any():
            w = rec.weights
            idx = np.flatnonzero(tgt)
            sub = type(w)(dc.take(w.w_u_r, idx), dc.take(w.w_u_o, idx), dc.take(w.w_s, idx))
            v = activation_consistency_loss(sub, labels[tgt], bank)
            ac = ac + v
            site["ac"] = v.item()
    terms["dd"] = dc.scale(dd, 1.0 / n_sites) if toggles["ldd"] else zero
    terms["rd"] = dc.scale(rd, 1.0 / n_sites) if toggles["lrd"] else zero
    terms["ac"] = dc.scale(ac, 1.0 / n_sites) if toggles["lac"] else zero
    single = False
    if toggles["lada"]:
        lam = model.cfg.lambda_ada if lam is None else lam
        terms["ada"], single = adversarial_alignment_loss(out.streams(), domains, model.disc, lam)
    else:
        terms["ada"] = zero
    return terms, per_site, single


def lambda_at(cfg: ModelConfig, progress: float) -> float:
    """Reversal strength at training progress ``progress`` in [0, 1]."""
    if cfg.lambda_schedule == "ramp":
        return cfg.lambda_ada * (2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0)
    return cfg.lambda_ada


def total_loss(terms: dict[str, Tensor]) -> Tensor:
    total = terms["cls"]
    for name in LOSS_NAMES[1:]:
        total = total + terms[name]
    return total


@dataclass
class AdaptResult:
    model: MCLRD
    history: list[LossReport]
    rng_state: dict | None = None


def _mixed_batch(rng, src_order, pos, n_src, n_tgt_train, half_src, half_tgt):
    take = src_order[pos:pos + half_src]
    if take.shape[0] < half_src:
        take = np.concatenate([take, src_order[: half_src - take.shape[0]]])
    tgt = rng.integers(0, n_tgt_train, size=half_tgt)
    return take, tgt


def adapt(split: DatasetSplit, base: BaseModel | None, cfg: TrainConfig,
          callback=None) -> AdaptResult:
    """Train decomposers, routers, heads and discriminators on mixed batches.

    Each batch is half source (a per-epoch permutation) and half target-train
    (drawn with replacement). Encoders stay frozen.
    """
    cfg.validate()
    if base is None or not base.frozen:
        raise StateError("adaptation needs a pretrained, frozen base model")
    if not split.source_train or not split.target_train:
        raise ValueError("adaptation needs source and target-train samples")
    model = MCLRD(base, seed=cfg.seed, toggles=cfg.toggles())
    params = model.trainable()
    opt = Adam(params, cfg.lr, cfg.betas, cfg.eps)
    rng = np.random.default_rng(cfg.seed + 2)
    s_r, s_o, s_y, s_d = stack_batch(split.source_train)
    t_r, t_o, t_y, t_d = stack_batch(split.target_train)
    half_src = cfg.batch_size - cfg.batch_size // 2
    half_tgt = cfg.batch_size // 2
    steps = cfg.steps_per_epoch or max(1, math.ceil(len(split.source_train) / half_src))
    toggles = cfg.toggles()
    history: list[LossReport] = []
    step = 0
    n_total = cfg.epochs * steps
    for _ in range(cfg.epochs):
        order = rng.permutation(len(split.source_train))
        for j in range(steps):
            si, ti = _mixed_batch(rng, order, (j * half_src) % len(order), len(order),
                                  len(split.target_train), half_src, half_tgt)
            x_r = np.concatenate([s_r[si], t_r[ti]])
            x_o = np.concatenate([s_o[si], t_o[ti]])
            y = np.concatenate([s_y[si], t_y[ti]])
            dom = np.concatenate([s_d[si], t_d[ti]])
            opt.zero_grad()
            out = model.forward(x_r, x_o)
            lam = lambda_at(model.cfg, step / max(1, n_total - 1))
            terms, per_site, single = compute_losses(model, out, y, dom, toggles, lam)
            total = total_loss(terms)
            _check_finite(total.item(), step)
            total.backward()
            gn = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))
            opt.step()
            rep = LossReport(step, *(terms[n].item() for n in LOSS_NAMES), total.item(),
                             gn, per_site, single)
            history.append(rep)
            if callback is not None:
                callback(rep)
            step += 1
    return AdaptResult(model, history, rng.bit_generator.state)


def evaluate(model, samples: Sequence[MultimodalSample], batch_size: int = 64) -> float:
    if not samples:
        raise ValueError("cannot evaluate on an empty sample list")
    preds = predict(model, samples, batch_size)
    labels = np.array([s.label for s in samples])
    return float(np.mean(preds == labels))


def predict(model, samples: Sequence[MultimodalSample], batch_size: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(samples), batch_size):
        x_r, x_o, _, _ = stack_batch(samples[i:i + batch_size])
        out.append(model.predict(x_r, x_o))
    return np.concatenate(out)


def per_class_accuracy(model, samples: Sequence[MultimodalSample], C: int) -> list[float | None]:
    preds = predict(model, samples)
    labels = np.array([s.label for s in samples])
    return [float(np.mean(preds[labels == c] == c)) if np.any(labels == c) else None for c in range(C)]
