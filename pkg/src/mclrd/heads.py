"""Classifier heads, prediction aggregation, and the two supervised losses."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import DimensionError, Tensor
from .encoder import ParamModule

STREAMS = ("u_r", "u_o", "s")


class LinearHead(ParamModule):
    def __init__(self, d: int, C: int, rng: np.random.Generator, init_std: float = 0.02, prefix: str = ""):
        super().__init__()
        self.W = self.add_param(prefix + "W", rng.normal(0.0, init_std, (d, C)))
        self.b = self.add_param(prefix + "b", np.zeros((1, C)))

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.W + self.b
        return dc.reshape(out, x.shape[:-1] + (out.shape[-1],)) if x.ndim == 1 else out


class ClassifierParams(ParamModule):
    """``psi_u_r``, ``psi_u_o`` and ``psi_s``: linear ``d -> C`` maps after TAP."""

    def __init__(self, d: int, C: int, rng: np.random.Generator, init_std: float = 0.02):
        super().__init__()
        self.heads = {}
        for s in STREAMS:
            h = LinearHead(d, C, rng, init_std, prefix=f"psi_{s}.")
            self.heads[s] = h
            self.params.update(h.params)


class DiscriminatorParams(ParamModule):
    """One ``d -> hidden -> 2`` ReLU MLP per stream."""

    def __init__(self, d: int, hidden: int, rng: np.random.Generator, init_std: float = 0.02):
        super().__init__()
        for s in STREAMS:
            self.add_param(f"{s}.W1", rng.normal(0.0, init_std, (d, hidden)))
            self.add_param(f"{s}.b1", np.zeros((1, hidden)))
            self.add_param(f"{s}.W2", rng.normal(0.0, init_std, (hidden, 2)))
            self.add_param(f"{s}.b2", np.zeros((1, 2)))

    def logits(self, stream: str, x: Tensor) -> Tensor:
        p = self.params
        h = dc.relu(x @ p[f"{stream}.W1"] + p[f"{stream}.b1"])
        return h @ p[f"{stream}.W2"] + p[f"{stream}.b2"]


def fuse_shared(f_s_r: Tensor, f_s_o: Tensor) -> Tensor:
    if f_s_r.shape != f_s_o.shape:
        raise DimensionError(f"shared streams disagree: {f_s_r.shape} vs {f_s_o.shape}")
    return dc.scale(f_s_r + f_s_o, 0.5)


def classify(features: Tensor, head: LinearHead) -> Tensor:
    if features.shape[-1] != head.W.shape[0]:
        raise DimensionError(f"head expects d={head.W.shape[0]}, got {features.shape}")
    return head(dc.mean_pool(features))


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def aggregate_probabilities(*logits) -> np.ndarray:
    arrs = [np.asarray(l.data if isinstance(l, Tensor) else l, dtype=np.float64) for l in logits]
    if len({a.shape[-1] for a in arrs}) != 1:
        raise DimensionError("heads disagree on class count")
    return np.mean([_softmax_np(a) for a in arrs], axis=0)


def aggregate_predictions(*logits):
    """Argmax of the mean softmax over heads; ties go to the lowest class id."""
    pred = np.argmax(aggregate_probabilities(*logits), axis=-1)
    return int(pred) if pred.ndim == 0 else pred


def classification_loss(logits: dict[str, Tensor] | list[Tensor], labels) -> Tensor:
    """Mean over heads of the batch-averaged cross-entropy."""
    heads = list(logits.values()) if isinstance(logits, dict) else list(logits)
    total = dc.cross_entropy(_rows(heads[0]), labels)
    for h in heads[1:]:
        total = total + dc.cross_entropy(_rows(h), labels)
    return dc.scale(total, 1.0 / len(heads))


def _rows(x: Tensor) -> Tensor:
    return dc.reshape(x, (1, x.shape[0])) if x.ndim == 1 else x


def adversarial_alignment_loss(streams: dict[str, Tensor], domains, disc: DiscriminatorParams,
                               lam: float = 1.0) -> tuple[Tensor, bool]:
    """Gradient-reversed domain classification on each TAP-pooled stream.

    ``streams`` maps stream name to ``(B, T, d)`` features; ``domains`` holds
    0 for source and 1 for target. Returns the loss summed over streams and
    a flag that is True when the batch holds a single domain.
    """
    domains = np.asarray(domains, dtype=np.int64).reshape(-1)
    single_domain = np.unique(domains).size < 2
    total = None
    for name in STREAMS:
        pooled = dc.mean_pool(streams[name])
        ce = dc.cross_entropy(disc.logits(name, dc.grad_reverse(pooled, lam)), domains)
        total = ce if total is None else total + ce
    return total, single_domain
