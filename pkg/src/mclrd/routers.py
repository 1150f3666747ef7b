"""Multimodal decomposition router, merge rules, and routing losses."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .decomposers import stack
from .diffcore import DimensionError, Tensor
from .encoder import ParamModule


@dataclass
class RouterWeights:
    """Simplex weights over ``N`` decomposers, each ``(..., N)``.

    Concatenation order is fixed: r-unique, o-unique, shared.
    """
    w_u_r: Tensor
    w_u_o: Tensor
    w_s: Tensor

    def concat(self) -> Tensor:
        return dc.concat([self.w_u_r, self.w_u_o, self.w_s], axis=-1)

    def numpy(self) -> np.ndarray:
        return np.concatenate([self.w_u_r.data, self.w_u_o.data, self.w_s.data], axis=-1)


class SubRouterParams(ParamModule):
    """Three single fully connected layers: ``d -> N``, ``d -> N``, ``2d -> N``."""

    def __init__(self, d: int, N: int, rng: np.random.Generator, init_std: float = 0.02):
        super().__init__()
        self.d, self.N = d, N
        self.add_param("R_u_r", rng.normal(0.0, init_std, (d, N)))
        self.add_param("b_u_r", np.zeros((1, N)))
        self.add_param("R_u_o", rng.normal(0.0, init_std, (d, N)))
        self.add_param("b_u_o", np.zeros((1, N)))
        self.add_param("R_s", rng.normal(0.0, init_std, (2 * d, N)))
        self.add_param("b_s", np.zeros((1, N)))


def route(z_r: Tensor, z_o: Tensor, params: SubRouterParams) -> RouterWeights:
    if z_r.shape != z_o.shape:
        raise DimensionError(f"router inputs disagree: {z_r.shape} vs {z_o.shape}")
    if z_r.shape[-1] != params.d:
        raise DimensionError(f"router built for d={params.d}, got {z_r.shape}")
    p = params.params
    pr, po = dc.mean_pool(z_r), dc.mean_pool(z_o)
    w_u_r = dc.softmax(pr @ p["R_u_r"] + p["b_u_r"])
    w_u_o = dc.softmax(po @ p["R_u_o"] + p["b_u_o"])
    w_s = dc.softmax(dc.concat([pr, po], axis=-1) @ p["R_s"] + p["b_s"])
    # the (1, N) bias would otherwise add a batch axis to unbatched input
    out_shape = pr.shape[:-1] + (params.N,)
    return RouterWeights(*(dc.reshape(w, out_shape) for w in (w_u_r, w_u_o, w_s)))


def _as_stacked(outputs) -> Tensor:
    return outputs if isinstance(outputs, Tensor) else stack(list(outputs))


def merge(outputs, w: Tensor) -> Tensor:
    """Convex combination ``sum_i w_i E_i``; ``outputs`` stacked ``(..., N, T, d)`` or a list."""
    E = _as_stacked(outputs)
    if E.shape[-3] != w.shape[-1]:
        raise DimensionError(f"{E.shape[-3]} decomposer outputs vs {w.shape[-1]} weights")
    wb = dc.reshape(w, w.shape + (1, 1))
    return dc.sum(E * wb, axis=-3)


def merge_unique(outputs_m, w_u_m: Tensor) -> Tensor:
    return merge(outputs_m, w_u_m)


def merge_shared(outputs_r, outputs_o, w_s: Tensor) -> tuple[Tensor, Tensor]:
    return merge(outputs_r, w_s), merge(outputs_o, w_s)


def router_decorrelation_loss(w: RouterWeights) -> Tensor:
    """``<w_u_r, w_s> + <w_u_o, w_s>``, batch-averaged."""
    per = dc.sum(w.w_u_r * w.w_s, axis=-1) + dc.sum(w.w_u_o * w.w_s, axis=-1)
    return dc.mean(per)


@dataclass
class ClassWeightBank:
    """Per-class source statistics of concatenated router weights for one site.

    Default mode is an exponential moving average (first observation sets the
    mean); ``exact=True`` keeps the plain mean of every observation.
    """
    n_classes: int
    width: int
    momentum: float = 0.9
    exact: bool = False
    means: np.ndarray = field(init=False)
    counts: np.ndarray = field(init=False)
    cold_hits: int = field(init=False, default=0)

    def __post_init__(self):
        self.means = np.zeros((self.n_classes, self.width))
        self.counts = np.zeros(self.n_classes, dtype=np.int64)

    def observe(self, w: np.ndarray, label: int) -> None:
        w = np.asarray(w, dtype=np.float64).reshape(-1)
        if w.shape[0] != self.width:
            raise DimensionError(f"bank width {self.width}, got weights of length {w.shape[0]}")
        c = int(label)
        if self.counts[c] == 0:
            self.means[c] = w
        elif self.exact:
            self.means[c] += (w - self.means[c]) / (self.counts[c] + 1)
        else:
            self.means[c] = self.momentum * self.means[c] + (1.0 - self.momentum) * w
        self.counts[c] += 1

    def state(self) -> dict[str, np.ndarray]:
        return {"means": self.means.copy(), "counts": self.counts.astype(np.float64),
                "cold_hits": np.array([float(self.cold_hits)])}

    def load_state(self, st: dict[str, np.ndarray]) -> None:
        self.means = np.array(st["means"], dtype=np.float64)
        self.counts = np.asarray(st["counts"]).astype(np.int64)
        self.cold_hits = int(np.asarray(st["cold_hits"]).reshape(-1)[0])


def update_class_bank(bank: ClassWeightBank, w_source, label) -> None:
    """Record source weights (detached); batched input is observed row by row in order."""
    arr = w_source.numpy() if isinstance(w_source, RouterWeights) else np.asarray(w_source)
    arr = arr.reshape(-1, bank.width)
    labels = np.atleast_1d(np.asarray(label))
    if labels.shape[0] != arr.shape[0]:
        raise DimensionError(f"{arr.shape[0]} weight rows vs {labels.shape[0]} labels")
    for row, y in zip(arr, labels):
        bank.observe(row, int(y))


def activation_consistency_loss(w_target: RouterWeights, label, bank: ClassWeightBank) -> Tensor:
    """Squared distance between target weights and the stored source class mean.

    Rows whose class has no source observation contribute 0 and bump
    ``bank.cold_hits``. The result is averaged over all target rows.
    """
    cat = w_target.concat()
    if cat.ndim == 1:
        cat = dc.reshape(cat, (1, cat.shape[0]))
    labels = np.atleast_1d(np.asarray(label)).astype(np.int64)
    if labels.shape[0] != cat.shape[0]:
        raise DimensionError(f"{cat.shape[0]} target rows vs {labels.shape[0]} labels")
    warm = bank.counts[labels] > 0
    bank.cold_hits += int((~warm).sum())
    ref = bank.means[labels] * warm[:, None]
    diff = (cat - ref) * warm[:, None].astype(np.float64)
    return dc.mean(dc.squared_norm(diff))

