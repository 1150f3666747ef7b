"""Clip- and video-level low-rank decomposer banks with progressive sharing.

Decomposer ``i`` of modality ``m`` mixes its own low-rank pair with the
cross-modal pair ``(B_hat, A_hat)`` using ``alpha_i = (N - i) / (N - 1)``:
``i = 1`` is purely modality-specific, ``i = N`` purely shared.

Clip level:  ``E_i(z) = z B_mix A_mix + MLP(z)``           (mixes features)
Video level: ``E_i(z) = (z^T B_mix A_mix^T)^T + MLP(z)``   (mixes clips)
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .config import ConfigError
from .diffcore import DimensionError, Tensor
from .encoder import ParamModule

MODALITIES = ("r", "o")


def alpha_schedule(N: int) -> np.ndarray:
    if N < 2:
        raise ConfigError(f"progressive sharing needs N >= 2, got {N}")
    i = np.arange(1, N + 1, dtype=np.float64)
    return (N - i) / (N - 1)


def _check_modality(m: str) -> None:
    if m not in MODALITIES:
        raise ValueError(f"modality must be one of {MODALITIES}, got {m!r}")


class DecomposerBank(ParamModule):
    """``N`` decomposer pairs for one (layer, level) site.

    Clip banks hold ``B: (N, d, d_ra)`` and ``A: (N, d_ra, d)``; video banks
    hold ``B, A: (N, T, d_ra)``. Each decomposer index owns its own
    modality-specific and shared matrices.
    """

    def __init__(self, level: str, N: int, d: int, T: int, d_ra: int,
                 rng: np.random.Generator, init_std: float = 0.02):
        super().__init__()
        if level not in ("clip", "video"):
            raise ValueError(f"level must be 'clip' or 'video', got {level!r}")
        self.level = level
        self.N = N
        self.alpha = alpha_schedule(N)
        self.d, self.T, self.d_ra = d, T, d_ra
        if level == "clip":
            b_shape, a_shape = (N, d, d_ra), (N, d_ra, d)
        else:
            b_shape, a_shape = (N, T, d_ra), (N, T, d_ra)
        for tag in ("r", "o", "hat"):
            self.add_param(f"B_{tag}", np.zeros(b_shape))
            self.add_param(f"A_{tag}", rng.normal(0.0, init_std, a_shape))

    def mixed(self, modality: str) -> tuple[Tensor, Tensor]:
        """Stacked ``(B_mix, A_mix)`` for every decomposer index."""
        _check_modality(modality)
        a = self.alpha.reshape(-1, 1, 1)
        B = self.params[f"B_{modality}"] * a + self.params["B_hat"] * (1.0 - a)
        A = self.params[f"A_{modality}"] * a + self.params["A_hat"] * (1.0 - a)
        return B, A

    def mixed_one(self, modality: str, i: int) -> tuple[Tensor, Tensor]:
        _check_modality(modality)
        if not 1 <= i <= self.N:
            raise IndexError(f"decomposer index {i} outside 1..{self.N}")
        a = float(self.alpha[i - 1])
        B = dc.take(self.params[f"B_{modality}"], i - 1) * a + dc.take(self.params["B_hat"], i - 1) * (1.0 - a)
        A = dc.take(self.params[f"A_{modality}"], i - 1) * a + dc.take(self.params["A_hat"], i - 1) * (1.0 - a)
        return B, A

    def delta_all(self, z: Tensor, modality: str) -> Tensor:
        """Low-rank terms of all ``N`` decomposers, shape ``(..., N, T, d)``."""
        B, A = self.mixed(modality)
        return self._delta(z, B, A, stacked=True)

    def delta_one(self, z: Tensor, modality: str, i: int) -> Tensor:
        B, A = self.mixed_one(modality, i)
        return self._delta(z, B, A, stacked=False)

    def _delta(self, z: Tensor, B: Tensor, A: Tensor, stacked: bool) -> Tensor:
        if self.level == "clip":
            if z.shape[-1] != self.d:
                raise DimensionError(f"clip bank expects d={self.d}, got z {z.shape}")
            if stacked:
                z = dc.reshape(z, z.shape[:-2] + (1,) + z.shape[-2:])
            return (z @ B) @ A
        if z.shape[-2] != self.T:
            raise DimensionError(f"video bank built for T={self.T}, got z {z.shape}")
        if stacked:
            z = dc.reshape(z, z.shape[:-2] + (1,) + z.shape[-2:])
        # (z^T B A^T)^T == A B^T z : a rank-d_ra T x T clip-mixing matrix
        return (A @ dc.transpose(B)) @ z


def decompose_all(z: Tensor, bank: DecomposerBank, modality: str, mlp_term: Tensor) -> Tensor:
    """Every decomposer output at once, ``(..., N, T, d)``; ``mlp_term`` is ``MLP(z)``."""
    m = dc.reshape(mlp_term, mlp_term.shape[:-2] + (1,) + mlp_term.shape[-2:])
    return bank.delta_all(z, modality) + m


def clip_decompose(z: Tensor, bank: DecomposerBank, modality: str, i: int,
                   mlp: Callable[[Tensor], Tensor]) -> Tensor:
    if bank.level != "clip":
        raise ValueError("clip_decompose needs a clip-level bank")
    return bank.delta_one(z, modality, i) + mlp(z)


def video_decompose(z: Tensor, bank: DecomposerBank, modality: str, i: int,
                    mlp: Callable[[Tensor], Tensor]) -> Tensor:
    if bank.level != "video":
        raise ValueError("video_decompose needs a video-level bank")
    return bank.delta_one(z, modality, i) + mlp(z)


def stack(outputs: Sequence[Tensor], axis: int = -3) -> Tensor:
    """Stack equally shaped tensors along a new axis (default: decomposer axis)."""
    parts = []
    for o in outputs:
        ax = axis % (o.ndim + 1)
        parts.append(dc.reshape(o, o.shape[:ax] + (1,) + o.shape[ax:]))
    return dc.concat(parts, axis=axis)


def pairwise_cosine_sum(outputs: Tensor) -> Tensor:
    """Sum of ``cos(E_i, E_j)`` over ``i < j`` per sample; input ``(..., N, T, d)``."""
    N = outputs.shape[-3]
    flat = dc.reshape(outputs, outputs.shape[:-3] + (N, outputs.shape[-2] * outputs.shape[-1]))
    cos = dc.cosine_matrix(flat)
    upper = np.triu(np.ones((N, N)), k=1)
    return dc.sum(dc.sum(cos * upper, axis=-1), axis=-1)


def decomposer_decorrelation_loss(outputs_r, outputs_o) -> Tensor:
    """Cosine decorrelation summed over both modalities and all pairs, batch-averaged.

    Each argument is a list of ``N`` outputs or a stacked ``(..., N, T, d)`` tensor.
    """
    per_mod = []
    for outs in (outputs_r, outputs_o):
        if not isinstance(outs, Tensor):
            outs = stack(list(outs))
        per_mod.append(outs)
    if per_mod[0].shape != per_mod[1].shape:
        raise DimensionError(f"modalities disagree: {per_mod[0].shape} vs {per_mod[1].shape}")
    per_sample = pairwise_cosine_sum(per_mod[0]) + pairwise_cosine_sum(per_mod[1])
    return dc.mean(per_sample)
