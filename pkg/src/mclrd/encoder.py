"""Per-modality Transformer base model.

Layer ``l``: ``z = MSA(LN(f)) + f`` then ``f' = MLP(LN(z)) + z``. The
decomposers reuse ``z`` and the residual-free MLP sub-path, so both are
exposed separately from the full layer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .config import ModelConfig
from .diffcore import DimensionError, Tensor


class ParamModule:
    """Flat name -> Tensor parameter store with freeze support."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.frozen = False

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = dc.parameter(value, name=name)
        t.requires_grad = not self.frozen
        self.params[name] = t
        return t

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + k: v for k, v in self.params.items()}

    def trainable(self) -> list[Tensor]:
        return [p for p in self.params.values() if p.requires_grad]

    def freeze(self) -> None:
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    def unfreeze(self) -> None:
        self.frozen = False
        for p in self.params.values():
            p.requires_grad = True


@dataclass
class EncoderLayerParams:
    W_q: Tensor  # (H, d, d_h)
    W_k: Tensor
    W_v: Tensor
    W_o: Tensor  # (d, d), rows ordered head-major
    b_o: Tensor
    W_1: Tensor
    b_1: Tensor
    W_2: Tensor
    b_2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    @property
    def heads(self) -> int:
        return self.W_q.shape[0]


def attention_weights(x: Tensor, layer: EncoderLayerParams) -> Tensor:
    """Per-head attention matrices ``(..., H, T, T)`` for an already normalized input."""
    xh = dc.reshape(x, x.shape[:-2] + (1,) + x.shape[-2:])
    q = xh @ layer.W_q
    k = xh @ layer.W_k
    d_h = layer.W_q.shape[-1]
    return dc.softmax(dc.scale(q @ dc.transpose(k), 1.0 / np.sqrt(d_h)), axis=-1)


def msa(x: Tensor, layer: EncoderLayerParams) -> Tensor:
    H, d, d_h = layer.W_q.shape
    if x.shape[-1] != d:
        raise DimensionError(f"MSA expects feature dim {d}, got input {x.shape}")
    att = attention_weights(x, layer)
    xh = dc.reshape(x, x.shape[:-2] + (1,) + x.shape[-2:])
    heads = att @ (xh @ layer.W_v)  # (..., H, T, d_h)
    w_o = dc.reshape(layer.W_o, (H, d_h, d))
    return dc.sum(heads @ w_o, axis=-3) + layer.b_o


def msa_forward(f_prev: Tensor, layer: EncoderLayerParams) -> Tensor:
    """``z = MSA(LN(f_prev)) + f_prev``."""
    return msa(dc.layer_norm(f_prev, layer.ln1_g, layer.ln1_b), layer) + f_prev


def mlp_path(z: Tensor, layer: EncoderLayerParams) -> Tensor:
    """LN -> W_1 -> GELU -> W_2, without the residual."""
    if z.shape[-1] != layer.W_1.shape[0]:
        raise DimensionError(f"MLP expects feature dim {layer.W_1.shape[0]}, got {z.shape}")
    h = dc.gelu(dc.layer_norm(z, layer.ln2_g, layer.ln2_b) @ layer.W_1 + layer.b_1)
    return h @ layer.W_2 + layer.b_2


def mlp_forward(z: Tensor, layer: EncoderLayerParams) -> Tensor:
    return mlp_path(z, layer) + z


def sinusoidal_positions(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class Encoder(ParamModule):
    """Input projection followed by ``L`` Transformer layers for one modality."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        std, d, H, dh = cfg.init_std, cfg.d, cfg.H, cfg.d_head
        self.add_param("W_in", rng.normal(0.0, std, (cfg.d_in, d)))
        self.add_param("b_in", np.zeros((1, d)))
        for l in range(cfg.L):
            p = f"layer{l}."
            for nm in ("W_q", "W_k", "W_v"):
                self.add_param(p + nm, rng.normal(0.0, std, (H, d, dh)))
            # heads get floor(d / H) dims each; W_o maps their concatenation back to d
            self.add_param(p + "W_o", rng.normal(0.0, std, (H * dh, d)))
            self.add_param(p + "b_o", np.zeros((1, d)))
            self.add_param(p + "W_1", rng.normal(0.0, std, (d, cfg.d_ff)))
            self.add_param(p + "b_1", np.zeros((1, cfg.d_ff)))
            self.add_param(p + "W_2", rng.normal(0.0, std, (cfg.d_ff, d)))
            self.add_param(p + "b_2", np.zeros((1, d)))
            for ln in ("ln1", "ln2"):
                self.add_param(p + ln + "_g", np.ones((1, d)))
                self.add_param(p + ln + "_b", np.zeros((1, d)))
        self._pos = sinusoidal_positions(cfg.T, d) if cfg.positional_encoding else None

    def layer(self, l: int) -> EncoderLayerParams:
        p = f"layer{l}."
        return EncoderLayerParams(**{nm: self.params[p + nm] for nm in EncoderLayerParams.__annotations__})

    def project(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.cfg.d_in:
            raise DimensionError(f"encoder expects d_in={self.cfg.d_in}, got {x.shape}")
        f = x @ self.params["W_in"] + self.params["b_in"]
        if self._pos is not None:
            f = f + self._pos[: x.shape[-2]]
        return f

    def forward(self, x: Tensor) -> Tensor:
        f = self.project(dc.as_tensor(x))
        for l in range(self.cfg.L):
            layer = self.layer(l)
            f = mlp_forward(msa_forward(f, layer), layer)
        return f
