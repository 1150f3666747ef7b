"""Base models and the decomposed adaptation model built on top of them.

Stream wiring per layer ``l``:

* layer 0 starts from one projected sequence per modality; its clip site
  decomposes that single stream and splits it into unique and shared streams.
* every later site carries two streams per modality. Each stream goes
  through its own decomposer evaluation; the unique stream is merged with
  the unique weights routed from the unique pair, the shared stream with the
  shared weights routed from the shared pair.
* the residual is added once after each merge.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .config import ModelConfig
from .decomposers import DecomposerBank, decompose_all, decomposer_decorrelation_loss
from .diffcore import Tensor
from .encoder import Encoder, mlp_path, msa_forward
from .heads import ClassifierParams, DiscriminatorParams, LinearHead, aggregate_predictions, classify, fuse_shared
from .routers import ClassWeightBank, RouterWeights, SubRouterParams, merge, route

LEVELS = ("clip", "video")


class BaseModel:
    """Two frozen-able encoders plus the per-modality heads used for pretraining."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.enc = {"r": Encoder(cfg, rng), "o": Encoder(cfg, rng)}
        self.pre_head = {m: LinearHead(cfg.d, cfg.C, rng, cfg.init_std) for m in ("r", "o")}

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for m in ("r", "o"):
            out.update(self.enc[m].named_parameters(f"enc_{m}."))
            out.update(self.pre_head[m].named_parameters(f"pre_{m}."))
        return out

    def freeze(self) -> None:
        for m in ("r", "o"):
            self.enc[m].freeze()
            self.pre_head[m].freeze()

    @property
    def frozen(self) -> bool:
        return all(self.enc[m].frozen for m in ("r", "o"))

    def logits(self, x_r, x_o) -> tuple[Tensor, Tensor]:
        f_r = self.enc["r"].forward(dc.as_tensor(x_r))
        f_o = self.enc["o"].forward(dc.as_tensor(x_o))
        return (self.pre_head["r"](dc.mean_pool(f_r)), self.pre_head["o"](dc.mean_pool(f_o)))

    def predict(self, x_r, x_o) -> np.ndarray:
        with dc.no_grad():
            lr, lo = self.logits(x_r, x_o)
        return np.atleast_1d(aggregate_predictions(lr, lo))


@dataclass
class SiteRecord:
    layer: int
    level: str
    # stream -> (E_r, E_o), each stacked (B, N, T, d)
    outputs: dict[str, tuple[Tensor, Tensor]]
    weights: RouterWeights

    @property
    def key(self) -> str:
        return f"l{self.layer}.{self.level}"

    def decorrelation(self) -> Tensor:
        parts = [decomposer_decorrelation_loss(er, eo) for er, eo in self.outputs.values()]
        total = parts[0]
        for p in parts[1:]:
            total = total + p
        return dc.scale(total, 1.0 / len(parts))


@dataclass
class ForwardOut:
    f_u_r: Tensor
    f_u_o: Tensor
    f_s_r: Tensor
    f_s_o: Tensor
    f_s: Tensor
    logits: dict[str, Tensor]
    sites: list[SiteRecord] = field(default_factory=list)

    def streams(self) -> dict[str, Tensor]:
        return {"u_r": self.f_u_r, "u_o": self.f_u_o, "s": self.f_s}


class MCLRD:
    """Decomposer banks, routers, heads and discriminators over frozen base models."""

    def __init__(self, base: BaseModel, seed: int = 0, toggles: dict[str, bool] | None = None):
        self.base = base
        base.freeze()
        cfg = self.cfg = base.cfg
        rng = np.random.default_rng(seed)
        self.banks: dict[str, DecomposerBank] = {}
        self.routers: dict[str, SubRouterParams] = {}
        self.class_banks: dict[str, ClassWeightBank] = {}
        for l in range(cfg.L):
            for level in LEVELS:
                key = f"l{l}.{level}"
                N = cfg.N_c if level == "clip" else cfg.N_v
                self.banks[key] = DecomposerBank(level, N, cfg.d, cfg.T, cfg.d_ra, rng, cfg.init_std)
                self.routers[key] = SubRouterParams(cfg.d, N, rng, cfg.init_std)
                self.class_banks[key] = ClassWeightBank(cfg.C, 3 * N, cfg.ema_momentum, cfg.exact_source_mean)
        self.classifier = ClassifierParams(cfg.d, cfg.C, rng, cfg.init_std)
        self.disc = DiscriminatorParams(cfg.d, cfg.disc_width, rng, cfg.init_std)
        self.toggles = dict(toggles or {"ldd": True, "lrd": True, "lac": True, "lada": True})

    # parameters ----------------------------------------------------------

    def trainable_named(self) -> dict[str, Tensor]:
        out = {}
        for key in self.banks:
            out.update(self.banks[key].named_parameters(f"bank.{key}."))
            out.update(self.routers[key].named_parameters(f"router.{key}."))
        out.update(self.classifier.named_parameters("cls."))
        out.update(self.disc.named_parameters("disc."))
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.base.named_parameters()
        out.update(self.trainable_named())
        return out

    def trainable(self) -> list[Tensor]:
        return [p for p in self.trainable_named().values() if p.requires_grad]

    # forward -------------------------------------------------------------

    def forward(self, x_r, x_o) -> ForwardOut:
        enc = self.base.enc
        f = {m: enc[m].project(dc.as_tensor(x)) for m, x in (("r", x_r), ("o", x_o))}
        unique, shared = dict(f), dict(f)
        single = True
        sites: list[SiteRecord] = []
        for l in range(self.cfg.L):
            layers = {m: enc[m].layer(l) for m in ("r", "o")}
            zu = {m: msa_forward(unique[m], layers[m]) for m in ("r", "o")}
            zs = zu if single else {m: msa_forward(shared[m], layers[m]) for m in ("r", "o")}
            for level in LEVELS:
                unique, shared, rec = self._site(f"l{l}.{level}", l, level, zu, zs, single, layers)
                sites.append(rec)
                zu, zs = unique, shared
                single = False
        f_s = fuse_shared(shared["r"], shared["o"])
        heads = self.classifier.heads
        logits = {
            "u_r": classify(unique["r"], heads["u_r"]),
            "u_o": classify(unique["o"], heads["u_o"]),
            "s": classify(f_s, heads["s"]),
        }
        return ForwardOut(unique["r"], unique["o"], shared["r"], shared["o"], f_s, logits, sites)

    def _site(self, key, l, level, zu, zs, single, layers):
        bank, router = self.banks[key], self.routers[key]

        def outputs(z):
            return {m: decompose_all(z[m], bank, m, mlp_path(z[m], layers[m])) for m in ("r", "o")}

        Eu = outputs(zu)
        wu = route(zu["r"], zu["o"], router)
        if single:
            Es, ws = Eu, wu
            recorded = {"single": (Eu["r"], Eu["o"])}
        else:
            Es = outputs(zs)
            ws = route(zs["r"], zs["o"], router)
            recorded = {"unique": (Eu["r"], Eu["o"]), "shared": (Es["r"], Es["o"])}
        new_u = {
            "r": merge(Eu["r"], wu.w_u_r) + zu["r"],
            "o": merge(Eu["o"], wu.w_u_o) + zu["o"],
        }
        new_s = {m: merge(Es[m], ws.w_s) + zs[m] for m in ("r", "o")}
        eff = RouterWeights(wu.w_u_r, wu.w_u_o, ws.w_s)
        return new_u, new_s, SiteRecord(l, level, recorded, eff)

    def predict(self, x_r, x_o) -> np.ndarray:
        with dc.no_grad():
            out = self.forward(x_r, x_o)
        lg = out.logits
        return np.atleast_1d(aggregate_predictions(lg["u_r"], lg["u_o"], lg["s"]))

    def pooled_streams(self, x_r, x_o) -> dict[str, np.ndarray]:
        with dc.no_grad():
            out = self.forward(x_r, x_o)
        return {k: dc.mean_pool(v).data for k, v in out.streams().items()}
