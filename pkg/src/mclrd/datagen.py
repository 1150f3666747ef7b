"""Synthetic multimodal clip features, feature-file IO, and k-shot splits.

Each synthetic sample draws class-conditioned latent factors. Shared factors
are embedded into both modalities, unique factors into one. Target-domain
samples translate factor ``j`` by ``shift_per_factor[j]`` along a fixed
random unit direction before embedding. A per-class sinusoidal envelope
modulates every factor over the clip axis, so clip order carries class
information.

Binary feature file: ``b"MCLR"``, then little-endian u32 version, T, d,
followed by a row-major float32 ``T x d`` payload. The manifest is a CSV
table with columns ``id, rgb_path, flow_path, label, domain``.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError

MAGIC = b"MCLR"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")
MANIFEST_COLUMNS = ("id", "rgb_path", "flow_path", "label", "domain")
DOMAINS = ("source", "target")


class LoadError(ValueError):
    pass


class SamplingError(ValueError):
    pass


@dataclass
class MultimodalSample:
    id: str
    rgb: np.ndarray
    flow: np.ndarray
    label: int
    domain: str

    def __post_init__(self):
        if self.rgb.shape[0] != self.flow.shape[0]:
            raise LoadError(f"sample {self.id}: rgb T={self.rgb.shape[0]} but flow T={self.flow.shape[0]}")
        if self.domain not in DOMAINS:
            raise LoadError(f"sample {self.id}: unknown domain {self.domain!r}")


@dataclass
class DatasetSplit:
    source_train: list[MultimodalSample]
    target_train: list[MultimodalSample]
    target_test: list[MultimodalSample]
    C: int
    k: int
    # held-out source samples for shift analysis; may be empty
    source_test: list[MultimodalSample] = field(default_factory=list)

    def check(self) -> None:
        counts = np.bincount([s.label for s in self.target_train], minlength=self.C)
        if self.target_train and not np.all(counts == self.k):
            raise SamplingError(f"target_train per-class counts {counts.tolist()} != k={self.k}")
        overlap = {s.id for s in self.target_train} & {s.id for s in self.target_test}
        if overlap:
            raise SamplingError(f"target train/test overlap: {sorted(overlap)[:5]}")


@dataclass
class SynthConfig:
    C: int = 5
    T: int = 12
    d_in: int = 64
    n_shared_factors: int = 2
    n_rgb_factors: int = 2
    n_flow_factors: int = 2
    shift_per_factor: list[float] = field(default_factory=lambda: [0.0] * 6)
    noise_sigma: float = 1.0
    seed: int = 0
    factor_dim: int = 4
    class_sep: float = 0.7
    within_std: float = 1.0
    envelope_amp: float = 0.5
    n_source_per_class: int = 40
    n_source_test_per_class: int = 20
    n_target_per_class: int = 30
    k: int = 5

    @property
    def n_factors(self) -> int:
        return self.n_shared_factors + self.n_rgb_factors + self.n_flow_factors

    def factor_kinds(self) -> list[str]:
        return (["shared"] * self.n_shared_factors + ["rgb"] * self.n_rgb_factors
                + ["flow"] * self.n_flow_factors)

    def validate(self) -> None:
        if self.C < 2 or self.T < 2:
            raise ConfigError(f"need C >= 2 and T >= 2, got C={self.C}, T={self.T}")
        if min(self.n_shared_factors, self.n_rgb_factors, self.n_flow_factors) < 1:
            raise ConfigError("every factor group needs at least one factor")
        if len(self.shift_per_factor) != self.n_factors:
            raise ConfigError(f"shift_per_factor has {len(self.shift_per_factor)} entries, "
                              f"expected {self.n_factors}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.n_target_per_class < self.k + 1:
            raise ConfigError(f"C*k={self.C * self.k} exceeds the generated target pool "
                              f"({self.n_target_per_class} per class leaves no test samples)")


def preset(name: str, **kw) -> SynthConfig:
    """Named shift layouts over (shared, rgb-unique, flow-unique) factor groups."""
    cfg = SynthConfig(**kw)
    groups = {
        "zero-shift": (0.0, 0.0, 0.0),
        "shift-rgb": (0.0, 6.0, 0.0),
        "shift-shared": (5.0, 0.0, 0.0),
        "mixed": (2.5, 7.5, 3.75),
    }
    if name not in groups:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(groups)}")
    g = dict(zip(("shared", "rgb", "flow"), groups[name]))
    if "shift_per_factor" not in kw:
        cfg.shift_per_factor = [g[kind] for kind in cfg.factor_kinds()]
    return cfg


PRESETS = ("zero-shift", "shift-rgb", "shift-shared", "mixed")


class _World:
    """Fixed random structure shared by both domains (class means, maps, envelopes)."""

    def __init__(self, cfg: SynthConfig, rng: np.random.Generator):
        F, fd = cfg.n_factors, cfg.factor_dim
        self.kinds = cfg.factor_kinds()
        self.class_means = rng.normal(0.0, cfg.class_sep, (F, cfg.C, fd))
        dirs = rng.normal(size=(F, fd))
        self.shift_dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        scale = 1.0 / np.sqrt(fd)
        self.embed_r = rng.normal(0.0, scale, (F, fd, cfg.d_in))
        self.embed_o = rng.normal(0.0, scale, (F, fd, cfg.d_in))
        t = np.arange(cfg.T) / cfg.T
        freq = rng.integers(1, 3, size=(cfg.C, F))
        phase = rng.uniform(0.0, 2 * np.pi, size=(cfg.C, F))
        # (C, F, T)
        self.envelope = 1.0 + cfg.envelope_amp * np.sin(2 * np.pi * freq[..., None] * t + phase[..., None])


def _draw(cfg: SynthConfig, world: _World, rng: np.random.Generator, label: int, target: bool):
    F = cfg.n_factors
    factors = world.class_means[:, label] + rng.normal(0.0, cfg.within_std, (F, cfg.factor_dim))
    if target:
        factors = factors + np.asarray(cfg.shift_per_factor)[:, None] * world.shift_dirs
    env = world.envelope[label]  # (F, T)
    rgb = np.zeros((cfg.T, cfg.d_in))
    flow = np.zeros((cfg.T, cfg.d_in))
    for j, kind in enumerate(world.kinds):
        seq = env[j][:, None] * factors[j][None, :]  # (T, fd)
        if kind in ("shared", "rgb"):
            rgb += seq @ world.embed_r[j]
        if kind in ("shared", "flow"):
            flow += seq @ world.embed_o[j]
    if cfg.noise_sigma > 0:
        rgb += rng.normal(0.0, cfg.noise_sigma, rgb.shape)
        flow += rng.normal(0.0, cfg.noise_sigma, flow.shape)
    return rgb, flow


def generate_pools(cfg: SynthConfig):
    """Source train, source test and full target pool, before the k-shot split."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    world = _World(cfg, rng)

    def make(prefix: str, per_class: int, target: bool):
        out = []
        for i in range(per_class * cfg.C):
            label = i % cfg.C
            rgb, flow = _draw(cfg, world, rng, label, target)
            out.append(MultimodalSample(f"{prefix}-{i:05d}", rgb, flow, label,
                                        "target" if target else "source"))
        return out

    src = make("src", cfg.n_source_per_class, False)
    src_test = make("srctest", cfg.n_source_test_per_class, False)
    tgt = make("tgt", cfg.n_target_per_class, True)
    return src, src_test, tgt


def generate_synthetic(cfg: SynthConfig) -> DatasetSplit:
    src, src_test, tgt = generate_pools(cfg)
    train, test = sample_kshot(tgt, cfg.k, cfg.seed)
    split = DatasetSplit(src, train, test, cfg.C, cfg.k, src_test)
    split.check()
    return split


def sample_kshot(pool: Sequence[MultimodalSample], k: int, seed: int):
    """Exactly ``k`` samples per class for training, the rest for testing."""
    if k < 1:
        raise SamplingError(f"k must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for idx, s in enumerate(pool):
        by_class.setdefault(s.label, []).append(idx)
    train_idx: set[int] = set()
    for c in sorted(by_class):
        members = by_class[c]
        if len(members) < k + 1:
            raise SamplingError(f"class {c} has {len(members)} samples; k={k} needs at least {k + 1}")
        chosen = rng.choice(len(members), size=k, replace=False)
        train_idx.update(members[i] for i in chosen)
    train = [s for i, s in enumerate(pool) if i in train_idx]
    test = [s for i, s in enumerate(pool) if i not in train_idx]
    return train, test


# files ---------------------------------------------------------------------


def write_feature_file(path: str | Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"feature array must be T x d, got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes(order="C"))


def read_feature_file(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"missing feature file {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise LoadError(f"{path}: truncated header")
    magic, version, T, d = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise LoadError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise LoadError(f"{path}: unsupported version {version}")
    payload = raw[_HEADER.size:]
    if len(payload) != 4 * T * d:
        raise LoadError(f"{path}: payload holds {len(payload)} bytes, header says {T}x{d}")
    return np.frombuffer(payload, dtype="<f4").reshape(T, d).astype(np.float64)


def write_manifest(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({c: r[c] for c in MANIFEST_COLUMNS})


def save_dataset(split: DatasetSplit, out_dir: str | Path) -> Path:
    """Write every sample as two feature files plus ``manifest.csv``.

    The domain column uses ``source``, ``source_test``, ``target_train`` and
    ``target_test`` so the split survives a round trip.
    """
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rows = []
    groups = (("source", split.source_train), ("source_test", split.source_test),
              ("target_train", split.target_train), ("target_test", split.target_test))
    for tag, samples in groups:
        for s in samples:
            rp = Path("features") / f"{s.id}.rgb.bin"
            fp = Path("features") / f"{s.id}.flow.bin"
            write_feature_file(out / rp, s.rgb)
            write_feature_file(out / fp, s.flow)
            rows.append({"id": s.id, "rgb_path": rp.as_posix(), "flow_path": fp.as_posix(),
                         "label": s.label, "domain": tag})
    manifest = out / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest


_DOMAIN_TAGS = {
    "source": ("source", "source_train"),
    "source_train": ("source", "source_train"),
    "source_test": ("source", "source_test"),
    "target": ("target", "target_pool"),
    "target_train": ("target", "target_train"),
    "target_test": ("target", "target_test"),
}


def load_features(manifest_path: str | Path, C: int | None = None, k: int | None = None,
                  seed: int = 0) -> DatasetSplit:
    """Load a manifest into a split.

    Rows tagged plain ``target`` form a pool that is split with
    :func:`sample_kshot` (``k`` required). ``C`` defaults to ``max label + 1``.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise LoadError(f"missing manifest {manifest_path}")
    base = manifest_path.parent
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise LoadError(f"{manifest_path}: missing columns {sorted(missing)}")
        rows = list(reader)
    if not rows:
        raise LoadError(f"{manifest_path}: empty dataset")
    buckets: dict[str, list[MultimodalSample]] = {v[1]: [] for v in _DOMAIN_TAGS.values()}
    shape = None
    for row in rows:
        sid = row["id"]
        tag = row["domain"].strip()
        if tag not in _DOMAIN_TAGS:
            raise LoadError(f"sample {sid}: unknown domain {tag!r}")
        try:
            label = int(row["label"])
        except ValueError:
            raise LoadError(f"sample {sid}: unknown label {row['label']!r}") from None
        if label < 0 or (C is not None and label >= C):
            raise LoadError(f"sample {sid}: unknown label {label}")
        rgb = read_feature_file(base / row["rgb_path"])
        flow = read_feature_file(base / row["flow_path"])
        if rgb.shape != flow.shape:
            raise LoadError(f"sample {sid}: shape mismatch rgb {rgb.shape} vs flow {flow.shape}")
        if shape is None:
            shape = rgb.shape
        elif rgb.shape != shape:
            raise LoadError(f"sample {sid}: shape {rgb.shape} differs from {shape}")
        dom, bucket = _DOMAIN_TAGS[tag]
        buckets[bucket].append(MultimodalSample(sid, rgb, flow, label, dom))
    n_classes = C if C is not None else 1 + max(int(r["label"]) for r in rows)
    train, test = buckets["target_train"], buckets["target_test"]
    if buckets["target_pool"]:
        if k is None:
            raise LoadError("manifest has an unsplit target pool; pass k")
        t2, te2 = sample_kshot(buckets["target_pool"], k, seed)
        train, test = train + t2, test + te2
    if k is None:
        counts = np.bincount([s.label for s in train], minlength=n_classes) if train else np.zeros(1, int)
        k = int(counts.max()) if train else 0
    split = DatasetSplit(buckets["source_train"], train, test, n_classes, k, buckets["source_test"])
    return split


def stack_batch(samples: Sequence[MultimodalSample]):
    """``(x_r, x_o, labels, domains)`` arrays; domain 0 = source, 1 = target."""
    x_r = np.stack([s.rgb for s in samples])
    x_o = np.stack([s.flow for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    domains = np.array([0 if s.domain == "source" else 1 for s in samples], dtype=np.int64)
    return x_r, x_o, labels, domains
