"""Command line: gen, pretrain, adapt, eval, analyze, gradcheck.

Exit codes: 0 success, 1 failed check, 2 usage or config error, 3 missing
input, 4 non-finite loss.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__, checkpoint
from .analysis import analyze_decomposed_shift, write_shift_csv
from .config import (
    ConfigError,
    ModelConfig,
    TrainConfig,
    config_hash,
    field_names,
    from_dict,
    merge_overrides,
    read_flat,
    to_dict,
)
from .datagen import PRESETS, DatasetSplit, LoadError, SynthConfig, generate_synthetic, load_features, preset, \
    sample_kshot, save_dataset
from .gradcheck import suite
from .pipeline import LOSS_NAMES, NonFiniteLoss, StateError, adapt, evaluate, per_class_accuracy, pretrain

log = logging.getLogger("mclrd")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3, 4
METRIC_COLUMNS = ("step",) + LOSS_NAMES + ("total",)
# model keys that may still change once the encoders are trained
ADAPT_MODEL_KEYS = {"lambda_ada", "lambda_schedule", "disc_hidden", "ema_momentum", "exact_source_mean", "init_std"}


class MissingInput(FileNotFoundError):
    pass


# helpers --------------------------------------------------------------------


def artifact_version() -> str:
    """Package version plus a short digest of the installed sources."""
    h = hashlib.sha1()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:10]}"


def _split_config(path) -> dict[str, dict]:
    """Route flat config keys to the dataclass that owns them."""
    if path is None:
        return {"synth": {}, "model": {}, "train": {}}
    if not Path(path).exists():
        raise MissingInput(f"config file {path} not found")
    data = read_flat(path)
    owners = {"synth": field_names(SynthConfig), "model": field_names(ModelConfig),
              "train": field_names(TrainConfig)}
    out = {k: {} for k in owners}
    for key, val in data.items():
        hits = [o for o, names in owners.items() if key in names]
        if not hits:
            raise ConfigError(f"unknown config key {key!r}")
        for o in hits:
            out[o][key] = val
    return out


def _manifest_path(data) -> Path:
    p = Path(data)
    if p.is_dir():
        p = p / "manifest.csv"
    if not p.exists():
        raise MissingInput(f"no dataset manifest at {p}")
    return p


def _load_split(args, C=None) -> DatasetSplit:
    split = load_features(_manifest_path(args.data), C=C, k=args.k, seed=args.seed)
    if args.k is not None and split.k != args.k:
        pool = split.target_train + split.target_test
        train, test = sample_kshot(pool, args.k, args.seed)
        split = DatasetSplit(split.source_train, train, test, split.C, args.k, split.source_test)
    return split


def _ckpt(path):
    if path is None or not Path(path).exists():
        raise MissingInput(f"checkpoint {path} not found")
    return checkpoint.load(path)


def _write_run_manifest(out_dir: Path, command: str, cfgs, seed, inputs, outputs, t0) -> None:
    doc = {
        "command": command,
        "config_hash": config_hash(*cfgs) if cfgs else None,
        "seed": seed,
        "artifact_version": artifact_version(),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "wall_time_s": round(time.time() - t0, 3),
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


class _MetricsWriter:
    def __init__(self, path: Path):
        self.fh = path.open("w", newline="")
        self.w = csv.writer(self.fh)
        self.w.writerow(METRIC_COLUMNS)

    def row(self, values: dict) -> None:
        self.w.writerow([int(values["step"])] + [repr(float(values[c])) for c in METRIC_COLUMNS[1:]])

    def close(self) -> None:
        self.fh.close()


def _train_config(stage: str, args, file_cfg: dict) -> TrainConfig:
    base = TrainConfig.desk_pretrain(seed=args.seed) if stage == "pretrain" else TrainConfig.desk_adapt(seed=args.seed)
    flags = {"seed": args.seed}
    if stage == "adapt":
        for name in ("ldd", "lrd", "lac", "lada"):
            if getattr(args, f"no_{name}"):
                flags[f"use_{name}"] = False
    merged = merge_overrides(merge_overrides(to_dict(base), file_cfg), flags)
    cfg = from_dict(TrainConfig, merged)
    cfg.validate()
    return cfg


# commands ------------------------------------------------------------------


def cmd_gen(args) -> int:
    t0 = time.time()
    parts = _split_config(args.config)
    kw = dict(parts["synth"])
    kw["seed"] = args.seed
    if args.k is not None:
        kw["k"] = args.k
    cfg = preset(args.preset, **kw)
    split = generate_synthetic(cfg)
    out = Path(args.out)
    manifest = save_dataset(split, out)
    (out / "synth_config.json").write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")
    _write_run_manifest(out, "gen", [cfg], args.seed, [args.config] if args.config else [],
                        [manifest, out / "synth_config.json"], t0)
    print(f"wrote {len(split.source_train) + len(split.source_test) + len(split.target_train) + len(split.target_test)}"
          f" samples to {manifest}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    t0 = time.time()
    parts = _split_config(args.config)
    split = _load_split(args)
    x = split.source_train[0].rgb
    mcfg = from_dict(ModelConfig, merge_overrides(to_dict(ModelConfig.desk()),
                                                  dict(parts["model"], T=x.shape[0], d_in=x.shape[1], C=split.C)))
    tcfg = _train_config("pretrain", args, parts["train"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mw = _MetricsWriter(out / "metrics.csv")
    try:
        res = pretrain(split.source_train, mcfg, tcfg,
                       callback=lambda s, l: mw.row(dict.fromkeys(METRIC_COLUMNS, 0.0) | {"step": s, "cls": l, "total": l}))
    finally:
        mw.close()
    ck = out / "pretrain.ckpt"
    checkpoint.save(ck, res.model, tcfg, res.rng_state, {"train_acc": res.train_acc})
    _write_run_manifest(out, "pretrain", [mcfg, tcfg], args.seed, [args.data], [ck, out / "metrics.csv"], t0)
    print(f"pretrain source accuracy {res.train_acc:.4f}; checkpoint {ck}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    t0 = time.time()
    parts = _split_config(args.config)
    base, header = _ckpt(args.ckpt)
    if header["kind"] != "pretrain":
        raise StateError(f"{args.ckpt} is an adapted checkpoint; adapt needs a pretrain checkpoint")
    if parts["model"]:
        current = to_dict(base.cfg)
        fixed = sorted(k for k, v in parts["model"].items()
                       if k not in ADAPT_MODEL_KEYS and k != "C" and current.get(k) != v)
        if fixed:
            raise ConfigError(f"keys {fixed} are fixed by the pretrain checkpoint")
        tunable = {k: v for k, v in parts["model"].items() if k in ADAPT_MODEL_KEYS}
        base.cfg = from_dict(ModelConfig, merge_overrides(current, tunable))
    split = _load_split(args, C=base.cfg.C)
    tcfg = _train_config("adapt", args, dict(parts["train"], k=split.k))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mw = _MetricsWriter(out / "metrics.csv")
    try:
        res = adapt(split, base, tcfg, callback=lambda r: mw.row(r.row()))
    finally:
        mw.close()
    ck = out / "adapt.ckpt"
    checkpoint.save(ck, res.model, tcfg, res.rng_state)
    _write_run_manifest(out, "adapt", [base.cfg, tcfg], args.seed, [args.data, args.ckpt],
                        [ck, out / "metrics.csv"], t0)
    last = res.history[-1]
    print(f"adapt finished {len(res.history)} steps; final total loss {last.total:.4f}; checkpoint {ck}")
    return EXIT_OK


def cmd_eval(args) -> int:
    t0 = time.time()
    model, _ = _ckpt(args.ckpt)
    split = _load_split(args, C=model.cfg.C)
    samples = split.target_test
    acc = evaluate(model, samples)
    doc = {"accuracy": acc, "n": len(samples), "per_class": per_class_accuracy(model, samples, model.cfg.C)}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _write_run_manifest(out, "eval", [model.cfg], args.seed, [args.data, args.ckpt], [out / "eval.json"], t0)
    print(f"accuracy {acc:.4f} on {len(samples)} target-test samples")
    return EXIT_OK


def cmd_analyze(args) -> int:
    t0 = time.time()
    model, header = _ckpt(args.ckpt)
    if header["kind"] != "adapt":
        raise StateError("analyze needs an adapted checkpoint")
    split = _load_split(args, C=model.cfg.C)
    rows = analyze_decomposed_shift(model, split, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_shift_csv(rows, out / "shift.csv")
    _write_run_manifest(out, "analyze", [model.cfg], args.seed, [args.data, args.ckpt], [out / "shift.csv"], t0)
    for r in rows:
        print(f"{r.stream:<12s} mmd={r.mmd:.5f} null_std={r.null_std:.5f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    t0 = time.time()
    results = suite(args.seed)
    for r in results:
        print(r.line())
    bad = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(bad)}/{len(results)} passed in {time.time() - t0:.1f}s")
    return EXIT_CHECK if bad else EXIT_OK


# parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mclrd", description="Low-rank decomposer domain adaptation runs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, out=True, ckpt=False):
        if data:
            sp.add_argument("--data", required=True, help="dataset manifest or directory holding manifest.csv")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
        if ckpt:
            sp.add_argument("--ckpt", required=True, help="input checkpoint")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", default=None, help="flat key = value config file; flags win")

    g = sub.add_parser("gen", help="write a synthetic corpus")
    common(g, data=False)
    g.add_argument("--preset", choices=PRESETS, default="mixed")
    g.add_argument("--k", type=int, choices=(1, 5, 10, 20), default=None)
    g.set_defaults(fn=cmd_gen)

    pt = sub.add_parser("pretrain", help="source-only training of both encoders")
    common(pt)
    pt.add_argument("--k", type=int, choices=(1, 5, 10, 20), default=None)
    pt.set_defaults(fn=cmd_pretrain)

    ad = sub.add_parser("adapt", help="train decomposers, routers and heads on mixed batches")
    common(ad, ckpt=True)
    ad.add_argument("--k", type=int, choices=(1, 5, 10, 20), default=None)
    for name in ("ldd", "lrd", "lac", "lada"):
        ad.add_argument(f"--no-{name}", action="store_true", help=f"disable the {name[1:]} term")
    ad.set_defaults(fn=cmd_adapt)

    ev = sub.add_parser("eval", help="target-test accuracy of a checkpoint")
    common(ev, ckpt=True)
    ev.add_argument("--k", type=int, choices=(1, 5, 10, 20), default=None)
    ev.set_defaults(fn=cmd_eval)

    an = sub.add_parser("analyze", help="per-stream source/target MMD")
    common(an, ckpt=True)
    an.add_argument("--k", type=int, choices=(1, 5, 10, 20), default=None)
    an.set_defaults(fn=cmd_analyze)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (MissingInput, LoadError, checkpoint.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except NonFiniteLoss as e:
        print(f"error: non-finite loss at step {e.step}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, StateError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
