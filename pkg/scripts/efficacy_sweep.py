"""Target-test accuracy of pretrained, fully adapted and ablated models over seeds.

    python3 scripts/efficacy_sweep.py --preset mixed --seeds 0,1,2,3,4
    python3 scripts/efficacy_sweep.py --variants full,off,no_ada --lr 5e-4
"""
import argparse
import csv
import sys
import time

from mclrd.config import ModelConfig, TrainConfig
from mclrd.datagen import generate_synthetic, preset
from mclrd.pipeline import adapt, evaluate, pretrain

OFF = dict(use_ldd=False, use_lrd=False, use_lac=False, use_lada=False)
VARIANTS = {
    "full": {},
    "off": OFF,
    "no_dd": dict(use_ldd=False),
    "no_rd": dict(use_lrd=False),
    "no_ac": dict(use_lac=False),
    "no_ada": dict(use_lada=False),
    "only_ada": dict(OFF, use_lada=True),
    "only_dd": dict(OFF, use_ldd=True),
}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="mixed")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--variants", default="full,off")
    ap.add_argument("--lr", type=float, default=None)
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--lambda-schedule", default="constant")
    ap.add_argument("--out", default=None, help="optional CSV path")
    args = ap.parse_args(argv)

    mc = ModelConfig.desk(lambda_schedule=args.lambda_schedule)
    over = {k: v for k, v in (("lr", args.lr), ("epochs", args.epochs)) if v is not None}
    names = args.variants.split(",")
    rows = []
    t0 = time.time()
    for seed in (int(s) for s in args.seeds.split(",")):
        split = generate_synthetic(preset(args.preset, seed=seed))
        pre = pretrain(split.source_train, mc, TrainConfig.desk_pretrain(seed=seed))
        row = {"seed": seed, "pre": evaluate(pre.model, split.target_test)}
        for name in names:
            cfg = TrainConfig.desk_adapt(seed=seed, **over, **VARIANTS[name])
            row[name] = evaluate(adapt(split, pre.model, cfg).model, split.target_test)
        rows.append(row)
        print(" ".join(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()), flush=True)
    if "full" in names:
        beats_pre = sum(r["full"] > r["pre"] for r in rows)
        line = f"full > pre in {beats_pre}/{len(rows)}"
        if "off" in names:
            line += f", full > off in {sum(r['full'] > r['off'] for r in rows)}/{len(rows)}"
        print(line)
    print(f"wall {time.time() - t0:.1f}s")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
