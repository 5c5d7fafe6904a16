"""Full-corpus protocol: preprocess, train with the default schedule, evaluate, report.

Needs the raw corpus on disk (not shipped):

    scenes/<location>__<YYYY-MM-DD>.tif   multispectral scenes (+ .qa.tif or .json cloud info)
    truth/<anything>_<YYYY-MM>.tif        monthly ground-truth concentration rasters

    python scripts/replication_protocol.py --scenes scenes --truth truth --out runs/full

Optional ``--holdout-scenes/--holdout-truth`` evaluate on unseen locations,
and ``--compare BEFORE.tif AFTER.tif`` predicts two scenes and writes the
density / scatter / 0.9-quantile tables for the pair.

Every step goes through the ``pmquant`` command line, so each output
directory also carries its ``run.json`` manifest. Expect the default
schedule (1000 epochs x 100 steps, minibatch 15) to take days on a CPU.
"""
import argparse
import json
from pathlib import Path

from pmquant.cli import main as pmquant


def step(*argv):
    argv = [str(a) for a in argv]
    print("$ pmquant", " ".join(argv), flush=True)
    code = pmquant(argv)
    if code:
        raise SystemExit(code)


def write_config(path: Path, obj: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))
    return path


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenes", type=Path, required=True)
    ap.add_argument("--truth", type=Path, required=True)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--holdout-scenes", type=Path)
    ap.add_argument("--holdout-truth", type=Path)
    ap.add_argument("--compare", nargs=2, type=Path, metavar=("BEFORE", "AFTER"))
    ap.add_argument("--regions", type=Path, help="region-label raster for the comparison scatter")
    ap.add_argument("--epochs", type=int, help="override the default epoch count")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = args.out

    pre = write_config(out / "configs" / "preprocess.json",
                       {"scene_dir": str(args.scenes), "truth_dir": str(args.truth), "split_ratio": 0.8})
    step("preprocess", "--config", pre, "--out", out / "dataset", "--seed", args.seed)
    split = json.loads((out / "dataset" / "split.json").read_text())
    print(f"split: {len(split['train'])} train / {len(split['test'])} test")

    train = ["train", out / "dataset", "--out", out / "run", "--seed", args.seed]
    if args.epochs:
        train += ["--epochs", args.epochs]
    step(*train)
    ckpt = out / "run" / "checkpoints" / "final.pt"

    # training-set sanity check, then the temporally held-out split
    step("evaluate", out / "dataset", "--checkpoint", ckpt, "--split", "train", "--out", out / "eval_train")
    step("evaluate", out / "dataset", "--checkpoint", ckpt, "--split", "test", "--out", out / "eval_test")
    metrics = [out / "eval_train" / "metrics.json", out / "eval_test" / "metrics.json"]

    if args.holdout_scenes and args.holdout_truth:
        hold = write_config(out / "configs" / "holdout.json",
                            {"scene_dir": str(args.holdout_scenes), "truth_dir": str(args.holdout_truth)})
        step("preprocess", "--config", hold, "--out", out / "holdout", "--seed", args.seed)
        step("evaluate", out / "holdout", "--checkpoint", ckpt, "--split", "all", "--out", out / "eval_holdout")
        metrics.append(out / "eval_holdout" / "metrics.json")

    report = ["report", "--out", out / "report"]
    for m in metrics:
        report += ["--metrics", m]
    if args.compare:
        for name, scene in zip(("before", "after"), args.compare):
            step("predict", scene, "--checkpoint", ckpt, "--out", out / f"predict_{name}")
            report += ["--map", f"{name}={out / f'predict_{name}' / 'median.tif'}"]
        if args.regions:
            report += ["--regions", args.regions]
    step(*report)


if __name__ == "__main__":
    main()
