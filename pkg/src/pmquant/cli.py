"""``pmquant`` command line: preprocess -> train -> predict -> evaluate -> report.

Every command takes an optional JSON ``--config`` whose values are
overridden by explicit flags, and writes a ``run.json`` manifest into
its output directory. Exit codes: 0 success, 1 usage, 2 data error,
3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd

from .datapipe import (
    BandStats,
    CorpusConfig,
    assemble_corpus,
    denormalize,
    normalize,
    prepare_dataset,
    read_dataset,
    write_dataset,
)
from .errors import ConfigError, DataError, IncompatibleCheckpointError, SizeError
from .losses import QuantileSpec
from .metrics import density_table, evaluate, paired_scatter, prediction_quantile
from .model import ModelConfig, build_model, load_checkpoint
from .raster import (
    MaskRaster,
    RasterGrid,
    read_mask,
    read_raster,
    read_stack,
    write_json,
    write_mask,
    write_raster,
)
from .synthgen import SynthSpec, generate, truth_triple
from .trainer import TrainConfig, predict, train

log = logging.getLogger("pmquant")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    inputs: dict
    output: str
    seed: int | None
    tool_version: str = field(default_factory=_version)
    started: str = field(default_factory=_now)
    finished: str | None = None

    def write(self, directory):
        self.finished = _now()
        write_json(Path(directory) / "run.json", self.__dict__)


def _load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return cfg


def _parse_quantiles(text: str) -> QuantileSpec:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"--quantiles expects 'LOWER,UPPER', got {text!r}") from exc
    return QuantileSpec(lo, hi)


def _out_dir(args, cfg) -> Path:
    out = args.out or cfg.get("out")
    if out is None:
        raise ConfigError("an output directory is required (--out or 'out' in the config)")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- preprocess -------------------------------------------------------------


def cmd_preprocess(args) -> int:
    """Build a prepared dataset from a raw corpus or the synthetic generator.

    Config keys: ``source`` ("corpus" or "synthetic"), ``split_ratio``,
    ``outlier_fraction``; for corpora ``scene_dir``, ``truth_dir``,
    ``pixel_size``, ``drop_bands``, ``cloud_confidence``,
    ``scene_cloud_threshold``, ``grids`` ({location: grid dict}); for
    synthetic data ``n_samples`` and ``synthetic`` (generator settings).
    """
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    out = _out_dir(args, cfg)
    source = cfg.get("source", "corpus")
    if source == "synthetic":
        syn = dict(cfg.get("synthetic", {}))
        syn.setdefault("seed", seed)
        if args.quantiles:
            q = _parse_quantiles(args.quantiles)
            syn["quantiles"] = {"q_l": q.q_l, "q_u": q.q_u}
        spec = SynthSpec.from_dict(syn)
        raw = generate(spec, int(cfg.get("n_samples", 200)))
        meta = {"source": "synthetic", "synthetic": spec.to_dict()}
        inputs = {}
    elif source == "corpus":
        for key in ("scene_dir", "truth_dir"):
            if key not in cfg:
                raise ConfigError(f"corpus preprocessing needs '{key}' in the config")
        corpus = CorpusConfig(
            scene_dir=Path(cfg["scene_dir"]),
            truth_dir=Path(cfg["truth_dir"]),
            pixel_size=float(cfg.get("pixel_size", 0.01)),
            grids={k: RasterGrid.from_dict(v) for k, v in cfg.get("grids", {}).items()},
            drop_bands=tuple(cfg.get("drop_bands", CorpusConfig.drop_bands)),
            cloud_confidence=int(cfg.get("cloud_confidence", 1)),
            scene_cloud_threshold=float(cfg.get("scene_cloud_threshold", 80.0)),
        )
        raw = assemble_corpus(corpus)
        meta = {"source": "corpus", "pixel_size": corpus.pixel_size, "drop_bands": list(corpus.drop_bands)}
        inputs = {"scene_dir": str(corpus.scene_dir), "truth_dir": str(corpus.truth_dir)}
    else:
        raise ConfigError(f"unknown source {source!r}; use 'corpus' or 'synthetic'")

    ratio = float(cfg.get("split_ratio", 0.8))
    fraction = float(cfg.get("outlier_fraction", 0.01))
    meta.update(split_ratio=ratio, outlier_fraction=fraction, seed=seed)
    ds = prepare_dataset(raw, ratio, seed, fraction, meta)
    write_dataset(out, ds)
    RunManifest("preprocess", args.config, inputs, str(out), seed).write(out)
    print(f"prepared {len(ds.samples)} samples: {len(ds.split['train'])} train / "
          f"{len(ds.split['test'])} test -> {out}")
    return EXIT_OK


# -- train ------------------------------------------------------------------


def cmd_train(args) -> int:
    """Config keys: ``dataset``, ``model`` (ModelConfig fields), ``train`` (TrainConfig fields)."""
    cfg = _load_config(args.config)
    out = _out_dir(args, cfg)
    dataset = args.dataset or cfg.get("dataset")
    if dataset is None:
        raise ConfigError("a prepared dataset is required (positional DATASET or 'dataset' in the config)")
    ds = read_dataset(dataset)

    tcfg = dict(cfg.get("train", {}))
    loss = dict(tcfg.pop("loss", {}))
    if args.alpha is not None:
        loss["alpha"] = args.alpha
    if args.quantiles:
        q = _parse_quantiles(args.quantiles)
        loss["quantiles"] = {"q_l": q.q_l, "q_u": q.q_u}
    if args.epochs is not None:
        tcfg["epochs"] = args.epochs
    if args.seed is not None:
        tcfg["seed"] = args.seed
    tcfg["loss"] = loss
    train_cfg = TrainConfig.from_dict(tcfg)

    mcfg = dict(cfg.get("model", {}))
    mcfg["in_bands"] = len(ds.band_stats.band_ids)
    mcfg["dropout_rate"] = train_cfg.dropout
    q = train_cfg.loss.quantiles
    mcfg["quantiles"] = {"q_l": q.q_l, "q_u": q.q_u}
    model = build_model(ModelConfig.from_dict(mcfg), seed=train_cfg.seed)

    resume = args.checkpoint
    model, history = train(model, ds.train, ds.test, train_cfg, run_dir=out, resume=resume,
                           target_stats=ds.target_stats, band_stats=ds.band_stats)
    RunManifest("train", args.config, {"dataset": str(dataset), "resume": resume and str(resume)},
                str(out), train_cfg.seed).write(out)
    last = history.records[-1] if history.records else {}
    print(f"trained {len(history.records)} epochs; final loss {last.get('train_loss', float('nan')):.5f}"
          f" val MAE {last.get('val_mae', float('nan')):.4f} -> {out}")
    return EXIT_OK


# -- predict ----------------------------------------------------------------


def _match_bands(stack, stats: BandStats):
    wanted = tuple(stats.band_ids)
    if stack.band_ids == wanted:
        return stack
    if set(wanted) <= set(stack.band_ids):
        return stack.select(wanted)
    raise SizeError(f"scene has bands {list(stack.band_ids)}, checkpoint expects {list(wanted)}")


def cmd_predict(args) -> int:
    cfg = _load_config(args.config)
    ckpt = args.checkpoint or cfg.get("checkpoint")
    if ckpt is None:
        raise ConfigError("--checkpoint is required")
    out = _out_dir(args, cfg)
    model = load_checkpoint(ckpt)
    if "band_stats" not in model.metadata:
        raise IncompatibleCheckpointError(f"{ckpt} carries no input normalization statistics")
    stats = BandStats.from_dict(model.metadata["band_stats"])
    scene = _match_bands(read_stack(args.scene), stats)
    if scene.n_bands != model.config.in_bands:
        raise SizeError(f"scene has {scene.n_bands} bands, model expects {model.config.in_bands}")
    triple = predict(model, scene, stats)
    for name, raster in triple.as_rasters().items():
        write_raster(out / f"{name}.tif", raster, description=name)
    write_mask(out / "valid.tif", MaskRaster(scene.grid, triple.valid))
    RunManifest("predict", args.config, {"checkpoint": str(ckpt), "scene": str(args.scene)},
                str(out), None).write(out)
    print(f"wrote lower/median/upper/valid rasters -> {out}")
    return EXIT_OK


# -- evaluate ---------------------------------------------------------------


def cmd_evaluate(args) -> int:
    """Metrics on a dataset split; without ``--checkpoint`` the stored truth maps are scored."""
    cfg = _load_config(args.config)
    out = _out_dir(args, cfg)
    dataset = args.dataset or cfg.get("dataset")
    if dataset is None:
        raise ConfigError("a prepared dataset is required")
    ds = read_dataset(dataset)
    samples = ds.subset(args.split)
    if not samples:
        raise DataError(f"split {args.split!r} is empty")
    ckpt = args.checkpoint or cfg.get("checkpoint")
    if ckpt is None:
        if "truth_median" not in samples[0].extras:
            raise ConfigError("--checkpoint is required for datasets without truth maps")
        preds = [truth_triple(s) for s in samples]
        masks = [s.mask.validity for s in samples]
        name = f"{args.split}:truth"
    else:
        model = load_checkpoint(ckpt, in_bands=len(ds.band_stats.band_ids))
        inputs = [s.input for s in samples]
        trained_on = model.metadata.get("band_stats")
        if trained_on and trained_on != ds.band_stats.to_dict():
            # dataset normalized with its own statistics; re-express in the model's scale
            stats = BandStats.from_dict(trained_on)
            inputs = [normalize(_match_bands(denormalize(x, ds.band_stats), stats), stats) for x in inputs]
        preds = [predict(model, x) for x in inputs]
        masks = [s.mask.validity & p.valid for s, p in zip(samples, preds)]
        name = args.split
    report = evaluate(preds, [s.target for s in samples], masks, name=name)
    write_json(out / "metrics.json", report.to_dict())
    (out / "metrics.csv").write_text(",".join(report.columns()) + "\n" + report.to_csv_row())
    RunManifest("evaluate", args.config, {"dataset": str(dataset), "checkpoint": ckpt and str(ckpt),
                                          "split": args.split}, str(out), None).write(out)
    for k, v in report.to_dict().items():
        print(f"{k:>22s}  {v}")
    return EXIT_OK


# -- report -----------------------------------------------------------------


def _named_maps(items) -> dict[str, Path]:
    maps = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise ConfigError(f"--map expects NAME=PATH, got {item!r}")
        maps[name] = Path(path)
    return maps


def cmd_report(args) -> int:
    """Density table, paired scatter, 0.9-quantile table and (optionally) a metrics table."""
    cfg = _load_config(args.config)
    out = _out_dir(args, cfg)
    maps = _named_maps(args.map or cfg.get("maps", []))
    metric_files = [Path(p) for p in (args.metrics or cfg.get("metrics", []))]
    if not maps and not metric_files:
        raise ConfigError("report needs at least one --map NAME=PATH or --metrics FILE")

    rasters = {name: read_raster(p) for name, p in maps.items()}
    if rasters:
        shared = read_mask(args.mask).validity if args.mask else None
        masks = {n: r.valid if shared is None else r.valid & shared for n, r in rasters.items()}
        density_table({n: r.values for n, r in rasters.items()}, masks, bins=args.bins).to_csv(
            out / "density.csv", index=False, float_format="%.10g")
        level = args.level
        rows = [{"map": n, "quantile_level": level,
                 "value": prediction_quantile(r.values, masks[n], level),
                 "valid_pixels": int(masks[n].sum())} for n, r in rasters.items()]
        table = pd.DataFrame(rows)
        table["shift_from_first"] = table["value"] - table["value"].iloc[0]
        table.to_csv(out / "quantiles.csv", index=False, float_format="%.10g")
        if len(rasters) >= 2:
            (na, a), (nb, b) = list(rasters.items())[:2]
            a.grid.require_same(b.grid, f"maps {na} and {nb}")
            labels = read_raster(args.regions).values.astype(np.int64) if args.regions else None
            scatter = paired_scatter(a.values, b.values, labels, masks[na] & masks[nb])
            scatter.rename(columns={"value_a": na, "value_b": nb}).to_csv(
                out / "scatter.csv", index=False, float_format="%.10g")
    if metric_files:
        rows = [dict(source=str(p), **json.loads(p.read_text())) for p in metric_files]
        pd.DataFrame(rows).to_csv(out / "metrics_table.csv", index=False, float_format="%.10g")
    RunManifest("report", args.config, {"maps": {k: str(v) for k, v in maps.items()},
                                        "metrics": [str(p) for p in metric_files]},
                str(out), None).write(out)
    print(f"report written -> {out}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pmquant", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--out", help="output directory")
        if seed:
            sp.add_argument("--seed", type=int)

    sp = sub.add_parser("preprocess", help="build a prepared dataset")
    common(sp)
    sp.add_argument("--quantiles", help="LOWER,UPPER levels for synthetic truth maps")
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("train", help="train a quantile network")
    common(sp)
    sp.add_argument("dataset", nargs="?")
    sp.add_argument("--checkpoint", help="resume from this checkpoint")
    sp.add_argument("--quantiles", help="LOWER,UPPER quantile levels")
    sp.add_argument("--alpha", type=float, help="loss smoothing scale")
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="quantile maps for one scene")
    common(sp, seed=False)
    sp.add_argument("scene", help="multiband GeoTIFF")
    sp.add_argument("--checkpoint")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("evaluate", help="metrics on a prepared dataset")
    common(sp, seed=False)
    sp.add_argument("dataset", nargs="?")
    sp.add_argument("--checkpoint")
    sp.add_argument("--split", default="test", choices=("train", "test", "all"))
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("report", help="plot-ready tables from maps and metrics")
    common(sp, seed=False)
    sp.add_argument("--map", action="append", metavar="NAME=PATH")
    sp.add_argument("--metrics", action="append", metavar="FILE")
    sp.add_argument("--mask", help="validity raster applied to every map")
    sp.add_argument("--regions", help="integer region-label raster for the scatter table")
    sp.add_argument("--bins", type=int, default=50)
    sp.add_argument("--level", type=float, default=0.9, help="quantile level for the shift table")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"pmquant: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"pmquant: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort mapping onto the runtime exit code
        log.debug("unhandled failure", exc_info=True)
        print(f"pmquant: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
