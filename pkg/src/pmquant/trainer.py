"""Training loop, inference in physical units, and dataset evaluation.

Targets are scaled to [0, 1] with the training-split min/max for the
network's sake, but the quantile loss is evaluated on residuals in
physical units so that the smoothing scale ``alpha`` keeps its meaning.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .datapipe import BandStats, Sample, fit_target_stats, normalize
from .errors import DivergenceError, EmptySampleError, SizeError
from .losses import LossConfig, aggregate_loss
from .metrics import MetricsReport, evaluate
from .model import QuantileUNet, forward, read_checkpoint, save_checkpoint
from .raster import BandStack, QuantileTriple, write_json

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    minibatch_size: int = 15
    steps_per_epoch: int = 100
    learning_rate: float = 5e-5
    dropout: float = 0.5
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    checkpoint_every: int = 0
    tile_size: int = 64
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if min(self.epochs, self.minibatch_size, self.steps_per_epoch, self.tile_size) < 1:
            raise SizeError("epochs, minibatch_size, steps_per_epoch and tile_size must be positive")
        if self.learning_rate < 0:
            raise SizeError("learning_rate must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = LossConfig.from_dict(d.pop("loss", {}))
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(loss=loss, **d)


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    COLUMNS = ("epoch", "train_loss", "train_mae", "val_mae", "val_coverage", "skipped_steps", "wall_clock")

    @property
    def losses(self) -> list[float]:
        return [r["train_loss"] for r in self.records]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in self.records:
                w.writerow({k: r[k] for k in self.COLUMNS})


def _target_scale(model: QuantileUNet) -> tuple[float, float]:
    ts = model.metadata.get("target_stats")
    if not ts:
        return 0.0, 1.0
    lo, hi = ts["mins"][0], ts["maxs"][0]
    return lo, hi - lo


def predict(model: QuantileUNet, stack: BandStack, stats: BandStats | None = None) -> QuantileTriple:
    """Inference-mode quantile maps in target units.

    ``stats`` normalizes a raw stack first; pass ``None`` for a stack that
    is already normalized. Pixels invalid in the input stay flagged invalid
    in the returned triple.
    """
    if stats is not None:
        stack = normalize(stack, stats)
    t = forward(model, stack, training_mode=False)
    lo, span = _target_scale(model)
    return QuantileTriple(lo + span * t.lower, lo + span * t.median, lo + span * t.upper,
                          t.grid, stack.valid.copy())


def evaluate_samples(model: QuantileUNet, samples: list[Sample], name: str = "pooled") -> MetricsReport:
    preds = [predict(model, s.input) for s in samples]
    masks = [s.mask.validity & p.valid for s, p in zip(samples, preds)]
    return evaluate(preds, [s.target for s in samples], masks, name=name)


class _Tiles:
    """Arrays for random tile sampling."""

    def __init__(self, samples: list[Sample], tile: int):
        self.x = [np.ascontiguousarray(s.input.bands, dtype=np.float32) for s in samples]
        self.y = [s.target.values.astype(np.float32) for s in samples]
        self.m = [s.mask.validity & s.input.valid for s in samples]
        self.tile = min(tile, *(a.shape[0] for a in self.y), *(a.shape[1] for a in self.y))

    def __len__(self):
        return len(self.x)

    def batch(self, idx, rng):
        t = self.tile
        xs, ys, ms = [], [], []
        for i in idx:
            h, w = self.y[i].shape
            r, c = rng.integers(0, h - t + 1), rng.integers(0, w - t + 1)
            xs.append(self.x[i][:, r:r + t, c:c + t])
            ys.append(self.y[i][r:r + t, c:c + t])
            ms.append(self.m[i][r:r + t, c:c + t])
        return (torch.from_numpy(np.stack(xs)), torch.from_numpy(np.stack(ys)),
                torch.from_numpy(np.stack(ms)))


def _epoch_order(n: int, count: int, rng) -> np.ndarray:
    reps = -(-count // n)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:count]


def _torch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, 7]).generate_state(1)[0])


def train(model: QuantileUNet, train_set: list[Sample], val_set: list[Sample], cfg: TrainConfig,
          run_dir=None, resume=None, target_stats: BandStats | None = None,
          band_stats: BandStats | None = None) -> tuple[QuantileUNet, TrainHistory]:
    """Adam on the aggregate quantile loss over random tiles.

    Each epoch draws its sample order, crop offsets and dropout masks from
    generators seeded by ``(cfg.seed, epoch)``, so resuming from a
    checkpoint written at the end of epoch k reproduces an uninterrupted run.
    ``resume`` is a checkpoint path written by this function.
    """
    if not train_set:
        raise EmptySampleError("training set is empty")
    if train_set[0].input.n_bands != model.config.in_bands:
        raise SizeError(f"model expects {model.config.in_bands} bands, data has {train_set[0].input.n_bands}")
    if model.config.dropout_rate != cfg.dropout:
        model.config = replace(model.config, dropout_rate=cfg.dropout)
        model.dropout.p = cfg.dropout
    if target_stats is None:
        target_stats = fit_target_stats([s.target for s in train_set], [s.mask for s in train_set])
    model.metadata["target_stats"] = target_stats.to_dict()
    if band_stats is not None:
        model.metadata["band_stats"] = band_stats.to_dict()
    lo, span = _target_scale(model)

    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps)
    history = TrainHistory(meta={"optimizer": "adam", "betas": list(cfg.betas), "eps": cfg.eps,
                                 "learning_rate": cfg.learning_rate})
    start_epoch, best_val = 0, float("inf")
    if resume is not None:
        payload = read_checkpoint(resume)
        model.load_state_dict(payload["state_dict"])
        extra = payload["extra"]
        opt.load_state_dict(extra["optimizer"])
        start_epoch = int(extra["epoch"])
        history.records = [dict(r) for r in extra["history"]]
        best_val = float(extra.get("best_val", best_val))

    run_dir = Path(run_dir) if run_dir is not None else None
    handler = None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(run_dir / "train.log")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        logging.getLogger("pmquant").addHandler(handler)

    def state(epoch):
        return {"optimizer": opt.state_dict(), "epoch": epoch, "history": history.records,
                "best_val": best_val, "train_config": cfg.to_dict()}

    tiles = _Tiles(train_set, cfg.tile_size)
    t0 = time.perf_counter()
    try:
        for epoch in range(start_epoch, cfg.epochs):
            rng = np.random.default_rng([cfg.seed, epoch])
            torch.manual_seed(_torch_seed(cfg.seed, epoch))
            order = _epoch_order(len(tiles), cfg.steps_per_epoch * cfg.minibatch_size, rng)
            model.train()
            losses, maes, skipped = [], [], 0
            for step in range(cfg.steps_per_epoch):
                gstep = epoch * cfg.steps_per_epoch + step
                idx = order[step * cfg.minibatch_size:(step + 1) * cfg.minibatch_size]
                x, y, m = tiles.batch(idx, rng)
                if not m.any():
                    log.warning("step %d: minibatch has no valid pixels; skipped", gstep)
                    skipped += 1
                    continue
                out = lo + span * model(x)
                loss = aggregate_loss(out, y, m, cfg.loss)
                if not torch.isfinite(loss):
                    raise DivergenceError(gstep, loss.item())
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(loss.item())
                with torch.no_grad():
                    maes.append(float((out[:, 1][m] - y[m]).abs().double().mean()))
            rec = {
                "epoch": epoch + 1,
                "train_loss": float(np.mean(losses)) if losses else float("nan"),
                "train_mae": float(np.mean(maes)) if maes else float("nan"),
                "val_mae": float("nan"),
                "val_coverage": float("nan"),
                "skipped_steps": skipped,
                "wall_clock": time.perf_counter() - t0,
            }
            model.eval()
            if val_set:
                rep = evaluate_samples(model, val_set, name="validation")
                rec["val_mae"], rec["val_coverage"] = rep.masked_mae, rep.interval_coverage
            history.records.append(rec)
            log.info("epoch %d loss %.5f train_mae %.4f val_mae %.4f val_cov %.3f", rec["epoch"],
                     rec["train_loss"], rec["train_mae"], rec["val_mae"], rec["val_coverage"])
            if run_dir is not None:
                if val_set and rec["val_mae"] < best_val:
                    best_val = rec["val_mae"]
                    save_checkpoint(model, run_dir / "checkpoints" / "best.pt", state(epoch + 1))
                if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                    save_checkpoint(model, run_dir / "checkpoints" / f"epoch{epoch + 1:05d}.pt",
                                    state(epoch + 1))
            elif val_set:
                best_val = min(best_val, rec["val_mae"])
        model.eval()
        history.meta["final_state"] = state(cfg.epochs)
        if run_dir is not None:
            save_checkpoint(model, run_dir / "checkpoints" / "final.pt", state(cfg.epochs))
            history.write_csv(run_dir / "history.csv")
            write_json(run_dir / "config.json", {"train": cfg.to_dict(), "model": model.config.to_dict()})
    finally:
        if handler is not None:
            logging.getLogger("pmquant").removeHandler(handler)
            handler.close()
    return model, history
