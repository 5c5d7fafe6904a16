import logging

import numpy as np
import pytest
import torch
from torch import nn

from pmquant.datapipe import prepare_dataset
from pmquant.errors import DivergenceError, SizeError
from pmquant.losses import LossConfig, aggregate_loss
from pmquant.model import ModelConfig, build_model, load_checkpoint
from pmquant.raster import BandStack
from pmquant.synthgen import SynthSpec, generate
from pmquant.trainer import TrainConfig, TrainHistory, evaluate_samples, predict, train


@pytest.fixture(scope="module")
def data():
    return prepare_dataset(generate(SynthSpec(size=16, n_bands=3), 10), 0.8, 0)


def small_model(seed=0, dropout=0.0):
    return build_model(ModelConfig(in_bands=3, depth=2, base_features=4, dropout_rate=dropout), seed=seed)


def quick(**kw):
    base = dict(epochs=2, steps_per_epoch=3, minibatch_size=2, learning_rate=1e-3, dropout=0.0, tile_size=16)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_learning_rate_leaves_parameters(data):
    m = small_model()
    before = {k: v.clone() for k, v in m.state_dict().items()}
    _, hist = train(m, data.train, data.test, quick(epochs=1, learning_rate=0.0))
    for k, v in m.state_dict().items():
        assert torch.equal(before[k], v)
    assert len(hist.records) == 1


def test_overfits_single_sample():
    ds = prepare_dataset(generate(SynthSpec(size=16, n_bands=3, noise_base=0.0, noise_gain=0.0,
                                            cloud_fraction=0.0), 2), 0.5, 0)
    m = small_model()
    m, hist = train(m, ds.train, [], quick(epochs=4, steps_per_epoch=50, minibatch_size=1,
                                          learning_rate=3e-3))
    rep = evaluate_samples(m, ds.train)
    assert rep.masked_mae < 0.1 * ds.target_stats.span
    assert hist.losses[-1] < hist.losses[0]


def test_fixed_seed_runs_are_identical(data):
    _, h1 = train(small_model(dropout=0.5), data.train, data.test, quick(dropout=0.5))
    _, h2 = train(small_model(dropout=0.5), data.train, data.test, quick(dropout=0.5))
    strip = lambda h: [{k: v for k, v in r.items() if k != "wall_clock"} for r in h.records]  # noqa: E731
    assert strip(h1) == strip(h2)


def test_resume_matches_uninterrupted(data, tmp_path):
    cfg = quick(epochs=4, dropout=0.5, checkpoint_every=2)
    full, _ = train(small_model(dropout=0.5), data.train, data.test, cfg, run_dir=tmp_path / "a")
    half = tmp_path / "a" / "checkpoints" / "epoch00002.pt"
    resumed, hist = train(small_model(seed=9, dropout=0.5), data.train, data.test, cfg,
                          run_dir=tmp_path / "b", resume=half)
    assert [r["epoch"] for r in hist.records] == [1, 2, 3, 4]
    for (k, a), b in zip(full.state_dict().items(), resumed.state_dict().values()):
        assert torch.allclose(a, b, rtol=0, atol=1e-6), k


def test_run_dir_artifacts(data, tmp_path):
    train(small_model(), data.train, data.test, quick(), run_dir=tmp_path)
    for name in ("history.csv", "config.json", "train.log", "checkpoints/best.pt", "checkpoints/final.pt"):
        assert (tmp_path / name).exists(), name
    header = (tmp_path / "history.csv").read_text().splitlines()[0]
    assert header.split(",") == list(TrainHistory.COLUMNS)
    m = load_checkpoint(tmp_path / "checkpoints" / "final.pt")
    assert m.metadata["target_stats"]["band_ids"] == ["target"]


def test_prediction_deterministic_and_keeps_nodata(data):
    m, _ = train(small_model(dropout=0.5), data.train, [], quick(dropout=0.5))
    s = data.test[0]
    a, b = predict(m, s.input), predict(m, s.input)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)
    blank = BandStack(s.input.grid, np.zeros_like(s.input.bands), s.input.band_ids,
                      np.zeros(s.input.grid.shape, bool), s.input.timestamp, s.input.location)
    assert not predict(m, blank).valid.any()


def test_tiny_step_does_not_increase_loss(data):
    m = small_model()
    lo, span = data.target_stats.mins[0], data.target_stats.span
    x = torch.from_numpy(np.stack([s.input.bands for s in data.train]).astype(np.float32))
    y = torch.from_numpy(np.stack([s.target.values for s in data.train]).astype(np.float32))
    mask = torch.from_numpy(np.stack([s.mask.validity for s in data.train]))

    def full_loss():
        with torch.no_grad():
            return aggregate_loss(lo + span * m(x), y, mask, LossConfig()).item()

    before = full_loss()
    # one full-batch step at a tiny learning rate
    opt = torch.optim.SGD(m.parameters(), lr=1e-6)
    loss = aggregate_loss(lo + span * m(x), y, mask, LossConfig())
    loss.backward()
    opt.step()
    assert full_loss() <= before


class Probe(nn.Module):
    """Per-pixel affine map from 2 bands to 3 heads plus a shared offset: 10 parameters."""

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(2, 3, 1)
        self.shift = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        return self.conv(x) + self.shift


def test_probe_gradient_matches_finite_differences():
    torch.manual_seed(0)
    probe = Probe().double()
    assert sum(p.numel() for p in probe.parameters()) == 10
    x = torch.randn(2, 2, 6, 6, dtype=torch.float64)
    y = torch.randn(2, 6, 6, dtype=torch.float64) * 2
    mask = torch.rand(2, 6, 6) > 0.2
    cfg = LossConfig(alpha=2.0)
    aggregate_loss(probe(x), y, mask, cfg).backward()
    analytic = torch.cat([p.grad.flatten() for p in probe.parameters()])
    flat = [p for p in probe.parameters()]
    numeric, h = [], 1e-6
    with torch.no_grad():
        for p in flat:
            for i in range(p.numel()):
                v = p.view(-1)
                orig = v[i].item()
                v[i] = orig + h
                up = aggregate_loss(probe(x), y, mask, cfg).item()
                v[i] = orig - h
                down = aggregate_loss(probe(x), y, mask, cfg).item()
                v[i] = orig
                numeric.append((up - down) / (2 * h))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    rel = (analytic - numeric).abs() / numeric.abs().clamp_min(1e-8)
    assert rel.max().item() <= 1e-4


def test_divergence_raises(data):
    m = small_model()
    with torch.no_grad():
        m.heads["median"][-1].bias.fill_(float("nan"))
    with pytest.raises(DivergenceError):
        train(m, data.train, [], quick())


def test_empty_batches_are_skipped(data, caplog):
    blind = [s.__class__(s.input, s.target, s.mask.__class__(s.mask.grid, np.zeros_like(s.mask.validity)),
                         s.month, s.location, s.extras) for s in data.train]
    with caplog.at_level(logging.WARNING, logger="pmquant"):
        _, hist = train(small_model(), blind, [], quick(epochs=1), target_stats=data.target_stats)
    assert hist.records[0]["skipped_steps"] == 3
    assert "no valid pixels" in caplog.text


def test_band_count_mismatch(data):
    m = build_model(ModelConfig(in_bands=5, depth=2, base_features=4))
    with pytest.raises(SizeError):
        train(m, data.train, [], quick())


def test_config_round_trip():
    cfg = TrainConfig(epochs=3, loss=LossConfig(alpha=5.0))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
