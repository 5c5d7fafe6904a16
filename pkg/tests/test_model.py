import numpy as np
import pytest
import torch

from pmquant.errors import CheckpointFormatError, ConfigError, IncompatibleCheckpointError, ShapeError
from pmquant.losses import LossConfig, aggregate_loss
from pmquant.model import (
    CHECKPOINT_VERSION,
    HEADS,
    ModelConfig,
    build_model,
    forward,
    load_checkpoint,
    n_parameters,
    read_checkpoint,
    save_checkpoint,
)


def small(**kw):
    base = dict(in_bands=3, depth=2, base_features=4, dropout_rate=0.5)
    base.update(kw)
    return ModelConfig(**base)


def test_depth1_preserves_shape():
    m = build_model(ModelConfig(in_bands=1, depth=1, base_features=4))
    t = forward(m, np.random.default_rng(0).random((1, 16, 16)))
    assert t.lower.shape == t.median.shape == t.upper.shape == (16, 16)


def test_capacity_grows_with_depth():
    assert n_parameters(build_model(ModelConfig(in_bands=10, depth=3, base_features=4))) > n_parameters(
        build_model(ModelConfig(in_bands=10, depth=1, base_features=4))
    )


def test_same_seed_same_parameters():
    a, b = build_model(small(), seed=5), build_model(small(), seed=5)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    c = build_model(small(), seed=6)
    assert not torch.equal(a.encoders[0][0].weight, c.encoders[0][0].weight)


def test_output_biases_start_at_quantile_levels():
    m = build_model(small())
    assert [m.heads[h][-1].bias.item() for h in HEADS] == pytest.approx([0.1, 0.5, 0.9])


def test_zero_final_layer_gives_bias_constant():
    m = build_model(small())
    with torch.no_grad():
        for h in HEADS:
            m.heads[h][-1].weight.zero_()
    t = forward(m, np.zeros((3, 8, 8)))
    for arr, q in zip(t, (0.1, 0.5, 0.9)):
        np.testing.assert_allclose(arr, q, rtol=0, atol=1e-7)


def test_ten_band_64px_input_shape():
    m = build_model(ModelConfig(in_bands=10, depth=3, base_features=4))
    t = forward(m, np.random.default_rng(0).random((10, 64, 64)).astype(np.float32))
    assert t.median.shape == (64, 64)


@pytest.mark.parametrize("hw", [(17, 23), (5, 9), (1, 3)])
def test_non_multiple_sizes_are_padded_and_cropped(hw):
    m = build_model(small(depth=3))
    assert forward(m, np.random.default_rng(0).random((3, *hw))).upper.shape == hw


def test_inference_is_deterministic_and_dropout_only_in_training():
    m = build_model(small())
    x = np.random.default_rng(0).random((3, 16, 16))
    a, b = forward(m, x), forward(m, x)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)
    torch.manual_seed(0)
    c = forward(m, x, training_mode=True)
    assert not np.array_equal(c.median, a.median)
    assert not m.training


def test_band_mismatch():
    m = build_model(small())
    with pytest.raises(ShapeError):
        forward(m, np.zeros((4, 8, 8)))


def test_invalid_configs():
    for kw in ({"depth": 0}, {"base_features": 0}, {"dropout_rate": 1.0}, {"kernel_size": 2}, {"in_bands": 0}):
        with pytest.raises(ConfigError):
            small(**kw)


def test_head_independence():
    m = build_model(small(dropout_rate=0.0))
    x = np.random.default_rng(1).random((3, 16, 16))
    before = forward(m, x)
    with torch.no_grad():
        for p in m.head_parameters("lower"):
            p.add_(0.1 * torch.randn_like(p))
    after = forward(m, x)
    assert not np.array_equal(before.lower, after.lower)
    np.testing.assert_array_equal(before.median, after.median)
    np.testing.assert_array_equal(before.upper, after.upper)


def test_one_small_step_decreases_aggregate_loss():
    torch.manual_seed(0)
    m = build_model(small(dropout_rate=0.0))
    x = torch.rand(2, 3, 16, 16)
    y = torch.rand(2, 16, 16) * 3
    mask = torch.ones(2, 16, 16, dtype=torch.bool)
    opt = torch.optim.SGD(m.parameters(), lr=1e-3)
    loss0 = aggregate_loss(m(x), y, mask, LossConfig())
    opt.zero_grad()
    loss0.backward()
    opt.step()
    with torch.no_grad():
        assert float(aggregate_loss(m(x), y, mask, LossConfig())) < float(loss0)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    m = build_model(small(), seed=3)
    m.metadata = {"target_stats": {"band_ids": ["target"], "mins": [1.0], "maxs": [9.0]}}
    save_checkpoint(m, tmp_path / "m.pt")
    back = load_checkpoint(tmp_path / "m.pt")
    x = np.random.default_rng(0).random((3, 24, 24))
    for u, v in zip(forward(m, x), forward(back, x)):
        assert np.max(np.abs(u - v)) == 0
    assert back.config == m.config
    assert back.metadata == m.metadata


def test_truncated_checkpoint_is_format_error(tmp_path):
    save_checkpoint(build_model(small()), tmp_path / "m.pt")
    data = (tmp_path / "m.pt").read_bytes()
    (tmp_path / "t.pt").write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "t.pt")
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "junk.pt")


def test_in_bands_mismatch_is_incompatible(tmp_path):
    save_checkpoint(build_model(small()), tmp_path / "m.pt")
    with pytest.raises(IncompatibleCheckpointError):
        load_checkpoint(tmp_path / "m.pt", in_bands=10)
    with pytest.raises(IncompatibleCheckpointError):
        load_checkpoint(tmp_path / "m.pt", expect=small(depth=3))


def test_version_tag_checked(tmp_path):
    m = build_model(small())
    save_checkpoint(m, tmp_path / "m.pt")
    payload = read_checkpoint(tmp_path / "m.pt")
    assert payload["version"] == CHECKPOINT_VERSION
    payload["version"] = "pmquant-unet/0"
    torch.save(payload, tmp_path / "old.pt")
    with pytest.raises(IncompatibleCheckpointError):
        load_checkpoint(tmp_path / "old.pt")
