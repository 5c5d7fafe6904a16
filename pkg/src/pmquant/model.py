"""U-Net with three parallel quantile heads.

The encoder/decoder trunk is shared up to the top-level upsampling step
(transposed convolution + skip concatenation); from there each quantile
level gets its own small convolution stack and a 1x1 linear projection.
"""
from __future__ import annotations

import pickle
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CheckpointFormatError, ConfigError, IncompatibleCheckpointError, ShapeError
from .losses import QuantileSpec
from .raster import BandStack, QuantileTriple

CHECKPOINT_FORMAT = "pmquant-checkpoint"
CHECKPOINT_VERSION = "pmquant-unet/1"
HEADS = ("lower", "median", "upper")


@dataclass(frozen=True)
class ModelConfig:
    in_bands: int
    depth: int = 3
    base_features: int = 32
    kernel_size: int = 3
    dropout_rate: float = 0.5
    quantiles: QuantileSpec = field(default_factory=QuantileSpec)
    activation: str = "relu"

    def __post_init__(self):
        if self.in_bands < 1:
            raise ConfigError(f"in_bands must be >= 1, got {self.in_bands}")
        if self.depth < 1 or self.base_features < 1:
            raise ConfigError("depth and base_features must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["quantiles"] = {"q_l": self.quantiles.q_l, "q_u": self.quantiles.q_u}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        q = d.pop("quantiles", None) or {}
        return cls(quantiles=QuantileSpec(q.get("q_l", 0.1), q.get("q_u", 0.9)), **d)


def _conv_block(c_in, c_out, k):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, k, padding=k // 2),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, k, padding=k // 2),
        nn.ReLU(inplace=True),
    )


class QuantileUNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        # filled in by training: {"band_stats": {...}, "target_stats": {...}}
        self.metadata: dict = {}
        k, d = config.kernel_size, config.depth
        feats = [config.base_features * 2**i for i in range(d + 1)]

        self.encoders = nn.ModuleList()
        c_in = config.in_bands
        for f in feats[:d]:
            self.encoders.append(_conv_block(c_in, f, k))
            c_in = f
        self.bottleneck = _conv_block(feats[d - 1], feats[d], k)
        self.ups = nn.ModuleList(nn.ConvTranspose2d(feats[i + 1], feats[i], 2, stride=2) for i in range(d))
        # decoders[i] refines level i for i >= 1; level 0 belongs to the heads
        self.decoders = nn.ModuleList(
            [nn.Identity()] + [_conv_block(2 * feats[i], feats[i], k) for i in range(1, d)]
        )
        self.dropout = nn.Dropout(config.dropout_rate)
        f0 = feats[0]
        self.heads = nn.ModuleDict({
            name: nn.Sequential(_conv_block(2 * f0, f0, k), nn.Conv2d(f0, 1, 1)) for name in HEADS
        })

    @property
    def multiple(self) -> int:
        return 2 ** self.config.depth

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, C, H, W)`` -> ``(B, 3, H, W)`` with heads ordered lower, median, upper."""
        if x.ndim != 4 or x.shape[1] != self.config.in_bands:
            raise ShapeError(f"expected (B, {self.config.in_bands}, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        ph, pw = (-h) % self.multiple, (-w) % self.multiple
        if ph or pw:
            mode = "reflect" if ph < h and pw < w else "replicate"
            x = F.pad(x, (0, pw, 0, ph), mode=mode)

        skips = []
        for enc in self.encoders:
            x = self.dropout(enc(x))
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.dropout(self.bottleneck(x))
        for i in reversed(range(self.config.depth)):
            x = torch.cat([self.ups[i](x), skips[i]], dim=1)
            if i > 0:
                x = self.dropout(self.decoders[i](x))
        out = torch.cat([self.heads[name](x) for name in HEADS], dim=1)
        return out[..., :h, :w]

    def head_parameters(self, name: str):
        return self.heads[name].parameters()


def _init_weights(model: QuantileUNet, seed: int):
    gen = torch.Generator().manual_seed(seed)
    for mod in model.modules():
        if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(mod.weight, nonlinearity="relu", generator=gen)
            nn.init.zeros_(mod.bias)
    for name, q in zip(HEADS, model.config.quantiles.levels):
        proj = model.heads[name][-1]
        nn.init.kaiming_normal_(proj.weight, nonlinearity="linear", generator=gen)
        nn.init.constant_(proj.bias, q)


def build_model(cfg: ModelConfig, seed: int = 0) -> QuantileUNet:
    """Seeded construction; output biases start at (q_l, 0.5, q_u) of the normalized range."""
    model = QuantileUNet(cfg)
    _init_weights(model, seed)
    return model.eval()


def n_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def forward(model: QuantileUNet, stack, training_mode: bool = False):
    """Run the network on a stack and return its three quantile maps.

    ``stack`` may be a normalized :class:`BandStack` (returns a
    :class:`QuantileTriple` on its grid), a ``(C, H, W)`` array (returns a
    triple of arrays) or a ``(B, C, H, W)`` tensor (returns the raw tensor).
    Dropout is active only with ``training_mode``.
    """
    was_training = model.training
    model.train(training_mode)
    try:
        if isinstance(stack, torch.Tensor):
            return model(stack)
        if isinstance(stack, BandStack):
            arr, grid, valid = stack.bands, stack.grid, stack.valid
        else:
            arr, grid, valid = np.asarray(stack), None, None
        if arr.ndim != 3 or arr.shape[0] != model.config.in_bands:
            raise ShapeError(f"expected {model.config.in_bands} bands, got array of shape {arr.shape}")
        x = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))[None]
        with torch.no_grad():
            out = model(x)[0].numpy().astype(np.float64)
        return QuantileTriple(out[0], out[1], out[2], grid, valid)
    finally:
        model.train(was_training)


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(model: QuantileUNet, path, extra: dict | None = None):
    """Write config, version tag, metadata and named parameter tensors to one file.

    ``extra`` carries training state (optimizer, epoch, history) for resumption.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "metadata": model.metadata,
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (RuntimeError, EOFError, OSError, pickle.UnpicklingError, zipfile.BadZipFile, ValueError) as exc:
        raise CheckpointFormatError(f"{path} is not a readable checkpoint: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointFormatError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(
            f"{path} has version {payload.get('version')!r}, expected {CHECKPOINT_VERSION!r}"
        )
    return payload


def load_checkpoint(path, expect: ModelConfig | None = None, in_bands: int | None = None) -> QuantileUNet:
    """Rebuild a model from ``path``.

    ``expect`` / ``in_bands`` let the caller insist on a configuration; any
    mismatch raises :class:`IncompatibleCheckpointError`.
    """
    payload = read_checkpoint(path)
    cfg = ModelConfig.from_dict(payload["config"])
    if expect is not None and expect != cfg:
        raise IncompatibleCheckpointError(f"checkpoint config {cfg} differs from requested {expect}")
    if in_bands is not None and in_bands != cfg.in_bands:
        raise IncompatibleCheckpointError(
            f"checkpoint expects {cfg.in_bands} input bands, requested {in_bands}"
        )
    model = QuantileUNet(cfg)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointFormatError(f"parameter tensors in {path} do not fit the config: {exc}") from exc
    model.metadata = payload.get("metadata", {})
    return model.eval()
