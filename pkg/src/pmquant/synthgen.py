"""Synthetic scenes whose conditional target quantiles are known exactly.

Each scene has a smooth latent concentration field ``z`` and a smooth
noise-scale driver ``s``. The target is ``z + sigma * eps`` with
``sigma = noise_base + noise_gain * s`` and standard normal ``eps``, so the
true q-quantile at every pixel is ``z + sigma * Phi^-1(q)``. Band 0 shows
``s`` directly; the other bands are distorted smooth functions of ``z``,
which lets a network infer both the centre and the spread.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.stats import norm

from .datapipe import Sample
from .errors import ConfigError
from .losses import QuantileSpec
from .raster import BandStack, MaskRaster, QuantileTriple, Raster, RasterGrid


@dataclass(frozen=True)
class SynthSpec:
    size: int = 64
    n_bands: int = 5
    length_scale: float = 6.0
    latent_mean: float = 12.0
    latent_std: float = 3.0
    noise_base: float = 0.3
    noise_gain: float = 1.5
    cloud_fraction: float = 0.08
    quantiles: QuantileSpec = field(default_factory=QuantileSpec)
    pixel_size: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.size < 4 or self.n_bands < 2:
            raise ConfigError("need size >= 4 and at least 2 bands (noise driver + signal)")
        if not self.latent_std > 0 or not self.length_scale > 0:
            raise ConfigError("latent field must have positive variance and length scale")
        if self.noise_base < 0 or self.noise_gain < 0:
            raise ConfigError("noise parameters must be nonnegative")
        if not 0.0 <= self.cloud_fraction < 1.0:
            raise ConfigError("cloud_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = {f: getattr(self, f) for f in self.__dataclass_fields__ if f != "quantiles"}
        d["quantiles"] = {"q_l": self.quantiles.q_l, "q_u": self.quantiles.q_u}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        q = d.pop("quantiles", None) or {}
        return cls(quantiles=QuantileSpec(q.get("q_l", 0.1), q.get("q_u", 0.9)), **d)


@dataclass
class SceneTruth:
    latent: np.ndarray
    sigma: np.ndarray

    def quantile(self, q: float) -> np.ndarray:
        return self.latent + self.sigma * norm.ppf(q)


def _smooth_field(rng, size, length_scale):
    f = gaussian_filter(rng.standard_normal((size, size)), length_scale, mode="wrap")
    return (f - f.mean()) / f.std()


def _bands(z01: np.ndarray, s: np.ndarray, n_bands: int) -> np.ndarray:
    """Deterministic band responses; ``z01`` is the latent field squashed to (0, 1)."""
    out = [s]
    for k in range(1, n_bands):
        gain = 0.6 + 0.1 * k
        shape = z01 ** (1.0 + 0.25 * (k % 3)) if k % 2 else np.sin(0.5 * np.pi * z01) ** 2
        out.append(gain * shape + 0.05 * k + 0.1 * (k % 2) * s)
    return np.stack(out)


def draw_target(truth: SceneTruth, rng: np.random.Generator, size=None) -> np.ndarray:
    """Targets drawn from the scene's noise model (one draw per pixel, or ``size`` draws)."""
    if size is None:
        return truth.latent + truth.sigma * rng.standard_normal(truth.latent.shape)
    eps = rng.standard_normal((size, *truth.latent.shape))
    return truth.latent + truth.sigma * eps


def _cloud(rng, size, fraction):
    if fraction == 0:
        return np.zeros((size, size), bool)
    yy, xx = np.mgrid[:size, :size]
    cy, cx = rng.uniform(0, size, 2)
    radius = np.sqrt(fraction * size * size / np.pi)
    return (yy - cy) ** 2 + (xx - cx) ** 2 < radius**2


def generate_scene(spec: SynthSpec, index: int):
    """One scene: ``(bands, target, cloud, truth)`` reproducible from ``(spec.seed, index)``."""
    rng = np.random.default_rng([spec.seed, index])
    zf = _smooth_field(rng, spec.size, spec.length_scale)
    sf = _smooth_field(rng, spec.size, spec.length_scale * 1.5)
    latent = spec.latent_mean + spec.latent_std * zf
    s = 1.0 / (1.0 + np.exp(-1.5 * sf))
    truth = SceneTruth(latent, spec.noise_base + spec.noise_gain * s)
    bands = _bands(1.0 / (1.0 + np.exp(-zf)), s, spec.n_bands)
    target = draw_target(truth, rng)
    cloud = _cloud(rng, spec.size, spec.cloud_fraction)
    return bands, target, cloud, truth


def generate(spec: SynthSpec, n_samples: int) -> list[Sample]:
    """Raw (unnormalized) samples with ``truth_lower/median/upper`` in ``extras``."""
    if n_samples < 1:
        raise ConfigError("n_samples must be positive")
    band_ids = tuple(f"S{k}" for k in range(spec.n_bands))
    samples = []
    for i in range(n_samples):
        bands, target, cloud, truth = generate_scene(spec, i)
        loc = f"synth{i % 10:02d}"
        month = (2013 + i // 120, (i // 10) % 12 + 1)
        grid = RasterGrid(-120.0 + 5 * (i % 10), 40.0, spec.pixel_size, spec.size, spec.size)
        stack = BandStack(grid, bands, band_ids, ~cloud, datetime(*month, 1), loc)
        extras = {
            f"truth_{name}": truth.quantile(q)
            for name, q in zip(("lower", "median", "upper"), spec.quantiles.levels)
        }
        samples.append(Sample(stack, Raster(grid, target), MaskRaster(grid, ~cloud), month, loc, extras))
    return samples


def truth_triple(sample: Sample) -> QuantileTriple:
    e = sample.extras
    return QuantileTriple(e["truth_lower"], e["truth_median"], e["truth_upper"], sample.target.grid)

