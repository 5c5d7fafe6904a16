"""Quantile losses: the check function, its asymmetric-Huber smoothing and
the masked multi-head aggregate used to train the three quantile heads.

Every function accepts either numpy input (floats or arrays, evaluated in
float64 with domain checks) or torch tensors (evaluated with autograd
support, pixel sums accumulated in float64).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import torch

from .errors import ConfigError, DomainError, EmptySampleError, NondifferentiableError, ShapeError

Smoothing = Literal["exact_check", "smoothed"]


@dataclass(frozen=True)
class QuantileSpec:
    q_l: float = 0.1
    q_u: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.q_l < 0.5 < self.q_u < 1.0:
            raise ConfigError(f"need 0 < q_l < 0.5 < q_u < 1, got q_l={self.q_l}, q_u={self.q_u}")

    @property
    def q_m(self) -> float:
        return 0.5

    @property
    def levels(self) -> tuple[float, float, float]:
        return (self.q_l, 0.5, self.q_u)

    @property
    def nominal_coverage(self) -> float:
        return self.q_u - self.q_l


@dataclass(frozen=True)
class LossConfig:
    quantiles: QuantileSpec = field(default_factory=QuantileSpec)
    gamma_l: float = 1.0
    gamma_u: float = 1.0
    alpha: float = 2.0
    smoothing: Smoothing = "smoothed"

    def __post_init__(self):
        if self.smoothing not in ("exact_check", "smoothed"):
            raise ConfigError(f"unknown smoothing {self.smoothing!r}")
        if self.gamma_l < 0 or self.gamma_u < 0:
            raise ConfigError("aggregate coefficients must be nonnegative")
        if self.smoothing == "smoothed" and not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")

    def to_dict(self) -> dict:
        return {
            "q_l": self.quantiles.q_l,
            "q_u": self.quantiles.q_u,
            "gamma_l": self.gamma_l,
            "gamma_u": self.gamma_u,
            "alpha": self.alpha,
            "smoothing": self.smoothing,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(
            quantiles=QuantileSpec(d.get("q_l", 0.1), d.get("q_u", 0.9)),
            gamma_l=d.get("gamma_l", 1.0),
            gamma_u=d.get("gamma_u", 1.0),
            alpha=d.get("alpha", 2.0),
            smoothing=d.get("smoothing", "smoothed"),
        )


def _check_q(q):
    if not 0.0 < q < 1.0:
        raise DomainError(f"quantile level must lie in (0, 1), got {q}")


def _as_residual(r):
    """Tensors pass through; everything else becomes a finite float64 array."""
    if isinstance(r, torch.Tensor):
        return r
    r = np.asarray(r, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise DomainError("residual must be finite")
    return r


def _out(v):
    if isinstance(v, np.ndarray) and v.ndim == 0:
        return float(v)
    return v


def _where(cond, a, b):
    if isinstance(cond, torch.Tensor):
        return torch.where(cond, a, b)
    return np.where(cond, a, b)


def check_loss(r, q: float):
    """Pinball loss ``q*r`` for ``r > 0`` and ``-(1-q)*r`` for ``r < 0``.

    Written piecewise rather than as ``r*[r>=0] - (1-q)*r`` so that the
    autograd derivative at ``r == 0`` is 0 (our subgradient convention).
    """
    _check_q(q)
    r = _as_residual(r)
    zero = r * 0
    return _out(_where(r > 0, q * r, _where(r < 0, -(1.0 - q) * r, zero)))


def asymmetric_huber(r, delta_l: float, delta_u: float):
    """``r^2 - (r - delta_l)_+^2 - (-r - delta_u)_+^2``.

    Evaluated per piece (``2*delta_l*r - delta_l^2`` on the upper tail and
    ``-2*delta_u*r - delta_u^2`` on the lower one) to avoid cancelling two
    large squares.
    """
    if not (delta_l > 0 and delta_u > 0):
        raise DomainError(f"Huber thresholds must be positive, got {delta_l}, {delta_u}")
    r = _as_residual(r)
    upper = 2.0 * delta_l * r - delta_l**2
    lower = -2.0 * delta_u * r - delta_u**2
    return _out(_where(r >= delta_l, upper, _where(r <= -delta_u, lower, r * r)))


def smoothed_check(r, q: float, alpha: float):
    """Differentiable approximation of :func:`check_loss`.

    ``alpha * H(r | q/(2 alpha), (1-q)/(2 alpha))``: quadratic ``alpha*r^2``
    near zero, and exactly the check-function slopes ``q`` / ``-(1-q)`` once
    ``r`` leaves ``[-(1-q)/(2 alpha), q/(2 alpha)]``. Larger ``alpha`` means
    a narrower quadratic zone and a tighter fit to the check function.
    """
    _check_q(q)
    if not alpha > 0:
        raise DomainError(f"alpha must be positive, got {alpha}")
    h = asymmetric_huber(r, q / (2.0 * alpha), (1.0 - q) / (2.0 * alpha))
    return alpha * h


def pointwise_loss(r, q: float, cfg: LossConfig):
    if cfg.smoothing == "smoothed":
        return smoothed_check(r, q, cfg.alpha)
    return check_loss(r, q)


def loss_gradient(r, q: float, cfg: LossConfig):
    """Derivative of the configured pointwise loss with respect to ``r``.

    Raises :class:`NondifferentiableError` for the exact check function at
    ``r == 0``; the training path (torch autograd) uses 0 there instead.
    """
    _check_q(q)
    r = _as_residual(r)
    if isinstance(r, torch.Tensor):
        r = r.detach().cpu().numpy().astype(np.float64)
    if cfg.smoothing == "smoothed":
        a = cfg.alpha
        g = np.where(r >= q / (2 * a), q, np.where(r <= -(1 - q) / (2 * a), -(1 - q), 2 * a * r))
        return _out(g)
    if np.any(r == 0):
        raise NondifferentiableError("check function is not differentiable at r = 0")
    return _out(np.where(r > 0, q, -(1.0 - q)))


def _mask_array(mask):
    m = getattr(mask, "validity", mask)
    if isinstance(m, torch.Tensor):
        return m.to(torch.bool)
    return np.asarray(m, dtype=bool)


def masked_quantile_loss(pred, target, mask, q: float, cfg: LossConfig | None = None):
    """Mean pointwise loss over the pixels where ``mask`` is true.

    Pixels outside the mask are never read arithmetically, so any values
    (including NaN) may sit there. With tensors the result is a float64
    0-d tensor that supports ``backward``.
    """
    cfg = cfg or LossConfig()
    m = _mask_array(mask)
    if tuple(pred.shape) != tuple(target.shape) or tuple(m.shape) != tuple(target.shape):
        raise ShapeError(
            f"pred {tuple(pred.shape)}, target {tuple(target.shape)} and mask {tuple(m.shape)} differ"
        )
    if isinstance(pred, torch.Tensor):
        n = int(m.sum())
        if n == 0:
            raise EmptySampleError("mask selects no valid pixels")
        r = target[m] - pred[m]
        return pointwise_loss(r, q, cfg).to(torch.float64).sum() / n
    n = int(m.sum())
    if n == 0:
        raise EmptySampleError("mask selects no valid pixels")
    r = np.asarray(target, dtype=np.float64)[m] - np.asarray(pred, dtype=np.float64)[m]
    return float(np.sum(pointwise_loss(r, q, cfg), dtype=np.float64) / n)


def split_heads(preds, target_ndim: int):
    """Return ``(lower, median, upper)`` from a triple object or stacked array."""
    if hasattr(preds, "lower"):
        return preds.lower, preds.median, preds.upper
    if isinstance(preds, (list, tuple)):
        if len(preds) != 3:
            raise ShapeError(f"expected 3 prediction heads, got {len(preds)}")
        return tuple(preds)
    if preds.ndim != target_ndim + 1 or preds.shape[-3] != 3:
        raise ShapeError(f"cannot split prediction of shape {tuple(preds.shape)} into 3 heads")
    if isinstance(preds, torch.Tensor):
        return tuple(preds.unbind(dim=-3))
    return tuple(np.moveaxis(np.asarray(preds), -3, 0))


def aggregate_loss(preds, target, mask, cfg: LossConfig | None = None):
    """``gamma_l * L_{q_l} + L_{0.5} + gamma_u * L_{q_u}`` over valid pixels."""
    cfg = cfg or LossConfig()
    lower, median, upper = split_heads(preds, len(target.shape))
    q_l, q_m, q_u = cfg.quantiles.levels
    return (
        cfg.gamma_l * masked_quantile_loss(lower, target, mask, q_l, cfg)
        + masked_quantile_loss(median, target, mask, q_m, cfg)
        + cfg.gamma_u * masked_quantile_loss(upper, target, mask, q_u, cfg)
    )
